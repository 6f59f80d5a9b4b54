//! Symbol-level wireless link: QAM constellation, nearest-point
//! quantization, correlated Rayleigh sub-channel fading over an OFDM grid,
//! AWGN, and MMSE equalization.
//!
//! The whole link is packaged as the stochastic function [`apply_phi`]:
//! quantize → transmit → equalize under one sampled channel realization.
//! Given the realization, transmit∘equalize is linear with a *real* diagonal
//! gain, so gradients flow analytically; the hard quantizer passes gradients
//! straight through (identity), which is what the commitment-loss training
//! objective expects.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{GscError, Result};
use crate::tensor::{BackwardFn, Tensor};

// ---------------------------------------------------------------------------
// Constellation and quantization
// ---------------------------------------------------------------------------

/// Square QAM constellation with unit average symbol power.
///
/// Points are ordered real-level-major, imaginary-level-minor, both
/// ascending; ties in nearest-point search resolve to the lowest index.
#[derive(Clone, Debug)]
pub struct Constellation {
    pub points: Vec<Complex64>,
    /// Per-axis amplitude levels, ascending (scaled odd integers).
    levels: Vec<f64>,
}

/// Build an M-ary square QAM grid (M a power of 4) with odd-integer
/// coordinate levels scaled to unit mean power.
pub fn make_qam(m: usize) -> Result<Constellation> {
    let is_power_of_four = m >= 4 && m.is_power_of_two() && m.trailing_zeros() % 2 == 0;
    if !is_power_of_four {
        return Err(GscError::invalid(
            "make_qam",
            format!("M={m} is not a square-QAM size (need a power of 4)"),
        ));
    }
    let side = (m as f64).sqrt().round() as usize;
    debug_assert_eq!(side * side, m);
    // Levels ±1, ±3, …, ±(side−1); mean power of the grid before scaling is
    // 2(side²−1)/3.
    let raw: Vec<f64> = (0..side).map(|i| (2 * i as i64 - (side as i64 - 1)) as f64).collect();
    let scale = (3.0 / (2.0 * (side as f64 * side as f64 - 1.0))).sqrt();
    let levels: Vec<f64> = raw.iter().map(|l| l * scale).collect();
    let mut points = Vec::with_capacity(m);
    for &re in &levels {
        for &im in &levels {
            points.push(Complex64::new(re, im));
        }
    }
    Ok(Constellation { points, levels })
}

impl Constellation {
    pub fn size(&self) -> usize {
        self.points.len()
    }

    fn side(&self) -> usize {
        self.levels.len()
    }

    /// Index of the nearest per-axis level, exact distances, ties to the
    /// lower level.
    fn nearest_level(&self, x: f64) -> usize {
        let side = self.side();
        let spacing = if side > 1 { self.levels[1] - self.levels[0] } else { 1.0 };
        let guess = ((x - self.levels[0]) / spacing).round() as isize;
        let guess = guess.clamp(0, side as isize - 1) as usize;
        let lo = guess.saturating_sub(1);
        let hi = (guess + 1).min(side - 1);
        let mut best = lo;
        let mut best_d = (x - self.levels[lo]).powi(2);
        for i in lo + 1..=hi {
            let d = (x - self.levels[i]).powi(2);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }

    /// Index of the Euclidean-nearest constellation point.
    pub fn nearest(&self, s: Complex64) -> usize {
        // The grid is separable: the squared distance splits into per-axis
        // terms, and per-axis lower-level ties give the lexicographically
        // smallest (re, im) pair, i.e. the lowest point index.
        let ri = self.nearest_level(s.re);
        let ii = self.nearest_level(s.im);
        ri * self.side() + ii
    }
}

/// Map each symbol to its Euclidean-nearest constellation point.
pub fn quantize(s: &[Complex64], c: &Constellation) -> Vec<Complex64> {
    s.iter().map(|&v| c.points[c.nearest(v)]).collect()
}

// ---------------------------------------------------------------------------
// Channel condition and covariance
// ---------------------------------------------------------------------------

/// Which frequency-correlation law to use across subcarriers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CovarianceVariant {
    /// `C = P_h / (1 + 2πi·Δ·ω)` — exponential-PDP characteristic function;
    /// frequency-selective. The default.
    Rational,
    /// `C = P_h / exp(1 + 2πi·Δ·ω)` — constant modulus `P_h/e` for every
    /// spacing (rank-one, no selectivity). Kept switchable for comparison.
    AsWritten,
}

/// Operating point of the link: SNR, delay spread, and the OFDM grid.
#[derive(Clone, Debug)]
pub struct ChannelCondition {
    pub snr_db: f64,
    /// RMS delay spread of the power-delay profile, seconds.
    pub delay_spread: f64,
    /// Number of OFDM sub-channels.
    pub j: usize,
    pub subcarrier_spacing: f64,
    /// Average sub-channel gain power P_h (linear).
    pub avg_gain_power: f64,
    pub variant: CovarianceVariant,
}

impl ChannelCondition {
    pub fn new(
        snr_db: f64,
        delay_spread: f64,
        j: usize,
        subcarrier_spacing: f64,
        variant: CovarianceVariant,
    ) -> Result<ChannelCondition> {
        if j == 0 {
            return Err(GscError::invalid("channel_condition", "J must be ≥ 1"));
        }
        if delay_spread < 0.0 || subcarrier_spacing <= 0.0 {
            return Err(GscError::invalid(
                "channel_condition",
                format!("delay spread {delay_spread} s / spacing {subcarrier_spacing} Hz out of range"),
            ));
        }
        Ok(ChannelCondition {
            snr_db,
            delay_spread,
            j,
            subcarrier_spacing,
            avg_gain_power: 1.0,
            variant,
        })
    }

    pub fn snr_linear(&self) -> f64 {
        10f64.powf(self.snr_db / 10.0)
    }

    /// Noise power so that γ_linear = P_h / P_δ.
    pub fn noise_power(&self) -> f64 {
        self.avg_gain_power / self.snr_linear()
    }
}

/// Cross-subcarrier covariance matrix `C_{j'j}` of the sub-channel gains.
pub fn build_covariance(cond: &ChannelCondition) -> DMatrix<Complex64> {
    let j = cond.j;
    let ph = cond.avg_gain_power;
    DMatrix::from_fn(j, j, |jp, jj| {
        let delta = cond.subcarrier_spacing * (jp as f64 - jj as f64);
        let theta = 2.0 * std::f64::consts::PI * delta * cond.delay_spread;
        match cond.variant {
            CovarianceVariant::Rational => Complex64::new(ph, 0.0) / Complex64::new(1.0, theta),
            CovarianceVariant::AsWritten => {
                Complex64::new(ph, 0.0) / Complex64::new(1.0, theta).exp()
            }
        }
    })
}

/// Sampler for correlated Rayleigh gains `h ~ CN(0, C)`.
///
/// The covariance is eigen-floored at `1e-12·P_h` (the rank-one as-written
/// variant is singular) and Cholesky-factored once; each draw is `L·g` with
/// `g ~ CN(0, I)`.
#[derive(Clone, Debug)]
pub struct ChannelSampler {
    pub condition: ChannelCondition,
    chol_l: DMatrix<Complex64>,
}

impl ChannelSampler {
    pub fn new(condition: &ChannelCondition) -> Result<ChannelSampler> {
        let c = build_covariance(condition);
        let floor = 1e-12 * condition.avg_gain_power;
        let eig = SymmetricEigen::new(c);
        let vals = eig.eigenvalues.map(|l| l.max(floor));
        let diag = DMatrix::from_diagonal(&vals.map(|l| Complex64::new(l, 0.0)));
        let repaired = &eig.eigenvectors * diag * eig.eigenvectors.adjoint();
        let chol = Cholesky::new(repaired).ok_or(GscError::CovarianceNotPsd)?;
        Ok(ChannelSampler {
            condition: condition.clone(),
            chol_l: chol.l(),
        })
    }

    /// One correlated Rayleigh realization of length J.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<Complex64> {
        let j = self.condition.j;
        let g: Vec<Complex64> = (0..j).map(|_| complex_gaussian(1.0, rng)).collect();
        let mut h = vec![Complex64::new(0.0, 0.0); j];
        for (row, hv) in h.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            // L is lower-triangular.
            for (col, gv) in g.iter().enumerate().take(row + 1) {
                acc += self.chol_l[(row, col)] * gv;
            }
            *hv = acc;
        }
        h
    }
}

/// One correlated Rayleigh draw under `cond` (convenience over
/// [`ChannelSampler`]; build the sampler once when drawing repeatedly).
pub fn sample_channel(cond: &ChannelCondition, rng: &mut impl Rng) -> Result<Vec<Complex64>> {
    Ok(ChannelSampler::new(cond)?.sample(rng))
}

/// Zero-mean complex Gaussian with E|z|² = `power`.
fn complex_gaussian(power: f64, rng: &mut impl Rng) -> Complex64 {
    let s = (power / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * s, im * s)
}

// ---------------------------------------------------------------------------
// Transmit / equalize
// ---------------------------------------------------------------------------

/// Sub-channel for symbol `k` under sequential assignment over J carriers.
#[inline]
pub fn subchannel_of(k: usize, j: usize) -> usize {
    k % j
}

/// Pass symbols through the faded sub-channels with fresh AWGN:
/// `y_k = h_{k mod J} · ŝ_k + δ_k`, block fading within the call.
pub fn transmit(
    s_hat: &[Complex64],
    h: &[Complex64],
    noise_power: f64,
    rng: &mut impl Rng,
) -> Vec<Complex64> {
    s_hat
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let gain = h[subchannel_of(k, h.len())];
            let delta = if noise_power > 0.0 {
                complex_gaussian(noise_power, rng)
            } else {
                Complex64::new(0.0, 0.0)
            };
            gain * s + delta
        })
        .collect()
}

/// MMSE equalization with perfect channel knowledge:
/// `š_k = h_j^* · y_k / (|h_j|² + P_δ)`.
pub fn equalize(y: &[Complex64], h: &[Complex64], noise_power: f64) -> Vec<Complex64> {
    y.iter()
        .enumerate()
        .map(|(k, &yk)| {
            let gain = h[subchannel_of(k, h.len())];
            let den = gain.norm_sqr() + noise_power;
            if den == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                gain.conj() * yk / den
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Rates and transmission conditions
// ---------------------------------------------------------------------------

/// Positive rational compression rate τ, kept exact for integral symbol
/// counts K = Z/τ.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Rate {
    num: u64,
    den: u64,
}

impl Rate {
    pub fn new(num: u64, den: u64) -> Result<Rate> {
        if num == 0 || den == 0 {
            return Err(GscError::invalid("rate", format!("{num}/{den} not positive")));
        }
        let g = gcd(num, den);
        Ok(Rate {
            num: num / g,
            den: den / g,
        })
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn numer(&self) -> u64 {
        self.num
    }

    pub fn denom(&self) -> u64 {
        self.den
    }

    /// Symbol count K = Z/τ; errors when not integral.
    pub fn symbols_for(&self, z: usize) -> Result<usize> {
        let scaled = z as u64 * self.den;
        if scaled % self.num != 0 {
            return Err(GscError::invalid(
                "rate",
                format!("Z={z} not divisible by τ={}/{}", self.num, self.den),
            ));
        }
        Ok((scaled / self.num) as usize)
    }
}

impl std::fmt::Display for Rate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// A rate paired with a channel operating point; owns the prepared sampler
/// so repeated transmissions don't refactor the covariance.
#[derive(Clone, Debug)]
pub struct TransmissionCondition {
    pub rate: Rate,
    pub condition: ChannelCondition,
    /// Symbol count K = Z/τ for the source dimension this link serves.
    pub symbols: usize,
    pub sampler: ChannelSampler,
}

impl TransmissionCondition {
    pub fn new(rate: Rate, condition: ChannelCondition, source_dim: usize) -> Result<TransmissionCondition> {
        let symbols = rate.symbols_for(source_dim)?;
        let sampler = ChannelSampler::new(&condition)?;
        Ok(TransmissionCondition {
            rate,
            condition,
            symbols,
            sampler,
        })
    }
}

// ---------------------------------------------------------------------------
// The stochastic link function φ
// ---------------------------------------------------------------------------

/// One frozen draw of the link's randomness: gains for J sub-channels and
/// per-symbol noise.
#[derive(Clone, Debug)]
pub struct FrozenChannel {
    pub h: Vec<Complex64>,
    pub noise: Vec<Complex64>,
    pub noise_power: f64,
}

impl FrozenChannel {
    pub fn draw(
        sampler: &ChannelSampler,
        symbols: usize,
        rng: &mut impl Rng,
    ) -> FrozenChannel {
        let noise_power = sampler.condition.noise_power();
        let h = sampler.sample(rng);
        let noise = (0..symbols).map(|_| complex_gaussian(noise_power, rng)).collect();
        FrozenChannel {
            h,
            noise,
            noise_power,
        }
    }

    /// Noiseless link with all-ones gains (analytic tests).
    pub fn ideal(j: usize, symbols: usize) -> FrozenChannel {
        FrozenChannel {
            h: vec![Complex64::new(1.0, 0.0); j],
            noise: vec![Complex64::new(0.0, 0.0); symbols],
            noise_power: 0.0,
        }
    }
}

/// The full stochastic link φ on a complex symbol vector carried as paired
/// real tensors: quantize → transmit → equalize under a fresh realization.
///
/// Gradient contract: given the realization, equalized output is
/// `š_k = a_k·ŝ_k + const` with the real diagonal gain
/// `a_k = |h_j|²/(|h_j|² + P_δ)`; the quantizer backpropagates as identity
/// (straight-through), so `∂š/∂s = diag(a)` on both quadratures.
pub fn apply_phi(
    s_re: &Tensor,
    s_im: &Tensor,
    constellation: &Constellation,
    tcond: &TransmissionCondition,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor)> {
    let frozen = FrozenChannel::draw(&tcond.sampler, s_re.len(), rng);
    apply_phi_with(s_re, s_im, constellation, &frozen, true)
}

/// Deterministic core of [`apply_phi`] under one frozen channel draw.
///
/// With `hard_quantize=false` the quantizer is bypassed; the link is then
/// exactly the linear map the straight-through gradient assumes, which is
/// what finite-difference oracles check against.
pub fn apply_phi_with(
    s_re: &Tensor,
    s_im: &Tensor,
    constellation: &Constellation,
    frozen: &FrozenChannel,
    hard_quantize: bool,
) -> Result<(Tensor, Tensor)> {
    if s_re.shape() != s_im.shape() || s_re.shape().len() != 1 {
        return Err(GscError::ShapeMismatch {
            op: "apply_phi",
            lhs: s_re.shape().to_vec(),
            rhs: s_im.shape().to_vec(),
        });
    }
    let k = s_re.len();
    if frozen.noise.len() != k {
        return Err(GscError::invalid(
            "apply_phi",
            format!("frozen noise length {} != symbol count {k}", frozen.noise.len()),
        ));
    }
    let s: Vec<Complex64> = s_re.with_data(|re| {
        s_im.with_data(|im| {
            re.iter()
                .zip(im)
                .map(|(&a, &b)| Complex64::new(a, b))
                .collect()
        })
    });
    let s_hat = if hard_quantize {
        quantize(&s, constellation)
    } else {
        s
    };
    let jn = frozen.h.len();
    let mut out_re = vec![0.0; k];
    let mut out_im = vec![0.0; k];
    let mut gain = vec![0.0; k];
    for kk in 0..k {
        let h = frozen.h[subchannel_of(kk, jn)];
        let den = h.norm_sqr() + frozen.noise_power;
        let y = h * s_hat[kk] + frozen.noise[kk];
        let eq = if den == 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            h.conj() * y / den
        };
        out_re[kk] = eq.re;
        out_im[kk] = eq.im;
        gain[kk] = if den == 0.0 { 0.0 } else { h.norm_sqr() / den };
    }

    let make_out = |data: Vec<f64>, parent: &Tensor, op: &'static str| -> Result<Tensor> {
        if !parent.needs_grad() {
            return Tensor::from_op(data, vec![k], op, vec![], None);
        }
        let p = parent.clone();
        let a = gain.clone();
        let bwd: BackwardFn = Box::new(move |g| {
            let contrib: Vec<f64> = g.iter().zip(&a).map(|(&gi, &ai)| gi * ai).collect();
            p.accumulate_grad(&contrib);
        });
        Tensor::from_op(data, vec![k], op, vec![parent.clone()], Some(bwd))
    };
    Ok((
        make_out(out_re, s_re, "apply_phi_re")?,
        make_out(out_im, s_im, "apply_phi_im")?,
    ))
}
