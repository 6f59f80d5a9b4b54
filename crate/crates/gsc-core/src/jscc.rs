//! Joint source-channel coding over the latent space.
//!
//! The codec maps latents to complex symbol vectors (and back) through one
//! stride-2 convolution stage; the first half of the feature channels carries
//! the real parts, the second half the imaginary parts. A pair of 1×1
//! adapters widens the feature map to the maximum rate's channel count, and
//! channel-wise truncation/zero-padding serves every rate in the plan from
//! the same weights. Training objectives combine latent reconstruction error
//! through the stochastic link with constellation-aware terms: commitment,
//! soft-assignment KL, or annealed soft quantization.

use num_complex::Complex64;
use rand::Rng;

use crate::channel::{
    quantize, Constellation, FrozenChannel, Rate, TransmissionCondition,
};
use crate::error::{GscError, Result};
use crate::nn::{Adam, Conv2dLayer, ConvT2dLayer, LoraAdapter, NamedParams};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Codec
// ---------------------------------------------------------------------------

/// Latent ↔ symbol codec with a single down/upsampling stage.
#[derive(Clone)]
pub struct JsccCodec {
    pub latent_channels: usize,
    pub latent_size: usize,
    /// Feature channels after encoding (even; halves pair into complex).
    pub feature_channels: usize,
    enc1: Conv2dLayer,
    enc2: Conv2dLayer,
    dec1: ConvT2dLayer,
    dec2: Conv2dLayer,
}

impl JsccCodec {
    pub fn new(
        latent_channels: usize,
        latent_size: usize,
        feature_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<JsccCodec> {
        if latent_size % 2 != 0 || latent_size == 0 {
            return Err(GscError::invalid("jscc_codec", "latent size must be even"));
        }
        if feature_channels % 2 != 0 || feature_channels == 0 {
            return Err(GscError::invalid(
                "jscc_codec",
                "feature channels must be even to pair into complex symbols",
            ));
        }
        Ok(JsccCodec {
            latent_channels,
            latent_size,
            feature_channels,
            enc1: Conv2dLayer::new(feature_channels, latent_channels, 3, 1, 1, rng),
            enc2: Conv2dLayer::new(feature_channels, feature_channels, 3, 2, 1, rng),
            dec1: ConvT2dLayer::new(feature_channels, feature_channels, 4, 2, 1, rng),
            dec2: Conv2dLayer::new(latent_channels, feature_channels, 3, 1, 1, rng),
        })
    }

    /// Desk scale: latent `[4,8,8]` → feature `[8,4,4]` → 64 symbols (τ=4).
    pub fn desk_default(rng: &mut impl Rng) -> JsccCodec {
        JsccCodec::new(4, 8, 8, rng).expect("valid constants")
    }

    pub fn feature_size(&self) -> usize {
        self.latent_size / 2
    }

    /// Source dimension Z (real latent element count).
    pub fn latent_dim(&self) -> usize {
        self.latent_channels * self.latent_size * self.latent_size
    }

    /// Base symbol length K without adapters.
    pub fn base_symbols(&self) -> usize {
        (self.feature_channels / 2) * self.feature_size() * self.feature_size()
    }

    fn latent_shape(&self) -> Vec<usize> {
        vec![self.latent_channels, self.latent_size, self.latent_size]
    }

    /// Encoder feature map `[feature_channels, S/2, S/2]`.
    pub fn feature(&self, z: &Tensor) -> Result<Tensor> {
        self.feature_adapted(z, None)
    }

    /// Encoder feature map with an optional low-rank correction set applied
    /// on top of the frozen convolution kernels.
    pub fn feature_adapted(&self, z: &Tensor, lora: Option<&JsccLora>) -> Result<Tensor> {
        if z.shape() != self.latent_shape().as_slice() {
            return Err(GscError::ShapeMismatch {
                op: "jscc_encode",
                lhs: self.latent_shape(),
                rhs: z.shape().to_vec(),
            });
        }
        let h = self.enc1.forward_adapted(z, lora.map(|l| &l.enc1))?.tanh()?;
        self.enc2.forward_adapted(&h, lora.map(|l| &l.enc2))
    }

    /// Encode a latent into a complex symbol vector `(re, im)`, each `[K]`.
    pub fn encode(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let f = self.feature(z)?;
        let (re_map, im_map) = split_complex(&f)?;
        let k = self.base_symbols();
        Ok((re_map.reshape(&[k])?, im_map.reshape(&[k])?))
    }

    /// Decode a feature map back to a latent.
    pub fn decode_feature(&self, f: &Tensor) -> Result<Tensor> {
        self.decode_feature_adapted(f, None)
    }

    /// Decoder with an optional low-rank correction set; see
    /// [`JsccCodec::feature_adapted`].
    pub fn decode_feature_adapted(&self, f: &Tensor, lora: Option<&JsccLora>) -> Result<Tensor> {
        let want = [self.feature_channels, self.feature_size(), self.feature_size()];
        if f.shape() != want {
            return Err(GscError::ShapeMismatch {
                op: "jscc_decode",
                lhs: want.to_vec(),
                rhs: f.shape().to_vec(),
            });
        }
        let h = self.dec1.forward_adapted(f, lora.map(|l| &l.dec1))?.tanh()?;
        self.dec2.forward_adapted(&h, lora.map(|l| &l.dec2))
    }

    /// Decode a received symbol vector `(re, im)` back to a latent.
    pub fn decode(&self, s_re: &Tensor, s_im: &Tensor) -> Result<Tensor> {
        let k = self.base_symbols();
        if s_re.len() != k || s_im.len() != k {
            return Err(GscError::ShapeMismatch {
                op: "jscc_decode",
                lhs: vec![k],
                rhs: s_re.shape().to_vec(),
            });
        }
        let c = self.feature_channels / 2;
        let s = self.feature_size();
        let re_map = s_re.reshape(&[c, s, s])?;
        let im_map = s_im.reshape(&[c, s, s])?;
        self.decode_feature(&join_complex(&re_map, &im_map)?)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams) {
        self.enc1.params(&format!("{prefix}.enc1"), out);
        self.enc2.params(&format!("{prefix}.enc2"), out);
        self.dec1.params(&format!("{prefix}.dec1"), out);
        self.dec2.params(&format!("{prefix}.dec2"), out);
    }

    /// Fresh low-rank adapter set for the four codec convolutions. Each
    /// kernel is treated as a 2-D matrix (forward convs `[C_out, C_in·kh·kw]`,
    /// the transposed conv `[C_in, C_out·kh·kw]`) and the requested rank is
    /// clamped to that matrix's smaller side.
    pub fn make_lora(&self, rank: usize, rng: &mut impl Rng) -> Result<JsccLora> {
        if rank == 0 {
            return Err(GscError::invalid("jscc_lora", "rank must be >= 1"));
        }
        fn conv(k: &Tensor, rank: usize, rng: &mut impl Rng) -> Result<LoraAdapter> {
            let s = k.shape();
            let (rows, cols) = (s[0], s[1] * s[2] * s[3]);
            LoraAdapter::new(rows, cols, rank.min(rows).min(cols), rng)
        }
        Ok(JsccLora {
            enc1: conv(&self.enc1.kernel, rank, rng)?,
            enc2: conv(&self.enc2.kernel, rank, rng)?,
            dec1: conv(&self.dec1.kernel, rank, rng)?,
            dec2: conv(&self.dec2.kernel, rank, rng)?,
        })
    }
}

/// Low-rank adapter set over the codec convolutions (the trainable
/// correction a condition group adds on top of the frozen codec).
#[derive(Clone)]
pub struct JsccLora {
    pub enc1: LoraAdapter,
    pub enc2: LoraAdapter,
    pub dec1: LoraAdapter,
    pub dec2: LoraAdapter,
}

impl JsccLora {
    pub fn params(&self, prefix: &str, out: &mut NamedParams) {
        for (name, ad) in [
            ("enc1", &self.enc1),
            ("enc2", &self.enc2),
            ("dec1", &self.dec1),
            ("dec2", &self.dec2),
        ] {
            ad.params(&format!("{prefix}.{name}"), out);
        }
    }

    pub fn set_trainable(&self, flag: bool) {
        let mut ps = NamedParams::new();
        self.params("lora", &mut ps);
        for (_, p) in ps {
            p.set_requires_grad(flag);
        }
    }
}

/// Split an even-channel feature map into (real, imaginary) half maps.
pub fn split_complex(f: &Tensor) -> Result<(Tensor, Tensor)> {
    let shape = f.shape();
    if shape.len() != 3 || shape[0] % 2 != 0 {
        return Err(GscError::invalid(
            "split_complex",
            format!("need [C,H,W] with even C, got {shape:?}"),
        ));
    }
    let half = shape[0] / 2;
    Ok((f.narrow(0, 0, half)?, f.narrow(0, half, half)?))
}

/// Inverse of [`split_complex`]: stack (real, imaginary) maps channel-wise.
pub fn join_complex(re_map: &Tensor, im_map: &Tensor) -> Result<Tensor> {
    if re_map.shape() != im_map.shape() || re_map.shape().len() != 3 {
        return Err(GscError::ShapeMismatch {
            op: "join_complex",
            lhs: re_map.shape().to_vec(),
            rhs: im_map.shape().to_vec(),
        });
    }
    Tensor::concat(&[re_map, im_map], 0)
}

// ---------------------------------------------------------------------------
// Rate plan and variable-rate adapters
// ---------------------------------------------------------------------------

/// The set of compression rates served by one adapter pair, with exact
/// symbol lengths `K_p = Z/τ_p` and complex channel counts.
#[derive(Clone, Debug)]
pub struct RatePlan {
    /// Source dimension Z.
    pub z: usize,
    /// Complex symbols carried per feature channel (spatial positions).
    pub spatial: usize,
    rates: Vec<Rate>,
    symbol_lengths: Vec<usize>,
}

impl RatePlan {
    pub fn new(z: usize, spatial: usize, rates: Vec<Rate>) -> Result<RatePlan> {
        if rates.is_empty() || spatial == 0 {
            return Err(GscError::invalid("rate_plan", "empty plan"));
        }
        let mut symbol_lengths = Vec::with_capacity(rates.len());
        for r in &rates {
            let k = r.symbols_for(z)?;
            if k % spatial != 0 {
                return Err(GscError::invalid(
                    "rate_plan",
                    format!("K={k} for τ={r} is not a whole number of {spatial}-symbol channels"),
                ));
            }
            symbol_lengths.push(k);
        }
        Ok(RatePlan {
            z,
            spatial,
            rates,
            symbol_lengths,
        })
    }

    /// Desk plan: Z=256, 4×4 feature positions, τ ∈ {16/i | i=2..6}.
    pub fn desk_default() -> RatePlan {
        let rates = (2..=6)
            .map(|i| Rate::new(16, i).expect("positive"))
            .collect();
        RatePlan::new(256, 16, rates).expect("valid constants")
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    fn check(&self, p: usize) -> Result<()> {
        if p >= self.rates.len() {
            return Err(GscError::invalid(
                "rate_plan",
                format!("rate index {p} outside plan of {}", self.rates.len()),
            ));
        }
        Ok(())
    }

    pub fn rate(&self, p: usize) -> Result<Rate> {
        self.check(p)?;
        Ok(self.rates[p])
    }

    /// Symbol length K_p.
    pub fn symbols(&self, p: usize) -> Result<usize> {
        self.check(p)?;
        Ok(self.symbol_lengths[p])
    }

    /// Complex channel count K_p / spatial.
    pub fn channels(&self, p: usize) -> Result<usize> {
        Ok(self.symbols(p)? / self.spatial)
    }

    pub fn k_max(&self) -> usize {
        *self.symbol_lengths.iter().max().expect("nonempty")
    }

    pub fn max_channels(&self) -> usize {
        self.k_max() / self.spatial
    }

    /// Index of the smallest rate τ_min (largest symbol budget).
    pub fn min_rate_index(&self) -> usize {
        self.symbol_lengths
            .iter()
            .enumerate()
            .max_by_key(|(_, &k)| k)
            .map(|(i, _)| i)
            .expect("nonempty")
    }
}

/// 1×1 convolution pair widening the codec feature map to the maximum
/// rate's channel count and back.
#[derive(Clone)]
pub struct VariableRateAdapterPair {
    pub a_e: Conv2dLayer,
    pub a_d: Conv2dLayer,
    pub max_complex_channels: usize,
}

impl VariableRateAdapterPair {
    pub fn new(
        feature_channels: usize,
        max_complex_channels: usize,
        rng: &mut impl Rng,
    ) -> VariableRateAdapterPair {
        VariableRateAdapterPair {
            a_e: Conv2dLayer::new(2 * max_complex_channels, feature_channels, 1, 1, 0, rng),
            a_d: Conv2dLayer::new(feature_channels, 2 * max_complex_channels, 1, 1, 0, rng),
            max_complex_channels,
        }
    }

    /// Adapter pair sized for a codec and rate plan; validates that the plan
    /// geometry matches the codec's feature map.
    pub fn for_plan(
        codec: &JsccCodec,
        plan: &RatePlan,
        rng: &mut impl Rng,
    ) -> Result<VariableRateAdapterPair> {
        let spatial = codec.feature_size() * codec.feature_size();
        if plan.spatial != spatial {
            return Err(GscError::invalid(
                "adapter_pair",
                format!("plan spatial {} != codec feature positions {spatial}", plan.spatial),
            ));
        }
        if codec.latent_dim() != plan.z {
            return Err(GscError::invalid(
                "adapter_pair",
                format!("plan Z={} != codec latent dimension {}", plan.z, codec.latent_dim()),
            ));
        }
        Ok(VariableRateAdapterPair::new(
            codec.feature_channels,
            plan.max_channels(),
            rng,
        ))
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams) {
        self.a_e.params(&format!("{prefix}.a_e"), out);
        self.a_d.params(&format!("{prefix}.a_d"), out);
    }

    /// Fresh low-rank adapter set for the two 1×1 convolutions, with the
    /// requested rank clamped per layer as in [`JsccCodec::make_lora`].
    pub fn make_lora(&self, rank: usize, rng: &mut impl Rng) -> Result<AdapterLora> {
        if rank == 0 {
            return Err(GscError::invalid("adapter_lora", "rank must be >= 1"));
        }
        fn conv(k: &Tensor, rank: usize, rng: &mut impl Rng) -> Result<LoraAdapter> {
            let s = k.shape();
            let (rows, cols) = (s[0], s[1] * s[2] * s[3]);
            LoraAdapter::new(rows, cols, rank.min(rows).min(cols), rng)
        }
        Ok(AdapterLora {
            a_e: conv(&self.a_e.kernel, rank, rng)?,
            a_d: conv(&self.a_d.kernel, rank, rng)?,
        })
    }
}

/// Low-rank adapter set over a variable-rate adapter pair (M_V).
#[derive(Clone)]
pub struct AdapterLora {
    pub a_e: LoraAdapter,
    pub a_d: LoraAdapter,
}

impl AdapterLora {
    pub fn params(&self, prefix: &str, out: &mut NamedParams) {
        self.a_e.params(&format!("{prefix}.a_e"), out);
        self.a_d.params(&format!("{prefix}.a_d"), out);
    }

    pub fn set_trainable(&self, flag: bool) {
        let mut ps = NamedParams::new();
        self.params("lora", &mut ps);
        for (_, p) in ps {
            p.set_requires_grad(flag);
        }
    }
}

/// Keep the first `keep` complex channels of a half-map pair and flatten
/// into symbol vectors.
pub fn cut(re_map: &Tensor, im_map: &Tensor, keep: usize) -> Result<(Tensor, Tensor)> {
    let shape = re_map.shape().to_vec();
    if shape.len() != 3 || im_map.shape() != shape.as_slice() {
        return Err(GscError::ShapeMismatch {
            op: "cut",
            lhs: shape,
            rhs: im_map.shape().to_vec(),
        });
    }
    if keep == 0 || keep > shape[0] {
        return Err(GscError::invalid(
            "cut",
            format!("keep {keep} outside 1..={}", shape[0]),
        ));
    }
    let k = keep * shape[1] * shape[2];
    Ok((
        re_map.narrow(0, 0, keep)?.reshape(&[k])?,
        im_map.narrow(0, 0, keep)?.reshape(&[k])?,
    ))
}

/// Inverse of [`cut`]: reshape symbol vectors into their kept channels and
/// append zero channels up to `total`.
pub fn pad(
    s_re: &Tensor,
    s_im: &Tensor,
    total: usize,
    h: usize,
    w: usize,
) -> Result<(Tensor, Tensor)> {
    if s_re.shape() != s_im.shape() || s_re.shape().len() != 1 {
        return Err(GscError::ShapeMismatch {
            op: "pad",
            lhs: s_re.shape().to_vec(),
            rhs: s_im.shape().to_vec(),
        });
    }
    let k = s_re.len();
    if h * w == 0 || k % (h * w) != 0 {
        return Err(GscError::invalid(
            "pad",
            format!("symbol count {k} is not a whole number of {h}×{w} channels"),
        ));
    }
    let kept = k / (h * w);
    if kept > total {
        return Err(GscError::invalid(
            "pad",
            format!("{kept} kept channels exceed total {total}"),
        ));
    }
    let grow = |s: &Tensor| -> Result<Tensor> {
        let kept_map = s.reshape(&[kept, h, w])?;
        if kept == total {
            return Ok(kept_map);
        }
        let zeros = Tensor::zeros(&[total - kept, h, w]);
        Tensor::concat(&[&kept_map, &zeros], 0)
    };
    Ok((grow(s_re)?, grow(s_im)?))
}

/// Rate-p encoder: `f_JE,p = cut(a_E(f_JE(z)), K_p)`.
pub fn adapter_forward_p(
    codec: &JsccCodec,
    pair: &VariableRateAdapterPair,
    plan: &RatePlan,
    z: &Tensor,
    p: usize,
) -> Result<(Tensor, Tensor)> {
    adapter_forward_p_adapted(codec, pair, plan, z, p, None, None)
}

/// Rate-p encoder with optional low-rank corrections on the codec and the
/// adapter pair.
pub fn adapter_forward_p_adapted(
    codec: &JsccCodec,
    pair: &VariableRateAdapterPair,
    plan: &RatePlan,
    z: &Tensor,
    p: usize,
    codec_lora: Option<&JsccLora>,
    pair_lora: Option<&AdapterLora>,
) -> Result<(Tensor, Tensor)> {
    let keep = plan.channels(p)?;
    if keep > pair.max_complex_channels {
        return Err(GscError::invalid(
            "adapter_forward",
            format!("rate needs {keep} channels, adapter provides {}", pair.max_complex_channels),
        ));
    }
    let f = codec.feature_adapted(z, codec_lora)?;
    let g = pair.a_e.forward_adapted(&f, pair_lora.map(|l| &l.a_e))?;
    let (re_map, im_map) = split_complex(&g)?;
    cut(&re_map, &im_map, keep)
}

/// Rate-p decoder: `f_JD,p = f_JD(a_D(pad(š_p)))`.
pub fn adapter_backward_p(
    codec: &JsccCodec,
    pair: &VariableRateAdapterPair,
    plan: &RatePlan,
    s_re: &Tensor,
    s_im: &Tensor,
    p: usize,
) -> Result<Tensor> {
    adapter_backward_p_adapted(codec, pair, plan, s_re, s_im, p, None, None)
}

/// Rate-p decoder with optional low-rank corrections; mirror of
/// [`adapter_forward_p_adapted`].
pub fn adapter_backward_p_adapted(
    codec: &JsccCodec,
    pair: &VariableRateAdapterPair,
    plan: &RatePlan,
    s_re: &Tensor,
    s_im: &Tensor,
    p: usize,
    codec_lora: Option<&JsccLora>,
    pair_lora: Option<&AdapterLora>,
) -> Result<Tensor> {
    let k = plan.symbols(p)?;
    if s_re.len() != k || s_im.len() != k {
        return Err(GscError::ShapeMismatch {
            op: "adapter_backward",
            lhs: vec![k],
            rhs: s_re.shape().to_vec(),
        });
    }
    let s = codec.feature_size();
    let (re_map, im_map) = pad(s_re, s_im, pair.max_complex_channels, s, s)?;
    let f = pair.a_d.forward_adapted(&join_complex(&re_map, &im_map)?, pair_lora.map(|l| &l.a_d))?;
    codec.decode_feature_adapted(&f, codec_lora)
}

// ---------------------------------------------------------------------------
// Constellation-aware objective terms
// ---------------------------------------------------------------------------

/// Commitment term `‖s − stop_gradient(ŝ)‖²`: pulls the encoder output
/// toward its quantized image without pushing the target.
pub fn commitment_loss(
    s_re: &Tensor,
    s_im: &Tensor,
    q_re: &Tensor,
    q_im: &Tensor,
) -> Result<Tensor> {
    if s_re.shape() != q_re.shape() || s_im.shape() != q_im.shape() {
        return Err(GscError::ShapeMismatch {
            op: "commitment_loss",
            lhs: s_re.shape().to_vec(),
            rhs: q_re.shape().to_vec(),
        });
    }
    let dr = s_re.sub(&q_re.stop_gradient())?.square()?.sum()?;
    let di = s_im.sub(&q_im.stop_gradient())?.square()?.sum()?;
    dr.add(&di)
}

/// Hard-quantize a symbol tensor pair to detached constellation points.
pub fn quantize_pair(
    s_re: &Tensor,
    s_im: &Tensor,
    constellation: &Constellation,
) -> Result<(Tensor, Tensor)> {
    let s: Vec<Complex64> = s_re.with_data(|re| {
        s_im.with_data(|im| {
            re.iter()
                .zip(im)
                .map(|(&a, &b)| Complex64::new(a, b))
                .collect()
        })
    });
    let q = quantize(&s, constellation);
    let k = s_re.len();
    Ok((
        Tensor::new(q.iter().map(|c| c.re).collect(), &[k])?,
        Tensor::new(q.iter().map(|c| c.im).collect(), &[k])?,
    ))
}

/// Per-symbol soft assignments over the constellation:
/// `p_m(k) = softmax_m(−|s_k − c_m|²/temperature)`, shape `[K, M]`.
fn soft_assignments(
    s_re: &Tensor,
    s_im: &Tensor,
    constellation: &Constellation,
    temperature: f64,
) -> Result<Tensor> {
    if temperature <= 0.0 {
        return Err(GscError::invalid("soft_assign", "temperature must be > 0"));
    }
    if s_re.shape() != s_im.shape() || s_re.shape().len() != 1 {
        return Err(GscError::ShapeMismatch {
            op: "soft_assign",
            lhs: s_re.shape().to_vec(),
            rhs: s_im.shape().to_vec(),
        });
    }
    let k = s_re.len();
    let m = constellation.size();
    let cre = Tensor::new(constellation.points.iter().map(|c| c.re).collect(), &[1, m])?;
    let cim = Tensor::new(constellation.points.iter().map(|c| c.im).collect(), &[1, m])?;
    let dr = s_re.reshape(&[k, 1])?.sub(&cre)?.square()?;
    let di = s_im.reshape(&[k, 1])?.sub(&cim)?.square()?;
    dr.add(&di)?.scale(-1.0 / temperature)?.softmax_last()
}

/// KL divergence between the batch-average soft assignment and the uniform
/// distribution over constellation points.
pub fn soft_assign_kld(
    s_re: &Tensor,
    s_im: &Tensor,
    constellation: &Constellation,
    temperature: f64,
) -> Result<Tensor> {
    let p = soft_assignments(s_re, s_im, constellation, temperature)?;
    let q = p.mean_axis(0)?;
    let m = constellation.size() as f64;
    // q ln q with a tiny floor inside the log; vanishing entries contribute 0.
    let ent = q.mul(&q.add_scalar(1e-300)?.log()?)?.sum()?;
    ent.add_scalar(m.ln())
}

/// Softly quantized symbols `Σ_m p_m(k)·c_m`; differentiable for any
/// temperature, approaching hard quantization as it cools.
pub fn soft_quantize(
    s_re: &Tensor,
    s_im: &Tensor,
    constellation: &Constellation,
    temperature: f64,
) -> Result<(Tensor, Tensor)> {
    let p = soft_assignments(s_re, s_im, constellation, temperature)?;
    let k = s_re.len();
    let m = constellation.size();
    let cre = Tensor::new(constellation.points.iter().map(|c| c.re).collect(), &[m, 1])?;
    let cim = Tensor::new(constellation.points.iter().map(|c| c.im).collect(), &[m, 1])?;
    Ok((
        p.matmul(&cre)?.reshape(&[k])?,
        p.matmul(&cim)?.reshape(&[k])?,
    ))
}

/// Exponentially decaying soft-quantization temperature that reaches the
/// hard threshold 1e-3 at 90% of training and stays at or below it through
/// the final 10% of epochs.
pub fn anneal_temperature(t0: f64, epoch: usize, epochs: usize) -> f64 {
    const HARD: f64 = 1e-3;
    if t0 <= HARD {
        return t0;
    }
    if epochs <= 1 {
        return HARD;
    }
    let hard_epoch = (0.9 * (epochs - 1) as f64).max(1.0);
    t0 * (HARD / t0).powf(epoch as f64 / hard_epoch)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Which constellation-aware objective drives JSCC training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveVariant {
    /// Latent MSE through the hard-quantized link plus the commitment term.
    LatentMseCommitment,
    /// Latent MSE through the hard-quantized link only.
    LatentMseOnly,
    /// Latent MSE plus KL against uniform constellation usage.
    LatentMseKld,
    /// Latent MSE through annealed soft quantization (no straight-through).
    SoftToHard,
}

/// Training objective with its weighting/annealing knobs.
#[derive(Clone, Debug)]
pub struct TrainObjective {
    pub variant: ObjectiveVariant,
    pub eta_cml: f64,
    pub kld_temperature: f64,
    /// Initial temperature of the soft-to-hard anneal.
    pub anneal_t0: f64,
}

impl TrainObjective {
    pub fn new(variant: ObjectiveVariant) -> TrainObjective {
        TrainObjective {
            variant,
            eta_cml: 10.0,
            kld_temperature: 1.0,
            anneal_t0: 1.0,
        }
    }
}

impl Default for TrainObjective {
    fn default() -> Self {
        TrainObjective::new(ObjectiveVariant::LatentMseCommitment)
    }
}

/// Settings for a JSCC training run.
#[derive(Clone, Debug)]
pub struct JsccTrainConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for JsccTrainConfig {
    fn default() -> Self {
        JsccTrainConfig {
            epochs: 300,
            lr: 1e-4,
        }
    }
}

/// Train the base codec end to end through the stochastic link: per epoch,
/// every latent is sent through a fresh channel realization, the selected
/// objective is averaged, and one Adam step is applied. The per-sample loss
/// is `(‖ž − z‖² + η_cml·commitment)/Z` (or the selected variant), keeping
/// the paper's relative weighting while staying scale-free in Z.
pub fn train_jscc(
    codec: &JsccCodec,
    latents: &[Tensor],
    objective: &TrainObjective,
    tcond: &TransmissionCondition,
    constellation: &Constellation,
    cfg: &JsccTrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if latents.is_empty() {
        return Err(GscError::invalid("train_jscc", "empty dataset"));
    }
    if objective.eta_cml < 0.0 {
        return Err(GscError::invalid("train_jscc", "η_cml must be ≥ 0"));
    }
    if tcond.symbols != codec.base_symbols() {
        return Err(GscError::invalid(
            "train_jscc",
            format!(
                "link carries {} symbols, codec emits {}",
                tcond.symbols,
                codec.base_symbols()
            ),
        ));
    }
    let z_dim = codec.latent_dim() as f64;
    let mut params = NamedParams::new();
    codec.params("jscc", &mut params);
    let mut opt = Adam::new(cfg.lr);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut loss: Option<Tensor> = None;
        for z in latents {
            let (s_re, s_im) = codec.encode(z)?;
            let (r_re, r_im) = match objective.variant {
                ObjectiveVariant::SoftToHard => {
                    let t = anneal_temperature(objective.anneal_t0, epoch, cfg.epochs);
                    let (q_re, q_im) = soft_quantize(&s_re, &s_im, constellation, t)?;
                    let frozen = FrozenChannel::draw(&tcond.sampler, q_re.len(), rng);
                    crate::channel::apply_phi_with(&q_re, &q_im, constellation, &frozen, false)?
                }
                _ => crate::channel::apply_phi(&s_re, &s_im, constellation, tcond, rng)?,
            };
            let z_hat = codec.decode(&r_re, &r_im)?;
            let mut sample = z_hat.sub(z)?.square()?.sum()?.scale(1.0 / z_dim)?;
            match objective.variant {
                ObjectiveVariant::LatentMseCommitment => {
                    let (q_re, q_im) = quantize_pair(&s_re, &s_im, constellation)?;
                    let commit = commitment_loss(&s_re, &s_im, &q_re, &q_im)?;
                    sample = sample.add(&commit.scale(objective.eta_cml / z_dim)?)?;
                }
                ObjectiveVariant::LatentMseKld => {
                    let kld =
                        soft_assign_kld(&s_re, &s_im, constellation, objective.kld_temperature)?;
                    sample = sample.add(&kld)?;
                }
                ObjectiveVariant::LatentMseOnly | ObjectiveVariant::SoftToHard => {}
            }
            loss = Some(match loss {
                None => sample,
                Some(acc) => acc.add(&sample)?,
            });
        }
        let loss = loss.expect("nonempty dataset").scale(1.0 / latents.len() as f64)?;
        let value = loss.item()?;
        if !value.is_finite() || value > 1e6 {
            return Err(GscError::Divergence {
                stage: "jscc".into(),
                loss: value,
            });
        }
        loss.backward()?;
        opt.step(&params)?;
        history.push(value);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{apply_phi_with, make_qam, ChannelCondition, CovarianceVariant};
    use crate::tensor::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn desk_condition(snr_db: f64, delay_ns: f64) -> ChannelCondition {
        ChannelCondition::new(snr_db, delay_ns * 1e-9, 120, 30e3, CovarianceVariant::Rational)
            .unwrap()
    }

    #[test]
    fn symbol_length_formula() {
        let tau4 = Rate::new(4, 1).unwrap();
        assert_eq!(tau4.symbols_for(16384).unwrap(), 4096);
        assert_eq!(tau4.symbols_for(256).unwrap(), 64);
        let mut r = rng(1);
        let codec = JsccCodec::desk_default(&mut r);
        assert_eq!(codec.latent_dim(), 256);
        assert_eq!(codec.base_symbols(), 64);
    }

    #[test]
    fn desk_plan_arithmetic() {
        let plan = RatePlan::desk_default();
        let want_k = [32, 48, 64, 80, 96];
        assert_eq!(plan.len(), 5);
        for p in 0..plan.len() {
            assert_eq!(plan.symbols(p).unwrap(), want_k[p]);
            // K_p·τ_p = Z exactly, in integer arithmetic.
            let r = plan.rate(p).unwrap();
            assert_eq!(plan.symbols(p).unwrap() as u64 * r.numer(), plan.z as u64 * r.denom());
            assert_eq!(plan.channels(p).unwrap(), want_k[p] / 16);
        }
        assert_eq!(plan.k_max(), 96);
        assert_eq!(plan.max_channels(), 6);
        assert_eq!(plan.min_rate_index(), 4);
        assert!(plan.symbols(5).is_err());
    }

    #[test]
    fn plan_rejects_fractional_geometry() {
        // K not integral.
        assert!(RatePlan::new(100, 16, vec![Rate::new(3, 1).unwrap()]).is_err());
        // K integral but not a whole channel count.
        assert!(RatePlan::new(256, 16, vec![Rate::new(32, 3).unwrap()]).is_err());
    }

    #[test]
    fn split_join_round_trip() {
        let mut r = rng(3);
        let f = Tensor::randn(&[8, 4, 4], 1.0, &mut r);
        let (re, im) = split_complex(&f).unwrap();
        assert_eq!(re.shape(), &[4, 4, 4]);
        let back = join_complex(&re, &im).unwrap();
        let (a, b) = (f.to_vec(), back.to_vec());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(split_complex(&Tensor::zeros(&[3, 4, 4])).is_err());
    }

    #[test]
    fn encode_decode_shapes_at_all_rates() {
        let mut r = rng(5);
        let codec = JsccCodec::desk_default(&mut r);
        let plan = RatePlan::desk_default();
        let pair = VariableRateAdapterPair::for_plan(&codec, &plan, &mut r).unwrap();
        let z = Tensor::randn(&[4, 8, 8], 1.0, &mut r);

        let (s_re, s_im) = codec.encode(&z).unwrap();
        assert_eq!(s_re.shape(), &[64]);
        assert_eq!(codec.decode(&s_re, &s_im).unwrap().shape(), &[4, 8, 8]);

        for p in 0..plan.len() {
            let (re, im) = adapter_forward_p(&codec, &pair, &plan, &z, p).unwrap();
            assert_eq!(re.len(), plan.symbols(p).unwrap());
            let back = adapter_backward_p(&codec, &pair, &plan, &re, &im, p).unwrap();
            assert_eq!(back.shape(), &[4, 8, 8]);
        }
        // Wrong shapes and rate indices are rejected.
        assert!(codec.encode(&Tensor::zeros(&[4, 4, 4])).is_err());
        assert!(adapter_forward_p(&codec, &pair, &plan, &z, 9).is_err());
        let short = Tensor::zeros(&[10]);
        assert!(adapter_backward_p(&codec, &pair, &plan, &short, &short, 0).is_err());
    }

    #[test]
    fn cut_identity_at_max_and_pad_zeroes_dropped() {
        let mut r = rng(7);
        let re = Tensor::randn(&[6, 4, 4], 1.0, &mut r);
        let im = Tensor::randn(&[6, 4, 4], 1.0, &mut r);
        // Full keep: cut then pad reproduces the input bit-for-bit.
        let (cr, ci) = cut(&re, &im, 6).unwrap();
        assert_eq!(cr.len(), 96);
        let (pr, pi) = pad(&cr, &ci, 6, 4, 4).unwrap();
        assert_eq!(pr.to_vec(), re.to_vec());
        assert_eq!(pi.to_vec(), im.to_vec());
        // Partial keep: kept prefix intact, dropped channels exactly zero.
        let (cr, ci) = cut(&re, &im, 2).unwrap();
        assert_eq!(cr.len(), 32);
        let (pr, _pi) = pad(&cr, &ci, 6, 4, 4).unwrap();
        let pv = pr.to_vec();
        let rv = re.to_vec();
        assert_eq!(&pv[..32], &rv[..32]);
        assert!(pv[32..].iter().all(|&v| v == 0.0));
        let _ = ci;
        assert!(cut(&re, &im, 7).is_err());
        assert!(cut(&re, &im, 0).is_err());
    }

    #[test]
    fn cut_pad_adjoint() {
        // ⟨cut(x), y⟩ = ⟨x, pad(y)⟩ for every keep count.
        let mut r = rng(9);
        let xre = Tensor::randn(&[6, 4, 4], 1.0, &mut r);
        let xim = Tensor::randn(&[6, 4, 4], 1.0, &mut r);
        for keep in 1..=6 {
            let yre = Tensor::randn(&[keep * 16], 1.0, &mut r);
            let yim = Tensor::randn(&[keep * 16], 1.0, &mut r);
            let (cre, cim) = cut(&xre, &xim, keep).unwrap();
            let lhs: f64 = cre
                .to_vec()
                .iter()
                .zip(yre.to_vec())
                .chain(cim.to_vec().iter().zip(yim.to_vec()))
                .map(|(a, b)| a * b)
                .sum();
            let (pre, pim) = pad(&yre, &yim, 6, 4, 4).unwrap();
            let rhs: f64 = xre
                .to_vec()
                .iter()
                .zip(pre.to_vec())
                .chain(xim.to_vec().iter().zip(pim.to_vec()))
                .map(|(a, b)| a * b)
                .sum();
            assert!((lhs - rhs).abs() < 1e-12, "keep={keep}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn commitment_examples() {
        let s = Tensor::new(vec![0.3, -0.2], &[2]).unwrap();
        let zero = commitment_loss(&s, &s, &s.clone(), &s.clone()).unwrap();
        assert_eq!(zero.item().unwrap(), 0.0);

        // One symbol: s = 0, target (1+i)/√2 → squared distance 1.
        let z0 = Tensor::zeros(&[1]);
        let t = Tensor::new(vec![1.0 / 2f64.sqrt()], &[1]).unwrap();
        let one = commitment_loss(&z0, &z0, &t, &t).unwrap();
        assert!((one.item().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn commitment_gradient_only_reaches_encoder_side() {
        // Encoder-side parameter θe feeds s; decoder-side θd feeds the
        // target. The stop-gradient must leave θd untouched.
        let theta_e = Tensor::param(vec![0.4, -0.1], &[2]).unwrap();
        let theta_d = Tensor::param(vec![0.9, 0.2], &[2]).unwrap();
        let s = theta_e.scale(1.0).unwrap();
        let target = theta_d.scale(1.0).unwrap();
        let zero_im = Tensor::zeros(&[2]);
        let loss = commitment_loss(&s, &zero_im, &target, &zero_im).unwrap();
        loss.backward().unwrap();
        assert!(theta_d.grad().is_none(), "target path must carry no gradient");
        let g = theta_e.grad().unwrap();
        // d/ds ‖s − t‖² = 2(s − t).
        assert!((g[0] - 2.0 * (0.4 - 0.9)).abs() < 1e-12);
        assert!((g[1] - 2.0 * (-0.1 - 0.2)).abs() < 1e-12);
    }

    #[test]
    fn kld_uniform_spread_near_zero() {
        let c = make_qam(16).unwrap();
        let re = Tensor::new(c.points.iter().map(|p| p.re).collect(), &[16]).unwrap();
        let im = Tensor::new(c.points.iter().map(|p| p.im).collect(), &[16]).unwrap();
        let kld = soft_assign_kld(&re, &im, &c, 1e-3).unwrap().item().unwrap();
        assert!(kld.abs() < 1e-9, "kld {kld}");
    }

    #[test]
    fn kld_point_mass_is_log_m() {
        let c = make_qam(16).unwrap();
        let re = Tensor::full(&[8], c.points[0].re).unwrap();
        let im = Tensor::full(&[8], c.points[0].im).unwrap();
        let kld = soft_assign_kld(&re, &im, &c, 1e-3).unwrap().item().unwrap();
        assert!((kld - 16f64.ln()).abs() < 1e-6, "kld {kld}");
    }

    #[test]
    fn kld_gradcheck() {
        let c = make_qam(4).unwrap();
        let mut r = rng(11);
        let im = Tensor::randn(&[3], 0.5, &mut r);
        let s0 = Tensor::randn(&[3], 0.5, &mut r);
        let err = finite_diff_check(
            |s| soft_assign_kld(s, &im, &c, 0.7),
            &s0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn soft_quantize_limits() {
        let c = make_qam(16).unwrap();
        let mut r = rng(13);
        let re = Tensor::randn(&[10], 0.6, &mut r);
        let im = Tensor::randn(&[10], 0.6, &mut r);

        // Cold: agrees with the hard quantizer.
        let (hr, hi) = quantize_pair(&re, &im, &c).unwrap();
        let (sr, si) = soft_quantize(&re, &im, &c, 1e-8).unwrap();
        for (a, b) in sr.to_vec().iter().zip(hr.to_vec()) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in si.to_vec().iter().zip(hi.to_vec()) {
            assert!((a - b).abs() < 1e-9);
        }

        // Hot: collapses to the constellation centroid (zero for square QAM).
        let (sr, si) = soft_quantize(&re, &im, &c, 1e9).unwrap();
        assert!(sr.to_vec().iter().all(|v| v.abs() < 1e-6));
        assert!(si.to_vec().iter().all(|v| v.abs() < 1e-6));

        // Warm: stays in the convex hull of the grid.
        let max_level = c.points.iter().map(|p| p.re.abs()).fold(0.0, f64::max);
        let (sr, si) = soft_quantize(&re, &im, &c, 1.0).unwrap();
        assert!(sr.to_vec().iter().all(|v| v.abs() <= max_level + 1e-12));
        assert!(si.to_vec().iter().all(|v| v.abs() <= max_level + 1e-12));
    }

    #[test]
    fn anneal_schedule_reaches_hard_in_final_tenth() {
        let epochs = 500;
        let t0 = 1.0;
        assert_eq!(anneal_temperature(t0, 0, epochs), t0);
        let mut last = f64::INFINITY;
        for e in 0..epochs {
            let t = anneal_temperature(t0, e, epochs);
            assert!(t < last, "temperature must strictly decrease");
            last = t;
        }
        let hard_from = (0.9 * (epochs - 1) as f64).ceil() as usize;
        for e in hard_from..epochs {
            assert!(anneal_temperature(t0, e, epochs) <= 1e-3 + 1e-12);
        }
        assert_eq!(anneal_temperature(t0, 0, 1), 1e-3);
        assert_eq!(anneal_temperature(1e-4, 3, 10), 1e-4);
    }

    #[test]
    fn end_to_end_gradcheck_through_frozen_link() {
        let mut r = rng(15);
        let codec = JsccCodec::desk_default(&mut r);
        let plan = RatePlan::desk_default();
        let pair = VariableRateAdapterPair::for_plan(&codec, &plan, &mut r).unwrap();
        let c = make_qam(64).unwrap();
        let p = 2;
        let cond = desk_condition(20.0, 300.0);
        let sampler = crate::channel::ChannelSampler::new(&cond).unwrap();
        let frozen = FrozenChannel::draw(&sampler, plan.symbols(p).unwrap(), &mut r);
        let z0 = Tensor::randn(&[4, 8, 8], 0.5, &mut r);

        let f = |z: &Tensor| -> Result<Tensor> {
            let (s_re, s_im) = adapter_forward_p(&codec, &pair, &plan, z, p)?;
            let (r_re, r_im) = apply_phi_with(&s_re, &s_im, &c, &frozen, false)?;
            adapter_backward_p(&codec, &pair, &plan, &r_re, &r_im, p)?
                .square()?
                .sum()
        };
        let err = finite_diff_check(f, &z0, 1e-5).unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn dropped_channels_get_zero_gradient() {
        let mut r = rng(17);
        let codec = JsccCodec::desk_default(&mut r);
        let plan = RatePlan::desk_default();
        let pair = VariableRateAdapterPair::for_plan(&codec, &plan, &mut r).unwrap();
        let z = Tensor::randn(&[4, 8, 8], 1.0, &mut r);

        // Keep 2 complex channels (p=0): real out-channels {0,1} and {6,7}.
        let (s_re, s_im) = adapter_forward_p(&codec, &pair, &plan, &z, 0).unwrap();
        let loss = s_re.square().unwrap().sum().unwrap()
            .add(&s_im.square().unwrap().sum().unwrap())
            .unwrap();
        loss.backward().unwrap();
        let g = pair.a_e.kernel.grad().unwrap();
        let per_out = 8; // C_in·1·1 kernel entries per output channel
        for out_ch in 0..12 {
            let slice = &g[out_ch * per_out..(out_ch + 1) * per_out];
            let live = matches!(out_ch, 0 | 1 | 6 | 7);
            if live {
                assert!(slice.iter().any(|&v| v != 0.0), "channel {out_ch} should learn");
            } else {
                assert!(slice.iter().all(|&v| v == 0.0), "channel {out_ch} must stay zero");
            }
        }
    }

    #[test]
    fn train_zero_epochs_is_identity() {
        let mut r = rng(19);
        let codec = JsccCodec::desk_default(&mut r);
        let mut params = NamedParams::new();
        codec.params("jscc", &mut params);
        let before: Vec<Vec<f64>> = params.iter().map(|(_, t)| t.to_vec()).collect();
        let latents = vec![Tensor::randn(&[4, 8, 8], 1.0, &mut r)];
        let tcond = TransmissionCondition::new(
            Rate::new(4, 1).unwrap(),
            desk_condition(20.0, 300.0),
            256,
        )
        .unwrap();
        let c = make_qam(64).unwrap();
        let cfg = JsccTrainConfig { epochs: 0, lr: 1e-3 };
        let hist = train_jscc(
            &codec,
            &latents,
            &TrainObjective::default(),
            &tcond,
            &c,
            &cfg,
            &mut r,
        )
        .unwrap();
        assert!(hist.is_empty());
        for ((_, t), old) in params.iter().zip(&before) {
            assert_eq!(&t.to_vec(), old);
        }
    }

    fn eval_latent_mse(
        codec: &JsccCodec,
        latents: &[Tensor],
        tcond: &TransmissionCondition,
        c: &Constellation,
        seed: u64,
    ) -> f64 {
        let mut r = rng(seed);
        let mut acc = 0.0;
        for z in latents {
            let (s_re, s_im) = codec.encode(z).unwrap();
            let (r_re, r_im) =
                crate::channel::apply_phi(&s_re, &s_im, c, tcond, &mut r).unwrap();
            let z_hat = codec.decode(&r_re, &r_im).unwrap();
            acc += z_hat.sub(z).unwrap().square().unwrap().mean().unwrap().item().unwrap();
        }
        acc / latents.len() as f64
    }

    #[test]
    fn training_beats_untrained_baseline() {
        let mut r = rng(21);
        let codec = JsccCodec::desk_default(&mut r);
        let latents: Vec<Tensor> =
            (0..20).map(|_| Tensor::randn(&[4, 8, 8], 1.0, &mut r)).collect();
        let tcond = TransmissionCondition::new(
            Rate::new(4, 1).unwrap(),
            desk_condition(20.0, 300.0),
            256,
        )
        .unwrap();
        let c = make_qam(64).unwrap();

        let before = eval_latent_mse(&codec, &latents, &tcond, &c, 555);
        let cfg = JsccTrainConfig { epochs: 300, lr: 1e-3 };
        let hist = train_jscc(
            &codec,
            &latents,
            &TrainObjective::default(),
            &tcond,
            &c,
            &cfg,
            &mut r,
        )
        .unwrap();
        let after = eval_latent_mse(&codec, &latents, &tcond, &c, 555);
        assert!(
            after < before,
            "latent MSE did not improve: {before} → {after} (loss head {:?})",
            &hist[..3]
        );
    }

    #[test]
    fn all_objective_variants_run() {
        let mut r = rng(23);
        let tcond = TransmissionCondition::new(
            Rate::new(4, 1).unwrap(),
            desk_condition(20.0, 300.0),
            256,
        )
        .unwrap();
        let c = make_qam(64).unwrap();
        let latents: Vec<Tensor> =
            (0..2).map(|_| Tensor::randn(&[4, 8, 8], 1.0, &mut r)).collect();
        for variant in [
            ObjectiveVariant::LatentMseOnly,
            ObjectiveVariant::LatentMseKld,
            ObjectiveVariant::SoftToHard,
        ] {
            let codec = JsccCodec::desk_default(&mut r);
            let cfg = JsccTrainConfig { epochs: 3, lr: 1e-3 };
            let hist = train_jscc(
                &codec,
                &latents,
                &TrainObjective::new(variant),
                &tcond,
                &c,
                &cfg,
                &mut r,
            )
            .unwrap();
            assert_eq!(hist.len(), 3);
            assert!(hist.iter().all(|l| l.is_finite()), "{variant:?}");
        }
    }

    fn eval_adapter_mse(
        codec: &JsccCodec,
        pair: &VariableRateAdapterPair,
        plan: &RatePlan,
        latents: &[Tensor],
        c: &Constellation,
        p: usize,
    ) -> f64 {
        let frozen = FrozenChannel::ideal(120, plan.symbols(p).unwrap());
        let mut acc = 0.0;
        for z in latents {
            let (s_re, s_im) = adapter_forward_p(codec, pair, plan, z, p).unwrap();
            let (r_re, r_im) = apply_phi_with(&s_re, &s_im, c, &frozen, true).unwrap();
            let z_hat = adapter_backward_p(codec, pair, plan, &r_re, &r_im, p).unwrap();
            acc += z_hat.sub(z).unwrap().square().unwrap().mean().unwrap().item().unwrap();
        }
        acc / latents.len() as f64
    }

    #[test]
    fn trained_adapter_pair_beats_untrained_tenfold() {
        let mut r = rng(25);
        let codec = JsccCodec::desk_default(&mut r);
        let plan = RatePlan::desk_default();
        let pair = VariableRateAdapterPair::for_plan(&codec, &plan, &mut r).unwrap();
        let c = make_qam(64).unwrap();
        let p = plan.min_rate_index();
        let latents: Vec<Tensor> =
            (0..10).map(|_| Tensor::randn(&[4, 8, 8], 1.0, &mut r)).collect();

        let untrained = eval_adapter_mse(&codec, &pair, &plan, &latents, &c, p);

        let mut params = NamedParams::new();
        codec.params("jscc", &mut params);
        pair.params("pair", &mut params);
        let mut opt = Adam::new(2e-3);
        let frozen = FrozenChannel::ideal(120, plan.symbols(p).unwrap());
        let z_dim = codec.latent_dim() as f64;
        for _ in 0..900 {
            let mut loss: Option<Tensor> = None;
            for z in &latents {
                let (s_re, s_im) = adapter_forward_p(&codec, &pair, &plan, z, p).unwrap();
                let (r_re, r_im) = apply_phi_with(&s_re, &s_im, &c, &frozen, true).unwrap();
                let z_hat = adapter_backward_p(&codec, &pair, &plan, &r_re, &r_im, p).unwrap();
                let mse = z_hat.sub(z).unwrap().square().unwrap().sum().unwrap();
                let (q_re, q_im) = quantize_pair(&s_re, &s_im, &c).unwrap();
                let commit = commitment_loss(&s_re, &s_im, &q_re, &q_im).unwrap();
                let sample = mse
                    .add(&commit.scale(10.0).unwrap())
                    .unwrap()
                    .scale(1.0 / z_dim)
                    .unwrap();
                loss = Some(match loss {
                    None => sample,
                    Some(acc) => acc.add(&sample).unwrap(),
                });
            }
            let loss = loss.unwrap().scale(1.0 / latents.len() as f64).unwrap();
            loss.backward().unwrap();
            opt.step(&params).unwrap();
        }

        let trained = eval_adapter_mse(&codec, &pair, &plan, &latents, &c, p);
        assert!(
            trained * 10.0 <= untrained,
            "wanted ≥10× improvement, got {untrained} → {trained}"
        );
    }

    #[test]
    fn fresh_lora_sets_leave_rate_path_bit_identical() {
        let mut r = rng(71);
        let codec = JsccCodec::desk_default(&mut r);
        let plan = RatePlan::desk_default();
        let pair = VariableRateAdapterPair::for_plan(&codec, &plan, &mut r).unwrap();
        let jl = codec.make_lora(8, &mut r).unwrap();
        let al = pair.make_lora(8, &mut r).unwrap();
        let z = Tensor::randn(&[4, 8, 8], 1.0, &mut r);
        let p = 1;

        let (a_re, a_im) = adapter_forward_p(&codec, &pair, &plan, &z, p).unwrap();
        let (b_re, b_im) =
            adapter_forward_p_adapted(&codec, &pair, &plan, &z, p, Some(&jl), Some(&al)).unwrap();
        let bits = |t: &Tensor| t.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a_re), bits(&b_re));
        assert_eq!(bits(&a_im), bits(&b_im));

        let plain = adapter_backward_p(&codec, &pair, &plan, &a_re, &a_im, p).unwrap();
        let adapted =
            adapter_backward_p_adapted(&codec, &pair, &plan, &a_re, &a_im, p, Some(&jl), Some(&al))
                .unwrap();
        assert_eq!(bits(&plain), bits(&adapted));
    }

    #[test]
    fn lora_rank_clamps_to_kernel_matrix() {
        let mut r = rng(72);
        let codec = JsccCodec::desk_default(&mut r);
        let jl = codec.make_lora(8, &mut r).unwrap();
        // dec2 kernel is [4, 8, 3, 3] → matrix [4, 72] → rank clamps to 4.
        assert_eq!(jl.dec2.rank, 4);
        assert_eq!(jl.enc1.rank, 8);
        assert_eq!(jl.dec1.rank, 8);

        let plan = RatePlan::desk_default();
        let pair = VariableRateAdapterPair::for_plan(&codec, &plan, &mut r).unwrap();
        let al = pair.make_lora(8, &mut r).unwrap();
        assert_eq!(al.a_e.rank, 8);
        assert_eq!(al.a_d.rank, 8);
        assert!(codec.make_lora(0, &mut r).is_err());
    }

    #[test]
    fn trained_lora_changes_output_but_not_base() {
        let mut r = rng(73);
        let codec = JsccCodec::desk_default(&mut r);
        let plan = RatePlan::desk_default();
        let pair = VariableRateAdapterPair::for_plan(&codec, &plan, &mut r).unwrap();
        let jl = codec.make_lora(4, &mut r).unwrap();
        let al = pair.make_lora(4, &mut r).unwrap();
        let z = Tensor::randn(&[4, 8, 8], 1.0, &mut r);

        let mut base = NamedParams::new();
        codec.params("jscc", &mut base);
        pair.params("pair", &mut base);
        for (_, p) in &base {
            p.set_requires_grad(false);
        }
        let snapshot: Vec<Vec<u64>> = base
            .iter()
            .map(|(_, p)| p.to_vec().iter().map(|v| v.to_bits()).collect())
            .collect();

        let mut lora_params = NamedParams::new();
        jl.params("m_j", &mut lora_params);
        al.params("m_v", &mut lora_params);
        let mut opt = Adam::new(1e-2);
        let p_idx = 0;
        for _ in 0..5 {
            let (s_re, s_im) =
                adapter_forward_p_adapted(&codec, &pair, &plan, &z, p_idx, Some(&jl), Some(&al))
                    .unwrap();
            let z_hat = adapter_backward_p_adapted(
                &codec, &pair, &plan, &s_re, &s_im, p_idx, Some(&jl), Some(&al),
            )
            .unwrap();
            let loss = z_hat.sub(&z).unwrap().square().unwrap().sum().unwrap();
            loss.backward().unwrap();
            opt.step(&lora_params).unwrap();
        }
        for (p, before) in base.iter().map(|(_, p)| p).zip(&snapshot) {
            let now: Vec<u64> = p.to_vec().iter().map(|v| v.to_bits()).collect();
            assert_eq!(&now, before, "base parameter moved during low-rank training");
            p.set_requires_grad(true);
        }

        let plain = adapter_forward_p(&codec, &pair, &plan, &z, p_idx).unwrap();
        let adapted =
            adapter_forward_p_adapted(&codec, &pair, &plan, &z, p_idx, Some(&jl), Some(&al))
                .unwrap();
        let diff: f64 = plain
            .0
            .to_vec()
            .iter()
            .zip(adapted.0.to_vec())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6, "trained adapters should shift the encoder output");
    }
}
