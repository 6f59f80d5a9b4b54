//! Latent image codec and conditional latent-diffusion generator.
//!
//! The codec is a small variational autoencoder: a convolutional encoder
//! produces a latent mean and log-std, sampling uses the reparameterized
//! `z = mean + ε⊙σ`, and a transposed-convolution decoder maps latents back
//! to `[0,1]` images. The generator is a two-resolution U-Net noise
//! predictor conditioned on a diffusion step (sinusoidal embedding through
//! a two-layer perceptron) and on an embedded prompt sequence via
//! per-resolution cross-attention, sampled with DDIM steps over a truncated
//! uniform index schedule.

use rand::Rng;

use crate::error::{GscError, Result};
use crate::nn::{
    prepend_metaword, sinusoidal_embed, Adam, Conv2dLayer, ConvT2dLayer, CrossAttention,
    DenseLayer, EmbeddingTable, LoraAdapter, MetaWord, NamedParams,
};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Latent codec
// ---------------------------------------------------------------------------

/// Variational image codec: `[C_img, S, S]` pixels ↔ `[4, S/4, S/4]` latents.
#[derive(Clone)]
pub struct LatentCodec {
    pub img_channels: usize,
    pub img_size: usize,
    pub latent_channels: usize,
    enc1: Conv2dLayer,
    enc2: Conv2dLayer,
    mean_head: Conv2dLayer,
    logstd_head: Conv2dLayer,
    dec_in: Conv2dLayer,
    dec1: ConvT2dLayer,
    dec2: ConvT2dLayer,
}

impl LatentCodec {
    pub fn new(img_channels: usize, img_size: usize, rng: &mut impl Rng) -> Result<LatentCodec> {
        if img_size % 4 != 0 || img_size < 8 {
            return Err(GscError::invalid(
                "latent_codec",
                format!("image size {img_size} must be a multiple of 4 and ≥ 8"),
            ));
        }
        Ok(LatentCodec {
            img_channels,
            img_size,
            latent_channels: 4,
            enc1: Conv2dLayer::new(8, img_channels, 3, 2, 1, rng),
            enc2: Conv2dLayer::new(16, 8, 3, 2, 1, rng),
            mean_head: Conv2dLayer::new(4, 16, 1, 1, 0, rng),
            logstd_head: Conv2dLayer::new(4, 16, 1, 1, 0, rng),
            dec_in: Conv2dLayer::new(16, 4, 1, 1, 0, rng),
            dec1: ConvT2dLayer::new(16, 8, 4, 2, 1, rng),
            dec2: ConvT2dLayer::new(8, img_channels, 4, 2, 1, rng),
        })
    }

    pub fn latent_size(&self) -> usize {
        self.img_size / 4
    }

    pub fn latent_shape(&self) -> Vec<usize> {
        vec![self.latent_channels, self.latent_size(), self.latent_size()]
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        let want = [self.img_channels, self.img_size, self.img_size];
        if x.shape() != want {
            return Err(GscError::ShapeMismatch {
                op: "latent_codec",
                lhs: want.to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        let ok = x.with_data(|d| d.iter().all(|&v| (-1e-9..=1.0 + 1e-9).contains(&v)));
        if !ok {
            return Err(GscError::invalid("latent_codec", "pixel values outside [0,1]"));
        }
        Ok(())
    }

    /// Posterior mean and log-std of the latent for an image.
    pub fn encode_mean_logstd(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_image(x)?;
        let h = self.enc1.forward(x)?.tanh()?;
        let h = self.enc2.forward(&h)?.tanh()?;
        Ok((self.mean_head.forward(&h)?, self.logstd_head.forward(&h)?))
    }

    /// Deterministic encoding: the posterior mean.
    pub fn encode_mean(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.encode_mean_logstd(x)?.0)
    }

    /// Reparameterized sample `z = mean + ε ⊙ exp(log-std)`, `ε ~ N(0, I)`.
    pub fn encode_latent(&self, x: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
        let (mean, logstd) = self.encode_mean_logstd(x)?;
        let eps = Tensor::randn(mean.shape(), 1.0, rng);
        mean.add(&eps.mul(&logstd.exp()?)?)
    }

    /// Decode a latent to a `[0,1]` image.
    pub fn decode_latent(&self, z: &Tensor) -> Result<Tensor> {
        if z.shape() != self.latent_shape().as_slice() {
            return Err(GscError::ShapeMismatch {
                op: "decode_latent",
                lhs: self.latent_shape(),
                rhs: z.shape().to_vec(),
            });
        }
        let h = self.dec_in.forward(z)?.tanh()?;
        let h = self.dec1.forward(&h)?.tanh()?;
        self.dec2.forward(&h)?.sigmoid()
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams) {
        self.enc1.params(&format!("{prefix}.enc1"), out);
        self.enc2.params(&format!("{prefix}.enc2"), out);
        self.mean_head.params(&format!("{prefix}.mean_head"), out);
        self.logstd_head.params(&format!("{prefix}.logstd_head"), out);
        self.dec_in.params(&format!("{prefix}.dec_in"), out);
        self.dec1.params(&format!("{prefix}.dec1"), out);
        self.dec2.params(&format!("{prefix}.dec2"), out);
    }

    /// Detached deep copy with non-trainable buffers; later training of this
    /// codec leaves the copy untouched.
    pub fn frozen_copy(&self) -> LatentCodec {
        LatentCodec {
            img_channels: self.img_channels,
            img_size: self.img_size,
            latent_channels: self.latent_channels,
            enc1: self.enc1.frozen_copy(),
            enc2: self.enc2.frozen_copy(),
            mean_head: self.mean_head.frozen_copy(),
            logstd_head: self.logstd_head.frozen_copy(),
            dec_in: self.dec_in.frozen_copy(),
            dec1: self.dec1.frozen_copy(),
            dec2: self.dec2.frozen_copy(),
        }
    }

    /// For tests: pin the spread head so σ(x) underflows to exactly zero.
    pub fn collapse_spread(&self) -> Result<()> {
        let k = &self.logstd_head.kernel;
        k.set_data(vec![0.0; k.len()])?;
        let b = &self.logstd_head.bias;
        b.set_data(vec![-800.0; b.len()])
    }
}

/// Closed-form KL divergence of a diagonal Gaussian posterior against the
/// unit Gaussian: `½ Σ (m² + s² − 1 − ln s²)`.
pub fn kl_divergence(mean: &Tensor, logstd: &Tensor) -> Result<Tensor> {
    if mean.shape() != logstd.shape() {
        return Err(GscError::ShapeMismatch {
            op: "kl_divergence",
            lhs: mean.shape().to_vec(),
            rhs: logstd.shape().to_vec(),
        });
    }
    let var = logstd.scale(2.0)?.exp()?;
    let terms = mean
        .square()?
        .add(&var)?
        .add_scalar(-1.0)?
        .sub(&logstd.scale(2.0)?)?;
    terms.sum()?.scale(0.5)
}

/// Tiny convolutional discriminator for the optional adversarial term.
#[derive(Clone)]
pub struct Discriminator {
    c1: Conv2dLayer,
    c2: Conv2dLayer,
    head: DenseLayer,
}

impl Discriminator {
    pub fn new(img_channels: usize, img_size: usize, rng: &mut impl Rng) -> Discriminator {
        let feat = 4 * (img_size / 4) * (img_size / 4);
        Discriminator {
            c1: Conv2dLayer::new(4, img_channels, 3, 2, 1, rng),
            c2: Conv2dLayer::new(4, 4, 3, 2, 1, rng),
            head: DenseLayer::new(1, feat, rng),
        }
    }

    /// Probability-like score in (0,1) that the image is real.
    pub fn score(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.c1.forward(x)?.tanh()?;
        let h = self.c2.forward(&h)?.tanh()?;
        let flat = h.reshape(&[1, h.len()])?;
        self.head.forward(&flat)?.sigmoid()?.reshape(&[1])
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams) {
        self.c1.params(&format!("{prefix}.c1"), out);
        self.c2.params(&format!("{prefix}.c2"), out);
        self.head.params(&format!("{prefix}.head"), out);
    }
}

/// Training settings for the latent codec.
#[derive(Clone, Debug)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub recon_weight: f64,
    pub kl_weight: f64,
    pub disc_weight: f64,
    pub use_discriminator: bool,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            epochs: 200,
            lr: 1e-3,
            recon_weight: 1.0,
            kl_weight: 1e-3,
            disc_weight: 0.1,
            use_discriminator: false,
        }
    }
}

/// Train the codec on a set of images: pixel reconstruction + weighted KL,
/// plus the adversarial term when enabled. One full-batch Adam step per
/// epoch; returns the per-epoch loss history.
pub fn train_latent_codec(
    codec: &LatentCodec,
    images: &[Tensor],
    cfg: &CodecTrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(GscError::invalid("train_latent_codec", "empty dataset"));
    }
    let mut params = NamedParams::new();
    codec.params("codec", &mut params);
    let mut opt = Adam::new(cfg.lr);

    let mut disc = if cfg.use_discriminator {
        let d = Discriminator::new(codec.img_channels, codec.img_size, rng);
        let mut dp = NamedParams::new();
        d.params("disc", &mut dp);
        Some((d, dp, Adam::new(cfg.lr)))
    } else {
        None
    };

    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut loss: Option<Tensor> = None;
        let mut disc_loss: Option<Tensor> = None;
        for x in images {
            let (mean, logstd) = codec.encode_mean_logstd(x)?;
            let eps = Tensor::randn(mean.shape(), 1.0, rng);
            let z = mean.add(&eps.mul(&logstd.exp()?)?)?;
            let recon = codec.decode_latent(&z)?;
            let mse = recon.sub(x)?.square()?.mean()?;
            let kl = kl_divergence(&mean, &logstd)?;
            let mut sample_loss = mse
                .scale(cfg.recon_weight)?
                .add(&kl.scale(cfg.kl_weight)?)?;
            if let Some((d, _, _)) = &disc {
                // Generator side: push the reconstruction towards "real".
                let fake_score = d.score(&recon)?;
                let gen_term = fake_score.add_scalar(1e-7)?.log()?.neg()?;
                sample_loss = sample_loss.add(&gen_term.scale(cfg.disc_weight)?)?;
                // Discriminator side: real vs detached fake.
                let real = d.score(x)?.add_scalar(1e-7)?.log()?.neg()?;
                let fake = d
                    .score(&recon.stop_gradient())?
                    .neg()?
                    .add_scalar(1.0 + 1e-7)?
                    .log()?
                    .neg()?;
                let dl = real.add(&fake)?;
                disc_loss = Some(match disc_loss {
                    None => dl,
                    Some(acc) => acc.add(&dl)?,
                });
            }
            loss = Some(match loss {
                None => sample_loss,
                Some(acc) => acc.add(&sample_loss)?,
            });
        }
        let loss = loss.expect("nonempty dataset").scale(1.0 / images.len() as f64)?;
        let value = loss.item()?;
        if !value.is_finite() || value > 1e6 {
            return Err(GscError::Divergence {
                stage: "latent_codec".into(),
                loss: value,
            });
        }
        loss.backward()?;
        opt.step(&params)?;
        if let Some((_, dp, dopt)) = &mut disc {
            // The generator objective backpropagated through the
            // discriminator; drop those gradients before its own update.
            for (_, t) in dp.iter() {
                t.clear_grad();
            }
            let dl = disc_loss
                .expect("enabled discriminator")
                .scale(1.0 / images.len() as f64)?;
            dl.backward()?;
            dopt.step(dp)?;
        }
        history.push(value);
    }
    Ok(history)
}

// ---------------------------------------------------------------------------
// Diffusion schedule
// ---------------------------------------------------------------------------

/// Forward-noising schedule: `β_1..β_T` and the cumulative products
/// `α_t = Π_{i≤t}(1−β_i)` with `α_0 = 1`.
#[derive(Clone, Debug)]
pub struct DiffusionSchedule {
    pub t_max: usize,
    pub beta: Vec<f64>,
    /// `alpha[t]` for `t = 0..=T`; `alpha[0] = 1`.
    pub alpha: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<DiffusionSchedule> {
        if beta.is_empty() {
            return Err(GscError::invalid("schedule", "no β values"));
        }
        if beta.iter().any(|&b| !(0.0..1.0).contains(&b) || b == 0.0) {
            return Err(GscError::invalid("schedule", "each β must lie in (0,1)"));
        }
        let mut alpha = Vec::with_capacity(beta.len() + 1);
        alpha.push(1.0);
        let mut acc = 1.0;
        for &b in &beta {
            acc *= 1.0 - b;
            alpha.push(acc);
        }
        if *alpha.last().unwrap() <= 0.0 {
            return Err(GscError::invalid("schedule", "α_T underflowed to zero"));
        }
        Ok(DiffusionSchedule {
            t_max: beta.len(),
            beta,
            alpha,
        })
    }

    /// Linearly spaced β from `beta_start` to `beta_end` over `t_max` steps.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
        if t_max == 0 {
            return Err(GscError::invalid("schedule", "T must be ≥ 1"));
        }
        let beta = (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect();
        DiffusionSchedule::from_betas(beta)
    }

    /// Desk defaults: T=200, β linear from 8.5e-4 to 0.012.
    pub fn desk_default() -> DiffusionSchedule {
        DiffusionSchedule::linear(200, 8.5e-4, 0.012).expect("valid constants")
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.alpha
            .get(t)
            .copied()
            .ok_or_else(|| GscError::invalid("schedule", format!("t={t} > T={}", self.t_max)))
    }
}

/// Closed-form forward noising `z_t = √α_t·z0 + √(1−α_t)·ε` for `1 ≤ t ≤ T`.
pub fn forward_diffuse(
    z0: &Tensor,
    t: usize,
    eps: &Tensor,
    schedule: &DiffusionSchedule,
) -> Result<Tensor> {
    if t == 0 || t > schedule.t_max {
        return Err(GscError::invalid(
            "forward_diffuse",
            format!("t={t} outside 1..={}", schedule.t_max),
        ));
    }
    let a = schedule.alpha(t)?;
    z0.scale(a.sqrt())?.add(&eps.scale((1.0 - a).sqrt())?)
}

/// One DDIM update from step `t` down to `t' ≤ t`:
/// `z_{t'} = √(α_{t'}/α_t)·z_t + (√(1−α_{t'}) − √((1−α_t)·α_{t'}/α_t))·ε̂`.
pub fn ddim_step(
    z_t: &Tensor,
    t: usize,
    t_prime: usize,
    eps_hat: &Tensor,
    schedule: &DiffusionSchedule,
) -> Result<Tensor> {
    if t > schedule.t_max || t_prime > t {
        return Err(GscError::invalid(
            "ddim_step",
            format!("need t' ≤ t ≤ T, got t'={t_prime}, t={t}, T={}", schedule.t_max),
        ));
    }
    let a_t = schedule.alpha(t)?;
    let a_p = schedule.alpha(t_prime)?;
    let ratio = a_p / a_t;
    let c1 = ratio.sqrt();
    let c2 = (1.0 - a_p).sqrt() - ((1.0 - a_t) * ratio).sqrt();
    z_t.scale(c1)?.add(&eps_hat.scale(c2)?)
}

// ---------------------------------------------------------------------------
// Noise predictor (U-Net)
// ---------------------------------------------------------------------------

/// A prompt as validated token indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub tokens: Vec<usize>,
}

impl Prompt {
    pub fn new(tokens: Vec<usize>) -> Prompt {
        Prompt { tokens }
    }
}

/// Shape/width settings of the noise predictor.
#[derive(Clone, Debug)]
pub struct PredictorConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    /// Base channel width; the second resolution doubles it.
    pub width: usize,
    /// Sinusoidal step-embedding dimension (even).
    pub temb_dim: usize,
    /// Cross-attention feature dimension; also the prompt embedding dim.
    pub attn_dim: usize,
    pub vocab_size: usize,
}

impl PredictorConfig {
    pub fn desk(vocab_size: usize, width: usize) -> PredictorConfig {
        PredictorConfig {
            latent_channels: 4,
            latent_size: 8,
            width,
            temb_dim: 32,
            attn_dim: 32,
            vocab_size,
        }
    }
}

/// Prompt cross-attention at one U-Net resolution: spatial positions attend
/// over the embedded prompt sequence, with a residual connection.
#[derive(Clone)]
struct AttnBlock {
    to_attn: DenseLayer,   // channels → attn_dim
    attn: CrossAttention,  // attn_dim
    from_attn: DenseLayer, // attn_dim → channels
}

impl AttnBlock {
    fn new(channels: usize, attn_dim: usize, rng: &mut impl Rng) -> AttnBlock {
        AttnBlock {
            to_attn: DenseLayer::new(attn_dim, channels, rng),
            attn: CrossAttention::new(attn_dim, rng),
            from_attn: DenseLayer::new(channels, attn_dim, rng),
        }
    }

    fn forward(
        &self,
        x: &Tensor, // [C, H, W]
        prompt_seq: &Tensor,
        ad: &mut impl FnMut() -> Option<LoraAdapterRef>,
    ) -> Result<Tensor> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let tokens = x.reshape(&[c, h * w])?.transpose()?; // [HW, C]
        let q = self.to_attn.forward_adapted(&tokens, ad().as_deref())?;
        let wq = self.attn.wq.forward_adapted(&q, ad().as_deref())?;
        let wk = self.attn.wk.forward_adapted(prompt_seq, ad().as_deref())?;
        let wv = self.attn.wv.forward_adapted(prompt_seq, ad().as_deref())?;
        let d = self.attn.dim() as f64;
        let scores = wq.matmul(&wk.transpose()?)?.scale(1.0 / d.sqrt())?;
        let mixed = scores.softmax_last()?.matmul(&wv)?;
        let out = self.attn.wo.forward_adapted(&mixed, ad().as_deref())?;
        let back = self.from_attn.forward_adapted(&out, ad().as_deref())?;
        x.add(&back.transpose()?.reshape(&[c, h, w])?)
    }
}

type LoraAdapterRef = std::rc::Rc<LoraAdapter>;

/// Ordered set of low-rank adapters matching the predictor's adapted dense
/// layers one-to-one (see `NoisePredictor::lora_slot_dims`).
#[derive(Clone)]
pub struct LoraSet {
    pub adapters: Vec<LoraAdapter>,
    pub rank: usize,
}

impl LoraSet {
    pub fn params(&self, prefix: &str, out: &mut NamedParams) {
        for (i, ad) in self.adapters.iter().enumerate() {
            ad.params(&format!("{prefix}.{i}"), out);
        }
    }

    pub fn set_trainable(&self, flag: bool) {
        for ad in &self.adapters {
            ad.b.set_requires_grad(flag);
            ad.a.set_requires_grad(flag);
        }
    }
}

/// Two-resolution U-Net that predicts injected noise from a noisy latent, a
/// diffusion step, and an embedded prompt sequence.
#[derive(Clone)]
pub struct NoisePredictor {
    pub cfg: PredictorConfig,
    pub embedding: EmbeddingTable,
    temb_mlp1: DenseLayer,
    temb_mlp2: DenseLayer,
    temb_proj_down: DenseLayer,
    temb_proj_mid: DenseLayer,
    temb_proj_up: DenseLayer,
    in_conv: Conv2dLayer,
    down_conv: Conv2dLayer,
    attn_hi: AttnBlock,
    downsample: Conv2dLayer,
    mid_conv1: Conv2dLayer,
    attn_lo: AttnBlock,
    mid_conv2: Conv2dLayer,
    upsample: ConvT2dLayer,
    up_conv: Conv2dLayer,
    out_conv: Conv2dLayer,
}

impl NoisePredictor {
    pub fn new(cfg: PredictorConfig, rng: &mut impl Rng) -> Result<NoisePredictor> {
        if cfg.temb_dim % 2 != 0 {
            return Err(GscError::invalid("predictor", "temb_dim must be even"));
        }
        if cfg.latent_size % 2 != 0 {
            return Err(GscError::invalid("predictor", "latent size must be even"));
        }
        let w = cfg.width;
        let c = cfg.latent_channels;
        Ok(NoisePredictor {
            embedding: EmbeddingTable::new(cfg.vocab_size, cfg.attn_dim, rng),
            temb_mlp1: DenseLayer::new(cfg.temb_dim, cfg.temb_dim, rng),
            temb_mlp2: DenseLayer::new(cfg.temb_dim, cfg.temb_dim, rng),
            temb_proj_down: DenseLayer::new(w, cfg.temb_dim, rng),
            temb_proj_mid: DenseLayer::new(2 * w, cfg.temb_dim, rng),
            temb_proj_up: DenseLayer::new(w, cfg.temb_dim, rng),
            in_conv: Conv2dLayer::new(w, c, 3, 1, 1, rng),
            down_conv: Conv2dLayer::new(w, w, 3, 1, 1, rng),
            attn_hi: AttnBlock::new(w, cfg.attn_dim, rng),
            downsample: Conv2dLayer::new(2 * w, w, 3, 2, 1, rng),
            mid_conv1: Conv2dLayer::new(2 * w, 2 * w, 3, 1, 1, rng),
            attn_lo: AttnBlock::new(2 * w, cfg.attn_dim, rng),
            mid_conv2: Conv2dLayer::new(2 * w, 2 * w, 3, 1, 1, rng),
            upsample: ConvT2dLayer::new(2 * w, w, 4, 2, 1, rng),
            up_conv: Conv2dLayer::new(w, 2 * w, 3, 1, 1, rng),
            out_conv: Conv2dLayer::new(c, w, 3, 1, 1, rng),
            cfg,
        })
    }

    /// The dense layers that accept low-rank adapters, in adapter order.
    /// Embeddings and the 3×3 convolutions stay unwrapped.
    fn adapted_dense(&self) -> Vec<(&'static str, &DenseLayer)> {
        vec![
            ("temb_mlp1", &self.temb_mlp1),
            ("temb_mlp2", &self.temb_mlp2),
            ("temb_proj_down", &self.temb_proj_down),
            ("temb_proj_mid", &self.temb_proj_mid),
            ("temb_proj_up", &self.temb_proj_up),
            ("attn_hi.to_attn", &self.attn_hi.to_attn),
            ("attn_hi.wq", &self.attn_hi.attn.wq),
            ("attn_hi.wk", &self.attn_hi.attn.wk),
            ("attn_hi.wv", &self.attn_hi.attn.wv),
            ("attn_hi.wo", &self.attn_hi.attn.wo),
            ("attn_hi.from_attn", &self.attn_hi.from_attn),
            ("attn_lo.to_attn", &self.attn_lo.to_attn),
            ("attn_lo.wq", &self.attn_lo.attn.wq),
            ("attn_lo.wk", &self.attn_lo.attn.wk),
            ("attn_lo.wv", &self.attn_lo.attn.wv),
            ("attn_lo.wo", &self.attn_lo.attn.wo),
            ("attn_lo.from_attn", &self.attn_lo.from_attn),
        ]
    }

    /// `(name, out_dim, in_dim)` of every adapter slot, in order.
    pub fn lora_slot_dims(&self) -> Vec<(&'static str, usize, usize)> {
        self.adapted_dense()
            .into_iter()
            .map(|(name, l)| (name, l.out_dim(), l.in_dim()))
            .collect()
    }

    /// Fresh adapter set (zero product: attaching it changes nothing).
    pub fn make_lora(&self, rank: usize, rng: &mut impl Rng) -> Result<LoraSet> {
        let adapters = self
            .lora_slot_dims()
            .into_iter()
            .map(|(_, o, i)| LoraAdapter::new(o, i, rank, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(LoraSet { adapters, rank })
    }

    /// Embed a prompt (optionally with a metaword slot at position 0).
    pub fn embed_prompt(&self, prompt: &Prompt, metaword: Option<&MetaWord>) -> Result<Tensor> {
        match (prompt.tokens.is_empty(), metaword) {
            (true, None) => Err(GscError::invalid("embed_prompt", "empty conditioning sequence")),
            (true, Some(mu)) => prepend_metaword(mu, None),
            (false, None) => self.embedding.embed(&prompt.tokens),
            (false, Some(mu)) => {
                let seq = self.embedding.embed(&prompt.tokens)?;
                prepend_metaword(mu, Some(&seq))
            }
        }
    }

    /// Predict the injected noise `ε̂(z_t, prompt, t)`.
    pub fn forward(
        &self,
        z_t: &Tensor,
        t: usize,
        prompt_seq: &Tensor,
        lora: Option<&LoraSet>,
    ) -> Result<Tensor> {
        let want = [self.cfg.latent_channels, self.cfg.latent_size, self.cfg.latent_size];
        if z_t.shape() != want {
            return Err(GscError::ShapeMismatch {
                op: "noise_predictor",
                lhs: want.to_vec(),
                rhs: z_t.shape().to_vec(),
            });
        }
        if let Some(set) = lora {
            if set.adapters.len() != self.adapted_dense().len() {
                return Err(GscError::invalid(
                    "noise_predictor",
                    format!(
                        "adapter set has {} entries, predictor wraps {}",
                        set.adapters.len(),
                        self.adapted_dense().len()
                    ),
                ));
            }
        }
        // Adapters are consumed in the fixed slot order; each call hands out
        // the next one. Keeping the counter here and the list in
        // `adapted_dense` makes the pairing a single source of truth.
        let mut slot = 0usize;
        let mut ad = move || -> Option<LoraAdapterRef> {
            let r = lora.map(|s| std::rc::Rc::new(s.adapters[slot].clone()));
            slot += 1;
            r
        };

        let temb = sinusoidal_embed(t, self.cfg.temb_dim)?.reshape(&[1, self.cfg.temb_dim])?;
        let temb = self
            .temb_mlp1
            .forward_adapted(&temb, ad().as_deref())?
            .tanh()?;
        let temb = self.temb_mlp2.forward_adapted(&temb, ad().as_deref())?;
        let w = self.cfg.width;
        let t_down = self
            .temb_proj_down
            .forward_adapted(&temb, ad().as_deref())?
            .reshape(&[w, 1, 1])?;
        let t_mid = self
            .temb_proj_mid
            .forward_adapted(&temb, ad().as_deref())?
            .reshape(&[2 * w, 1, 1])?;
        let t_up = self
            .temb_proj_up
            .forward_adapted(&temb, ad().as_deref())?
            .reshape(&[w, 1, 1])?;

        let h0 = self.in_conv.forward(z_t)?.tanh()?;
        let h1 = self.down_conv.forward(&h0)?.add(&t_down)?.tanh()?;
        let h1 = self.attn_hi.forward(&h1, prompt_seq, &mut ad)?;
        let h2 = self.downsample.forward(&h1)?.tanh()?;
        let h3 = self.mid_conv1.forward(&h2)?.add(&t_mid)?.tanh()?;
        let h3 = self.attn_lo.forward(&h3, prompt_seq, &mut ad)?;
        let h3 = self.mid_conv2.forward(&h3)?.tanh()?;
        let h4 = self.upsample.forward(&h3)?.tanh()?;
        let h5 = Tensor::concat(&[&h4, &h1], 0)?;
        let h5 = self.up_conv.forward(&h5)?.add(&t_up)?.tanh()?;
        self.out_conv.forward(&h5)
    }

    /// Every trainable parameter including the prompt embedding table.
    pub fn params(&self, prefix: &str, out: &mut NamedParams) {
        self.embedding.params(&format!("{prefix}.embedding"), out);
        for (name, layer) in self.adapted_dense() {
            layer.params(&format!("{prefix}.{name}"), out);
        }
        self.in_conv.params(&format!("{prefix}.in_conv"), out);
        self.down_conv.params(&format!("{prefix}.down_conv"), out);
        self.downsample.params(&format!("{prefix}.downsample"), out);
        self.mid_conv1.params(&format!("{prefix}.mid_conv1"), out);
        self.mid_conv2.params(&format!("{prefix}.mid_conv2"), out);
        self.upsample.params(&format!("{prefix}.upsample"), out);
        self.up_conv.params(&format!("{prefix}.up_conv"), out);
        self.out_conv.params(&format!("{prefix}.out_conv"), out);
    }

    pub fn set_trainable(&self, flag: bool) {
        let mut p = NamedParams::new();
        self.params("", &mut p);
        for (_, t) in p {
            t.set_requires_grad(flag);
        }
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Truncated sampling indices: `round(T·i/T_B)` for `i = T_B..1`, then 0.
pub fn sampling_indices(t_max: usize, t_b: usize) -> Result<Vec<usize>> {
    if t_b == 0 || t_b > t_max {
        return Err(GscError::invalid(
            "sampling_indices",
            format!("T_B={t_b} outside 1..={t_max}"),
        ));
    }
    let mut idx: Vec<usize> = (1..=t_b)
        .rev()
        .map(|i| ((t_max * i) as f64 / t_b as f64).round() as usize)
        .collect();
    idx.push(0);
    Ok(idx)
}

/// DDIM sampling loop over any per-step noise estimate.
pub fn generate_with(
    mut predict: impl FnMut(&Tensor, usize) -> Result<Tensor>,
    noise: &Tensor,
    t_b: usize,
    schedule: &DiffusionSchedule,
) -> Result<Tensor> {
    let idx = sampling_indices(schedule.t_max, t_b)?;
    let mut z = noise.clone();
    for step in idx.windows(2) {
        let (t, t_next) = (step[0], step[1]);
        let eps_hat = predict(&z, t)?;
        z = ddim_step(&z, t, t_next, &eps_hat, schedule)?;
    }
    Ok(z)
}

/// Generate a latent from seed noise under prompt/metaword/LoRA
/// conditioning. Pure in (parameters, prompt, noise, schedule).
pub fn generate(
    predictor: &NoisePredictor,
    prompt: &Prompt,
    metaword: Option<&MetaWord>,
    lora: Option<&LoraSet>,
    noise: &Tensor,
    t_b: usize,
    schedule: &DiffusionSchedule,
) -> Result<Tensor> {
    let prompt_seq = predictor.embed_prompt(prompt, metaword)?;
    generate_with(
        |z, t| predictor.forward(z, t, &prompt_seq, lora),
        noise,
        t_b,
        schedule,
    )
}

// ---------------------------------------------------------------------------
// Noise-predictor training
// ---------------------------------------------------------------------------

/// Which parameter group a diffusion training run updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainableSet {
    /// Everything: U-Net, embeddings, step perceptron.
    Full,
    /// Only the low-rank adapters; the base model stays frozen.
    Lora,
    /// Only the metaword embedding vector.
    MetaWord,
}

/// Settings for a noise-prediction training run.
#[derive(Clone, Debug)]
pub struct DiffusionTrainConfig {
    pub epochs: usize,
    pub lr: f64,
}

/// Minimize `E_{t,ε} ‖ε − ε̂(√α_t z + √(1−α_t)ε, prompt, t)‖²` (mean per
/// element) over the selected parameter group. Steps are full-batch: every
/// (latent, prompt) pair gets a fresh `t ~ U{1..T}` and `ε ~ N(0,I)` each
/// epoch, losses are averaged, and one Adam update is applied.
pub fn train_noise_predictor(
    predictor: &NoisePredictor,
    lora: Option<&LoraSet>,
    metaword: Option<&MetaWord>,
    latents: &[Tensor],
    prompts: &[Prompt],
    schedule: &DiffusionSchedule,
    cfg: &DiffusionTrainConfig,
    trainable: TrainableSet,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if latents.is_empty() || latents.len() != prompts.len() {
        return Err(GscError::invalid(
            "train_noise_predictor",
            format!("{} latents vs {} prompts", latents.len(), prompts.len()),
        ));
    }
    let mut params = NamedParams::new();
    match trainable {
        TrainableSet::Full => predictor.params("predictor", &mut params),
        TrainableSet::Lora => {
            let set = lora.ok_or_else(|| {
                GscError::invalid("train_noise_predictor", "trainable=lora without an adapter set")
            })?;
            set.params("lora", &mut params);
        }
        TrainableSet::MetaWord => {
            let mu = metaword.ok_or_else(|| {
                GscError::invalid("train_noise_predictor", "trainable=metaword without a metaword")
            })?;
            mu.params("metaword", &mut params);
        }
    }
    // Freeze everything, then re-enable just the training group; restore on
    // exit so the caller's trainability flags survive.
    let mut all = NamedParams::new();
    predictor.params("predictor", &mut all);
    if let Some(set) = lora {
        set.params("lora", &mut all);
    }
    if let Some(mu) = metaword {
        mu.params("metaword", &mut all);
    }
    let saved: Vec<(Tensor, bool)> = all.iter().map(|(_, t)| (t.clone(), t.requires_grad())).collect();
    for (_, t) in &all {
        t.set_requires_grad(false);
    }
    for (_, t) in &params {
        t.set_requires_grad(true);
    }

    let result = (|| {
        let mut opt = Adam::new(cfg.lr);
        let mut history = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            let mut loss: Option<Tensor> = None;
            for (z0, prompt) in latents.iter().zip(prompts) {
                let t = rng.gen_range(1..=schedule.t_max);
                let eps = Tensor::randn(z0.shape(), 1.0, rng);
                let z_t = forward_diffuse(z0, t, &eps, schedule)?;
                let prompt_seq = predictor.embed_prompt(prompt, metaword)?;
                let eps_hat = predictor.forward(&z_t, t, &prompt_seq, lora)?;
                let sample = eps.sub(&eps_hat)?.square()?.mean()?;
                loss = Some(match loss {
                    None => sample,
                    Some(acc) => acc.add(&sample)?,
                });
            }
            let loss = loss.expect("nonempty dataset").scale(1.0 / latents.len() as f64)?;
            let value = loss.item()?;
            if !value.is_finite() || value > 1e6 {
                return Err(GscError::Divergence {
                    stage: "noise_predictor".into(),
                    loss: value,
                });
            }
            loss.backward()?;
            opt.step(&params)?;
            history.push(value);
        }
        Ok(history)
    })();

    for (t, flag) in saved {
        t.set_requires_grad(flag);
    }
    result
}
