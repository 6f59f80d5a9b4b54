//! Knowledge alignment between a cloud generator and an edge device.
//!
//! Generation knowledge moves first: the cloud model renders a sample set,
//! and the edge generator absorbs it through a trainable metaword followed
//! by low-rank distillation (MAKD), leaving the base weights untouched.
//! Transmission knowledge follows: edge-generated latents drive a two-stage
//! adaptation of the latent link — first the codec and a shared
//! variable-rate adapter pair at a reference operating point, then one
//! low-rank correction set per SNR group, with the high-SNR group left
//! unadapted. The composite forward map threads a prompt through
//! generation, rate-p encoding, the stochastic link, and decoding back to
//! an image, selecting the group correction by the channel's SNR.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channel::{
    ChannelCondition, ChannelSampler, Constellation, CovarianceVariant, FrozenChannel,
    TransmissionCondition,
};
use crate::error::{GscError, Result};
use crate::genmodel::{
    generate, train_noise_predictor, DiffusionSchedule, DiffusionTrainConfig, LatentCodec,
    LoraSet, NoisePredictor, Prompt, TrainableSet,
};
use crate::jscc::{
    adapter_backward_p_adapted, adapter_forward_p_adapted, commitment_loss, quantize_pair,
    AdapterLora, JsccCodec, JsccLora, RatePlan, VariableRateAdapterPair,
};
use crate::metrics::{MetricLog, MetricRecord};
use crate::nn::{Adam, MetaWord, NamedParams};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Seed derivation
// ---------------------------------------------------------------------------

/// Derive a per-index seed from a root seed (splitmix64 finalizer). Distinct
/// indices give statistically independent streams; the map is pure.
pub fn derive_seed(root: u64, index: u64) -> u64 {
    let mut x = root ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

// Fixed stage tags so every pipeline stage draws from its own stream and
// re-running a stage in isolation reproduces the full run bit-for-bit.
const STAGE_CLOUD_SAMPLES: u64 = 1;
const STAGE_METAWORD_INIT: u64 = 2;
const STAGE_METAWORD_TRAIN: u64 = 3;
const STAGE_LORA_INIT: u64 = 4;
const STAGE_LORA_TRAIN: u64 = 5;
const STAGE_EDGE_LATENTS: u64 = 6;
const STAGE_RATE: u64 = 7;
const STAGE_SNR: u64 = 8; // + group index

fn stage_rng(root: u64, stage: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stage))
}

// ---------------------------------------------------------------------------
// Generator bundle
// ---------------------------------------------------------------------------

/// A full latent generator: image codec, noise predictor, diffusion
/// schedule, and the truncated sampling depth used at inference.
#[derive(Clone)]
pub struct GenModel {
    pub codec: LatentCodec,
    pub predictor: NoisePredictor,
    pub schedule: DiffusionSchedule,
    pub t_b: usize,
}

impl GenModel {
    fn latent_shape(&self) -> Vec<usize> {
        vec![
            self.predictor.cfg.latent_channels,
            self.predictor.cfg.latent_size,
            self.predictor.cfg.latent_size,
        ]
    }

    /// Sample one latent from seed noise; detached from the parameter graph.
    pub fn generate_latent(
        &self,
        prompt: &Prompt,
        metaword: Option<&MetaWord>,
        lora: Option<&LoraSet>,
        seed: u64,
    ) -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Tensor::randn(&self.latent_shape(), 1.0, &mut rng);
        let z = generate(
            &self.predictor,
            prompt,
            metaword,
            lora,
            &noise,
            self.t_b,
            &self.schedule,
        )?;
        Ok(z.stop_gradient())
    }

    /// Sample one image (latent → decoder); detached.
    pub fn generate_image(
        &self,
        prompt: &Prompt,
        metaword: Option<&MetaWord>,
        lora: Option<&LoraSet>,
        seed: u64,
    ) -> Result<Tensor> {
        let z = self.generate_latent(prompt, metaword, lora, seed)?;
        Ok(self.codec.decode_latent(&z)?.stop_gradient())
    }
}

/// Train/test partition of a generated sample set.
#[derive(Clone)]
pub struct SampleSplit {
    pub train: Vec<Tensor>,
    pub test: Vec<Tensor>,
}

// ---------------------------------------------------------------------------
// Generation-knowledge alignment (MAKD)
// ---------------------------------------------------------------------------

/// Which parts of the generation alignment run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GkaMode {
    /// Metaword training followed by low-rank distillation.
    Makd,
    /// Textual-inversion ablation: metaword only, no adapter set.
    TiOnly,
    /// Distillation-only ablation: adapters trained under the untouched
    /// random metaword init.
    DbOnly,
}

/// Settings for the generation-knowledge stage.
#[derive(Clone, Debug)]
pub struct GkaConfig {
    pub mode: GkaMode,
    /// Cloud sample count used for training.
    pub n_cg: usize,
    /// Extra held-out cloud samples for evaluation.
    pub n_cg_test: usize,
    pub metaword_lr: f64,
    pub metaword_epochs: usize,
    pub lora_rank: usize,
    pub lora_lr: f64,
    pub lora_epochs: usize,
}

impl GkaConfig {
    pub fn desk_default() -> GkaConfig {
        GkaConfig {
            mode: GkaMode::Makd,
            n_cg: 40,
            n_cg_test: 10,
            metaword_lr: 5e-4,
            metaword_epochs: 500,
            lora_rank: 8,
            lora_lr: 1e-4,
            lora_epochs: 500,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cg == 0 {
            return Err(GscError::invalid("gka_config", "N_CG must be ≥ 1"));
        }
        if self.lora_rank == 0 {
            return Err(GscError::invalid("gka_config", "LoRA rank must be ≥ 1"));
        }
        if self.metaword_lr <= 0.0 || self.lora_lr <= 0.0 {
            return Err(GscError::invalid("gka_config", "learning rates must be > 0"));
        }
        Ok(())
    }
}

/// Output of the generation-knowledge stage. The base edge parameters are
/// untouched; everything learned lives in the metaword and the adapter set.
#[derive(Clone)]
pub struct GkaResult {
    pub metaword: MetaWord,
    /// `None` for the textual-inversion ablation.
    pub lora: Option<LoraSet>,
    pub metaword_history: Vec<f64>,
    pub lora_history: Vec<f64>,
}

/// Render `n` images from the cloud generator under the plain prompt, one
/// derived seed per image. Deterministic in `root_seed`.
pub fn cloud_generate_samples(
    cloud: &GenModel,
    prompt: &Prompt,
    n: usize,
    root_seed: u64,
) -> Result<Vec<Tensor>> {
    (0..n)
        .map(|i| cloud.generate_image(prompt, None, None, derive_seed(root_seed, i as u64)))
        .collect()
}

/// Fresh metaword sized for the edge predictor's prompt-embedding width.
pub fn init_metaword(edge: &GenModel, rng: &mut impl Rng) -> MetaWord {
    MetaWord::new(edge.predictor.cfg.attn_dim, rng)
}

fn encode_sample_latents(
    edge: &GenModel,
    images: &[Tensor],
    rng: &mut impl Rng,
) -> Result<Vec<Tensor>> {
    images
        .iter()
        .map(|x| Ok(edge.codec.encode_latent(x, rng)?.stop_gradient()))
        .collect()
}

/// Fit the metaword embedding to the cloud samples: noise-prediction MSE
/// over the encoded sample set with prompt μ⊕v, every other parameter
/// frozen. Updates `mu` in place and returns the per-epoch loss history.
pub fn train_metaword(
    edge: &GenModel,
    mu: &MetaWord,
    samples: &[Tensor],
    prompt: &Prompt,
    lr: f64,
    epochs: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let latents = encode_sample_latents(edge, samples, rng)?;
    let prompts = vec![prompt.clone(); latents.len()];
    train_noise_predictor(
        &edge.predictor,
        None,
        Some(mu),
        &latents,
        &prompts,
        &edge.schedule,
        &DiffusionTrainConfig { epochs, lr },
        TrainableSet::MetaWord,
        rng,
    )
}

/// Distill the residual discrepancy into the adapter set under the frozen
/// metaword: same objective as [`train_metaword`], trainable group = LoRA.
pub fn train_gka_lora(
    edge: &GenModel,
    mu: &MetaWord,
    lora: &LoraSet,
    samples: &[Tensor],
    prompt: &Prompt,
    lr: f64,
    epochs: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let latents = encode_sample_latents(edge, samples, rng)?;
    let prompts = vec![prompt.clone(); latents.len()];
    train_noise_predictor(
        &edge.predictor,
        Some(lora),
        Some(mu),
        &latents,
        &prompts,
        &edge.schedule,
        &DiffusionTrainConfig { epochs, lr },
        TrainableSet::Lora,
        rng,
    )
}

/// Run the generation-knowledge stage over a cloud sample set.
pub fn run_gka(
    edge: &GenModel,
    samples: &[Tensor],
    prompt: &Prompt,
    cfg: &GkaConfig,
    root_seed: u64,
) -> Result<GkaResult> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(GscError::invalid("run_gka", "empty sample set"));
    }
    let mu = init_metaword(edge, &mut stage_rng(root_seed, STAGE_METAWORD_INIT));
    let metaword_history = if cfg.mode == GkaMode::DbOnly {
        Vec::new()
    } else {
        train_metaword(
            edge,
            &mu,
            samples,
            prompt,
            cfg.metaword_lr,
            cfg.metaword_epochs,
            &mut stage_rng(root_seed, STAGE_METAWORD_TRAIN),
        )?
    };
    let (lora, lora_history) = if cfg.mode == GkaMode::TiOnly {
        (None, Vec::new())
    } else {
        let set = edge
            .predictor
            .make_lora(cfg.lora_rank, &mut stage_rng(root_seed, STAGE_LORA_INIT))?;
        let history = train_gka_lora(
            edge,
            &mu,
            &set,
            samples,
            prompt,
            cfg.lora_lr,
            cfg.lora_epochs,
            &mut stage_rng(root_seed, STAGE_LORA_TRAIN),
        )?;
        (Some(set), history)
    };
    Ok(GkaResult {
        metaword: mu,
        lora,
        metaword_history,
        lora_history,
    })
}

/// Sample `n` edge latents under the aligned prompt (metaword prepended,
/// adapters attached when present), one derived seed each.
pub fn generate_edge_latents(
    edge: &GenModel,
    gka: &GkaResult,
    prompt: &Prompt,
    n: usize,
    root_seed: u64,
) -> Result<Vec<Tensor>> {
    (0..n)
        .map(|i| {
            edge.generate_latent(
                prompt,
                Some(&gka.metaword),
                gka.lora.as_ref(),
                derive_seed(root_seed, i as u64),
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Transmission-knowledge alignment (VGSA)
// ---------------------------------------------------------------------------

/// Rate-stage training variants: shared adapter pair (VR) versus one
/// independent pair per rate (MI), crossed with alternating versus joint
/// loss handling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RateStageMode {
    VrAlter,
    VrJoint,
    MiAlter,
    MiJoint,
}

impl RateStageMode {
    pub fn shares_pair(self) -> bool {
        matches!(self, RateStageMode::VrAlter | RateStageMode::VrJoint)
    }

    pub fn alternates(self) -> bool {
        matches!(self, RateStageMode::VrAlter | RateStageMode::MiAlter)
    }
}

/// Settings for the transmission-knowledge stage.
#[derive(Clone, Debug)]
pub struct TkaConfig {
    pub plan: RatePlan,
    /// SNR grid Γ (dB).
    pub snrs: Vec<f64>,
    /// Delay-spread grid Ω (seconds).
    pub delay_spreads: Vec<f64>,
    /// SNR groups Γ_g; must partition `snrs` exactly.
    pub groups: Vec<Vec<f64>>,
    /// Which groups receive a correction set (the high-SNR group is
    /// typically skipped).
    pub trained_groups: Vec<bool>,
    /// Per-group adapter rank.
    pub lora_ranks: Vec<usize>,
    pub rate_mode: RateStageMode,
    pub rate_epochs: usize,
    pub rate_lr: f64,
    pub snr_epochs: usize,
    pub snr_lr: f64,
    /// Rate-stage reference SNR γ₀ (dB).
    pub gamma0_db: f64,
    /// Rate-stage reference delay spread ω₀ (seconds).
    pub omega0_s: f64,
    /// Commitment weight η_cml.
    pub eta_cml: f64,
    /// OFDM sub-channel count J.
    pub j: usize,
    pub subcarrier_spacing: f64,
    pub covariance: CovarianceVariant,
}

impl TkaConfig {
    pub fn desk_default() -> TkaConfig {
        TkaConfig {
            plan: RatePlan::desk_default(),
            snrs: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0],
            delay_spreads: vec![30e-9, 100e-9, 300e-9, 1000e-9],
            groups: vec![vec![0.0, 5.0], vec![10.0, 15.0], vec![20.0, 25.0]],
            trained_groups: vec![true, true, false],
            lora_ranks: vec![8, 8, 8],
            rate_mode: RateStageMode::VrAlter,
            rate_epochs: 300,
            rate_lr: 1e-4,
            snr_epochs: 300,
            snr_lr: 1e-4,
            gamma0_db: 20.0,
            omega0_s: 300e-9,
            eta_cml: 10.0,
            j: 120,
            subcarrier_spacing: 30e3,
            covariance: CovarianceVariant::Rational,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.snrs.is_empty() || self.delay_spreads.is_empty() {
            return Err(GscError::invalid("tka_config", "empty SNR or delay-spread grid"));
        }
        if self.groups.len() != self.trained_groups.len()
            || self.groups.len() != self.lora_ranks.len()
        {
            return Err(GscError::invalid(
                "tka_config",
                format!(
                    "{} groups vs {} trained flags vs {} ranks",
                    self.groups.len(),
                    self.trained_groups.len(),
                    self.lora_ranks.len()
                ),
            ));
        }
        // Exact partition: every grid SNR in exactly one group, no strays.
        for &snr in &self.snrs {
            let hits = self
                .groups
                .iter()
                .filter(|g| g.iter().any(|&v| v == snr))
                .count();
            if hits != 1 {
                return Err(GscError::invalid(
                    "tka_config",
                    format!("SNR {snr} dB appears in {hits} groups; groups must partition the grid"),
                ));
            }
        }
        for (gi, group) in self.groups.iter().enumerate() {
            if group.is_empty() {
                return Err(GscError::invalid("tka_config", format!("group {gi} is empty")));
            }
            for &v in group {
                if !self.snrs.contains(&v) {
                    return Err(GscError::invalid(
                        "tka_config",
                        format!("group {gi} lists {v} dB, which is not on the SNR grid"),
                    ));
                }
            }
        }
        for (gi, (&trained, &rank)) in
            self.trained_groups.iter().zip(&self.lora_ranks).enumerate()
        {
            if trained && rank == 0 {
                return Err(GscError::invalid(
                    "tka_config",
                    format!("trained group {gi} needs rank ≥ 1"),
                ));
            }
        }
        if self.rate_lr <= 0.0 || self.snr_lr <= 0.0 || self.eta_cml < 0.0 {
            return Err(GscError::invalid("tka_config", "bad learning rate or commitment weight"));
        }
        Ok(())
    }

    pub fn condition(&self, snr_db: f64, delay_spread: f64) -> Result<ChannelCondition> {
        ChannelCondition::new(
            snr_db,
            delay_spread,
            self.j,
            self.subcarrier_spacing,
            self.covariance,
        )
    }
}

/// Index of the unique group containing an SNR.
fn group_index(groups: &[Vec<f64>], snr_db: f64) -> Result<usize> {
    groups
        .iter()
        .position(|g| g.iter().any(|&v| v == snr_db))
        .ok_or_else(|| {
            GscError::invalid(
                "snr_group",
                format!("SNR {snr_db} dB is outside every configured group"),
            )
        })
}

/// One logged rate-stage loss value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateLossEntry {
    pub epoch: usize,
    pub rate_index: usize,
    pub loss: f64,
}

/// Rate-stage output: updated codec parameters live in the codec passed in;
/// this carries the adapter pair(s) and the loss log.
#[derive(Clone)]
pub struct RateStageResult {
    /// One pair for VR modes, one per rate for MI modes.
    pub pairs: Vec<VariableRateAdapterPair>,
    pub mode: RateStageMode,
    pub history: Vec<RateLossEntry>,
}

impl RateStageResult {
    pub fn pair_for_rate(&self, p: usize) -> Result<&VariableRateAdapterPair> {
        if self.mode.shares_pair() {
            Ok(&self.pairs[0])
        } else {
            self.pairs.get(p).ok_or_else(|| {
                GscError::invalid(
                    "rate_stage",
                    format!("rate index {p} outside {} pairs", self.pairs.len()),
                )
            })
        }
    }
}

/// Per-sample link loss at rate p under one fresh channel realization:
/// `(‖f_JD,p(φ(f_JE,p(z))) − z‖² + η_cml·‖f_JE,p(z) − sg(ŝ)‖²) / Z`.
#[allow(clippy::too_many_arguments)]
fn link_loss_p(
    codec: &JsccCodec,
    pair: &VariableRateAdapterPair,
    plan: &RatePlan,
    z: &Tensor,
    p: usize,
    sampler: &ChannelSampler,
    constellation: &Constellation,
    eta_cml: f64,
    codec_lora: Option<&JsccLora>,
    pair_lora: Option<&AdapterLora>,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let (s_re, s_im) =
        adapter_forward_p_adapted(codec, pair, plan, z, p, codec_lora, pair_lora)?;
    let frozen = FrozenChannel::draw(sampler, s_re.len(), rng);
    let (r_re, r_im) = crate::channel::apply_phi_with(&s_re, &s_im, constellation, &frozen, true)?;
    let z_hat =
        adapter_backward_p_adapted(codec, pair, plan, &r_re, &r_im, p, codec_lora, pair_lora)?;
    let mse = z_hat.sub(z)?.square()?.sum()?;
    let (q_re, q_im) = quantize_pair(&s_re, &s_im, constellation)?;
    let commit = commitment_loss(&s_re, &s_im, &q_re, &q_im)?;
    mse.add(&commit.scale(eta_cml)?)?.scale(1.0 / plan.z as f64)
}

/// Batch-mean link loss over a latent set at one rate.
#[allow(clippy::too_many_arguments)]
fn rate_batch_loss(
    codec: &JsccCodec,
    pair: &VariableRateAdapterPair,
    plan: &RatePlan,
    latents: &[Tensor],
    p: usize,
    sampler: &ChannelSampler,
    constellation: &Constellation,
    eta_cml: f64,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for z in latents {
        let term = link_loss_p(
            codec,
            pair,
            plan,
            z,
            p,
            sampler,
            constellation,
            eta_cml,
            None,
            None,
            rng,
        )?;
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term)?,
        });
    }
    acc.expect("nonempty latent set")
        .scale(1.0 / latents.len() as f64)
}

/// Stage one of the transmission alignment: fit the codec update and the
/// variable-rate adapter pair(s) at the reference operating point (γ₀, ω₀).
/// Alternating modes take one optimizer step per rate, round-robin; joint
/// modes sum all rate losses into each step. Updates the codec in place.
pub fn vgsa_rate_stage(
    codec: &JsccCodec,
    latents: &[Tensor],
    cfg: &TkaConfig,
    constellation: &Constellation,
    rng: &mut impl Rng,
) -> Result<RateStageResult> {
    cfg.validate()?;
    if latents.is_empty() {
        return Err(GscError::invalid("rate_stage", "empty latent set"));
    }
    let n_r = cfg.plan.len();
    let pair_count = if cfg.rate_mode.shares_pair() { 1 } else { n_r };
    let pairs: Vec<VariableRateAdapterPair> = (0..pair_count)
        .map(|_| VariableRateAdapterPair::for_plan(codec, &cfg.plan, rng))
        .collect::<Result<_>>()?;

    let mut params = NamedParams::new();
    codec.params("jscc", &mut params);
    for (i, pair) in pairs.iter().enumerate() {
        pair.params(&format!("pair{i}"), &mut params);
    }
    let mut opt = Adam::new(cfg.rate_lr);
    let sampler = ChannelSampler::new(&cfg.condition(cfg.gamma0_db, cfg.omega0_s)?)?;

    let mut history = Vec::new();
    for epoch in 0..cfg.rate_epochs {
        let selected: Vec<usize> = if cfg.rate_mode.alternates() {
            vec![epoch % n_r]
        } else {
            (0..n_r).collect()
        };
        let mut total: Option<Tensor> = None;
        for &p in &selected {
            let pair = if cfg.rate_mode.shares_pair() { &pairs[0] } else { &pairs[p] };
            let loss_p = rate_batch_loss(
                codec,
                pair,
                &cfg.plan,
                latents,
                p,
                &sampler,
                constellation,
                cfg.eta_cml,
                rng,
            )?;
            let value = loss_p.item()?;
            if !value.is_finite() || value > 1e6 {
                return Err(GscError::Divergence {
                    stage: "rate_stage".into(),
                    loss: value,
                });
            }
            history.push(RateLossEntry {
                epoch,
                rate_index: p,
                loss: value,
            });
            total = Some(match total {
                None => loss_p,
                Some(t) => t.add(&loss_p)?,
            });
        }
        total.expect("at least one rate").backward()?;
        opt.step(&params)?;
    }
    Ok(RateStageResult {
        pairs,
        mode: cfg.rate_mode,
        history,
    })
}

/// The low-rank correction set one SNR group adds on top of the frozen
/// codec and adapter pair.
#[derive(Clone)]
pub struct GroupLora {
    pub codec: JsccLora,
    pub pair: AdapterLora,
}

/// Stage two of the transmission alignment: per SNR group, fit a low-rank
/// correction set over the group's SNRs, all configured rates, and the
/// delay-spread grid (one spread drawn uniformly per term), with the stage-
/// one parameters bit-frozen. Returns per-group corrections (`None` for
/// skipped groups) and per-group loss histories.
pub fn vgsa_snr_stage(
    codec: &JsccCodec,
    rate: &RateStageResult,
    latents: &[Tensor],
    cfg: &TkaConfig,
    constellation: &Constellation,
    rng: &mut impl Rng,
) -> Result<(Vec<Option<GroupLora>>, Vec<Vec<f64>>)> {
    cfg.validate()?;
    if latents.is_empty() {
        return Err(GscError::invalid("snr_stage", "empty latent set"));
    }
    if !rate.mode.shares_pair() {
        return Err(GscError::invalid(
            "snr_stage",
            "group adaptation builds on the shared-pair rate stage",
        ));
    }
    let pair = &rate.pairs[0];

    // Freeze the stage-one parameters for the duration; restore on exit.
    let mut base = NamedParams::new();
    codec.params("jscc", &mut base);
    pair.params("pair", &mut base);
    let saved: Vec<bool> = base.iter().map(|(_, t)| t.requires_grad()).collect();
    for (_, t) in &base {
        t.set_requires_grad(false);
    }

    let result = (|| {
        let n_r = cfg.plan.len();
        let mut group_lora = Vec::with_capacity(cfg.groups.len());
        let mut histories = Vec::with_capacity(cfg.groups.len());
        for (g, group) in cfg.groups.iter().enumerate() {
            if !cfg.trained_groups[g] {
                group_lora.push(None);
                histories.push(Vec::new());
                continue;
            }
            let correction = GroupLora {
                codec: codec.make_lora(cfg.lora_ranks[g], rng)?,
                pair: pair.make_lora(cfg.lora_ranks[g], rng)?,
            };
            let mut params = NamedParams::new();
            correction.codec.params(&format!("m_j.g{g}"), &mut params);
            correction.pair.params(&format!("m_v.g{g}"), &mut params);
            let mut opt = Adam::new(cfg.snr_lr);

            // One prepared sampler per (γ, ω) grid cell of this group.
            let samplers: Vec<Vec<ChannelSampler>> = group
                .iter()
                .map(|&snr| {
                    cfg.delay_spreads
                        .iter()
                        .map(|&om| ChannelSampler::new(&cfg.condition(snr, om)?))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?;

            let terms = (group.len() * n_r * latents.len()) as f64;
            let mut history = Vec::with_capacity(cfg.snr_epochs);
            for _ in 0..cfg.snr_epochs {
                let mut acc: Option<Tensor> = None;
                for gamma_i in 0..group.len() {
                    for p in 0..n_r {
                        for z in latents {
                            let omega_i = rng.gen_range(0..cfg.delay_spreads.len());
                            let term = link_loss_p(
                                codec,
                                pair,
                                &cfg.plan,
                                z,
                                p,
                                &samplers[gamma_i][omega_i],
                                constellation,
                                cfg.eta_cml,
                                Some(&correction.codec),
                                Some(&correction.pair),
                                rng,
                            )?;
                            acc = Some(match acc {
                                None => term,
                                Some(a) => a.add(&term)?,
                            });
                        }
                    }
                }
                let loss = acc.expect("nonempty grid").scale(1.0 / terms)?;
                let value = loss.item()?;
                if !value.is_finite() || value > 1e6 {
                    return Err(GscError::Divergence {
                        stage: format!("snr_stage_g{g}"),
                        loss: value,
                    });
                }
                loss.backward()?;
                opt.step(&params)?;
                history.push(value);
            }
            group_lora.push(Some(correction));
            histories.push(history);
        }
        Ok((group_lora, histories))
    })();

    for ((_, t), flag) in base.iter().zip(saved) {
        t.set_requires_grad(flag);
    }
    result
}

/// Output of the transmission-knowledge stage. The updated codec parameters
/// are shared with the codec that was trained; group corrections apply only
/// when the channel SNR falls in their group.
#[derive(Clone)]
pub struct TkaResult {
    pub codec: JsccCodec,
    pub plan: RatePlan,
    pub rate: RateStageResult,
    pub groups: Vec<Vec<f64>>,
    pub trained_groups: Vec<bool>,
    pub group_lora: Vec<Option<GroupLora>>,
    pub snr_history: Vec<Vec<f64>>,
}

impl TkaResult {
    pub fn group_of(&self, snr_db: f64) -> Result<usize> {
        group_index(&self.groups, snr_db)
    }

    /// The correction set evaluation at this SNR must apply: `None` for a
    /// skipped group, an error off the configured grid.
    pub fn lora_for_snr(&self, snr_db: f64) -> Result<Option<&GroupLora>> {
        Ok(self.group_lora[self.group_of(snr_db)?].as_ref())
    }

    pub fn pair_for_rate(&self, p: usize) -> Result<&VariableRateAdapterPair> {
        self.rate.pair_for_rate(p)
    }

    /// Position of a rate in the plan; errors for rates outside it.
    pub fn rate_index(&self, rate: crate::channel::Rate) -> Result<usize> {
        (0..self.plan.len())
            .find(|&p| self.plan.rate(p).expect("in range") == rate)
            .ok_or_else(|| {
                GscError::invalid("gsc_forward", format!("rate τ={rate} is not in the plan"))
            })
    }
}

/// Run both transmission-alignment stages. The codec is updated in place;
/// the result aliases its parameters.
pub fn run_vgsa(
    codec: &JsccCodec,
    latents: &[Tensor],
    cfg: &TkaConfig,
    constellation: &Constellation,
    root_seed: u64,
) -> Result<TkaResult> {
    let rate = vgsa_rate_stage(
        codec,
        latents,
        cfg,
        constellation,
        &mut stage_rng(root_seed, STAGE_RATE),
    )?;
    let (group_lora, snr_history) = vgsa_snr_stage(
        codec,
        &rate,
        latents,
        cfg,
        constellation,
        &mut stage_rng(root_seed, STAGE_SNR),
    )?;
    Ok(TkaResult {
        codec: codec.clone(),
        plan: cfg.plan.clone(),
        rate,
        groups: cfg.groups.clone(),
        trained_groups: cfg.trained_groups.clone(),
        group_lora,
        snr_history,
    })
}

// ---------------------------------------------------------------------------
// Composite forward map
// ---------------------------------------------------------------------------

/// Push one generated latent through the rate-p link under a frozen channel
/// realization and decode back to a latent estimate.
pub fn transmit_latent(
    tka: &TkaResult,
    z: &Tensor,
    p: usize,
    snr_db: f64,
    constellation: &Constellation,
    frozen: &FrozenChannel,
) -> Result<Tensor> {
    let pair = tka.pair_for_rate(p)?;
    let lora = tka.lora_for_snr(snr_db)?;
    let (jl, al) = match lora {
        Some(g) => (Some(&g.codec), Some(&g.pair)),
        None => (None, None),
    };
    let (s_re, s_im) = adapter_forward_p_adapted(&tka.codec, pair, &tka.plan, z, p, jl, al)?;
    let (r_re, r_im) = crate::channel::apply_phi_with(&s_re, &s_im, constellation, frozen, true)?;
    adapter_backward_p_adapted(&tka.codec, pair, &tka.plan, &r_re, &r_im, p, jl, al)
}

/// The full pipeline under one frozen channel realization:
/// `x̌ = f_LD(f_JD,p(φ(f_JE,p(f_G(μ⊕v, seed)))))`.
pub fn gsc_forward_frozen(
    edge: &GenModel,
    gka: &GkaResult,
    tka: &TkaResult,
    prompt: &Prompt,
    tcond: &TransmissionCondition,
    constellation: &Constellation,
    gen_seed: u64,
    frozen: &FrozenChannel,
) -> Result<Tensor> {
    let p = tka.rate_index(tcond.rate)?;
    if tcond.symbols != tka.plan.symbols(p)? {
        return Err(GscError::invalid(
            "gsc_forward",
            format!(
                "transmission condition carries {} symbols, plan expects {}",
                tcond.symbols,
                tka.plan.symbols(p)?
            ),
        ));
    }
    let z = edge.generate_latent(prompt, Some(&gka.metaword), gka.lora.as_ref(), gen_seed)?;
    let z_hat = transmit_latent(
        tka,
        &z,
        p,
        tcond.condition.snr_db,
        constellation,
        frozen,
    )?;
    Ok(edge.codec.decode_latent(&z_hat)?.stop_gradient())
}

/// The full pipeline with a fresh channel realization drawn from
/// `channel_seed`. Deterministic in `(gen_seed, channel_seed)`.
#[allow(clippy::too_many_arguments)]
pub fn gsc_forward(
    edge: &GenModel,
    gka: &GkaResult,
    tka: &TkaResult,
    prompt: &Prompt,
    tcond: &TransmissionCondition,
    constellation: &Constellation,
    gen_seed: u64,
    channel_seed: u64,
) -> Result<Tensor> {
    let p = tka.rate_index(tcond.rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(channel_seed);
    let frozen = FrozenChannel::draw(&tcond.sampler, tka.plan.symbols(p)?, &mut rng);
    gsc_forward_frozen(edge, gka, tka, prompt, tcond, constellation, gen_seed, &frozen)
}

// ---------------------------------------------------------------------------
// Full alignment run
// ---------------------------------------------------------------------------

/// Settings for a full alignment run.
#[derive(Clone, Debug)]
pub struct DekaConfig {
    pub gka: GkaConfig,
    pub tka: TkaConfig,
    pub n_eg: usize,
    pub n_eg_test: usize,
    pub qam_order: usize,
}

impl DekaConfig {
    pub fn desk_default() -> DekaConfig {
        DekaConfig {
            gka: GkaConfig::desk_default(),
            tka: TkaConfig::desk_default(),
            n_eg: 100,
            n_eg_test: 30,
            qam_order: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gka.validate()?;
        self.tka.validate()?;
        if self.n_eg == 0 {
            return Err(GscError::invalid("deka_config", "N_EG must be ≥ 1"));
        }
        Ok(())
    }
}

/// Everything a full alignment run produces.
#[derive(Clone)]
pub struct DekaOutcome {
    pub cloud_samples: SampleSplit,
    pub gka: GkaResult,
    pub edge_latents: SampleSplit,
    pub tka: TkaResult,
    pub log: MetricLog,
}

/// Execute the alignment end to end: cloud samples → metaword → adapter
/// distillation → edge latents → rate stage → grouping → group stage. Emits
/// one summary record per stage and metric; the codec is updated in place.
pub fn run_deka(
    cloud: &GenModel,
    edge: &GenModel,
    codec: &JsccCodec,
    prompt: &Prompt,
    cfg: &DekaConfig,
    constellation: &Constellation,
    run_id: &str,
    root_seed: u64,
) -> Result<DekaOutcome> {
    cfg.validate()?;
    let mut log = MetricLog::new();
    let record = |stage: &str, metric: &str, epoch: usize, rate: Option<usize>, value: f64| {
        MetricRecord {
            run_id: run_id.to_string(),
            stage: stage.to_string(),
            epoch,
            rate_index: rate,
            snr_db: f64::NAN,
            delay_spread_ns: f64::NAN,
            metric: metric.to_string(),
            value,
            seed: root_seed,
        }
    };

    // Step 1: cloud sample set.
    let all = cloud_generate_samples(
        cloud,
        prompt,
        cfg.gka.n_cg + cfg.gka.n_cg_test,
        derive_seed(root_seed, STAGE_CLOUD_SAMPLES),
    )?;
    let cloud_samples = SampleSplit {
        train: all[..cfg.gka.n_cg].to_vec(),
        test: all[cfg.gka.n_cg..].to_vec(),
    };
    log.push(record("cloud_samples", "count", 0, None, cfg.gka.n_cg as f64));

    // Steps 2–3: metaword, then adapter distillation (mode-dependent).
    let gka = run_gka(edge, &cloud_samples.train, prompt, &cfg.gka, root_seed)?;
    if let Some(&last) = gka.metaword_history.last() {
        log.push(record("metaword", "final_loss", gka.metaword_history.len() - 1, None, last));
    }
    if let Some(&last) = gka.lora_history.last() {
        log.push(record("gka_lora", "final_loss", gka.lora_history.len() - 1, None, last));
    }

    // Step 4: edge latent set.
    let latents = generate_edge_latents(
        edge,
        &gka,
        prompt,
        cfg.n_eg + cfg.n_eg_test,
        derive_seed(root_seed, STAGE_EDGE_LATENTS),
    )?;
    let edge_latents = SampleSplit {
        train: latents[..cfg.n_eg].to_vec(),
        test: latents[cfg.n_eg..].to_vec(),
    };
    log.push(record("edge_latents", "count", 0, None, cfg.n_eg as f64));

    // Steps 5–7: rate stage, grouping, group stage.
    let tka = run_vgsa(codec, &edge_latents.train, &cfg.tka, constellation, root_seed)?;
    for p in 0..cfg.tka.plan.len() {
        if let Some(entry) = tka.rate.history.iter().rev().find(|e| e.rate_index == p) {
            log.push(record("rate_stage", "final_loss", entry.epoch, Some(p), entry.loss));
        }
    }
    log.push(record("grouping", "group_count", 0, None, cfg.tka.groups.len() as f64));
    for (g, history) in tka.snr_history.iter().enumerate() {
        if let Some(&last) = history.last() {
            log.push(record(
                &format!("snr_stage_g{g}"),
                "final_loss",
                history.len() - 1,
                None,
                last,
            ));
        }
    }

    Ok(DekaOutcome {
        cloud_samples,
        gka,
        edge_latents,
        tka,
        log,
    })
}
