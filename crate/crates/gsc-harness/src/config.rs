//! Experiment configuration.
//!
//! One flat struct holds every knob of the pipeline, pre-filled with the
//! desk-scale defaults.  Config files are line-oriented `key = value` under
//! `[section]` headers; parsing starts from the defaults and applies
//! overrides, so a file only needs to mention what it changes.  Unknown
//! sections or keys, malformed values, and settings that violate a module
//! constraint (a compression rate with a non-integral symbol count, a
//! backward schedule longer than the forward one, SNR groups that fail to
//! partition the grid) are all rejected at load time with the offending
//! line number.

use crate::error::{HarnessError, Result};
use gsc_core::channel::{make_qam, Constellation, CovarianceVariant, Rate};
use gsc_core::deka::{DekaConfig, GkaConfig, GkaMode, RateStageMode, TkaConfig};
use gsc_core::genmodel::{CodecTrainConfig, DiffusionSchedule, DiffusionTrainConfig};
use gsc_core::jscc::{JsccTrainConfig, ObjectiveVariant, RatePlan, TrainObjective};
use std::fmt::Write as _;
use std::path::Path;

/// Every setting of a full experiment, defaulting to the desk-scale values.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    // [geometry]
    pub image_size: usize,
    pub image_channels: usize,
    // [dataset]
    pub cloud_images: usize,
    pub edge_images: usize,
    // [model]
    pub cloud_width: usize,
    pub edge_width: usize,
    // [diffusion]
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub t_backward: usize,
    // [channel]
    pub subchannels: usize,
    pub subcarrier_spacing_hz: f64,
    pub qam_order: usize,
    pub covariance: CovarianceVariant,
    pub snrs_db: Vec<f64>,
    pub delay_spreads_ns: Vec<f64>,
    // [jscc]
    pub spatial: usize,
    pub rates: Vec<Rate>,
    pub eta_cml: f64,
    pub jscc_objective: ObjectiveVariant,
    pub jscc_epochs: usize,
    pub jscc_lr: f64,
    // [pretrain]
    pub codec_epochs: usize,
    pub codec_lr: f64,
    pub kl_weight: f64,
    pub cloud_epochs: usize,
    pub cloud_lr: f64,
    pub edge_epochs: usize,
    pub edge_lr: f64,
    // [gka]
    pub gka_mode: GkaMode,
    /// Index into the procedural subject roster the alignment run targets.
    pub subject: usize,
    pub cloud_samples: usize,
    pub cloud_test_samples: usize,
    pub metaword_lr: f64,
    pub metaword_epochs: usize,
    pub gka_lora_rank: usize,
    pub gka_lora_lr: f64,
    pub gka_lora_epochs: usize,
    // [tka]
    pub rate_mode: RateStageMode,
    pub rate_epochs: usize,
    pub rate_lr: f64,
    pub snr_epochs: usize,
    pub snr_lr: f64,
    pub gamma0_db: f64,
    pub omega0_ns: f64,
    pub groups: Vec<Vec<f64>>,
    pub trained_groups: Vec<bool>,
    pub tka_lora_ranks: Vec<usize>,
    pub edge_samples: usize,
    pub edge_test_samples: usize,
    // [eval]
    pub eval_trials: usize,
    // [run]
    pub root_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            image_size: 32,
            image_channels: 1,
            cloud_images: 60,
            edge_images: 60,
            cloud_width: 32,
            edge_width: 16,
            t_max: 200,
            beta_start: 8.5e-4,
            beta_end: 0.012,
            t_backward: 20,
            subchannels: 120,
            subcarrier_spacing_hz: 30e3,
            qam_order: 64,
            covariance: CovarianceVariant::Rational,
            snrs_db: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0],
            delay_spreads_ns: vec![30.0, 100.0, 300.0, 1000.0],
            spatial: 16,
            rates: (2u64..=6).map(|i| Rate::new(16, i).unwrap()).collect(),
            eta_cml: 10.0,
            jscc_objective: ObjectiveVariant::LatentMseCommitment,
            jscc_epochs: 300,
            jscc_lr: 1e-4,
            codec_epochs: 200,
            codec_lr: 1e-3,
            kl_weight: 1e-3,
            cloud_epochs: 400,
            cloud_lr: 1e-3,
            edge_epochs: 400,
            edge_lr: 1e-3,
            gka_mode: GkaMode::Makd,
            subject: 0,
            cloud_samples: 40,
            cloud_test_samples: 10,
            metaword_lr: 5e-4,
            metaword_epochs: 500,
            gka_lora_rank: 8,
            gka_lora_lr: 1e-4,
            gka_lora_epochs: 500,
            rate_mode: RateStageMode::VrAlter,
            rate_epochs: 300,
            rate_lr: 1e-4,
            snr_epochs: 300,
            snr_lr: 1e-4,
            gamma0_db: 20.0,
            omega0_ns: 300.0,
            groups: vec![vec![0.0, 5.0], vec![10.0, 15.0], vec![20.0, 25.0]],
            trained_groups: vec![true, true, false],
            tka_lora_ranks: vec![8, 8, 8],
            edge_samples: 100,
            edge_test_samples: 30,
            eval_trials: 200,
            root_seed: 17,
        }
    }
}

fn cfg_err(line: usize, msg: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        line,
        msg: msg.into(),
    }
}

fn parse_usize(v: &str, line: usize) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| cfg_err(line, format!("expected an unsigned integer, got `{v}`")))
}

fn parse_u64(v: &str, line: usize) -> Result<u64> {
    v.trim()
        .parse()
        .map_err(|_| cfg_err(line, format!("expected an unsigned integer, got `{v}`")))
}

fn parse_f64(v: &str, line: usize) -> Result<f64> {
    let x: f64 = v
        .trim()
        .parse()
        .map_err(|_| cfg_err(line, format!("expected a number, got `{v}`")))?;
    if !x.is_finite() {
        return Err(cfg_err(line, format!("non-finite value `{v}`")));
    }
    Ok(x)
}

fn parse_f64_list(v: &str, line: usize) -> Result<Vec<f64>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_f64(s, line))
        .collect()
}

fn parse_usize_list(v: &str, line: usize) -> Result<Vec<usize>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_usize(s, line))
        .collect()
}

fn parse_bool_list(v: &str, line: usize) -> Result<Vec<bool>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| match s.trim() {
            "1" | "true" | "yes" => Ok(true),
            "0" | "false" | "no" => Ok(false),
            other => Err(cfg_err(line, format!("expected a boolean, got `{other}`"))),
        })
        .collect()
}

fn parse_rate(v: &str, line: usize) -> Result<Rate> {
    let v = v.trim();
    let (num, den) = match v.split_once('/') {
        Some((n, d)) => (parse_u64(n, line)?, parse_u64(d, line)?),
        None => (parse_u64(v, line)?, 1),
    };
    Rate::new(num, den).map_err(|e| cfg_err(line, format!("bad rate `{v}`: {e}")))
}

fn parse_rates(v: &str, line: usize) -> Result<Vec<Rate>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_rate(s, line))
        .collect()
}

/// Groups are `|`-separated lists of comma-separated SNRs, e.g.
/// `0,5 | 10,15 | 20,25`.
fn parse_groups(v: &str, line: usize) -> Result<Vec<Vec<f64>>> {
    v.split('|').map(|g| parse_f64_list(g, line)).collect()
}

fn gka_mode_token(m: GkaMode) -> &'static str {
    match m {
        GkaMode::Makd => "makd",
        GkaMode::TiOnly => "ti",
        GkaMode::DbOnly => "db",
    }
}

fn parse_gka_mode(v: &str, line: usize) -> Result<GkaMode> {
    match v.trim() {
        "makd" => Ok(GkaMode::Makd),
        "ti" => Ok(GkaMode::TiOnly),
        "db" => Ok(GkaMode::DbOnly),
        other => Err(cfg_err(
            line,
            format!("mode must be makd|ti|db, got `{other}`"),
        )),
    }
}

fn rate_mode_token(m: RateStageMode) -> &'static str {
    match m {
        RateStageMode::VrAlter => "vr-alter",
        RateStageMode::VrJoint => "vr-joint",
        RateStageMode::MiAlter => "mi-alter",
        RateStageMode::MiJoint => "mi-joint",
    }
}

fn parse_rate_mode(v: &str, line: usize) -> Result<RateStageMode> {
    match v.trim() {
        "vr-alter" => Ok(RateStageMode::VrAlter),
        "vr-joint" => Ok(RateStageMode::VrJoint),
        "mi-alter" => Ok(RateStageMode::MiAlter),
        "mi-joint" => Ok(RateStageMode::MiJoint),
        other => Err(cfg_err(
            line,
            format!("rate_mode must be vr-alter|vr-joint|mi-alter|mi-joint, got `{other}`"),
        )),
    }
}

fn covariance_token(v: CovarianceVariant) -> &'static str {
    match v {
        CovarianceVariant::Rational => "rational",
        CovarianceVariant::AsWritten => "as-written",
    }
}

fn parse_covariance(v: &str, line: usize) -> Result<CovarianceVariant> {
    match v.trim() {
        "rational" => Ok(CovarianceVariant::Rational),
        "as-written" => Ok(CovarianceVariant::AsWritten),
        other => Err(cfg_err(
            line,
            format!("covariance must be rational|as-written, got `{other}`"),
        )),
    }
}

fn objective_token(v: ObjectiveVariant) -> &'static str {
    match v {
        ObjectiveVariant::LatentMseCommitment => "latent-mse-commitment",
        ObjectiveVariant::LatentMseOnly => "latent-mse",
        ObjectiveVariant::LatentMseKld => "latent-mse-kld",
        ObjectiveVariant::SoftToHard => "soft-to-hard",
    }
}

fn parse_objective(v: &str, line: usize) -> Result<ObjectiveVariant> {
    match v.trim() {
        "latent-mse-commitment" => Ok(ObjectiveVariant::LatentMseCommitment),
        "latent-mse" => Ok(ObjectiveVariant::LatentMseOnly),
        "latent-mse-kld" => Ok(ObjectiveVariant::LatentMseKld),
        "soft-to-hard" => Ok(ObjectiveVariant::SoftToHard),
        other => Err(cfg_err(
            line,
            format!(
                "objective must be latent-mse-commitment|latent-mse|latent-mse-kld|soft-to-hard, \
                 got `{other}`"
            ),
        )),
    }
}

fn fmt_f64_list(xs: &[f64]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

impl ExperimentConfig {
    /// Parse a config file body on top of the defaults, then validate.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| cfg_err(lineno, "unterminated [section] header"))?;
                section = name.trim().to_string();
                if !matches!(
                    section.as_str(),
                    "geometry"
                        | "dataset"
                        | "model"
                        | "diffusion"
                        | "channel"
                        | "jscc"
                        | "pretrain"
                        | "gka"
                        | "tka"
                        | "eval"
                        | "run"
                ) {
                    return Err(cfg_err(lineno, format!("unknown section `[{section}]`")));
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(lineno, format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            let value = value.trim();
            if section.is_empty() {
                return Err(cfg_err(lineno, format!("key `{key}` before any [section]")));
            }
            cfg.apply(&section, key, value, lineno)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        ExperimentConfig::parse(&text)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str, line: usize) -> Result<()> {
        match (section, key) {
            ("geometry", "image_size") => self.image_size = parse_usize(value, line)?,
            ("geometry", "image_channels") => self.image_channels = parse_usize(value, line)?,
            ("dataset", "cloud_images") => self.cloud_images = parse_usize(value, line)?,
            ("dataset", "edge_images") => self.edge_images = parse_usize(value, line)?,
            ("model", "cloud_width") => self.cloud_width = parse_usize(value, line)?,
            ("model", "edge_width") => self.edge_width = parse_usize(value, line)?,
            ("diffusion", "t_max") => self.t_max = parse_usize(value, line)?,
            ("diffusion", "beta_start") => self.beta_start = parse_f64(value, line)?,
            ("diffusion", "beta_end") => self.beta_end = parse_f64(value, line)?,
            ("diffusion", "t_backward") => self.t_backward = parse_usize(value, line)?,
            ("channel", "subchannels") => self.subchannels = parse_usize(value, line)?,
            ("channel", "subcarrier_spacing_hz") => {
                self.subcarrier_spacing_hz = parse_f64(value, line)?
            }
            ("channel", "qam_order") => self.qam_order = parse_usize(value, line)?,
            ("channel", "covariance") => self.covariance = parse_covariance(value, line)?,
            ("channel", "snrs_db") => self.snrs_db = parse_f64_list(value, line)?,
            ("channel", "delay_spreads_ns") => self.delay_spreads_ns = parse_f64_list(value, line)?,
            ("jscc", "spatial") => self.spatial = parse_usize(value, line)?,
            ("jscc", "rates") => self.rates = parse_rates(value, line)?,
            ("jscc", "eta_cml") => self.eta_cml = parse_f64(value, line)?,
            ("jscc", "objective") => self.jscc_objective = parse_objective(value, line)?,
            ("jscc", "epochs") => self.jscc_epochs = parse_usize(value, line)?,
            ("jscc", "lr") => self.jscc_lr = parse_f64(value, line)?,
            ("pretrain", "codec_epochs") => self.codec_epochs = parse_usize(value, line)?,
            ("pretrain", "codec_lr") => self.codec_lr = parse_f64(value, line)?,
            ("pretrain", "kl_weight") => self.kl_weight = parse_f64(value, line)?,
            ("pretrain", "cloud_epochs") => self.cloud_epochs = parse_usize(value, line)?,
            ("pretrain", "cloud_lr") => self.cloud_lr = parse_f64(value, line)?,
            ("pretrain", "edge_epochs") => self.edge_epochs = parse_usize(value, line)?,
            ("pretrain", "edge_lr") => self.edge_lr = parse_f64(value, line)?,
            ("gka", "mode") => self.gka_mode = parse_gka_mode(value, line)?,
            ("gka", "subject") => self.subject = parse_usize(value, line)?,
            ("gka", "cloud_samples") => self.cloud_samples = parse_usize(value, line)?,
            ("gka", "cloud_test_samples") => self.cloud_test_samples = parse_usize(value, line)?,
            ("gka", "metaword_lr") => self.metaword_lr = parse_f64(value, line)?,
            ("gka", "metaword_epochs") => self.metaword_epochs = parse_usize(value, line)?,
            ("gka", "lora_rank") => self.gka_lora_rank = parse_usize(value, line)?,
            ("gka", "lora_lr") => self.gka_lora_lr = parse_f64(value, line)?,
            ("gka", "lora_epochs") => self.gka_lora_epochs = parse_usize(value, line)?,
            ("tka", "rate_mode") => self.rate_mode = parse_rate_mode(value, line)?,
            ("tka", "rate_epochs") => self.rate_epochs = parse_usize(value, line)?,
            ("tka", "rate_lr") => self.rate_lr = parse_f64(value, line)?,
            ("tka", "snr_epochs") => self.snr_epochs = parse_usize(value, line)?,
            ("tka", "snr_lr") => self.snr_lr = parse_f64(value, line)?,
            ("tka", "gamma0_db") => self.gamma0_db = parse_f64(value, line)?,
            ("tka", "omega0_ns") => self.omega0_ns = parse_f64(value, line)?,
            ("tka", "groups") => self.groups = parse_groups(value, line)?,
            ("tka", "trained_groups") => self.trained_groups = parse_bool_list(value, line)?,
            ("tka", "lora_ranks") => self.tka_lora_ranks = parse_usize_list(value, line)?,
            ("tka", "edge_samples") => self.edge_samples = parse_usize(value, line)?,
            ("tka", "edge_test_samples") => self.edge_test_samples = parse_usize(value, line)?,
            ("eval", "trials") => self.eval_trials = parse_usize(value, line)?,
            ("run", "root_seed") => self.root_seed = parse_u64(value, line)?,
            _ => {
                return Err(cfg_err(
                    line,
                    format!("unknown key `{key}` in section `[{section}]`"),
                ))
            }
        }
        Ok(())
    }

    /// Check every cross-module constraint.  Errors use line 0 because they
    /// concern the assembled config, not a single line.
    pub fn validate(&self) -> Result<()> {
        let e = |msg: String| cfg_err(0, msg);
        if self.image_size < 8 || self.image_size % 4 != 0 {
            return Err(e(format!(
                "image_size must be a multiple of 4 and ≥ 8, got {}",
                self.image_size
            )));
        }
        if self.image_channels == 0 {
            return Err(e("image_channels must be ≥ 1".into()));
        }
        if self.cloud_images == 0 || self.edge_images == 0 {
            return Err(e("dataset sizes must be ≥ 1".into()));
        }
        if self.cloud_width == 0 || self.edge_width == 0 {
            return Err(e("model widths must be ≥ 1".into()));
        }
        if self.t_max == 0 || self.t_backward == 0 || self.t_backward > self.t_max {
            return Err(e(format!(
                "need 1 ≤ t_backward ≤ t_max, got t_backward={} t_max={}",
                self.t_backward, self.t_max
            )));
        }
        if !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(e(format!(
                "betas must satisfy 0 < beta_start ≤ beta_end < 1, got {} and {}",
                self.beta_start, self.beta_end
            )));
        }
        let m = self.qam_order;
        let power_of_four = m >= 4 && m.is_power_of_two() && m.trailing_zeros() % 2 == 0;
        if !power_of_four {
            return Err(e(format!(
                "qam_order must be a power of 4 (square QAM), got {m}"
            )));
        }
        if self.eta_cml < 0.0 {
            return Err(e("eta_cml must be ≥ 0".into()));
        }
        for lr in [
            self.jscc_lr,
            self.codec_lr,
            self.cloud_lr,
            self.edge_lr,
            self.metaword_lr,
            self.gka_lora_lr,
            self.rate_lr,
            self.snr_lr,
        ] {
            if lr <= 0.0 {
                return Err(e("learning rates must be > 0".into()));
            }
        }
        if self.eval_trials == 0 {
            return Err(e("eval trials must be ≥ 1".into()));
        }
        if self.subject >= 3 {
            return Err(e(format!(
                "subject must index the three-subject roster, got {}",
                self.subject
            )));
        }
        // Constructing the plan enforces integral symbol counts per rate.
        let plan = self.rate_plan().map_err(|err| e(err.to_string()))?;
        let _ = plan;
        // The knowledge-alignment configs carry their own invariants
        // (group partition, rank bounds, epoch counts).
        self.to_deka_config()
            .map_err(|err| e(err.to_string()))?
            .validate()
            .map_err(|err| e(err.to_string()))?;
        Ok(())
    }

    /// Flat latent dimensionality Z implied by the image geometry.
    pub fn latent_dim(&self) -> usize {
        let side = self.image_size / 4;
        4 * side * side
    }

    pub fn rate_plan(&self) -> gsc_core::Result<RatePlan> {
        RatePlan::new(self.latent_dim(), self.spatial, self.rates.clone())
    }

    pub fn schedule(&self) -> gsc_core::Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.t_max, self.beta_start, self.beta_end)
    }

    pub fn constellation(&self) -> gsc_core::Result<Constellation> {
        make_qam(self.qam_order)
    }

    pub fn codec_train_config(&self) -> CodecTrainConfig {
        CodecTrainConfig {
            epochs: self.codec_epochs,
            lr: self.codec_lr,
            kl_weight: self.kl_weight,
            ..CodecTrainConfig::default()
        }
    }

    pub fn cloud_train_config(&self) -> DiffusionTrainConfig {
        DiffusionTrainConfig {
            epochs: self.cloud_epochs,
            lr: self.cloud_lr,
        }
    }

    pub fn edge_train_config(&self) -> DiffusionTrainConfig {
        DiffusionTrainConfig {
            epochs: self.edge_epochs,
            lr: self.edge_lr,
        }
    }

    pub fn jscc_objective(&self) -> TrainObjective {
        TrainObjective {
            variant: self.jscc_objective,
            eta_cml: self.eta_cml,
            ..TrainObjective::default()
        }
    }

    pub fn jscc_train_config(&self) -> JsccTrainConfig {
        JsccTrainConfig {
            epochs: self.jscc_epochs,
            lr: self.jscc_lr,
        }
    }

    pub fn to_gka_config(&self) -> GkaConfig {
        GkaConfig {
            mode: self.gka_mode,
            n_cg: self.cloud_samples,
            n_cg_test: self.cloud_test_samples,
            metaword_lr: self.metaword_lr,
            metaword_epochs: self.metaword_epochs,
            lora_rank: self.gka_lora_rank,
            lora_lr: self.gka_lora_lr,
            lora_epochs: self.gka_lora_epochs,
        }
    }

    pub fn to_tka_config(&self) -> gsc_core::Result<TkaConfig> {
        Ok(TkaConfig {
            plan: self.rate_plan()?,
            snrs: self.snrs_db.clone(),
            delay_spreads: self.delay_spreads_ns.iter().map(|w| w / 1e9).collect(),
            groups: self.groups.clone(),
            trained_groups: self.trained_groups.clone(),
            lora_ranks: self.tka_lora_ranks.clone(),
            rate_mode: self.rate_mode,
            rate_epochs: self.rate_epochs,
            rate_lr: self.rate_lr,
            snr_epochs: self.snr_epochs,
            snr_lr: self.snr_lr,
            gamma0_db: self.gamma0_db,
            omega0_s: self.omega0_ns / 1e9,
            eta_cml: self.eta_cml,
            j: self.subchannels,
            subcarrier_spacing: self.subcarrier_spacing_hz,
            covariance: self.covariance,
        })
    }

    pub fn to_deka_config(&self) -> gsc_core::Result<DekaConfig> {
        Ok(DekaConfig {
            gka: self.to_gka_config(),
            tka: self.to_tka_config()?,
            n_eg: self.edge_samples,
            n_eg_test: self.edge_test_samples,
            qam_order: self.qam_order,
        })
    }

    /// Serialise every setting in a fixed order.  `parse(dump())` restores
    /// an equivalent config; the dump is also what run manifests snapshot.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[geometry]");
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "image_channels = {}", self.image_channels);
        let _ = writeln!(s, "\n[dataset]");
        let _ = writeln!(s, "cloud_images = {}", self.cloud_images);
        let _ = writeln!(s, "edge_images = {}", self.edge_images);
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(s, "cloud_width = {}", self.cloud_width);
        let _ = writeln!(s, "edge_width = {}", self.edge_width);
        let _ = writeln!(s, "\n[diffusion]");
        let _ = writeln!(s, "t_max = {}", self.t_max);
        let _ = writeln!(s, "beta_start = {}", self.beta_start);
        let _ = writeln!(s, "beta_end = {}", self.beta_end);
        let _ = writeln!(s, "t_backward = {}", self.t_backward);
        let _ = writeln!(s, "\n[channel]");
        let _ = writeln!(s, "subchannels = {}", self.subchannels);
        let _ = writeln!(s, "subcarrier_spacing_hz = {}", self.subcarrier_spacing_hz);
        let _ = writeln!(s, "qam_order = {}", self.qam_order);
        let _ = writeln!(s, "covariance = {}", covariance_token(self.covariance));
        let _ = writeln!(s, "snrs_db = {}", fmt_f64_list(&self.snrs_db));
        let _ = writeln!(s, "delay_spreads_ns = {}", fmt_f64_list(&self.delay_spreads_ns));
        let _ = writeln!(s, "\n[jscc]");
        let _ = writeln!(s, "spatial = {}", self.spatial);
        let rates = self
            .rates
            .iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join(", ");
        let _ = writeln!(s, "rates = {rates}");
        let _ = writeln!(s, "eta_cml = {}", self.eta_cml);
        let _ = writeln!(s, "objective = {}", objective_token(self.jscc_objective));
        let _ = writeln!(s, "epochs = {}", self.jscc_epochs);
        let _ = writeln!(s, "lr = {}", self.jscc_lr);
        let _ = writeln!(s, "\n[pretrain]");
        let _ = writeln!(s, "codec_epochs = {}", self.codec_epochs);
        let _ = writeln!(s, "codec_lr = {}", self.codec_lr);
        let _ = writeln!(s, "kl_weight = {}", self.kl_weight);
        let _ = writeln!(s, "cloud_epochs = {}", self.cloud_epochs);
        let _ = writeln!(s, "cloud_lr = {}", self.cloud_lr);
        let _ = writeln!(s, "edge_epochs = {}", self.edge_epochs);
        let _ = writeln!(s, "edge_lr = {}", self.edge_lr);
        let _ = writeln!(s, "\n[gka]");
        let _ = writeln!(s, "mode = {}", gka_mode_token(self.gka_mode));
        let _ = writeln!(s, "subject = {}", self.subject);
        let _ = writeln!(s, "cloud_samples = {}", self.cloud_samples);
        let _ = writeln!(s, "cloud_test_samples = {}", self.cloud_test_samples);
        let _ = writeln!(s, "metaword_lr = {}", self.metaword_lr);
        let _ = writeln!(s, "metaword_epochs = {}", self.metaword_epochs);
        let _ = writeln!(s, "lora_rank = {}", self.gka_lora_rank);
        let _ = writeln!(s, "lora_lr = {}", self.gka_lora_lr);
        let _ = writeln!(s, "lora_epochs = {}", self.gka_lora_epochs);
        let _ = writeln!(s, "\n[tka]");
        let _ = writeln!(s, "rate_mode = {}", rate_mode_token(self.rate_mode));
        let _ = writeln!(s, "rate_epochs = {}", self.rate_epochs);
        let _ = writeln!(s, "rate_lr = {}", self.rate_lr);
        let _ = writeln!(s, "snr_epochs = {}", self.snr_epochs);
        let _ = writeln!(s, "snr_lr = {}", self.snr_lr);
        let _ = writeln!(s, "gamma0_db = {}", self.gamma0_db);
        let _ = writeln!(s, "omega0_ns = {}", self.omega0_ns);
        let groups = self
            .groups
            .iter()
            .map(|g| fmt_f64_list(g))
            .collect::<Vec<_>>()
            .join(" | ");
        let _ = writeln!(s, "groups = {groups}");
        let trained = self
            .trained_groups
            .iter()
            .map(|b| if *b { "1" } else { "0" })
            .collect::<Vec<_>>()
            .join(", ");
        let _ = writeln!(s, "trained_groups = {trained}");
        let ranks = self
            .tka_lora_ranks
            .iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join(", ");
        let _ = writeln!(s, "lora_ranks = {ranks}");
        let _ = writeln!(s, "edge_samples = {}", self.edge_samples);
        let _ = writeln!(s, "edge_test_samples = {}", self.edge_test_samples);
        let _ = writeln!(s, "\n[eval]");
        let _ = writeln!(s, "trials = {}", self.eval_trials);
        let _ = writeln!(s, "\n[run]");
        let _ = writeln!(s, "root_seed = {}", self.root_seed);
        s
    }
}
