//! Checkpointed pipeline stages.
//!
//! The experiment is split into stages, each reading the checkpoints of the
//! stages before it and writing exactly one artifact of its own.  A stage
//! invoked before its inputs exist fails with an error naming the stage to
//! run first.  All randomness comes from seeds derived as
//! `hash(root_seed, stage_name, trial)`, so identical config + root seed
//! give byte-identical artifacts, and any stage can be re-run in isolation.
//!
//! Stage graph (artifact in parentheses):
//!
//! ```text
//! synth-data (cloud_data, edge_data)
//!   → pretrain-latent-codec (codec)
//!       → train-cloud (cloud_predictor)
//!       → train-edge  (edge_predictor)
//!       → pretrain-jscc (jscc)
//!   → gka (gka: metaword+adapters+cloud samples)
//!   → tka-rate (tka_rate: trained jscc+pairs+edge latents)
//!   → tka-snr (tka_snr: per-group corrections)
//!   → eval (eval.csv, psnr_vs_snr.svg) → plot / transmit-demo
//! ```

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::dataset::{desk_subjects, prompt_vocab, synth_dataset, StyleParams, SubjectSpec};
use crate::error::{HarnessError, Result};
use crate::report::{export_csv, export_svg_plot, parse_csv, PlotSpec, SeriesKey, XAxis};
use crate::seed::stage_seed;
use gsc_core::channel::{ChannelSampler, FrozenChannel, Rate, TransmissionCondition};
use gsc_core::deka::{
    cloud_generate_samples, derive_seed, generate_edge_latents, run_gka, transmit_latent,
    vgsa_rate_stage, vgsa_snr_stage, GenModel, GkaResult, GroupLora, RateLossEntry,
    RateStageMode, RateStageResult, TkaResult,
};
use gsc_core::genmodel::{
    train_latent_codec, train_noise_predictor, LatentCodec, NoisePredictor, PredictorConfig,
    Prompt, TrainableSet,
};
use gsc_core::jscc::{train_jscc, JsccCodec, VariableRateAdapterPair};
use gsc_core::metrics::{
    align_eval, latent_mse, psnr, MetricRecord, ProbeExtractor, SemanticProbe, VisualProbe,
};
use gsc_core::nn::NamedParams;
use gsc_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

/// Stage driver bound to a config and output directory.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub run_id: String,
}

const CLOUD_DATA: &str = "cloud_data.ckpt";
const EDGE_DATA: &str = "edge_data.ckpt";
const CODEC: &str = "codec.ckpt";
const CLOUD_PREDICTOR: &str = "cloud_predictor.ckpt";
const EDGE_PREDICTOR: &str = "edge_predictor.ckpt";
const JSCC: &str = "jscc.ckpt";
const GKA: &str = "gka.ckpt";
const TKA_RATE: &str = "tka_rate.ckpt";
const TKA_SNR: &str = "tka_snr.ckpt";
const EVAL_CSV: &str = "eval.csv";
const PSNR_SVG: &str = "psnr_vs_snr.svg";
const LOSS_SVG: &str = "loss_curves.svg";
const MANIFEST: &str = "manifest.txt";

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, out: PathBuf) -> Pipeline {
        let run_id = format!("run-{}", cfg.root_seed);
        Pipeline { cfg, out, run_id }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Load a required checkpoint, naming its producing stage when absent.
    fn require(&self, file: &str, producer: &str) -> Result<Checkpoint> {
        let path = self.path(file);
        if !path.exists() {
            return Err(HarnessError::MissingStage {
                stage: producer.to_string(),
            });
        }
        Checkpoint::load(&path)
    }

    fn rng(&self, stage: &str, trial: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(stage_seed(self.cfg.root_seed, stage, trial))
    }

    /// Append a completion marker to the run manifest, creating it (with
    /// the config snapshot) on first use.  No timestamps: manifests from
    /// identical runs are byte-identical.
    fn mark(&self, stage: &str) -> Result<()> {
        let path = self.path(MANIFEST);
        let mut body = if path.exists() {
            std::fs::read_to_string(&path)?
        } else {
            format!(
                "run {}\nroot_seed {}\n\n# config snapshot\n{}\n# completed stages\n",
                self.run_id,
                self.cfg.root_seed,
                self.cfg.dump()
            )
        };
        body.push_str("done ");
        body.push_str(stage);
        body.push('\n');
        std::fs::create_dir_all(&self.out)?;
        std::fs::write(&path, body)?;
        Ok(())
    }

    /// Stages recorded as completed in the manifest, in order.
    pub fn completed_stages(&self) -> Result<Vec<String>> {
        let path = self.path(MANIFEST);
        if !path.exists() {
            return Ok(Vec::new());
        }
        Ok(std::fs::read_to_string(&path)?
            .lines()
            .filter_map(|l| l.strip_prefix("done "))
            .map(|s| s.to_string())
            .collect())
    }

    fn subject(&self) -> SubjectSpec {
        desk_subjects()[self.cfg.subject]
    }

    fn prompt(&self) -> Result<Prompt> {
        Ok(self.subject().prompt(&prompt_vocab())?)
    }

    fn save(&self, ck: &Checkpoint, file: &str) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        ck.save(&self.path(file))
    }

    // -- dataset (de)serialisation -------------------------------------

    fn store_images(ck: &mut Checkpoint, prefix: &str, images: &[Tensor]) -> Result<()> {
        ck.insert_scalar(&format!("{prefix}/count"), images.len() as f64)?;
        for (i, img) in images.iter().enumerate() {
            ck.insert_tensor(&format!("{prefix}/{i:04}"), img)?;
        }
        Ok(())
    }

    fn load_images(ck: &Checkpoint, prefix: &str) -> Result<Vec<Tensor>> {
        let count = ck.get_scalar(&format!("{prefix}/count"))? as usize;
        (0..count)
            .map(|i| {
                let (shape, data) = ck.require(&format!("{prefix}/{i:04}"))?;
                Ok(Tensor::new(data.to_vec(), shape)?)
            })
            .collect()
    }

    fn store_prompts(ck: &mut Checkpoint, prefix: &str, prompts: &[Prompt]) -> Result<()> {
        ck.insert_scalar(&format!("{prefix}/count"), prompts.len() as f64)?;
        for (i, p) in prompts.iter().enumerate() {
            let toks: Vec<f64> = p.tokens.iter().map(|t| *t as f64).collect();
            ck.insert(&format!("{prefix}/{i:04}"), &[toks.len()], toks)?;
        }
        Ok(())
    }

    fn load_prompts(ck: &Checkpoint, prefix: &str) -> Result<Vec<Prompt>> {
        let count = ck.get_scalar(&format!("{prefix}/count"))? as usize;
        (0..count)
            .map(|i| {
                let (_, data) = ck.require(&format!("{prefix}/{i:04}"))?;
                Ok(Prompt::new(data.iter().map(|t| *t as usize).collect()))
            })
            .collect()
    }

    fn store_series(ck: &mut Checkpoint, name: &str, xs: &[f64]) -> Result<()> {
        if xs.is_empty() {
            ck.insert(name, &[0], Vec::new())
        } else {
            ck.insert(name, &[xs.len()], xs.to_vec())
        }
    }

    // -- model (de)serialisation ---------------------------------------

    fn fresh_latent_codec(&self) -> Result<LatentCodec> {
        // The init values are irrelevant: callers restore every parameter.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(LatentCodec::new(
            self.cfg.image_channels,
            self.cfg.image_size,
            &mut rng,
        )?)
    }

    fn load_latent_codec(&self, ck: &Checkpoint) -> Result<LatentCodec> {
        let codec = self.fresh_latent_codec()?;
        let mut params = NamedParams::new();
        codec.params("codec", &mut params);
        ck.restore_params(&params)?;
        Ok(codec)
    }

    fn predictor_config(&self, width: usize) -> PredictorConfig {
        let mut pc = PredictorConfig::desk(prompt_vocab().len(), width);
        pc.latent_size = self.cfg.image_size / 4;
        pc
    }

    fn load_predictor(&self, ck: &Checkpoint, width: usize) -> Result<NoisePredictor> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let predictor = NoisePredictor::new(self.predictor_config(width), &mut rng)?;
        let mut params = NamedParams::new();
        predictor.params("predictor", &mut params);
        ck.restore_params(&params)?;
        Ok(predictor)
    }

    fn gen_model(&self, codec: LatentCodec, predictor: NoisePredictor) -> Result<GenModel> {
        Ok(GenModel {
            codec,
            predictor,
            schedule: self.cfg.schedule()?,
            t_b: self.cfg.t_backward,
        })
    }

    fn load_edge_model(&self) -> Result<GenModel> {
        let codec = self.load_latent_codec(&self.require(CODEC, "pretrain-latent-codec")?)?;
        let predictor = self.load_predictor(
            &self.require(EDGE_PREDICTOR, "train-edge")?,
            self.cfg.edge_width,
        )?;
        self.gen_model(codec, predictor)
    }

    fn fresh_jscc(&self) -> Result<JsccCodec> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        JsccCodec::new(4, self.cfg.image_size / 4, 8, &mut rng).map_err(Into::into)
    }

    fn load_jscc(&self, ck: &Checkpoint) -> Result<JsccCodec> {
        let codec = self.fresh_jscc()?;
        let mut params = NamedParams::new();
        codec.params("jscc", &mut params);
        ck.restore_params(&params)?;
        Ok(codec)
    }

    fn load_gka(&self, ck: &Checkpoint, edge: &GenModel) -> Result<GkaResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let metaword = gsc_core::nn::MetaWord::new(edge.predictor.cfg.attn_dim, &mut rng);
        let mut params = NamedParams::new();
        metaword.params("metaword", &mut params);
        let lora = if ck.get_scalar("has_lora")? != 0.0 {
            let rank = ck.get_scalar("lora_rank")? as usize;
            let set = edge.predictor.make_lora(rank, &mut rng)?;
            set.params("gka_lora", &mut params);
            Some(set)
        } else {
            None
        };
        ck.restore_params(&params)?;
        let (_, mh) = ck.require("metaword_history")?;
        let (_, lh) = ck.require("lora_history")?;
        Ok(GkaResult {
            metaword,
            lora,
            metaword_history: mh.to_vec(),
            lora_history: lh.to_vec(),
        })
    }

    fn rate_mode_code(mode: RateStageMode) -> f64 {
        match mode {
            RateStageMode::VrAlter => 0.0,
            RateStageMode::VrJoint => 1.0,
            RateStageMode::MiAlter => 2.0,
            RateStageMode::MiJoint => 3.0,
        }
    }

    fn rate_mode_from_code(code: f64) -> Result<RateStageMode> {
        match code as i64 {
            0 => Ok(RateStageMode::VrAlter),
            1 => Ok(RateStageMode::VrJoint),
            2 => Ok(RateStageMode::MiAlter),
            3 => Ok(RateStageMode::MiJoint),
            other => Err(HarnessError::Invalid(format!(
                "unknown rate-mode code {other} in checkpoint"
            ))),
        }
    }

    /// Rebuild the rate-stage output (trained base codec, adapter pairs,
    /// loss history) from its checkpoint.
    fn load_rate_stage(&self, ck: &Checkpoint) -> Result<(JsccCodec, RateStageResult)> {
        let codec = self.load_jscc(ck)?;
        let plan = self.cfg.rate_plan()?;
        let mode = Self::rate_mode_from_code(ck.get_scalar("rate_mode")?)?;
        let pair_count = ck.get_scalar("pair_count")? as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pairs = Vec::with_capacity(pair_count);
        let mut params = NamedParams::new();
        for k in 0..pair_count {
            let pair = VariableRateAdapterPair::for_plan(&codec, &plan, &mut rng)?;
            pair.params(&format!("pair{k}"), &mut params);
            pairs.push(pair);
        }
        ck.restore_params(&params)?;
        let (_, epochs) = ck.require("rate_history/epoch")?;
        let (_, rates) = ck.require("rate_history/rate")?;
        let (_, losses) = ck.require("rate_history/loss")?;
        let history = epochs
            .iter()
            .zip(rates)
            .zip(losses)
            .map(|((e, p), l)| RateLossEntry {
                epoch: *e as usize,
                rate_index: *p as usize,
                loss: *l,
            })
            .collect();
        Ok((
            codec,
            RateStageResult {
                pairs,
                mode,
                history,
            },
        ))
    }

    /// Rebuild per-group corrections from the SNR-stage checkpoint.
    fn load_group_lora(
        &self,
        ck: &Checkpoint,
        codec: &JsccCodec,
        pair: &VariableRateAdapterPair,
    ) -> Result<(Vec<Option<GroupLora>>, Vec<Vec<f64>>)> {
        let groups = self.cfg.groups.len();
        let mut out = Vec::with_capacity(groups);
        let mut hist = Vec::with_capacity(groups);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for g in 0..groups {
            let trained = ck.get_scalar(&format!("g{g}/trained"))? != 0.0;
            if trained {
                let lora = GroupLora {
                    codec: codec.make_lora(self.cfg.tka_lora_ranks[g], &mut rng)?,
                    pair: pair.make_lora(self.cfg.tka_lora_ranks[g], &mut rng)?,
                };
                let mut params = NamedParams::new();
                lora.codec.params(&format!("g{g}/codec"), &mut params);
                lora.pair.params(&format!("g{g}/pair"), &mut params);
                ck.restore_params(&params)?;
                out.push(Some(lora));
            } else {
                out.push(None);
            }
            let (_, h) = ck.require(&format!("g{g}/history"))?;
            hist.push(h.to_vec());
        }
        Ok((out, hist))
    }

    /// Assemble the full transmission-alignment result from the rate and
    /// SNR checkpoints.
    fn load_tka(&self) -> Result<TkaResult> {
        let rate_ck = self.require(TKA_RATE, "tka-rate")?;
        let snr_ck = self.require(TKA_SNR, "tka-snr")?;
        let (codec, rate) = self.load_rate_stage(&rate_ck)?;
        let (group_lora, snr_history) = self.load_group_lora(&snr_ck, &codec, &rate.pairs[0])?;
        Ok(TkaResult {
            codec,
            plan: self.cfg.rate_plan()?,
            rate,
            groups: self.cfg.groups.clone(),
            trained_groups: self.cfg.trained_groups.clone(),
            group_lora,
            snr_history,
        })
    }

    fn encode_latents(
        &self,
        codec: &LatentCodec,
        images: &[Tensor],
        rng: &mut impl Rng,
    ) -> Result<Vec<Tensor>> {
        images
            .iter()
            .map(|x| Ok(codec.encode_latent(x, rng)?.stop_gradient()))
            .collect()
    }

    // ------------------------------------------------------------------
    // Stages
    // ------------------------------------------------------------------

    /// Render the cloud-style and edge-style datasets.
    pub fn synth_data(&self) -> Result<()> {
        if self.cfg.image_channels != 1 {
            return Err(HarnessError::Invalid(
                "the procedural renderer emits single-channel images".into(),
            ));
        }
        let vocab = prompt_vocab();
        let specs = desk_subjects();
        for (file, style, count, trial) in [
            (CLOUD_DATA, StyleParams::cloud_style(), self.cfg.cloud_images, 0),
            (EDGE_DATA, StyleParams::edge_style(), self.cfg.edge_images, 1),
        ] {
            let seed = stage_seed(self.cfg.root_seed, "synth-data", trial);
            let data = synth_dataset(&specs, &style, &vocab, count, self.cfg.image_size, seed)?;
            let images: Vec<Tensor> = data.iter().map(|(img, _)| img.clone()).collect();
            let prompts: Vec<Prompt> = data.iter().map(|(_, p)| p.clone()).collect();
            let mut ck = Checkpoint::new();
            ck.insert_scalar("image_size", self.cfg.image_size as f64)?;
            Self::store_images(&mut ck, "img", &images)?;
            Self::store_prompts(&mut ck, "prompt", &prompts)?;
            self.save(&ck, file)?;
        }
        self.mark("synth-data")
    }

    /// Train the shared latent codec on the cloud dataset.
    pub fn pretrain_latent_codec(&self) -> Result<()> {
        let data = self.require(CLOUD_DATA, "synth-data")?;
        let images = Self::load_images(&data, "img")?;
        let mut rng = self.rng("pretrain-latent-codec", 0);
        let codec = LatentCodec::new(self.cfg.image_channels, self.cfg.image_size, &mut rng)?;
        let history = train_latent_codec(&codec, &images, &self.cfg.codec_train_config(), &mut rng)?;
        let mut ck = Checkpoint::new();
        let mut params = NamedParams::new();
        codec.params("codec", &mut params);
        ck.insert_params(&params)?;
        Self::store_series(&mut ck, "history", &history)?;
        self.save(&ck, CODEC)?;
        self.mark("pretrain-latent-codec")
    }

    fn train_predictor_stage(
        &self,
        stage: &str,
        data_file: &str,
        width: usize,
        epochs_lr: gsc_core::genmodel::DiffusionTrainConfig,
        out_file: &str,
    ) -> Result<()> {
        let codec = self.load_latent_codec(&self.require(CODEC, "pretrain-latent-codec")?)?;
        let data = self.require(data_file, "synth-data")?;
        let images = Self::load_images(&data, "img")?;
        let prompts = Self::load_prompts(&data, "prompt")?;
        let mut rng = self.rng(stage, 0);
        let latents = self.encode_latents(&codec, &images, &mut rng)?;
        let predictor = NoisePredictor::new(self.predictor_config(width), &mut rng)?;
        let history = train_noise_predictor(
            &predictor,
            None,
            None,
            &latents,
            &prompts,
            &self.cfg.schedule()?,
            &epochs_lr,
            TrainableSet::Full,
            &mut rng,
        )?;
        let mut ck = Checkpoint::new();
        let mut params = NamedParams::new();
        predictor.params("predictor", &mut params);
        ck.insert_params(&params)?;
        Self::store_series(&mut ck, "history", &history)?;
        self.save(&ck, out_file)?;
        self.mark(stage)
    }

    /// Train the cloud noise predictor on cloud-style data.
    pub fn train_cloud(&self) -> Result<()> {
        self.train_predictor_stage(
            "train-cloud",
            CLOUD_DATA,
            self.cfg.cloud_width,
            self.cfg.cloud_train_config(),
            CLOUD_PREDICTOR,
        )
    }

    /// Train the edge noise predictor on edge-style data.
    pub fn train_edge(&self) -> Result<()> {
        self.train_predictor_stage(
            "train-edge",
            EDGE_DATA,
            self.cfg.edge_width,
            self.cfg.edge_train_config(),
            EDGE_PREDICTOR,
        )
    }

    /// Train the base transmission codec at the reference condition.
    pub fn pretrain_jscc(&self) -> Result<()> {
        let codec = self.load_latent_codec(&self.require(CODEC, "pretrain-latent-codec")?)?;
        let data = self.require(CLOUD_DATA, "synth-data")?;
        let images = Self::load_images(&data, "img")?;
        let mut rng = self.rng("pretrain-jscc", 0);
        let latents = self.encode_latents(&codec, &images, &mut rng)?;
        let jscc = self.fresh_jscc_seeded(&mut rng)?;
        let tka_cfg = self.cfg.to_tka_config()?;
        let base_rate = Rate::new(
            (self.cfg.latent_dim() / jscc.base_symbols()) as u64,
            1,
        )?;
        let condition = gsc_core::channel::ChannelCondition::new(
            self.cfg.gamma0_db,
            self.cfg.omega0_ns / 1e9,
            tka_cfg.j,
            tka_cfg.subcarrier_spacing,
            tka_cfg.covariance,
        )?;
        let tcond = TransmissionCondition::new(base_rate, condition, self.cfg.latent_dim())?;
        let history = train_jscc(
            &jscc,
            &latents,
            &self.cfg.jscc_objective(),
            &tcond,
            &self.cfg.constellation()?,
            &self.cfg.jscc_train_config(),
            &mut rng,
        )?;
        let mut ck = Checkpoint::new();
        let mut params = NamedParams::new();
        jscc.params("jscc", &mut params);
        ck.insert_params(&params)?;
        Self::store_series(&mut ck, "history", &history)?;
        self.save(&ck, JSCC)?;
        self.mark("pretrain-jscc")
    }

    fn fresh_jscc_seeded(&self, rng: &mut impl Rng) -> Result<JsccCodec> {
        JsccCodec::new(4, self.cfg.image_size / 4, 8, rng).map_err(Into::into)
    }

    /// Generation-knowledge alignment: cloud samples, metaword, adapters.
    pub fn gka(&self) -> Result<()> {
        let cloud = self.gen_model(
            self.load_latent_codec(&self.require(CODEC, "pretrain-latent-codec")?)?,
            self.load_predictor(
                &self.require(CLOUD_PREDICTOR, "train-cloud")?,
                self.cfg.cloud_width,
            )?,
        )?;
        let edge = self.load_edge_model()?;
        let prompt = self.prompt()?;
        let root = stage_seed(self.cfg.root_seed, "gka", 0);
        let n = self.cfg.cloud_samples + self.cfg.cloud_test_samples;
        let mut samples = cloud_generate_samples(&cloud, &prompt, n, derive_seed(root, 1))?;
        let test = samples.split_off(self.cfg.cloud_samples);
        let result = run_gka(
            &edge,
            &samples,
            &prompt,
            &self.cfg.to_gka_config(),
            derive_seed(root, 2),
        )?;

        let mut ck = Checkpoint::new();
        let mut params = NamedParams::new();
        result.metaword.params("metaword", &mut params);
        match &result.lora {
            Some(set) => {
                ck.insert_scalar("has_lora", 1.0)?;
                ck.insert_scalar("lora_rank", set.rank as f64)?;
                set.params("gka_lora", &mut params);
            }
            None => {
                ck.insert_scalar("has_lora", 0.0)?;
                ck.insert_scalar("lora_rank", 0.0)?;
            }
        }
        ck.insert_params(&params)?;
        Self::store_series(&mut ck, "metaword_history", &result.metaword_history)?;
        Self::store_series(&mut ck, "lora_history", &result.lora_history)?;
        Self::store_images(&mut ck, "cloud_train", &samples)?;
        Self::store_images(&mut ck, "cloud_test", &test)?;
        self.save(&ck, GKA)?;
        self.mark("gka")
    }

    /// Transmission alignment, stage one: edge latents + shared adapter
    /// pair(s) across the rate plan.
    pub fn tka_rate(&self) -> Result<()> {
        let edge = self.load_edge_model()?;
        let gka = self.load_gka(&self.require(GKA, "gka")?, &edge)?;
        let jscc = self.load_jscc(&self.require(JSCC, "pretrain-jscc")?)?;
        let prompt = self.prompt()?;
        let root = stage_seed(self.cfg.root_seed, "tka-rate", 0);
        let n = self.cfg.edge_samples + self.cfg.edge_test_samples;
        let mut latents = generate_edge_latents(&edge, &gka, &prompt, n, derive_seed(root, 1))?;
        let test = latents.split_off(self.cfg.edge_samples);
        let tka_cfg = self.cfg.to_tka_config()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(root, 2));
        let result = vgsa_rate_stage(
            &jscc,
            &latents,
            &tka_cfg,
            &self.cfg.constellation()?,
            &mut rng,
        )?;

        let mut ck = Checkpoint::new();
        let mut params = NamedParams::new();
        jscc.params("jscc", &mut params);
        for (k, pair) in result.pairs.iter().enumerate() {
            pair.params(&format!("pair{k}"), &mut params);
        }
        ck.insert_params(&params)?;
        ck.insert_scalar("pair_count", result.pairs.len() as f64)?;
        ck.insert_scalar("rate_mode", Self::rate_mode_code(result.mode))?;
        let epochs: Vec<f64> = result.history.iter().map(|e| e.epoch as f64).collect();
        let rates: Vec<f64> = result.history.iter().map(|e| e.rate_index as f64).collect();
        let losses: Vec<f64> = result.history.iter().map(|e| e.loss).collect();
        Self::store_series(&mut ck, "rate_history/epoch", &epochs)?;
        Self::store_series(&mut ck, "rate_history/rate", &rates)?;
        Self::store_series(&mut ck, "rate_history/loss", &losses)?;
        Self::store_images(&mut ck, "edge_train", &latents)?;
        Self::store_images(&mut ck, "edge_test", &test)?;
        self.save(&ck, TKA_RATE)?;
        self.mark("tka-rate")
    }

    /// Transmission alignment, stage two: per-SNR-group corrections over
    /// the frozen stage-one result.
    pub fn tka_snr(&self) -> Result<()> {
        let ck_rate = self.require(TKA_RATE, "tka-rate")?;
        let (jscc, rate) = self.load_rate_stage(&ck_rate)?;
        if !rate.mode.shares_pair() {
            return Err(HarnessError::Invalid(
                "the SNR stage needs a shared adapter pair; re-run tka-rate with a vr-* mode"
                    .into(),
            ));
        }
        let latents = Self::load_images(&ck_rate, "edge_train")?;
        let tka_cfg = self.cfg.to_tka_config()?;
        let mut rng = self.rng("tka-snr", 0);
        let (group_lora, histories) = vgsa_snr_stage(
            &jscc,
            &rate,
            &latents,
            &tka_cfg,
            &self.cfg.constellation()?,
            &mut rng,
        )?;

        let mut ck = Checkpoint::new();
        ck.insert_scalar("group_count", group_lora.len() as f64)?;
        let mut params = NamedParams::new();
        for (g, lora) in group_lora.iter().enumerate() {
            match lora {
                Some(set) => {
                    ck.insert_scalar(&format!("g{g}/trained"), 1.0)?;
                    set.codec.params(&format!("g{g}/codec"), &mut params);
                    set.pair.params(&format!("g{g}/pair"), &mut params);
                }
                None => ck.insert_scalar(&format!("g{g}/trained"), 0.0)?,
            }
            Self::store_series(&mut ck, &format!("g{g}/history"), &histories[g])?;
        }
        ck.insert_params(&params)?;
        self.save(&ck, TKA_SNR)?;
        self.mark("tka-snr")
    }

    fn base_record(&self, stage: &str) -> MetricRecord {
        MetricRecord {
            run_id: self.run_id.clone(),
            stage: stage.to_string(),
            epoch: 0,
            rate_index: None,
            snr_db: f64::NAN,
            delay_spread_ns: f64::NAN,
            metric: String::new(),
            value: 0.0,
            seed: self.cfg.root_seed,
        }
    }

    /// Collect training histories from the stage checkpoints as records.
    fn history_records(&self, records: &mut Vec<MetricRecord>) -> Result<()> {
        let gka = self.require(GKA, "gka")?;
        for (name, stage) in [("metaword_history", "metaword"), ("lora_history", "gka_lora")] {
            let (_, hist) = gka.require(name)?;
            for (e, loss) in hist.iter().enumerate() {
                let mut r = self.base_record(stage);
                r.epoch = e;
                r.metric = "loss".into();
                r.value = *loss;
                records.push(r);
            }
        }
        let rate_ck = self.require(TKA_RATE, "tka-rate")?;
        let (_, epochs) = rate_ck.require("rate_history/epoch")?;
        let (_, rates) = rate_ck.require("rate_history/rate")?;
        let (_, losses) = rate_ck.require("rate_history/loss")?;
        for ((e, p), l) in epochs.iter().zip(rates).zip(losses) {
            let mut r = self.base_record("rate_stage");
            r.epoch = *e as usize;
            r.rate_index = Some(*p as usize);
            r.metric = "loss".into();
            r.value = *l;
            records.push(r);
        }
        let snr_ck = self.require(TKA_SNR, "tka-snr")?;
        let groups = snr_ck.get_scalar("group_count")? as usize;
        for g in 0..groups {
            let (_, hist) = snr_ck.require(&format!("g{g}/history"))?;
            for (e, loss) in hist.iter().enumerate() {
                let mut r = self.base_record(&format!("snr_stage_g{g}"));
                r.epoch = e;
                r.metric = "loss".into();
                r.value = *loss;
                records.push(r);
            }
        }
        Ok(())
    }

    /// Monte-Carlo received-quality grid plus generation-alignment scores;
    /// writes `eval.csv` and the PSNR chart.
    ///
    /// Per trial one channel realization (gains + unit-scaled noise) is
    /// drawn and reused across every SNR — common random numbers, so the
    /// PSNR-vs-SNR comparison is paired rather than independently noisy.
    pub fn eval(&self, full_grid: bool) -> Result<()> {
        let codec = self.load_latent_codec(&self.require(CODEC, "pretrain-latent-codec")?)?;
        let tka = self.load_tka()?;
        let rate_ck = self.require(TKA_RATE, "tka-rate")?;
        let test_latents = Self::load_images(&rate_ck, "edge_test")?;
        if test_latents.is_empty() {
            return Err(HarnessError::Invalid(
                "no held-out edge latents; set edge_test_samples ≥ 1".into(),
            ));
        }
        let constellation = self.cfg.constellation()?;
        let tka_cfg = self.cfg.to_tka_config()?;
        let mut records = Vec::new();
        self.history_records(&mut records)?;

        // Reference images the channel outputs are judged against.
        let references: Vec<Tensor> = test_latents
            .iter()
            .map(|z| Ok::<_, HarnessError>(codec.decode_latent(z)?.stop_gradient()))
            .collect::<Result<_>>()?;

        let spreads_ns: Vec<f64> = if full_grid {
            self.cfg.delay_spreads_ns.clone()
        } else {
            vec![self.cfg.omega0_ns]
        };
        let plan = &tka.plan;
        for (wi, spread_ns) in spreads_ns.iter().enumerate() {
            // Gain statistics do not depend on SNR, so one sampler per
            // delay spread serves every γ.
            let ref_cond = tka_cfg.condition(self.cfg.snrs_db[0], spread_ns / 1e9)?;
            let sampler = ChannelSampler::new(&ref_cond)?;
            let p_ref = ref_cond.noise_power();
            let mut acc =
                vec![vec![(0.0f64, 0.0f64); self.cfg.snrs_db.len()]; plan.len()];
            for trial in 0..self.cfg.eval_trials {
                let mut rng = self.rng("eval", (wi * self.cfg.eval_trials + trial) as u64);
                let frozen_ref =
                    FrozenChannel::draw(&sampler, plan.k_max(), &mut rng);
                let z = &test_latents[trial % test_latents.len()];
                let x_ref = &references[trial % references.len()];
                for (si, snr) in self.cfg.snrs_db.iter().enumerate() {
                    let p_snr = tka_cfg
                        .condition(*snr, spread_ns / 1e9)?
                        .noise_power();
                    let scale = (p_snr / p_ref).sqrt();
                    for p in 0..plan.len() {
                        let k = plan.symbols(p)?;
                        let frozen = FrozenChannel {
                            h: frozen_ref.h.clone(),
                            noise: frozen_ref.noise[..k]
                                .iter()
                                .map(|n| n * scale)
                                .collect(),
                            noise_power: p_snr,
                        };
                        let z_hat =
                            transmit_latent(&tka, z, p, *snr, &constellation, &frozen)?;
                        let x_hat = codec.decode_latent(&z_hat)?.stop_gradient();
                        acc[p][si].0 += psnr(x_ref, &x_hat, 1.0)?;
                        acc[p][si].1 += latent_mse(z, &z_hat)?;
                    }
                }
            }
            let n = self.cfg.eval_trials as f64;
            for p in 0..plan.len() {
                for (si, snr) in self.cfg.snrs_db.iter().enumerate() {
                    for (metric, total) in
                        [("psnr", acc[p][si].0), ("latent_mse", acc[p][si].1)]
                    {
                        let mut r = self.base_record("eval");
                        r.rate_index = Some(p);
                        r.snr_db = *snr;
                        r.delay_spread_ns = *spread_ns;
                        r.metric = metric.into();
                        r.value = total / n;
                        records.push(r);
                    }
                }
            }
        }

        // Generation alignment: edge-generated images against the held-out
        // cloud samples, scored by both probes.
        let gka_ck = self.require(GKA, "gka")?;
        let cloud_test = Self::load_images(&gka_ck, "cloud_test")?;
        if !cloud_test.is_empty() {
            let visual = ProbeExtractor::Visual(VisualProbe::new(
                self.cfg.image_channels,
                VisualProbe::DEFAULT_SEED,
            ));
            let semantic = ProbeExtractor::Semantic(SemanticProbe::new(&codec));
            let stats = align_eval(&references, &cloud_test, &visual, &semantic)?;
            let mut template = self.base_record("align");
            template.metric = "probe".into();
            records.extend(stats.records(&template));
        }

        export_csv(&records, &self.path(EVAL_CSV))?;
        export_svg_plot(&records, &PlotSpec::psnr_vs_snr(), &self.path(PSNR_SVG))?;
        self.mark("eval")
    }

    /// One full generate→transmit→reconstruct round printed to stdout.
    pub fn transmit_demo(&self) -> Result<String> {
        let edge = self.load_edge_model()?;
        let gka = self.load_gka(&self.require(GKA, "gka")?, &edge)?;
        let tka = self.load_tka()?;
        let prompt = self.prompt()?;
        let tka_cfg = self.cfg.to_tka_config()?;
        let p = tka.plan.min_rate_index();
        let rate = tka.plan.rate(p)?;
        let condition =
            tka_cfg.condition(self.cfg.gamma0_db, self.cfg.omega0_ns / 1e9)?;
        let tcond = TransmissionCondition::new(rate, condition, self.cfg.latent_dim())?;
        let root = stage_seed(self.cfg.root_seed, "transmit-demo", 0);
        let x_hat = gsc_core::deka::gsc_forward(
            &edge,
            &gka,
            &tka,
            &prompt,
            &tcond,
            &self.cfg.constellation()?,
            derive_seed(root, 1),
            derive_seed(root, 2),
        )?;
        let x_ref = edge.generate_image(
            &prompt,
            Some(&gka.metaword),
            gka.lora.as_ref(),
            derive_seed(root, 1),
        )?;
        let quality = psnr(&x_ref, &x_hat, 1.0)?;
        let summary = format!(
            "subject `{}` | rate τ={rate} ({} symbols) | {} dB, {} ns | psnr {:.2} dB",
            self.subject().prompt_text(),
            tka.plan.symbols(p)?,
            self.cfg.gamma0_db,
            self.cfg.omega0_ns,
            quality,
        );
        self.mark("transmit-demo")?;
        Ok(summary)
    }

    /// Re-render charts from `eval.csv`.
    pub fn plot(&self) -> Result<()> {
        let path = self.path(EVAL_CSV);
        if !path.exists() {
            return Err(HarnessError::MissingStage {
                stage: "eval".into(),
            });
        }
        let records = parse_csv(&std::fs::read_to_string(&path)?)?;
        export_svg_plot(&records, &PlotSpec::psnr_vs_snr(), &self.path(PSNR_SVG))?;
        if records.iter().any(|r| r.metric == "loss") {
            let spec = PlotSpec {
                title: "Training loss by stage".into(),
                metric: "loss".into(),
                x: XAxis::Epoch,
                series: SeriesKey::Stage,
                x_label: "epoch".into(),
                y_label: "loss".into(),
            };
            export_svg_plot(&records, &spec, &self.path(LOSS_SVG))?;
        }
        self.mark("plot")
    }
}

/// Run every stage in order; the standard full experiment.
pub fn run_all(pipeline: &Pipeline) -> Result<()> {
    pipeline.synth_data()?;
    pipeline.pretrain_latent_codec()?;
    pipeline.train_cloud()?;
    pipeline.train_edge()?;
    pipeline.pretrain_jscc()?;
    pipeline.gka()?;
    pipeline.tka_rate()?;
    pipeline.tka_snr()?;
    pipeline.eval(false)?;
    Ok(())
}
