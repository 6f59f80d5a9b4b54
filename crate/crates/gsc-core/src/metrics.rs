//! Evaluation metrics: PSNR, latent MSE, and probe-based alignment scores.
//!
//! The two alignment probes stand in for large pretrained feature
//! extractors while keeping the two-score structure of the alignment
//! objective: the visual probe is a frozen randomly initialized conv stack
//! over pixels (structure-sensitive), the semantic probe reads the cloud
//! codec's posterior mean (semantics-sensitive). Absolute score values are
//! only comparable within one probe instance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GscError, Result};
use crate::genmodel::LatentCodec;
use crate::nn::Conv2dLayer;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Scalar metrics
// ---------------------------------------------------------------------------

fn mean_squared_diff(a: &Tensor, b: &Tensor, op: &'static str) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(GscError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(a.with_data(|x| {
        b.with_data(|y| {
            x.iter().zip(y).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / x.len() as f64
        })
    }))
}

/// Peak signal-to-noise ratio in decibels: `10·log10(peak²/MSE)`, capped at
/// 99 dB (the cap also covers exact matches, where the ratio diverges).
pub fn psnr(x: &Tensor, x_hat: &Tensor, peak: f64) -> Result<f64> {
    if peak <= 0.0 {
        return Err(GscError::invalid("psnr", "peak must be > 0"));
    }
    let mse = mean_squared_diff(x, x_hat, "psnr")?;
    if mse < 1e-10 {
        return Ok(99.0);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(99.0))
}

/// Mean squared elementwise difference between two latents.
pub fn latent_mse(z: &Tensor, z_hat: &Tensor) -> Result<f64> {
    mean_squared_diff(z, z_hat, "latent_mse")
}

/// Cosine similarity of two feature vectors; zero-norm features carry no
/// direction and are rejected.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(GscError::ShapeMismatch {
            op: "cosine",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(u, v)| u * v).sum();
    let na: f64 = a.iter().map(|u| u * u).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(GscError::invalid("cosine", "zero-norm feature vector"));
    }
    Ok(dot / (na * nb))
}

// ---------------------------------------------------------------------------
// Probes
// ---------------------------------------------------------------------------

/// Frozen random conv stack over pixels with global average pooling.
pub struct VisualProbe {
    img_channels: usize,
    c1: Conv2dLayer,
    c2: Conv2dLayer,
    c3: Conv2dLayer,
}

impl VisualProbe {
    /// Seed used by every desk experiment so scores are comparable across
    /// runs.
    pub const DEFAULT_SEED: u64 = 17;

    pub fn new(img_channels: usize, seed: u64) -> VisualProbe {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probe = VisualProbe {
            img_channels,
            c1: Conv2dLayer::new(4, img_channels, 3, 2, 1, &mut rng),
            c2: Conv2dLayer::new(8, 4, 3, 2, 1, &mut rng),
            c3: Conv2dLayer::new(16, 8, 3, 2, 1, &mut rng),
        };
        for layer in [&probe.c1, &probe.c2, &probe.c3] {
            layer.kernel.set_requires_grad(false);
            layer.bias.set_requires_grad(false);
        }
        probe
    }

    /// Channel-pooled feature vector (16 dimensions).
    pub fn features(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.shape().len() != 3 || x.shape()[0] != self.img_channels {
            return Err(GscError::invalid(
                "visual_probe",
                format!("expected [{},H,W] image, got {:?}", self.img_channels, x.shape()),
            ));
        }
        let h = self.c1.forward(x)?.tanh()?;
        let h = self.c2.forward(&h)?.tanh()?;
        let h = self.c3.forward(&h)?.tanh()?;
        Ok(global_average_pool(&h))
    }
}

fn global_average_pool(t: &Tensor) -> Vec<f64> {
    let shape = t.shape().to_vec();
    let (c, spatial) = (shape[0], shape[1] * shape[2]);
    t.with_data(|d| {
        (0..c)
            .map(|ch| d[ch * spatial..(ch + 1) * spatial].iter().sum::<f64>() / spatial as f64)
            .collect()
    })
}

/// Probe reading the cloud codec's posterior mean as a feature vector.
/// Holds a detached copy, so later codec training does not move the scores.
pub struct SemanticProbe {
    codec: LatentCodec,
}

impl SemanticProbe {
    pub fn new(codec: &LatentCodec) -> SemanticProbe {
        SemanticProbe {
            codec: codec.frozen_copy(),
        }
    }

    /// Flattened latent mean of the image.
    pub fn features(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.codec.encode_mean(x)?.to_vec())
    }
}

/// Either alignment probe behind one feature interface.
pub enum ProbeExtractor {
    Visual(VisualProbe),
    Semantic(SemanticProbe),
}

impl ProbeExtractor {
    pub fn features(&self, x: &Tensor) -> Result<Vec<f64>> {
        match self {
            ProbeExtractor::Visual(p) => p.features(x),
            ProbeExtractor::Semantic(p) => p.features(x),
        }
    }
}

/// Cosine similarity between the probe features of two images.
pub fn probe_score(x_a: &Tensor, x_b: &Tensor, probe: &ProbeExtractor) -> Result<f64> {
    cosine(&probe.features(x_a)?, &probe.features(x_b)?)
}

// ---------------------------------------------------------------------------
// Alignment evaluation
// ---------------------------------------------------------------------------

/// All-pairs alignment statistics of a received set against a reference
/// set, per probe.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignStats {
    pub vis_mean: f64,
    pub vis_std: f64,
    pub sem_mean: f64,
    pub sem_std: f64,
    /// Number of (received, reference) pairs scored.
    pub pairs: usize,
}

impl AlignStats {
    /// Combined alignment score: sum of the two probe means.
    pub fn total(&self) -> f64 {
        self.vis_mean + self.sem_mean
    }

    /// Expand into one record per probe/statistic, inheriting run context
    /// from the template.
    pub fn records(&self, template: &MetricRecord) -> Vec<MetricRecord> {
        [
            ("s_vis_mean", self.vis_mean),
            ("s_vis_std", self.vis_std),
            ("s_sem_mean", self.sem_mean),
            ("s_sem_std", self.sem_std),
        ]
        .into_iter()
        .map(|(name, value)| MetricRecord {
            metric: name.to_string(),
            value,
            ..template.clone()
        })
        .collect()
    }
}

fn mean_std(scores: &[f64]) -> (f64, f64) {
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    (mean, var.max(0.0).sqrt())
}

/// Score every (received, reference) pair under both probes and aggregate
/// mean/std per probe. One call covers one subject; cross-subject
/// aggregation is the caller's policy.
pub fn align_eval(
    received: &[Tensor],
    reference: &[Tensor],
    visual: &ProbeExtractor,
    semantic: &ProbeExtractor,
) -> Result<AlignStats> {
    if received.is_empty() || reference.is_empty() {
        return Err(GscError::invalid("align_eval", "empty image set"));
    }
    let mut vis = Vec::with_capacity(received.len() * reference.len());
    let mut sem = Vec::with_capacity(vis.capacity());
    for r in received {
        for c in reference {
            vis.push(probe_score(r, c, visual)?);
            sem.push(probe_score(r, c, semantic)?);
        }
    }
    let (vis_mean, vis_std) = mean_std(&vis);
    let (sem_mean, sem_std) = mean_std(&sem);
    Ok(AlignStats {
        vis_mean,
        vis_std,
        sem_mean,
        sem_std,
        pairs: vis.len(),
    })
}

// ---------------------------------------------------------------------------
// Metric records
// ---------------------------------------------------------------------------

/// One experiment measurement with full run context.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub run_id: String,
    pub stage: String,
    pub epoch: usize,
    /// Index into the rate plan, when the measurement is rate-specific.
    pub rate_index: Option<usize>,
    pub snr_db: f64,
    pub delay_spread_ns: f64,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

/// Append-only stream of metric records.
#[derive(Default, Clone, Debug)]
pub struct MetricLog {
    records: Vec<MetricRecord>,
}

impl MetricLog {
    pub fn new() -> MetricLog {
        MetricLog::default()
    }

    pub fn push(&mut self, record: MetricRecord) {
        self.records.push(record);
    }

    pub fn extend(&mut self, records: impl IntoIterator<Item = MetricRecord>) {
        self.records.extend(records);
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
