//! Neural building blocks: dense and convolution layers, embeddings,
//! single-head cross-attention, low-rank adapters, and the Adam optimizer.
//!
//! Layers are plain structs over [`Tensor`] parameters. Models collect their
//! parameters into a [`NamedParams`] list (name → tensor handle); the
//! optimizer reads gradients off those handles after `backward` and updates
//! the buffers in place.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{GscError, Result};
use crate::tensor::Tensor;

/// Ordered list of (name, parameter) pairs for optimization/serialization.
pub type NamedParams = Vec<(String, Tensor)>;

/// Gaussian-initialized trainable leaf.
pub fn gauss_param(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let t = Tensor::randn(shape, std, rng);
    Tensor::param(t.to_vec(), shape).expect("finite")
}

/// Zero-initialized trainable leaf.
pub fn zeros_param(shape: &[usize]) -> Tensor {
    Tensor::param(Tensor::zeros(shape).to_vec(), shape).expect("finite")
}

// ---------------------------------------------------------------------------
// Dense layer and LoRA
// ---------------------------------------------------------------------------

/// Affine map `x ↦ x·Wᵀ + b` for row-stacked inputs `[n, in]`.
#[derive(Clone)]
pub struct DenseLayer {
    pub weight: Tensor, // [out, in]
    pub bias: Tensor,   // [out]
}

impl DenseLayer {
    pub fn new(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> DenseLayer {
        DenseLayer {
            weight: gauss_param(&[out_dim, in_dim], 1.0 / (in_dim as f64).sqrt(), rng),
            bias: zeros_param(&[out_dim]),
        }
    }

    /// Identity weights, zero bias (requires square dims).
    pub fn identity(dim: usize) -> DenseLayer {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        DenseLayer {
            weight: Tensor::param(w, &[dim, dim]).expect("finite"),
            bias: zeros_param(&[dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_adapted(x, None)
    }

    /// Forward pass with an optional low-rank weight correction B·A.
    pub fn forward_adapted(&self, x: &Tensor, adapter: Option<&LoraAdapter>) -> Result<Tensor> {
        let w = match adapter {
            None => self.weight.clone(),
            Some(ad) => self.weight.add(&ad.delta()?)?,
        };
        x.matmul(&w.transpose()?)?.add(&self.bias)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Low-rank additive weight correction ΔW = B·A.
///
/// `B` starts at zero so a freshly attached adapter leaves the wrapped layer
/// bit-identical; `A` starts Gaussian so training can break symmetry.
#[derive(Clone)]
pub struct LoraAdapter {
    pub b: Tensor, // [out, rank]
    pub a: Tensor, // [rank, in]
    pub rank: usize,
}

impl LoraAdapter {
    pub fn new(out_dim: usize, in_dim: usize, rank: usize, rng: &mut impl Rng) -> Result<LoraAdapter> {
        if rank == 0 || rank > out_dim.min(in_dim) {
            return Err(GscError::invalid(
                "lora",
                format!("rank {rank} outside 1..={}", out_dim.min(in_dim)),
            ));
        }
        Ok(LoraAdapter {
            b: zeros_param(&[out_dim, rank]),
            a: gauss_param(&[rank, in_dim], 0.02, rng),
            rank,
        })
    }

    /// The dense correction B·A, shape `[out, in]`.
    pub fn delta(&self) -> Result<Tensor> {
        self.b.matmul(&self.a)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams) {
        out.push((format!("{prefix}.b"), self.b.clone()));
        out.push((format!("{prefix}.a"), self.a.clone()));
    }
}

/// Dense layer forward with a low-rank correction: `(W + B·A)·x + bias`.
pub fn lora_apply(layer: &DenseLayer, adapter: &LoraAdapter, x: &Tensor) -> Result<Tensor> {
    if adapter.b.shape()[0] != layer.out_dim() || adapter.a.shape()[1] != layer.in_dim() {
        return Err(GscError::ShapeMismatch {
            op: "lora_apply",
            lhs: layer.weight.shape().to_vec(),
            rhs: vec![adapter.b.shape()[0], adapter.a.shape()[1]],
        });
    }
    layer.forward_adapted(x, Some(adapter))
}

// ---------------------------------------------------------------------------
// Convolution layers
// ---------------------------------------------------------------------------

/// 2-D convolution layer over `[C_in, H, W]` feature maps.
#[derive(Clone)]
pub struct Conv2dLayer {
    pub kernel: Tensor, // [C_out, C_in, kh, kw]
    pub bias: Tensor,   // [C_out]
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new(
        cout: usize,
        cin: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Conv2dLayer {
        let fan_in = (cin * ksize * ksize) as f64;
        Conv2dLayer {
            kernel: gauss_param(&[cout, cin, ksize, ksize], 1.0 / fan_in.sqrt(), rng),
            bias: zeros_param(&[cout]),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_adapted(x, None)
    }

    /// Forward with an optional low-rank correction on the kernel, viewed as
    /// the 2-D matrix `[C_out, C_in·kh·kw]`.
    pub fn forward_adapted(&self, x: &Tensor, adapter: Option<&LoraAdapter>) -> Result<Tensor> {
        let kernel = match adapter {
            None => self.kernel.clone(),
            Some(ad) => {
                let ks = self.kernel.shape().to_vec();
                let flat = self.kernel.reshape(&[ks[0], ks[1] * ks[2] * ks[3]])?;
                flat.add(&ad.delta()?)?.reshape(&ks)?
            }
        };
        let y = x.conv2d(&kernel, self.stride, self.pad)?;
        let cout = self.bias.shape()[0];
        y.add(&self.bias.reshape(&[cout, 1, 1])?)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams) {
        out.push((format!("{prefix}.kernel"), self.kernel.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }

    /// Detached deep copy: fresh non-trainable buffers with the same values,
    /// unaffected by later updates to this layer.
    pub fn frozen_copy(&self) -> Conv2dLayer {
        Conv2dLayer {
            kernel: Tensor::new(self.kernel.to_vec(), self.kernel.shape()).expect("finite"),
            bias: Tensor::new(self.bias.to_vec(), self.bias.shape()).expect("finite"),
            stride: self.stride,
            pad: self.pad,
        }
    }
}

/// Transposed 2-D convolution layer (upsampling path).
#[derive(Clone)]
pub struct ConvT2dLayer {
    pub kernel: Tensor, // [C_in, C_out, kh, kw]
    pub bias: Tensor,   // [C_out]
    pub stride: usize,
    pub pad: usize,
}

impl ConvT2dLayer {
    pub fn new(
        cin: usize,
        cout: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> ConvT2dLayer {
        let fan_in = (cin * ksize * ksize) as f64;
        ConvT2dLayer {
            kernel: gauss_param(&[cin, cout, ksize, ksize], 1.0 / fan_in.sqrt(), rng),
            bias: zeros_param(&[cout]),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_adapted(x, None)
    }

    /// Forward with an optional low-rank correction on the kernel, viewed as
    /// the 2-D matrix `[C_in, C_out·kh·kw]`.
    pub fn forward_adapted(&self, x: &Tensor, adapter: Option<&LoraAdapter>) -> Result<Tensor> {
        let kernel = match adapter {
            None => self.kernel.clone(),
            Some(ad) => {
                let ks = self.kernel.shape().to_vec();
                let flat = self.kernel.reshape(&[ks[0], ks[1] * ks[2] * ks[3]])?;
                flat.add(&ad.delta()?)?.reshape(&ks)?
            }
        };
        let y = x.conv2d_transpose(&kernel, self.stride, self.pad)?;
        let cout = self.bias.shape()[0];
        y.add(&self.bias.reshape(&[cout, 1, 1])?)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams) {
        out.push((format!("{prefix}.kernel"), self.kernel.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }

    /// Detached deep copy; see [`Conv2dLayer::frozen_copy`].
    pub fn frozen_copy(&self) -> ConvT2dLayer {
        ConvT2dLayer {
            kernel: Tensor::new(self.kernel.to_vec(), self.kernel.shape()).expect("finite"),
            bias: Tensor::new(self.bias.to_vec(), self.bias.shape()).expect("finite"),
            stride: self.stride,
            pad: self.pad,
        }
    }
}

// ---------------------------------------------------------------------------
// Vocabulary, embeddings, metaword
// ---------------------------------------------------------------------------

/// Closed toy vocabulary with stable indices.
#[derive(Clone, Debug)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new<S: AsRef<str>>(words: &[S]) -> Vocab {
        let words: Vec<String> = words.iter().map(|w| w.as_ref().to_string()).collect();
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, i: usize) -> Option<&str> {
        self.words.get(i).map(|s| s.as_str())
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }
}

/// Whitespace-split a prompt into vocabulary indices.
pub fn tokenize(text: &str, vocab: &Vocab) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|w| {
            vocab.get(w).ok_or_else(|| GscError::UnknownWord {
                word: w.to_string(),
            })
        })
        .collect()
}

/// Inverse of [`tokenize`] up to whitespace normalization.
pub fn detokenize(tokens: &[usize], vocab: &Vocab) -> Result<String> {
    let words: Result<Vec<&str>> = tokens
        .iter()
        .map(|&i| {
            vocab
                .word(i)
                .ok_or_else(|| GscError::invalid("detokenize", format!("token {i} out of vocab")))
        })
        .collect();
    Ok(words?.join(" "))
}

/// Trainable token-embedding matrix `[vocab, dim]`.
#[derive(Clone)]
pub struct EmbeddingTable {
    pub table: Tensor,
}

impl EmbeddingTable {
    pub fn new(vocab_size: usize, dim: usize, rng: &mut impl Rng) -> EmbeddingTable {
        EmbeddingTable {
            table: gauss_param(&[vocab_size, dim], 0.02, rng),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    /// Rows of the table for the given token sequence, `[L, dim]`.
    ///
    /// Implemented as a one-hot matrix product so gradients reach the table.
    pub fn embed(&self, tokens: &[usize]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(GscError::invalid("embed", "empty token sequence"));
        }
        let vocab = self.vocab_size();
        let mut onehot = vec![0.0; tokens.len() * vocab];
        for (row, &t) in tokens.iter().enumerate() {
            if t >= vocab {
                return Err(GscError::invalid(
                    "embed",
                    format!("token {t} out of vocab size {vocab}"),
                ));
            }
            onehot[row * vocab + t] = 1.0;
        }
        let sel = Tensor::new(onehot, &[tokens.len(), vocab])?;
        sel.matmul(&self.table)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams) {
        out.push((format!("{prefix}.table"), self.table.clone()));
    }
}

/// Synthetic prompt token with a trainable embedding.
#[derive(Clone)]
pub struct MetaWord {
    pub embedding: Tensor, // [dim]
}

impl MetaWord {
    /// Gaussian init with variance 0.02.
    pub fn new(dim: usize, rng: &mut impl Rng) -> MetaWord {
        MetaWord {
            embedding: gauss_param(&[dim], 0.02f64.sqrt(), rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.embedding.shape()[0]
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams) {
        out.push((format!("{prefix}.embedding"), self.embedding.clone()));
    }
}

/// Concatenate the metaword in front of an embedded prompt: `[L+1, dim]`.
///
/// `prompt` is `None` for an empty prompt; the result is then just the
/// metaword as a length-1 sequence.
pub fn prepend_metaword(mu: &MetaWord, prompt: Option<&Tensor>) -> Result<Tensor> {
    let head = mu.embedding.reshape(&[1, mu.dim()])?;
    match prompt {
        None => Ok(head),
        Some(p) => {
            if p.shape().len() != 2 || p.shape()[1] != mu.dim() {
                return Err(GscError::ShapeMismatch {
                    op: "prepend_metaword",
                    lhs: vec![mu.dim()],
                    rhs: p.shape().to_vec(),
                });
            }
            Tensor::concat(&[&head, p], 0)
        }
    }
}

// ---------------------------------------------------------------------------
// Timestep embedding
// ---------------------------------------------------------------------------

/// Sinusoidal position code for a diffusion step: interleaved
/// `sin(t·ω_i), cos(t·ω_i)` at geometrically spaced frequencies
/// `ω_i = 10000^{-2i/dim}`.
pub fn sinusoidal_embed(t: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(GscError::invalid("sinusoidal_embed", format!("dim {dim} must be even")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        let angle = t as f64 * freq;
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Tensor::new(out, &[dim])
}

// ---------------------------------------------------------------------------
// Cross-attention
// ---------------------------------------------------------------------------

/// Single-head cross-attention block with learned Q/K/V/output projections.
#[derive(Clone)]
pub struct CrossAttention {
    pub wq: DenseLayer,
    pub wk: DenseLayer,
    pub wv: DenseLayer,
    pub wo: DenseLayer,
}

impl CrossAttention {
    pub fn new(dim: usize, rng: &mut impl Rng) -> CrossAttention {
        CrossAttention {
            wq: DenseLayer::new(dim, dim, rng),
            wk: DenseLayer::new(dim, dim, rng),
            wv: DenseLayer::new(dim, dim, rng),
            wo: DenseLayer::new(dim, dim, rng),
        }
    }

    /// All projections identity (for analytic tests).
    pub fn identity(dim: usize) -> CrossAttention {
        CrossAttention {
            wq: DenseLayer::identity(dim),
            wk: DenseLayer::identity(dim),
            wv: DenseLayer::identity(dim),
            wo: DenseLayer::identity(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.out_dim()
    }

    /// `softmax(Q·Kᵀ/√d)·V` with queries `[n, d]` attending over a context
    /// sequence `[m, d]` that supplies keys and values.
    pub fn forward(&self, queries: &Tensor, context: &Tensor) -> Result<Tensor> {
        let d = self.dim();
        if queries.shape().len() != 2
            || context.shape().len() != 2
            || queries.shape()[1] != d
            || context.shape()[1] != d
        {
            return Err(GscError::ShapeMismatch {
                op: "cross_attention",
                lhs: queries.shape().to_vec(),
                rhs: context.shape().to_vec(),
            });
        }
        let q = self.wq.forward(queries)?;
        let k = self.wk.forward(context)?;
        let v = self.wv.forward(context)?;
        let scores = q.matmul(&k.transpose()?)?.scale(1.0 / (d as f64).sqrt())?;
        let attn = scores.softmax_last()?;
        self.wo.forward(&attn.matmul(&v)?)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams) {
        self.wq.params(&format!("{prefix}.wq"), out);
        self.wk.params(&format!("{prefix}.wk"), out);
        self.wv.params(&format!("{prefix}.wv"), out);
        self.wo.params(&format!("{prefix}.wo"), out);
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with bias correction. Moment buffers are keyed by parameter id and
/// created lazily, so one optimizer can drive any parameter subset.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: HashMap<u64, Vec<f64>>,
    v: HashMap<u64, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over the given parameters. Parameters without an
    /// accumulated gradient are treated as zero-gradient (their moments
    /// still decay). Gradients are cleared afterwards.
    pub fn step(&mut self, params: &NamedParams) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params {
            let grad = p.grad().unwrap_or_else(|| vec![0.0; p.len()]);
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(GscError::NanGradient {
                    param: name.clone(),
                });
            }
            let m = self.m.entry(p.id()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v.entry(p.id()).or_insert_with(|| vec![0.0; p.len()]);
            let mut data = p.to_vec();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.set_data(data)?;
            p.clear_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn fresh_lora_is_bit_identical() {
        let mut r = rng(7);
        let layer = DenseLayer::new(5, 4, &mut r);
        let adapter = LoraAdapter::new(5, 4, 2, &mut r).unwrap();
        let x = Tensor::randn(&[3, 4], 1.0, &mut r);
        let plain = layer.forward(&x).unwrap();
        let adapted = lora_apply(&layer, &adapter, &x).unwrap();
        let (a, b) = (plain.to_vec(), adapted.to_vec());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn lora_identity_plus_rank_one() {
        // W = I₂, B·A = [[0,1],[0,0]] → (W+BA)·(1,1)ᵀ = (2,1)ᵀ.
        let layer = DenseLayer::identity(2);
        let adapter = LoraAdapter {
            b: Tensor::param(vec![1.0, 0.0], &[2, 1]).unwrap(),
            a: Tensor::param(vec![0.0, 1.0], &[1, 2]).unwrap(),
            rank: 1,
        };
        let x = Tensor::new(vec![1.0, 1.0], &[1, 2]).unwrap();
        let y = lora_apply(&layer, &adapter, &x).unwrap();
        assert_eq!(y.to_vec(), vec![2.0, 1.0]);
    }

    #[test]
    fn lora_matches_dense_oracle() {
        let mut r = rng(11);
        let layer = DenseLayer::new(6, 3, &mut r);
        let mut adapter = LoraAdapter::new(6, 3, 2, &mut r).unwrap();
        adapter.b = Tensor::param(Tensor::randn(&[6, 2], 0.5, &mut r).to_vec(), &[6, 2]).unwrap();
        let x = Tensor::randn(&[2, 3], 1.0, &mut r);

        let via_adapter = lora_apply(&layer, &adapter, &x).unwrap();

        // Oracle: materialize W' = W + B·A by hand and run a plain layer.
        let w = layer.weight.to_vec();
        let b = adapter.b.to_vec();
        let a = adapter.a.to_vec();
        let mut wp = w.clone();
        for i in 0..6 {
            for j in 0..3 {
                for k in 0..2 {
                    wp[i * 3 + j] += b[i * 2 + k] * a[k * 3 + j];
                }
            }
        }
        let oracle = DenseLayer {
            weight: Tensor::param(wp, &[6, 3]).unwrap(),
            bias: layer.bias.clone(),
        };
        let expect = oracle.forward(&x).unwrap();
        for (u, v) in via_adapter.to_vec().iter().zip(expect.to_vec()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn lora_rank_bounds() {
        let mut r = rng(1);
        assert!(LoraAdapter::new(4, 4, 0, &mut r).is_err());
        assert!(LoraAdapter::new(4, 4, 5, &mut r).is_err());
        assert!(LoraAdapter::new(4, 4, 4, &mut r).is_ok());
    }

    #[test]
    fn sinusoidal_step_zero() {
        let e = sinusoidal_embed(0, 8).unwrap();
        let v = e.to_vec();
        for i in 0..4 {
            assert_eq!(v[2 * i], 0.0);
            assert_eq!(v[2 * i + 1], 1.0);
        }
    }

    #[test]
    fn sinusoidal_steps_distinct_and_bounded() {
        let dim = 16;
        let e1 = sinusoidal_embed(1, dim).unwrap().to_vec();
        let e2 = sinusoidal_embed(2, dim).unwrap().to_vec();
        // Low-frequency (early) components must all move between t=1 and t=2.
        for i in 0..dim / 2 {
            assert_ne!(e1[2 * i], e2[2 * i], "sin component {i}");
        }
        let norm: f64 = e1.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm.is_finite() && norm <= (dim as f64).sqrt());
    }

    #[test]
    fn sinusoidal_odd_dim_rejected() {
        assert!(sinusoidal_embed(3, 7).is_err());
    }

    #[test]
    fn attention_uniform_over_identical_keys() {
        let d = 4;
        let attn = CrossAttention::identity(d);
        let q = Tensor::new(vec![0.3; 2 * d], &[2, d]).unwrap();
        // Three identical context rows → uniform weights → value mean. Values
        // here are the rows themselves (identity projections).
        let row = [1.0, 2.0, 3.0, 4.0];
        let ctx = Tensor::new(row.repeat(3), &[3, d]).unwrap();
        let y = attn.forward(&q, &ctx).unwrap();
        for r in 0..2 {
            for j in 0..d {
                assert!((y.to_vec()[r * d + j] - row[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_single_context_row_passes_value() {
        let d = 3;
        let attn = CrossAttention::identity(d);
        let q = Tensor::new(vec![-0.5, 0.1, 0.9], &[1, d]).unwrap();
        let ctx = Tensor::new(vec![2.0, -1.0, 0.5], &[1, d]).unwrap();
        let y = attn.forward(&q, &ctx).unwrap();
        assert_eq!(y.to_vec(), vec![2.0, -1.0, 0.5]);
    }

    #[test]
    fn attention_gradcheck() {
        let d = 4;
        let mut r = rng(23);
        let attn = CrossAttention::new(d, &mut r);
        let ctx = Tensor::randn(&[3, d], 1.0, &mut r);
        let q0 = Tensor::randn(&[2, d], 1.0, &mut r);
        let err = finite_diff_check(
            |q| attn.forward(q, &ctx)?.square()?.sum(),
            &q0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let p = Tensor::param(vec![1.0, -2.0], &[2]).unwrap();
        // A loss that touches p with zero weight gives an all-zero gradient.
        let loss = p.scale(0.0).unwrap().sum().unwrap();
        loss.backward().unwrap();
        let mut opt = Adam::new(0.1);
        let params: NamedParams = vec![("p".into(), p.clone())];
        opt.step(&params).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, -2.0]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let p = Tensor::param(vec![0.5], &[1]).unwrap();
        let loss = p.scale(3.0).unwrap().sum().unwrap(); // grad = 3
        loss.backward().unwrap();
        let mut opt = Adam::new(0.01);
        opt.step(&vec![("p".into(), p.clone())]).unwrap();
        // Bias-corrected first step: Δ = lr·g/(|g|+ε) ≈ lr·sign(g).
        assert!((p.to_vec()[0] - (0.5 - 0.01)).abs() < 1e-6);
    }

    #[test]
    fn adam_momentum_differs_from_double_lr() {
        let run = |lr: f64, steps: usize| -> f64 {
            let p = Tensor::param(vec![1.0], &[1]).unwrap();
            let mut opt = Adam::new(lr);
            for _ in 0..steps {
                let loss = p.square().unwrap().sum().unwrap();
                loss.backward().unwrap();
                opt.step(&vec![("p".into(), p.clone())]).unwrap();
            }
            p.to_vec()[0]
        };
        let two_steps = run(0.5, 2);
        let one_big = run(1.0, 1);
        assert!((two_steps - one_big).abs() > 1e-3);
    }

    #[test]
    fn adam_reports_nonfinite_gradient_by_name() {
        let p = Tensor::param(vec![1.0], &[1]).unwrap();
        p.accumulate_grad(&[f64::NAN]);
        let mut opt = Adam::new(0.01);
        let err = opt.step(&vec![("theta_g.mid".into(), p)]).unwrap_err();
        assert!(format!("{err}").contains("theta_g.mid"));
    }

    #[test]
    fn tokenize_and_back() {
        let vocab = Vocab::new(&["ring", "red", "blue"]);
        assert_eq!(tokenize("ring red", &vocab).unwrap(), vec![0, 1]);
        assert_eq!(tokenize("", &vocab).unwrap(), Vec::<usize>::new());
        let err = tokenize("ring green", &vocab).unwrap_err();
        assert!(format!("{err}").contains("green"));
        let toks = tokenize("blue  ring", &vocab).unwrap();
        assert_eq!(detokenize(&toks, &vocab).unwrap(), "blue ring");
    }

    #[test]
    fn embedding_rows_and_gradient_accumulation() {
        let mut r = rng(5);
        let table = EmbeddingTable::new(4, 3, &mut r);
        let e = table.embed(&[2, 2, 0]).unwrap();
        assert_eq!(e.shape(), &[3, 3]);
        let loss = e.sum().unwrap();
        loss.backward().unwrap();
        let g = table.table.grad().unwrap();
        // Row 2 used twice, row 0 once, rows 1 and 3 unused.
        assert_eq!(g[2 * 3], 2.0);
        assert_eq!(g[0], 1.0);
        assert_eq!(g[3], 0.0);
        assert!(table.embed(&[4]).is_err());
        assert!(table.embed(&[]).is_err());
    }

    #[test]
    fn metaword_prepend() {
        let mut r = rng(9);
        let mu = MetaWord::new(3, &mut r);
        let alone = prepend_metaword(&mu, None).unwrap();
        assert_eq!(alone.shape(), &[1, 3]);
        assert_eq!(alone.to_vec(), mu.embedding.to_vec());

        let prompt = Tensor::randn(&[2, 3], 1.0, &mut r);
        let seq = prepend_metaword(&mu, Some(&prompt)).unwrap();
        assert_eq!(seq.shape(), &[3, 3]);
        let sv = seq.to_vec();
        let pv = prompt.to_vec();
        assert!(sv[3..].iter().zip(&pv).all(|(a, b)| a.to_bits() == b.to_bits()));

        let bad = Tensor::randn(&[2, 4], 1.0, &mut r);
        assert!(prepend_metaword(&mu, Some(&bad)).is_err());
    }

    #[test]
    fn dense_layer_gradcheck() {
        let mut r = rng(31);
        let layer = DenseLayer::new(3, 5, &mut r);
        let x0 = Tensor::randn(&[2, 5], 1.0, &mut r);
        let err = finite_diff_check(
            |x| layer.forward(x)?.tanh()?.square()?.sum(),
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn conv_transpose_lora_matches_materialized_kernel() {
        let mut r = rng(41);
        let layer = ConvT2dLayer::new(3, 2, 4, 2, 1, &mut r);
        let mut adapter = LoraAdapter::new(3, 2 * 4 * 4, 2, &mut r).unwrap();
        adapter.b =
            Tensor::param(Tensor::randn(&[3, 2], 0.3, &mut r).to_vec(), &[3, 2]).unwrap();
        let x = Tensor::randn(&[3, 5, 5], 1.0, &mut r);

        // Fresh adapter (B = 0) leaves the layer bit-identical.
        let fresh = LoraAdapter::new(3, 2 * 4 * 4, 2, &mut r).unwrap();
        let plain = layer.forward(&x).unwrap();
        let same = layer.forward_adapted(&x, Some(&fresh)).unwrap();
        assert!(plain
            .to_vec()
            .iter()
            .zip(same.to_vec())
            .all(|(a, b)| a.to_bits() == b.to_bits()));

        // Oracle: materialize K' = K + reshape(B·A) and run a plain layer.
        let via_adapter = layer.forward_adapted(&x, Some(&adapter)).unwrap();
        let k = layer.kernel.to_vec();
        let d = adapter.delta().unwrap().to_vec();
        let kp: Vec<f64> = k.iter().zip(&d).map(|(a, b)| a + b).collect();
        let oracle = ConvT2dLayer {
            kernel: Tensor::param(kp, &[3, 2, 4, 4]).unwrap(),
            bias: layer.bias.clone(),
            stride: 2,
            pad: 1,
        };
        let expect = oracle.forward(&x).unwrap();
        for (u, v) in via_adapter.to_vec().iter().zip(expect.to_vec()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
