//! Recorded tensor operations and their backward rules.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{numel, strides_of, BackwardFn, Tensor};
use crate::error::{GscError, Result};

/// Index mapping for numpy-style broadcasting (shapes aligned from the
/// trailing dimension; size-1 dims repeat).
#[derive(Clone)]
struct BCast {
    out_shape: Vec<usize>,
    a_stride: Vec<usize>,
    b_stride: Vec<usize>,
}

impl BCast {
    fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<BCast> {
        let rank = a.len().max(b.len());
        let mut out_shape = vec![0usize; rank];
        for i in 0..rank {
            let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
            let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
            if da != db && da != 1 && db != 1 {
                return Err(GscError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                });
            }
            out_shape[i] = da.max(db);
        }
        let pad = |shape: &[usize]| -> Vec<usize> {
            let native = strides_of(shape);
            let mut s = vec![0usize; rank];
            for i in 0..shape.len() {
                let oi = rank - shape.len() + i;
                s[oi] = if shape[i] == 1 { 0 } else { native[i] };
            }
            s
        };
        Ok(BCast {
            a_stride: pad(a),
            b_stride: pad(b),
            out_shape,
        })
    }

    fn same_shape(&self) -> bool {
        self.a_stride == self.b_stride && !self.a_stride.contains(&0)
    }

    /// Visit every output element with its source indices into a and b.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = numel(&self.out_shape);
        let rank = self.out_shape.len();
        let mut coord = vec![0usize; rank];
        for out_idx in 0..n {
            let mut ia = 0;
            let mut ib = 0;
            for d in 0..rank {
                ia += coord[d] * self.a_stride[d];
                ib += coord[d] * self.b_stride[d];
            }
            f(out_idx, ia, ib);
            for d in (0..rank).rev() {
                coord[d] += 1;
                if coord[d] < self.out_shape[d] {
                    break;
                }
                coord[d] = 0;
            }
        }
    }
}

fn elementwise_binary(
    op: &'static str,
    lhs: &Tensor,
    rhs: &Tensor,
    forward: fn(f64, f64) -> f64,
    dl: fn(f64, f64) -> f64,
    dr: fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let bc = BCast::new(op, lhs.shape(), rhs.shape())?;
    let out_shape = bc.out_shape.clone();
    let mut out = vec![0.0; numel(&out_shape)];
    lhs.with_data(|a| {
        rhs.with_data(|b| {
            if bc.same_shape() {
                for ((o, &av), &bv) in out.iter_mut().zip(a).zip(b) {
                    *o = forward(av, bv);
                }
            } else {
                bc.for_each(|oi, ia, ib| out[oi] = forward(a[ia], b[ib]));
            }
        })
    });
    if !lhs.needs_grad() && !rhs.needs_grad() {
        return Tensor::from_op(out, out_shape, op, vec![], None);
    }
    let (pl, pr) = (lhs.clone(), rhs.clone());
    let bwd: BackwardFn = Box::new(move |g| {
        let mut gl = vec![0.0; pl.len()];
        let mut gr = vec![0.0; pr.len()];
        pl.with_data(|a| {
            pr.with_data(|b| {
                bc.for_each(|oi, ia, ib| {
                    gl[ia] += g[oi] * dl(a[ia], b[ib]);
                    gr[ib] += g[oi] * dr(a[ia], b[ib]);
                });
            })
        });
        if pl.needs_grad() {
            pl.accumulate_grad(&gl);
        }
        if pr.needs_grad() {
            pr.accumulate_grad(&gr);
        }
    });
    Tensor::from_op(out, out_shape, op, vec![lhs.clone(), rhs.clone()], Some(bwd))
}

fn elementwise_unary(
    op: &'static str,
    x: &Tensor,
    forward: fn(f64) -> f64,
    derivative: fn(f64, f64) -> f64, // (input, output) -> dy/dx
) -> Result<Tensor> {
    let out: Vec<f64> = x.with_data(|d| d.iter().map(|&v| forward(v)).collect());
    if !x.needs_grad() {
        return Tensor::from_op(out, x.shape().to_vec(), op, vec![], None);
    }
    let parent = x.clone();
    let saved_out = out.clone();
    let bwd: BackwardFn = Box::new(move |g| {
        if !parent.needs_grad() {
            return;
        }
        let contrib: Vec<f64> = parent.with_data(|d| {
            d.iter()
                .zip(&saved_out)
                .zip(g)
                .map(|((&xi, &yi), &gi)| gi * derivative(xi, yi))
                .collect()
        });
        parent.accumulate_grad(&contrib);
    });
    Tensor::from_op(out, x.shape().to_vec(), op, vec![x.clone()], Some(bwd))
}

impl Tensor {
    /// Standard-normal samples scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
        let data: Vec<f64> = (0..numel(shape))
            .map(|_| {
                let v: f64 = rng.sample(StandardNormal);
                v * std
            })
            .collect();
        Tensor::from_op(data, shape.to_vec(), "randn", vec![], None).expect("finite")
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        elementwise_binary("add", self, rhs, |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        elementwise_binary("sub", self, rhs, |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        elementwise_binary("mul", self, rhs, |a, b| a * b, |a, b| { let _ = a; b }, |a, b| {
            let _ = b;
            a
        })
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let out: Vec<f64> = self.with_data(|d| d.iter().map(|&v| v * c).collect());
        if !self.needs_grad() {
            return Tensor::from_op(out, self.shape().to_vec(), "scale", vec![], None);
        }
        let parent = self.clone();
        let bwd: BackwardFn = Box::new(move |g| {
            let contrib: Vec<f64> = g.iter().map(|&gi| gi * c).collect();
            parent.accumulate_grad(&contrib);
        });
        Tensor::from_op(out, self.shape().to_vec(), "scale", vec![self.clone()], Some(bwd))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let out: Vec<f64> = self.with_data(|d| d.iter().map(|&v| v + c).collect());
        if !self.needs_grad() {
            return Tensor::from_op(out, self.shape().to_vec(), "add_scalar", vec![], None);
        }
        let parent = self.clone();
        let bwd: BackwardFn = Box::new(move |g| parent.accumulate_grad(g));
        Tensor::from_op(out, self.shape().to_vec(), "add_scalar", vec![self.clone()], Some(bwd))
    }

    pub fn exp(&self) -> Result<Tensor> {
        elementwise_unary("exp", self, f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Result<Tensor> {
        elementwise_unary("log", self, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        elementwise_unary("sqrt", self, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Result<Tensor> {
        elementwise_unary("square", self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        elementwise_unary("tanh", self, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        elementwise_unary("sigmoid", self, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a_shape, b_shape) = (self.shape().to_vec(), rhs.shape().to_vec());
        if a_shape.len() != 2 || b_shape.len() != 2 || a_shape[1] != b_shape[0] {
            return Err(GscError::ShapeMismatch {
                op: "matmul",
                lhs: a_shape,
                rhs: b_shape,
            });
        }
        let (n, k, m) = (a_shape[0], a_shape[1], b_shape[1]);
        let mut out = vec![0.0; n * m];
        self.with_data(|a| {
            rhs.with_data(|b| {
                for i in 0..n {
                    for l in 0..k {
                        let av = a[i * k + l];
                        if av == 0.0 {
                            continue;
                        }
                        let brow = &b[l * m..(l + 1) * m];
                        let orow = &mut out[i * m..(i + 1) * m];
                        for (o, &bv) in orow.iter_mut().zip(brow) {
                            *o += av * bv;
                        }
                    }
                }
            })
        });
        if !self.needs_grad() && !rhs.needs_grad() {
            return Tensor::from_op(out, vec![n, m], "matmul", vec![], None);
        }
        let (pl, pr) = (self.clone(), rhs.clone());
        let bwd: BackwardFn = Box::new(move |g| {
            if pl.needs_grad() {
                // dA = G · Bᵀ
                let mut ga = vec![0.0; n * k];
                pr.with_data(|b| {
                    for i in 0..n {
                        for l in 0..k {
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += g[i * m + j] * b[l * m + j];
                            }
                            ga[i * k + l] = acc;
                        }
                    }
                });
                pl.accumulate_grad(&ga);
            }
            if pr.needs_grad() {
                // dB = Aᵀ · G
                let mut gb = vec![0.0; k * m];
                pl.with_data(|a| {
                    for i in 0..n {
                        for l in 0..k {
                            let av = a[i * k + l];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..m {
                                gb[l * m + j] += av * g[i * m + j];
                            }
                        }
                    }
                });
                pr.accumulate_grad(&gb);
            }
        });
        Tensor::from_op(out, vec![n, m], "matmul", vec![self.clone(), rhs.clone()], Some(bwd))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if shape.len() != 2 {
            return Err(GscError::invalid("transpose", format!("need 2-D, got {shape:?}")));
        }
        let (n, m) = (shape[0], shape[1]);
        let mut out = vec![0.0; n * m];
        self.with_data(|d| {
            for i in 0..n {
                for j in 0..m {
                    out[j * n + i] = d[i * m + j];
                }
            }
        });
        if !self.needs_grad() {
            return Tensor::from_op(out, vec![m, n], "transpose", vec![], None);
        }
        let parent = self.clone();
        let bwd: BackwardFn = Box::new(move |g| {
            let mut contrib = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    contrib[i * m + j] = g[j * n + i];
                }
            }
            parent.accumulate_grad(&contrib);
        });
        Tensor::from_op(out, vec![m, n], "transpose", vec![self.clone()], Some(bwd))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.len() {
            return Err(GscError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.to_vec();
        if !self.needs_grad() {
            return Tensor::from_op(out, shape.to_vec(), "reshape", vec![], None);
        }
        let parent = self.clone();
        let bwd: BackwardFn = Box::new(move |g| parent.accumulate_grad(g));
        Tensor::from_op(out, shape.to_vec(), "reshape", vec![self.clone()], Some(bwd))
    }

    /// Contiguous slice of `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(GscError::invalid(
                "narrow",
                format!("axis {axis} range {start}..{} out of shape {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut out = vec![0.0; outer * len * inner];
        self.with_data(|d| {
            for o in 0..outer {
                for a in 0..len {
                    let src = (o * full + start + a) * inner;
                    let dst = (o * len + a) * inner;
                    out[dst..dst + inner].copy_from_slice(&d[src..src + inner]);
                }
            }
        });
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        if !self.needs_grad() {
            return Tensor::from_op(out, out_shape, "narrow", vec![], None);
        }
        let parent = self.clone();
        let parent_len = self.len();
        let bwd: BackwardFn = Box::new(move |g| {
            let mut contrib = vec![0.0; parent_len];
            for o in 0..outer {
                for a in 0..len {
                    let dst = (o * full + start + a) * inner;
                    let src = (o * len + a) * inner;
                    contrib[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                }
            }
            parent.accumulate_grad(&contrib);
        });
        Tensor::from_op(out, out_shape, "narrow", vec![self.clone()], Some(bwd))
    }

    /// Concatenate tensors along `axis`; all other dims must match.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(GscError::invalid("concat", "no tensors given"));
        }
        let first = parts[0].shape().to_vec();
        if axis >= first.len() {
            return Err(GscError::invalid("concat", format!("axis {axis} out of rank {}", first.len())));
        }
        let mut axis_total = 0usize;
        for p in parts {
            let s = p.shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(GscError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let mut out = vec![0.0; outer * axis_total * inner];
        let mut offset = 0usize;
        let mut spans = Vec::with_capacity(parts.len());
        for p in parts {
            let plen = p.shape()[axis];
            p.with_data(|d| {
                for o in 0..outer {
                    let dst = (o * axis_total + offset) * inner;
                    let src = o * plen * inner;
                    out[dst..dst + plen * inner].copy_from_slice(&d[src..src + plen * inner]);
                }
            });
            spans.push((offset, plen));
            offset += plen;
        }
        let track = parts.iter().any(|p| p.needs_grad());
        if !track {
            return Tensor::from_op(out, out_shape, "concat", vec![], None);
        }
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let bwd_parts = owned.clone();
        let bwd: BackwardFn = Box::new(move |g| {
            for (p, &(off, plen)) in bwd_parts.iter().zip(&spans) {
                if !p.needs_grad() {
                    continue;
                }
                let mut contrib = vec![0.0; outer * plen * inner];
                for o in 0..outer {
                    let src = (o * axis_total + off) * inner;
                    let dst = o * plen * inner;
                    contrib[dst..dst + plen * inner].copy_from_slice(&g[src..src + plen * inner]);
                }
                p.accumulate_grad(&contrib);
            }
        });
        Tensor::from_op(out, out_shape, "concat", owned, Some(bwd))
    }

    pub fn sum(&self) -> Result<Tensor> {
        let total: f64 = self.with_data(|d| d.iter().sum());
        if !self.needs_grad() {
            return Tensor::from_op(vec![total], vec![1], "sum", vec![], None);
        }
        let parent = self.clone();
        let n = self.len();
        let bwd: BackwardFn = Box::new(move |g| parent.accumulate_grad(&vec![g[0]; n]));
        Tensor::from_op(vec![total], vec![1], "sum", vec![self.clone()], Some(bwd))
    }

    pub fn mean(&self) -> Result<Tensor> {
        self.sum()?.scale(1.0 / self.len() as f64)
    }

    /// Sum along one axis, dropping it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(GscError::invalid("sum_axis", format!("axis {axis} out of rank {}", shape.len())));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mid = shape[axis];
        let mut out = vec![0.0; outer * inner];
        self.with_data(|d| {
            for o in 0..outer {
                for a in 0..mid {
                    let base = (o * mid + a) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += d[base + i];
                    }
                }
            }
        });
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        if !self.needs_grad() {
            return Tensor::from_op(out, out_shape, "sum_axis", vec![], None);
        }
        let parent = self.clone();
        let parent_len = self.len();
        let bwd: BackwardFn = Box::new(move |g| {
            let mut contrib = vec![0.0; parent_len];
            for o in 0..outer {
                for a in 0..mid {
                    let base = (o * mid + a) * inner;
                    for i in 0..inner {
                        contrib[base + i] = g[o * inner + i];
                    }
                }
            }
            parent.accumulate_grad(&contrib);
        });
        Tensor::from_op(out, out_shape, "sum_axis", vec![self.clone()], Some(bwd))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis)?.scale(1.0 / n)
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        let cols = *shape.last().unwrap();
        let rows = self.len() / cols;
        let mut out = vec![0.0; self.len()];
        self.with_data(|d| {
            for r in 0..rows {
                let row = &d[r * cols..(r + 1) * cols];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - max).exp();
                    out[r * cols + j] = e;
                    denom += e;
                }
                for j in 0..cols {
                    out[r * cols + j] /= denom;
                }
            }
        });
        if !self.needs_grad() {
            return Tensor::from_op(out, shape, "softmax", vec![], None);
        }
        let parent = self.clone();
        let saved = out.clone();
        let bwd: BackwardFn = Box::new(move |g| {
            let mut contrib = vec![0.0; saved.len()];
            for r in 0..rows {
                let y = &saved[r * cols..(r + 1) * cols];
                let gr = &g[r * cols..(r + 1) * cols];
                let dot: f64 = y.iter().zip(gr).map(|(&yi, &gi)| yi * gi).sum();
                for j in 0..cols {
                    contrib[r * cols + j] = y[j] * (gr[j] - dot);
                }
            }
            parent.accumulate_grad(&contrib);
        });
        Tensor::from_op(out, shape, "softmax", vec![self.clone()], Some(bwd))
    }

    /// 2-D convolution over `[C_in, H, W]` with kernel `[C_out, C_in, kh, kw]`,
    /// zero padding `pad` and stride `stride`.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let xs = self.shape().to_vec();
        let ks = kernel.shape().to_vec();
        if xs.len() != 3 || ks.len() != 4 || xs[0] != ks[1] {
            return Err(GscError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ks,
            });
        }
        if stride == 0 || stride > 2 {
            return Err(GscError::invalid("conv2d", format!("stride {stride} unsupported")));
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(GscError::invalid("conv2d", "kernel larger than padded input"));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; cout * ho * wo];
        self.with_data(|x| {
            kernel.with_data(|k| {
                conv2d_forward(x, k, &mut out, cin, h, w, cout, kh, kw, stride, pad, ho, wo);
            })
        });
        let out_shape = vec![cout, ho, wo];
        if !self.needs_grad() && !kernel.needs_grad() {
            return Tensor::from_op(out, out_shape, "conv2d", vec![], None);
        }
        let (px, pk) = (self.clone(), kernel.clone());
        let bwd: BackwardFn = Box::new(move |g| {
            if px.needs_grad() {
                let mut gx = vec![0.0; cin * h * w];
                pk.with_data(|k| {
                    conv2d_input_grad(g, k, &mut gx, cin, h, w, cout, kh, kw, stride, pad, ho, wo);
                });
                px.accumulate_grad(&gx);
            }
            if pk.needs_grad() {
                let mut gk = vec![0.0; cout * cin * kh * kw];
                px.with_data(|x| {
                    conv2d_kernel_grad(g, x, &mut gk, cin, h, w, cout, kh, kw, stride, pad, ho, wo);
                });
                pk.accumulate_grad(&gk);
            }
        });
        Tensor::from_op(out, out_shape, "conv2d", vec![self.clone(), kernel.clone()], Some(bwd))
    }

    /// Transposed 2-D convolution (the adjoint of [`Tensor::conv2d`]) over
    /// `[C_in, H, W]` with kernel `[C_in, C_out, kh, kw]`.
    pub fn conv2d_transpose(&self, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let xs = self.shape().to_vec();
        let ks = kernel.shape().to_vec();
        if xs.len() != 3 || ks.len() != 4 || xs[0] != ks[0] {
            return Err(GscError::ShapeMismatch {
                op: "conv2d_transpose",
                lhs: xs,
                rhs: ks,
            });
        }
        if stride == 0 || stride > 2 {
            return Err(GscError::invalid("conv2d_transpose", format!("stride {stride} unsupported")));
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ks[1], ks[2], ks[3]);
        let ho = (h - 1) * stride + kh;
        let wo = (w - 1) * stride + kw;
        if ho < 2 * pad || wo < 2 * pad {
            return Err(GscError::invalid("conv2d_transpose", "padding exceeds output"));
        }
        let (ho, wo) = (ho - 2 * pad, wo - 2 * pad);
        let mut out = vec![0.0; cout * ho * wo];
        self.with_data(|x| {
            kernel.with_data(|k| {
                convt2d_forward(x, k, &mut out, cin, h, w, cout, kh, kw, stride, pad, ho, wo);
            })
        });
        let out_shape = vec![cout, ho, wo];
        if !self.needs_grad() && !kernel.needs_grad() {
            return Tensor::from_op(out, out_shape, "conv2d_transpose", vec![], None);
        }
        let (px, pk) = (self.clone(), kernel.clone());
        let bwd: BackwardFn = Box::new(move |g| {
            if px.needs_grad() {
                // Adjoint of scatter: gather like a forward convolution.
                let mut gx = vec![0.0; cin * h * w];
                pk.with_data(|k| {
                    convt2d_input_grad(g, k, &mut gx, cin, h, w, cout, kh, kw, stride, pad, ho, wo);
                });
                px.accumulate_grad(&gx);
            }
            if pk.needs_grad() {
                let mut gk = vec![0.0; cin * cout * kh * kw];
                px.with_data(|x| {
                    convt2d_kernel_grad(g, x, &mut gk, cin, h, w, cout, kh, kw, stride, pad, ho, wo);
                });
                pk.accumulate_grad(&gk);
            }
        });
        Tensor::from_op(
            out,
            out_shape,
            "conv2d_transpose",
            vec![self.clone(), kernel.clone()],
            Some(bwd),
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    k: &[f64],
    out: &mut [f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += x[(ci * h + iy as usize) * w + ix as usize]
                                * k[((co * cin + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_input_grad(
    g: &[f64],
    k: &[f64],
    gx: &mut [f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = g[(co * ho + oy) * wo + ox];
                if gv == 0.0 {
                    continue;
                }
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gx[(ci * h + iy as usize) * w + ix as usize] +=
                                gv * k[((co * cin + ci) * kh + ky) * kw + kx];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_kernel_grad(
    g: &[f64],
    x: &[f64],
    gk: &mut [f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = g[(co * ho + oy) * wo + ox];
                if gv == 0.0 {
                    continue;
                }
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gk[((co * cin + ci) * kh + ky) * kw + kx] +=
                                gv * x[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn convt2d_forward(
    x: &[f64],
    k: &[f64],
    out: &mut [f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    for ci in 0..cin {
        for y in 0..h {
            for xw in 0..w {
                let xv = x[(ci * h + y) * w + xw];
                if xv == 0.0 {
                    continue;
                }
                for co in 0..cout {
                    for ky in 0..kh {
                        let oy = (y * stride + ky) as isize - pad as isize;
                        if oy < 0 || oy >= ho as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ox = (xw * stride + kx) as isize - pad as isize;
                            if ox < 0 || ox >= wo as isize {
                                continue;
                            }
                            out[(co * ho + oy as usize) * wo + ox as usize] +=
                                xv * k[((ci * cout + co) * kh + ky) * kw + kx];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn convt2d_input_grad(
    g: &[f64],
    k: &[f64],
    gx: &mut [f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    for ci in 0..cin {
        for y in 0..h {
            for xw in 0..w {
                let mut acc = 0.0;
                for co in 0..cout {
                    for ky in 0..kh {
                        let oy = (y * stride + ky) as isize - pad as isize;
                        if oy < 0 || oy >= ho as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ox = (xw * stride + kx) as isize - pad as isize;
                            if ox < 0 || ox >= wo as isize {
                                continue;
                            }
                            acc += g[(co * ho + oy as usize) * wo + ox as usize]
                                * k[((ci * cout + co) * kh + ky) * kw + kx];
                        }
                    }
                }
                gx[(ci * h + y) * w + xw] = acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn convt2d_kernel_grad(
    g: &[f64],
    x: &[f64],
    gk: &mut [f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    for ci in 0..cin {
        for y in 0..h {
            for xw in 0..w {
                let xv = x[(ci * h + y) * w + xw];
                if xv == 0.0 {
                    continue;
                }
                for co in 0..cout {
                    for ky in 0..kh {
                        let oy = (y * stride + ky) as isize - pad as isize;
                        if oy < 0 || oy >= ho as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ox = (xw * stride + kx) as isize - pad as isize;
                            if ox < 0 || ox >= wo as isize {
                                continue;
                            }
                            gk[((ci * cout + co) * kh + ky) * kw + kx] +=
                                xv * g[(co * ho + oy as usize) * wo + ox as usize];
                        }
                    }
                }
            }
        }
    }
}
