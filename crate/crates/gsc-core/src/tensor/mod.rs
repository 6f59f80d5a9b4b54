//! Dense `f64` arrays with reverse-mode differentiation.
//!
//! Every trainable model in this crate runs on [`Tensor`]: a row-major
//! multi-dimensional array of 64-bit floats. Operations record a dynamic
//! tape (the graph of parent links plus backward closures, rebuilt on every
//! forward pass); [`Tensor::backward`] replays it once in reverse
//! topological order and deposits gradients on the `requires_grad` leaves.
//!
//! Tensors are cheap to clone (`Rc` handles) and a recorded graph lives in
//! a single execution context. Complex quantities elsewhere in the crate
//! are carried as paired real tensors so this engine stays real-valued.

mod ops;

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{GscError, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Backward closure: receives the upstream gradient for this node and
/// accumulates contributions into the node's parents.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64])>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward_fn: RefCell<Option<BackwardFn>>,
    consumed: Cell<bool>,
}

/// A dense multi-dimensional `f64` array, optionally recorded on the tape.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, grad={})",
            self.inner.id,
            self.inner.shape,
            self.needs_grad()
        )
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite(data: &[f64], op: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(GscError::NonFinite { op: op.to_string() })
    }
}

impl Tensor {
    /// Plain value tensor (no gradient tracking).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::build(data, shape.to_vec(), false, "new")
    }

    /// Leaf tensor that accumulates gradients: a trainable parameter.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::build(data, shape.to_vec(), true, "param")
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::build(vec![0.0; numel(shape)], shape.to_vec(), false, "zeros").expect("finite")
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Tensor> {
        Tensor::build(vec![value; numel(shape)], shape.to_vec(), false, "full")
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::build(vec![value], vec![1], false, "scalar").expect("finite")
    }

    fn build(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: &str) -> Result<Tensor> {
        if numel(&shape) != data.len() {
            return Err(GscError::ShapeMismatch {
                op: "new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(GscError::invalid("new", format!("zero-sized dim in {shape:?}")));
        }
        check_finite(&data, op)?;
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(requires_grad),
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward_fn: RefCell::new(None),
                consumed: Cell::new(false),
            }),
        })
    }

    /// Internal node constructor used by every recorded operation.
    ///
    /// `backward` must accumulate into exactly the tensors in `parents`.
    /// Pass `parents` empty and `backward` `None` when no input tracks
    /// gradients; the result is then a plain value.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        op: &'static str,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Result<Tensor> {
        debug_assert_eq!(numel(&shape), data.len(), "{op}: bad result shape");
        check_finite(&data, op)?;
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(false),
                grad: RefCell::new(None),
                parents,
                backward_fn: RefCell::new(backward),
                consumed: Cell::new(false),
            }),
        })
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn is_empty(&self) -> bool {
        false // zero-sized dims are rejected at construction
    }

    /// Copy of the underlying buffer.
    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Read access without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.data.borrow())
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(GscError::NotScalarLoss { elems: self.len() });
        }
        Ok(self.inner.data.borrow()[0])
    }

    /// Overwrite the buffer in place (optimizer updates, checkpoint loads).
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.len() {
            return Err(GscError::ShapeMismatch {
                op: "set_data",
                lhs: self.shape().to_vec(),
                rhs: vec![data.len()],
            });
        }
        check_finite(&data, "set_data")?;
        *self.inner.data.borrow_mut() = data;
        Ok(())
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Flip the leaf trainability flag. Frozen leaves receive no gradient
    /// work at all during backward.
    pub fn set_requires_grad(&self, flag: bool) {
        self.inner.requires_grad.set(flag);
    }

    /// True when backward must propagate into or through this node.
    pub fn needs_grad(&self) -> bool {
        self.inner.requires_grad.get() || self.inner.backward_fn.borrow().is_some()
    }

    /// Accumulated gradient, if backward has deposited one.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[f64]) {
        if !self.needs_grad() {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    /// Identity in value; blocks all gradient flow into the argument.
    pub fn stop_gradient(&self) -> Tensor {
        Tensor::build(self.to_vec(), self.shape().to_vec(), false, "stop_gradient")
            .expect("finite by invariant")
    }

    /// Detached copy that is a fresh leaf (used for frozen snapshots).
    pub fn detach(&self) -> Tensor {
        self.stop_gradient()
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Deposits gradients on every reachable `requires_grad` leaf, then
    /// consumes the tape: a second backward over any part of the same
    /// recorded graph is an error.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(GscError::NotScalarLoss { elems: self.len() });
        }
        // Gather the reachable recorded subgraph. Node ids increase with
        // creation order, and every op is created after its inputs, so
        // sorting by id descending is a reverse topological order.
        let tape = Tape::record(self)?;
        self.accumulate_grad(&[1.0]);
        for node in &tape.order {
            let bwd = node.inner.backward_fn.borrow_mut().take();
            node.inner.consumed.set(true);
            if let Some(bwd) = bwd {
                let grad = node.inner.grad.borrow().clone();
                if let Some(grad) = grad {
                    bwd(&grad);
                }
                // Intermediate grads are no longer needed.
                if !node.inner.requires_grad.get() {
                    node.clear_grad();
                }
            }
        }
        Ok(())
    }
}

/// The recorded subgraph reachable from one loss, in reverse topological
/// order. Produced on demand by [`Tensor::backward`]; consumed exactly once.
struct Tape {
    order: Vec<Tensor>,
}

impl Tape {
    fn record(root: &Tensor) -> Result<Tape> {
        let mut seen: std::collections::HashSet<u64> = std::collections::HashSet::new();
        let mut order: Vec<Tensor> = Vec::new();
        let mut stack: Vec<Tensor> = vec![root.clone()];
        while let Some(node) = stack.pop() {
            if !seen.insert(node.inner.id) {
                continue;
            }
            let recorded = node.inner.backward_fn.borrow().is_some();
            if node.inner.consumed.get() {
                return Err(GscError::TapeConsumed);
            }
            if recorded {
                for p in &node.inner.parents {
                    stack.push(p.clone());
                }
                order.push(node);
            }
        }
        order.sort_by(|a, b| b.inner.id.cmp(&a.inner.id));
        Ok(Tape { order })
    }
}

/// Max relative error between analytic gradients and central differences.
///
/// `f` is evaluated as a pure function of `x`; the analytic side comes from
/// one recorded forward/backward pass, the numeric side from forward
/// evaluations only, so the two routes are independent.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(GscError::invalid(
            "finite_diff_check",
            format!("eps {eps} outside [1e-7, 1e-3]"),
        ));
    }
    let leaf = Tensor::param(x.to_vec(), x.shape())?;
    let loss = f(&leaf)?;
    loss.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.len()]);

    let base = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = f(&Tensor::new(plus, x.shape())?)?.item()?;
        let fm = f(&Tensor::new(minus, x.shape())?)?.item()?;
        let numeric = (fp - fm) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_square_gradient() {
        let x = Tensor::param(vec![3.0], &[1]).unwrap();
        let loss = x.square().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn unused_leaf_gets_no_gradient() {
        let x = Tensor::param(vec![2.0], &[1]).unwrap();
        let y = Tensor::param(vec![5.0], &[1]).unwrap();
        let loss = x.square().unwrap();
        loss.backward().unwrap();
        assert!(y.grad().is_none());
        assert_eq!(x.grad().unwrap(), vec![4.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let x = Tensor::param(vec![1.5], &[1]).unwrap();
        let loss = x.square().unwrap();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(GscError::TapeConsumed)));
    }

    #[test]
    fn backward_on_shared_subgraph_is_an_error() {
        let x = Tensor::param(vec![1.5], &[1]).unwrap();
        let y = x.square().unwrap();
        let a = y.scale(2.0).unwrap();
        let b = y.scale(3.0).unwrap();
        a.backward().unwrap();
        assert!(matches!(b.backward(), Err(GscError::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(x.backward(), Err(GscError::NotScalarLoss { elems: 2 })));
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        // loss = x * sg(x) at x=3: value 9, d/dx = sg(x) = 3, not 6.
        let x = Tensor::param(vec![3.0], &[1]).unwrap();
        let loss = x.mul(&x.stop_gradient()).unwrap();
        assert_eq!(loss.item().unwrap(), 9.0);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0]);
    }

    #[test]
    fn pure_stop_gradient_path_gives_zero() {
        let x = Tensor::param(vec![2.0], &[1]).unwrap();
        let loss = x.stop_gradient().square().unwrap();
        loss.backward().unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_finite_result_is_an_error() {
        let x = Tensor::new(vec![-1.0], &[1]).unwrap();
        assert!(matches!(x.log(), Err(GscError::NonFinite { .. })));
    }

    #[test]
    fn finite_diff_on_square() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let err = finite_diff_check(|t| t.square()?.sum(), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn finite_diff_on_constant_is_zero() {
        let x = Tensor::new(vec![0.3, -0.7], &[2]).unwrap();
        let err = finite_diff_check(|_| Ok(Tensor::scalar(4.0)), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }
}
