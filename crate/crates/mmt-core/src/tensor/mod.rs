//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every tensor is a node in an implicit compute graph: results of
//! operations keep `Rc` handles to their inputs plus a closure that
//! scatters the output gradient back to them. `backward()` walks the
//! graph once in reverse topological order, so fan-out accumulates
//! additively. Data is immutable after creation except for the grad
//! buffer and explicit parameter updates between steps.

pub mod ops;

pub mod gradcheck;
pub mod io;

pub use gradcheck::{grad_check, GradCheckReport};

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type BackwardFn = Box<dyn Fn(&[f64])>;

pub(crate) struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    back: Option<BackwardFn>,
}

/// A dense n-dimensional array of f64 in row-major order.
///
/// Cloning a `Tensor` is cheap: it copies the `Rc` handle, not the data.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    /// Leaf tensor from raw data. Fails when the shape does not cover the data.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dimension(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        if n != data.len() {
            return Err(Error::dimension(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self::leaf(shape.to_vec(), data, false))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![0.0; n], false)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![value; n], false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::leaf(vec![1], vec![value], false)
    }

    /// Standard-normal leaf scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        // Box-Muller from the uniform stream keeps us independent of
        // rand_distr while staying deterministic per seed.
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(r * theta.cos() * std);
            if data.len() < n {
                data.push(r * theta.sin() * std);
            }
        }
        Self::leaf(shape.to_vec(), data, false)
    }

    /// Trainable leaf: participates in backward and receives a grad buffer.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Self::from_vec(shape, data)?;
        Ok(Self::leaf(t.shape().to_vec(), t.to_vec(), true))
    }

    pub fn param_randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
        let t = Self::randn(shape, std, rng);
        Self::leaf(t.shape().to_vec(), t.to_vec(), true)
    }

    pub(crate) fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                back: None,
            }),
        }
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        back: BackwardFn,
    ) -> Tensor {
        let track = parents.iter().any(Tensor::needs_grad);
        Tensor {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: false,
                parents: if track { parents } else { Vec::new() },
                back: if track { Some(back) } else { None },
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a scalar (single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn needs_grad(&self) -> bool {
        self.inner.requires_grad || self.inner.back.is_some()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrite the data of a leaf in place (optimizer step, weight load).
    pub fn set_data(&self, data: &[f64]) -> Result<()> {
        if data.len() != self.len() {
            return Err(Error::dimension(format!(
                "set_data: tensor holds {} elements, got {}",
                self.len(),
                data.len()
            )));
        }
        self.inner.data.borrow_mut().copy_from_slice(data);
        Ok(())
    }

    /// Detached copy: same data, no graph history, not trainable.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.inner.shape.clone(), self.to_vec(), false)
    }

    pub(crate) fn accum_grad(&self, g: &[f64]) {
        if !self.needs_grad() {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Repeated calls without `zero_grad` accumulate, matching the
    /// additive fan-out rule.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::contract(format!(
                "backward() requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let order = self.topo_order();
        // Leaf grads persist across calls (explicit accumulation contract);
        // intermediate buffers are scratch for this sweep only.
        for node in &order {
            if !node.inner.requires_grad {
                *node.inner.grad.borrow_mut() = None;
            }
        }
        self.accum_grad_unconditional(&[1.0]);
        for node in order.iter().rev() {
            if let Some(back) = &node.inner.back {
                let g = node
                    .inner
                    .grad
                    .borrow()
                    .clone()
                    .unwrap_or_else(|| vec![0.0; node.len()]);
                back(&g);
            }
        }
        Ok(())
    }

    // The loss root itself may be a plain op output with needs_grad
    // false at the leaf level; seed it regardless.
    fn accum_grad_unconditional(&self, g: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Iterative post-order DFS; the returned order lists parents before
    /// children so the reverse walk visits each node exactly once.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // (node, child_cursor)
        let mut stack: Vec<(Tensor, usize)> = Vec::new();
        if visited.insert(self.id()) {
            stack.push((self.clone(), 0));
        }
        while let Some((node, cursor)) = stack.pop() {
            if cursor < node.inner.parents.len() {
                let parent = node.inner.parents[cursor].clone();
                stack.push((node, cursor + 1));
                if visited.insert(parent.id()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn from_vec_rejects_shape_mismatch() {
        let err = Tensor::from_vec(&[2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn scalar_roundtrip() {
        let t = Tensor::scalar(2.5);
        assert_eq!(t.shape(), &[1]);
        assert_eq!(t.item(), 2.5);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = t.mul(&t).unwrap();
        assert!(matches!(y.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_of_squares_gradient() {
        // loss = sum(x*x), x=[1,2] -> grad [2,4]
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let loss = x.mul(&x).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn fanout_accumulates() {
        // y = x + x -> dy/dx = 2
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let y = x.add(&x).unwrap().sum().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let y = x.mul(&x).unwrap().sum().unwrap();
        y.backward().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
    }

    #[test]
    fn determinism_same_seed_same_randn() {
        let mut a = ChaCha8Rng::seed_from_u64(11);
        let mut b = ChaCha8Rng::seed_from_u64(11);
        let ta = Tensor::randn(&[4, 4], 0.5, &mut a);
        let tb = Tensor::randn(&[4, 4], 0.5, &mut b);
        assert_eq!(ta.to_vec(), tb.to_vec());
    }

    #[test]
    fn detach_cuts_graph() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = x.mul(&x).unwrap().detach();
        let loss = y.sum().unwrap();
        loss.backward().unwrap();
        assert!(x.grad().is_none());
    }
}
