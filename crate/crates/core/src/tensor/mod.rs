//! Dense row-major `f64` tensors with a dynamically recorded reverse-mode
//! autodiff graph.
//!
//! Every tensor is immutable once built. Operations that consume at least one
//! tensor requiring gradients record a node holding their parents and a
//! backward closure; everything else is a plain constant. [`backward`] walks
//! the graph from a scalar loss and returns a [`GradientMap`] keyed by
//! [`ParamId`].

mod autodiff;
mod gradcheck;
mod ops;

use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

pub use autodiff::{backward, GradientMap};
pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);
static ADJOINT_FAULT: AtomicBool = AtomicBool::new(false);

/// Corrupts the matmul adjoint so that gradient suites can be shown to fail.
#[doc(hidden)]
pub fn inject_adjoint_fault(enabled: bool) {
    ADJOINT_FAULT.store(enabled, Ordering::SeqCst);
}

pub(crate) fn adjoint_fault() -> bool {
    ADJOINT_FAULT.load(Ordering::Relaxed)
}

/// Identifier of a trainable parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Inputs handed to a backward closure.
pub struct BackwardCtx<'a> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a [f64],
    pub output: &'a [f64],
    pub parents: &'a [Tensor],
}

/// Adds each parent's gradient into the matching buffer; buffers are `None`
/// for parents that need no gradient.
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>, &mut [Option<Vec<f64>>]) + Send + Sync>;

enum Origin {
    Constant,
    Param(ParamId),
    Op {
        name: &'static str,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    },
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    origin: Origin,
}

// Long recurrent graphs would otherwise drop recursively.
impl Drop for Inner {
    fn drop(&mut self) {
        let mut stack = Vec::new();
        if let Origin::Op { parents, .. } = &mut self.origin {
            stack.append(parents);
        }
        while let Some(t) = stack.pop() {
            if let Ok(mut inner) = Arc::try_unwrap(t.inner) {
                if let Origin::Op { parents, .. } = &mut inner.origin {
                    stack.append(parents);
                }
            }
        }
    }
}

#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let origin = match &self.inner.origin {
            Origin::Constant => "const".to_string(),
            Origin::Param(p) => format!("param#{}", p.0),
            Origin::Op { name, .. } => (*name).to_string(),
        };
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("origin", &origin)
            .field("data", &self.inner.data)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, origin: Origin) -> Tensor {
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                origin,
            }),
        }
    }

    /// A constant tensor. Fails if `data` does not fill `shape` or holds
    /// a non-finite value.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::contract(
                "Tensor::new",
                format!("shape {shape:?} needs {} scalars, got {}", numel(shape), data.len()),
            ));
        }
        check_finite("Tensor::new", &data)?;
        Ok(Tensor::build(shape.to_vec(), data, Origin::Constant))
    }

    /// A leaf that gradients flow into, reported under `id` by [`backward`].
    pub fn param(id: ParamId, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, data)?;
        Ok(Tensor::build(t.shape().to_vec(), t.to_vec(), Origin::Param(id)))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::build(shape.to_vec(), vec![0.0; numel(shape)], Origin::Constant)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::build(shape.to_vec(), vec![value; numel(shape)], Origin::Constant)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::build(Vec::new(), vec![value], Origin::Constant)
    }

    /// Records an operation node. Used by the built-in ops and by fused
    /// kernels defined in other modules. The node is dropped (and the result
    /// becomes a constant) when no parent requires gradients.
    pub fn from_op<F>(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: F,
    ) -> Result<Tensor>
    where
        F: Fn(&BackwardCtx<'_>, &mut [Option<Vec<f64>>]) + Send + Sync + 'static,
    {
        if numel(&shape) != data.len() {
            return Err(Error::contract(
                name,
                format!("output shape {shape:?} does not match {} scalars", data.len()),
            ));
        }
        check_finite(name, &data)?;
        let origin = if parents.iter().any(Tensor::requires_grad) {
            Origin::Op {
                name,
                parents,
                backward: Box::new(backward),
            }
        } else {
            Origin::Constant
        };
        Ok(Tensor::build(shape, data, origin))
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.clone()
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn requires_grad(&self) -> bool {
        !matches!(self.inner.origin, Origin::Constant)
    }

    pub fn param_id(&self) -> Option<ParamId> {
        match self.inner.origin {
            Origin::Param(p) => Some(p),
            _ => None,
        }
    }

    /// Name of the producing operation, if any.
    pub fn op_name(&self) -> Option<&'static str> {
        match &self.inner.origin {
            Origin::Op { name, .. } => Some(name),
            _ => None,
        }
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.shape().to_vec(), self.to_vec(), Origin::Constant)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::contract(
                "item",
                format!("tensor of shape {:?} is not a scalar", self.shape()),
            ));
        }
        Ok(self.inner.data[0])
    }

    /// Extent of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape().last().copied().unwrap_or(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length_and_finiteness() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(matches!(
            Tensor::new(&[1], vec![f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
        let t = Tensor::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert!(!t.requires_grad());
    }

    #[test]
    fn op_without_grad_parents_is_constant() {
        let a = Tensor::new(&[1], vec![1.0]).unwrap();
        let b = Tensor::from_op("id", vec![1], vec![1.0], vec![a], |_, _| {}).unwrap();
        assert!(b.op_name().is_none());
        let p = Tensor::param(ParamId(0), &[1], vec![1.0]).unwrap();
        let c = Tensor::from_op("id", vec![1], vec![1.0], vec![p], |_, _| {}).unwrap();
        assert_eq!(c.op_name(), Some("id"));
    }

    #[test]
    fn deep_chain_drops_without_overflow() {
        let mut t = Tensor::param(ParamId(0), &[1], vec![0.5]).unwrap();
        for _ in 0..200_000 {
            t = t.scale(1.0).unwrap();
        }
        drop(t);
    }
}
