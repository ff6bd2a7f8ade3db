//! Learnable arrays and the named-parameter registry.
//!
//! Every model component implements [`Module`], which walks its parameters
//! depth-first under dotted names (`enc4.block.mamba.in_proj`). The walk
//! order is stable and is what checkpoints, optimizers and the complexity
//! report rely on.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{ArrayD, IxDyn};
use num_traits::{Float, FromPrimitive};

/// Floating-point element type used by the generic kernels.
pub trait Real:
    Float
    + FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + Debug
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f64> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Self::new(ArrayD::from_elem(IxDyn(shape), v))
    }

    pub fn scalar(v: T) -> Self {
        Self::filled(&[1], v)
    }

    /// Value of a one-element parameter.
    pub fn get(&self) -> T {
        self.value.as_slice().expect("contiguous")[0]
    }

    pub fn set(&mut self, v: T) {
        self.value.fill(v);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn data(&self) -> &[T] {
        self.value.as_slice().expect("contiguous")
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        self.value.as_slice_mut().expect("contiguous")
    }

    pub fn grad_mut(&mut self) -> &mut [T] {
        self.grad.as_slice_mut().expect("contiguous")
    }
}

/// A component with named learnable parameters and (optionally) buffers.
///
/// Buffers are persistent non-learnable state such as batch-norm running
/// statistics; they are checkpointed but never counted as parameters.
pub trait Module<T: Real = f64> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn visit_buffers(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &ArrayD<T>)) {}

    fn visit_buffers_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut ArrayD<T>)) {}

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, p| n += p.len());
        n
    }

    fn zero_grads(&mut self) {
        self.visit_params_mut("", &mut |_, p| p.zero_grad());
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params("", &mut |n, _| names.push(n.to_string()));
        names
    }
}

/// Joins a registry prefix and a child name with a dot.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// All parameter values in registry order, concatenated.
pub fn flatten_values<T: Real, M: Module<T> + ?Sized>(m: &M) -> Vec<T> {
    let mut out = Vec::new();
    m.visit_params("", &mut |_, p| out.extend_from_slice(p.data()));
    out
}

/// All parameter gradients in registry order, concatenated.
pub fn flatten_grads<T: Real, M: Module<T> + ?Sized>(m: &M) -> Vec<T> {
    let mut out = Vec::new();
    m.visit_params("", &mut |_, p| out.extend(p.grad.iter().copied()));
    out
}

/// Overwrites parameter values from a flat registry-ordered slice.
pub fn assign_values<T: Real, M: Module<T> + ?Sized>(m: &mut M, flat: &[T]) {
    let mut off = 0;
    m.visit_params_mut("", &mut |_, p| {
        let n = p.len();
        p.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    });
    assert_eq!(off, flat.len(), "flat parameter vector length mismatch");
}
