//! Dense tensors with reverse-mode gradients.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during a
//! forward pass; [`Tape::backward`] replays the record in reverse and adds
//! the resulting partial derivatives into the grad buffers of leaves that
//! were registered with `requires_grad`.
//!
//! Everything is generic over [`Real`], implemented for `f32` (training)
//! and `f64` (gradient verification).

mod conv;
mod gemm;
mod tape;

pub use conv::{conv3d_output_extent, Conv3dGeometry};
pub use tape::{Tape, Var};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Scaled exponential linear unit slope.
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
/// Scaled exponential linear unit saturation.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

pub trait Real:
    Float + Default + Debug + Send + Sync + AddAssign + SubAssign + MulAssign + Sum + 'static
{
    fn of(x: f64) -> Self;

    /// `c = a·b + beta·c` with explicit strides; `c` has unit column stride.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
    );
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: usize,
    ) {
        gemm::check_extents(m, k, n, rsa, csa, a.len(), rsb, csb, b.len(), rsc, c.len());
        // SAFETY: every addressed element lies inside its slice (checked above).
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc as isize,
                1,
            )
        }
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: usize,
    ) {
        gemm::check_extents(m, k, n, rsa, csa, a.len(), rsb, csb, b.len(), rsc, c.len());
        // SAFETY: every addressed element lies inside its slice (checked above).
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc as isize,
                1,
            )
        }
    }
}

/// N-dimensional row-major array, optionally carrying a gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffTensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> DiffTensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![T::zero(); len])
    }

    pub fn full(shape: Vec<usize>, value: T) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![value; len])
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a gradient leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    /// Values and gradient borrowed together, for in-place parameter updates.
    pub fn values_and_grad_mut(&mut self) -> (&mut [T], Option<&mut [T]>) {
        (&mut self.values, self.grad.as_deref_mut())
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.values.len() {
            return Err(Error::Shape(format!(
                "gradient of length {} for tensor of shape {:?}",
                delta.len(),
                self.shape
            )));
        }
        let n = self.values.len();
        let grad = self.grad.get_or_insert_with(|| vec![T::zero(); n]);
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    /// Sets the gradient buffer to zero (allocating it for grad leaves).
    pub fn zero_grad(&mut self) {
        match self.grad.as_mut() {
            Some(g) => g.iter_mut().for_each(|v| *v = T::zero()),
            None if self.requires_grad => self.grad = Some(vec![T::zero(); self.values.len()]),
            None => {}
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Same values in another precision; gradients are dropped.
    pub fn cast<U: Real>(&self) -> DiffTensor<U> {
        DiffTensor {
            shape: self.shape.clone(),
            values: self
                .values
                .iter()
                .map(|v| U::of(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}
