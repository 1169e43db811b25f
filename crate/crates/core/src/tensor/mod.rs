//! Minimal reverse-mode automatic differentiation.
//!
//! Parameters live in [`Tensor`]s owned by the models. Each training step
//! builds a fresh [`Graph`] (an eager tape), registers the parameters as
//! leaves, runs the forward operators and calls [`Graph::backward`] once.
//! Gradients come back as a [`Gradients`] table indexed by [`Var`].
//!
//! Only the operators needed by the reconstruction network are provided;
//! there is no general broadcasting and no second-order differentiation.

use std::fmt::Debug;
use std::sync::Arc;

use num_traits::Float;

use crate::error::{Error, Result};

pub mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use graph::{Gradients, Graph, Var};
pub use kernels::SpectralFilter;

/// Floating point element type of tensors: `f32` for training, `f64` for
/// gradient certification.
pub trait Real:
    Float
    + rustfft::FftNum
    + Default
    + Debug
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    const NAME: &'static str;

    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// The pointers must address matrices of the given sizes and strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    fn lit(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    fn lit(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// An n-dimensional array of values, optionally carrying a gradient.
///
/// The value buffer is reference counted so that registering a parameter
/// on a [`Graph`] does not copy it; mutation goes through
/// [`Tensor::data_mut`], which copies only if a graph still holds the buffer.
#[derive(Clone, Debug)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {shape:?} needs {expected} values, got {}",
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        })
    }

    /// A trainable tensor.
    pub fn param(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        Ok(Self::new(shape, data)?.with_requires_grad(true))
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![T::zero(); len]),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub(crate) fn shared_data(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the stored gradient. Ignored for tensors that do not
    /// require a gradient.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if !self.requires_grad {
            return Ok(());
        }
        if g.len() != self.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("gradient has {} values, tensor {:?}", g.len(), self.shape),
            ));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    /// Converts the element type; the gradient is dropped.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| U::lit(Real::as_f64(x))).collect()),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

/// Checks that `shape` has exactly `rank` dimensions.
pub(crate) fn expect_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::shape(
            op,
            format!("expected rank {rank}, got shape {shape:?}"),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::<f32>::new([2, 3], vec![0.0; 5]).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn non_trainable_tensor_never_accumulates() {
        let mut t = Tensor::<f64>::new([2], vec![1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 1.0]).unwrap();
        assert!(t.grad().is_none());

        let mut p = Tensor::<f64>::param([2], vec![1.0, 2.0]).unwrap();
        p.accumulate_grad(&[1.0, 1.0]).unwrap();
        p.accumulate_grad(&[0.5, 0.5]).unwrap();
        assert_eq!(p.grad().unwrap(), &[1.5, 1.5]);
        assert!(p.accumulate_grad(&[1.0]).is_err());
    }

    #[test]
    fn data_mut_does_not_alias_graph_copy() {
        let mut t = Tensor::<f32>::param([2], vec![1.0, 2.0]).unwrap();
        let held = t.shared_data();
        t.data_mut()[0] = 5.0;
        assert_eq!(held[0], 1.0);
        assert_eq!(t.data()[0], 5.0);
    }
}
