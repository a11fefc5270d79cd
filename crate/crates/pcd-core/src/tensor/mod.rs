//! Shaped numeric arrays and the reverse-mode autodiff engine built on them.
//!
//! The engine is deliberately small: it provides exactly the operators the
//! networks in this crate need, each with a hand-written backward pass that is
//! verified against finite differences. Image-like tensors use the canonical
//! `[batch, channels, height, width]` layout, row-major.

mod gradcheck;
mod graph;
mod ops;

#[cfg(test)]
mod tests;

pub use gradcheck::{gradcheck, GradCheckReport};
pub use graph::{Graph, MaskEntry, Var};

use crate::error::{Error, Result};
use num_traits::{Float, NumCast};
use std::fmt::{Debug, Display};

/// Element type of tensors: `f32` for training speed, `f64` for tests and
/// oracles. All tolerances in the test suite are stated per precision.
pub trait Scalar:
    Float + NumCast + Debug + Display + Send + Sync + std::iter::Sum + 'static
{
    const EPS_BN: f64 = 1e-5;
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Convert an `f64` constant into the active scalar type.
#[inline]
pub fn sc<F: Scalar>(x: f64) -> F {
    F::from(x).expect("f64 constant representable in scalar type")
}

/// A dense, row-major, shaped array of floats.
///
/// Invariant: `shape.iter().product() == data.len()`.
#[derive(Clone, PartialEq)]
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![F::zero(); n] }
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::config(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Scalar (single-element) tensor.
    pub fn scalar(v: F) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
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

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Single value of a scalar tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Interpret as `[batch, channels, height, width]`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::config(format!("expected 4-d tensor, got shape {:?}", self.shape))),
        }
    }

    /// Interpret as `[rows, cols]`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::config(format!("expected 2-d tensor, got shape {:?}", self.shape))),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Accumulate `other` into `self` elementwise. Shapes must match.
    pub fn add_assign(&mut self, other: &Tensor<F>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
    }

    pub fn fill(&mut self, v: F) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn map_into_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.to_f64().unwrap()).collect(),
        }
    }
}

impl<F: Scalar> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(shape={:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, ", data={:?})", self.data)
        } else {
            write!(f, ", {} elems)", self.data.len())
        }
    }
}

/// A named, optionally trainable tensor plus its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter<F: Scalar> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    pub trainable: bool,
}

impl<F: Scalar> Parameter<F> {
    pub fn new(name: impl Into<String>, value: Tensor<F>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { name: name.into(), value, grad, trainable: true }
    }

    pub fn frozen(name: impl Into<String>, value: Tensor<F>) -> Self {
        let mut p = Self::new(name, value);
        p.trainable = false;
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }
}
