//! Dense row-major tensors and the layer primitives the solvers are built from.
//!
//! Everything here is a pure function of its arguments. Reductions always run
//! in a fixed order per output element, so results are bitwise reproducible.

mod activation;
mod conv;
mod io;
mod pool;

pub use activation::{prelu, prelu_vjp, relu, relu_pair, relu_vjp};
pub use conv::{conv2d, conv2d_adjoint, conv_output_dims, ConvGeometry};
pub use io::{read_tns, read_tns_from, write_tns, write_tns_to, TNS_MAGIC};
pub use pool::{maxpool, maxpool_output_dims, maxpool_vjp, PoolArgmax};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{PeelError, Result};

/// Dense real array in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking extents and length. Values are not checked for
    /// finiteness here; use [`Tensor::validate_finite`] on public boundaries.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(PeelError::shape("tensor rank must be at least 1"));
        }
        if let Some(i) = dims.iter().position(|&d| d == 0) {
            return Err(PeelError::shape(format!("extent {i} of {dims:?} is zero")));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(PeelError::shape(format!(
                "dims {dims:?} need {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        assert!(
            !dims.is_empty() && dims.iter().all(|&d| d > 0),
            "invalid dims {dims:?}"
        );
        let len = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(dims);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(dims: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(dims, |_| std * rng.sample::<f64, _>(StandardNormal))
    }

    /// I.i.d. uniform entries on `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(dims: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(dims, |_| rng.gen_range(lo..hi))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extents interpreted as C×H×W.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match *self.dims.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(PeelError::shape(format!(
                "expected a C×H×W tensor, got dims {:?}",
                self.dims
            ))),
        }
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let len: usize = dims.iter().product();
        if len != self.data.len() || dims.contains(&0) {
            return Err(PeelError::shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn validate_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(PeelError::invalid(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            ))),
        }
    }

    pub fn ensure_same_dims(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(PeelError::shape(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.ensure_same_dims(other, "zip_map")?;
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        self.map(|v| alpha * v)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    /// `self += alpha * other`.
    pub fn add_scaled_assign(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.ensure_same_dims(other, "add_scaled_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        sqnorm(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Σ aᵢ bᵢ, accumulated left to right.
pub fn inner(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.ensure_same_dims(b, "inner")?;
    Ok(dot(&a.data, &b.data))
}

/// Σ aᵢ².
pub fn sqnorm(a: &Tensor) -> f64 {
    dot(&a.data, &a.data)
}

/// α·a + b.
pub fn axpy(alpha: f64, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| alpha * x + y)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}
