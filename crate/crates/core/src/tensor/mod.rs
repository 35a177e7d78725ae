//! Dense f32 tensors and reverse-mode automatic differentiation.
//!
//! The submodules split the numeric core into layers: raw compute
//! kernels ([`kernels`]), the autodiff graph ([`graph`]), the Adam
//! optimizer ([`adam`]) and the finite-difference gradient checker
//! ([`gradcheck`]).

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub(crate) mod kernels;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{grad_check, grad_check_directional, DirectionalReport, GradCheckReport};
pub use graph::{Gradients, Graph, Var};

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Dense row-major f32 tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    /// Build a tensor from a shape and matching data buffer.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel == 0 {
            return Err(Error::Shape(format!("empty tensor shape {shape:?}")));
        }
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel == 0 {
            return Err(Error::Shape(format!("empty tensor shape {shape:?}")));
        }
        Ok(Self { shape, data: vec![0.0; numel], grad: None })
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        t.data.fill(value);
        Ok(t)
    }

    pub fn scalar(value: f32) -> Self {
        Self { shape: vec![1], data: vec![value], grad: None }
    }

    /// Gaussian init with standard deviation `std`, drawn in index order.
    pub fn randn(shape: Vec<usize>, std: f32, rng: &mut impl Rng) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        let dist = Normal::new(0.0f32, std)
            .map_err(|e| Error::Config(format!("bad init std {std}: {e}")))?;
        for v in &mut t.data {
            *v = dist.sample(rng);
        }
        Ok(t)
    }

    /// Uniform init on [lo, hi), drawn in index order.
    pub fn rand_uniform(shape: Vec<usize>, lo: f32, hi: f32, rng: &mut impl Rng) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        for v in &mut t.data {
            *v = rng.gen_range(lo..hi);
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "grad length {} does not match tensor numel {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!(
                "item() on tensor with shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn validate_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            ))),
        }
    }
}

/// Ordered collection of named parameter tensors.
///
/// Order is the construction order and is part of the contract: the
/// graph registers leaves, the optimizer tracks moments, and the
/// checkpoint writer serializes tensors all in this order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn tensor_at(&self, idx: usize) -> &Tensor {
        &self.entries[idx].1
    }

    pub fn tensor_at_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].1
    }

    pub fn name_at(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn clear_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.clear_grad();
        }
    }
}
