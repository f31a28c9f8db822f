//! Dense tensors, a reverse-mode tape, Adam and the checkpoint format.
//!
//! Everything is generic over [`Real`] so the same model code runs in f32
//! for training and in f64 for finite-difference gradient checks.

mod adam;
mod checkpoint;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

pub use adam::AdamState;
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

pub trait Real: Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static {
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A named, owned parameter tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    shape: Vec<usize>,
    values: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if values.len() != numel {
            return Err(Error::Shape(format!("shape {shape:?} needs {numel} values, got {}", values.len())));
        }
        Ok(Tensor {
            name: name.into(),
            shape,
            values,
            requires_grad: true,
            grad: None,
        })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(name, shape, vec![T::zero(); numel]).expect("consistent")
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform(name: impl Into<String>, shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let numel = shape.iter().product();
        let values = (0..numel).map(|_| T::of(rng.random_range(-bound..=bound))).collect();
        Tensor::new(name, shape, values).expect("consistent")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(T::zero());
        }
    }

    fn accumulate_grad(&mut self, g: &[T]) {
        if !self.requires_grad {
            return;
        }
        let buf = self.grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
        for (b, v) in buf.iter_mut().zip(g) {
            *b = *b + *v;
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            name: self.name.clone(),
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::of(v.f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self.grad.as_ref().map(|g| g.iter().map(|v| U::of(v.f64())).collect()),
        }
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { tensors: Vec::new() }
    }

    /// Adds a tensor and returns its index. Names must be unique.
    pub fn push(&mut self, tensor: Tensor<T>) -> usize {
        assert!(self.index_of(&tensor.name).is_none(), "duplicate parameter {}", tensor.name);
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.tensors.iter_mut().for_each(|t| t.set_requires_grad(on));
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &ParamSet<T>) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .zip(other.iter())
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}
