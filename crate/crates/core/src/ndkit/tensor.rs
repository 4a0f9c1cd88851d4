use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::Rng;

/// Dense row-major tensor of rank at most 3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(shape.len() <= 3, "tensor rank {} > 3", shape.len());
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.len() > 3 {
            return Err(Error::Shape(format!("tensor rank {} exceeds 3", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    pub fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut t = Tensor::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = rng.gen_range(-a..a));
        t
    }

    pub fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        t
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One trainable tensor with its gradient and momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub velocity: Tensor,
    /// Biases are exempt from weight decay.
    pub decay: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor, decay: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        let velocity = Tensor::zeros(value.shape());
        Param {
            name: name.into(),
            value,
            grad,
            velocity,
            decay,
        }
    }
}

/// Named parameter tensors, in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerParams {
    params: Vec<Param>,
}

impl LayerParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, p: Param) {
        assert!(self.index(&p.name).is_none(), "duplicate parameter {}", p.name);
        self.params.push(p);
    }

    fn index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index(name).map(move |i| &mut self.params[i])
    }

    /// Value of a parameter that is known to exist.
    pub fn value(&self, name: &str) -> &Tensor {
        &self.get(name).unwrap_or_else(|| panic!("no parameter {name}")).value
    }

    pub fn grad_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.get_mut(name).unwrap_or_else(|| panic!("no parameter {name}")).grad
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad.fill(0.0));
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
