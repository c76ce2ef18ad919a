use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::error::{Error, Result};

/// Values plus an optional gradient buffer of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub value: ArrayD<f64>,
    pub grad: Option<ArrayD<f64>>,
}

impl Tensor {
    pub fn new(value: ArrayD<f64>) -> Self {
        Tensor { value, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn set_grad(&mut self, grad: ArrayD<f64>) -> Result<()> {
        if grad.shape() != self.value.shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} for tensor {:?}",
                grad.shape(),
                self.value.shape()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what.to_owned()));
        }
        Ok(())
    }
}

/// A trainable tensor with Adam moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub(crate) m: ArrayD<f64>,
    pub(crate) v: ArrayD<f64>,
    pub(crate) step: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        let zeros = ArrayD::zeros(value.raw_dim());
        Parameter {
            name: name.into(),
            m: zeros.clone(),
            v: zeros,
            tensor: Tensor::new(value),
            step: 0,
        }
    }

    pub fn value(&self) -> &ArrayD<f64> {
        &self.tensor.value
    }

    pub fn value_mut(&mut self) -> &mut ArrayD<f64> {
        &mut self.tensor.value
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&ArrayD<f64>, &ArrayD<f64>) {
        (&self.m, &self.v)
    }

    /// Replaces the value and clears optimizer state.
    pub fn load(&mut self, value: ArrayD<f64>) -> Result<()> {
        if value.shape() != self.tensor.value.shape() {
            return Err(Error::Shape(format!(
                "{}: loading {:?} into {:?}",
                self.name,
                value.shape(),
                self.tensor.value.shape()
            )));
        }
        *self = Parameter::new(self.name.clone(), value);
        Ok(())
    }
}

/// Anything owning trainable parameters in a fixed order.
pub trait Params {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value().len()).sum()
    }
}

/// Stores one gradient per parameter, matched by position.
pub fn install_grads(params: Vec<&mut Parameter>, grads: Vec<ArrayD<f64>>) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (p, g) in params.into_iter().zip(grads) {
        p.tensor.set_grad(g)?;
    }
    Ok(())
}

/// Uniform in `+-sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ArrayD<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-limit..limit))
}
