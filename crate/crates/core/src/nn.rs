//! Parameter containers shared by the models.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

/// Anything that owns named trainable tensors.
pub trait Module<E: Elem> {
    /// Appends `(name, tensor)` pairs in a fixed order, names prefixed by `prefix`.
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>);

    fn named_params(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn params(&self) -> Vec<Tensor<E>> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    fn zero_grad(&self) {
        for p in self.params() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform `[-bound, bound]` values drawn as `f32` so `f32` and `f64` models
/// built from the same seed hold identical numbers.
pub(crate) fn uniform_param<E: Elem, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f32) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| E::from_f32(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::param(shape.to_vec(), data).expect("valid parameter shape")
}

pub(crate) fn const_param<E: Elem>(shape: &[usize], value: f64) -> Tensor<E> {
    let n: usize = shape.iter().product();
    Tensor::param(shape.to_vec(), vec![E::from_f64(value); n]).expect("valid parameter shape")
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<E: Elem = f32> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

impl<E: Elem> Linear<E> {
    /// Uniform init in `±1/sqrt(fan_in)` for both weight and bias.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f32).sqrt();
        Self {
            weight: uniform_param(rng, &[fan_in, fan_out], bound),
            bias: uniform_param(rng, &[fan_out], bound),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: const_param(&[fan_in, fan_out], 0.0),
            bias: const_param(&[fan_out], 0.0),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        match x.shape() {
            [_, d] if *d == self.fan_in() => x.matmul(&self.weight)?.add(&self.bias),
            s => Err(Error::shape(format!(
                "linear layer expects width {}, got input {s:?}",
                self.fan_in()
            ))),
        }
    }

    /// Overwrites the parameters with zeros.
    pub fn zero_out(&self) {
        self.weight.data_mut().iter_mut().for_each(|v| *v = E::zero());
        self.bias.data_mut().iter_mut().for_each(|v| *v = E::zero());
    }
}

impl<E: Elem> Module<E> for Linear<E> {
    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        out.push((join(prefix, "bias"), self.bias.clone()));
    }
}

/// Copies parameter values from `src` into `dst` by name (shapes must agree).
pub fn load_values<E: Elem, F: Elem>(dst: &impl Module<E>, src: &[(String, Tensor<F>)]) -> Result<()> {
    let lookup: std::collections::HashMap<&str, &Tensor<F>> = src.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for (name, p) in dst.named_params() {
        let s = lookup
            .get(name.as_str())
            .ok_or_else(|| Error::Config(format!("parameter {name} missing from source")))?;
        if s.shape() != p.shape() {
            return Err(Error::shape(format!("parameter {name}: {:?} vs {:?}", s.shape(), p.shape())));
        }
        let values = s.data();
        p.data_mut()
            .iter_mut()
            .zip(values.iter())
            .for_each(|(d, &v)| *d = E::from_f64(v.as_f64()));
    }
    Ok(())
}
