//! Named parameters and their gradients.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DcaeError, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T: Scalar = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { value, grad }
    }
}

/// Every learnable tensor of a model, keyed by a stable dotted path.
///
/// Iteration is in name order, which is also the order used by the model
/// archive and by the optimizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    params: BTreeMap<String, Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(DcaeError::Config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, Parameter::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<T>> {
        self.params
            .get(name)
            .ok_or_else(|| DcaeError::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| DcaeError::Config(format!("missing parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Add computed gradients into the stored `grad` slots.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (name, g) in &grads.params {
            let p = self.get_mut(name)?;
            p.grad.add_assign(g)?;
        }
        Ok(())
    }

    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0;
        for p in self.params.values() {
            for &g in p.grad.data() {
                acc += g.as_f64() * g.as_f64();
            }
        }
        acc.sqrt()
    }

    pub fn check_grads_finite(&self) -> Result<()> {
        for (name, p) in &self.params {
            if !p.grad.is_finite() {
                return Err(DcaeError::integrity(name, "non-finite gradient"));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            value: p.value.cast(),
                            grad: p.grad.cast(),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T: Scalar = f32> {
    pub params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|t| t.data().iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// Seeded weight initialisation.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: Shape, bound: f64) -> Tensor<f32> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound) as f32)
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn fan_in(&mut self, shape: Shape, fan_in: usize) -> Tensor<f32> {
        self.uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt())
    }

    pub fn normal(&mut self, shape: Shape, std: f64) -> Tensor<f32> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| {
            // Box-Muller on two uniforms from the seeded stream.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen::<f64>();
            ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * std) as f32
        })
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
