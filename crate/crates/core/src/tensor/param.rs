use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Position in the store, which is also the slot in gradient vectors.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// Trainable weight block plus its SGD momentum buffer.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub momentum: Vec<T>,
    /// Biases and batchnorm scale/shift skip weight decay.
    pub decay_exempt: bool,
}

/// Non-trainable state (batchnorm running statistics).
#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Running-statistic update produced by a train-mode batchnorm forward.
#[derive(Clone, Debug)]
pub struct RunningUpdate<T> {
    pub mean: BufferId,
    pub var: BufferId,
    pub batch_mean: Vec<T>,
    pub batch_var_unbiased: Vec<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, decay_exempt: bool) -> ParamId {
        let momentum = vec![T::zero(); tensor.numel()];
        self.params.push(Parameter {
            name: name.into(),
            tensor,
            momentum,
            decay_exempt,
        });
        ParamId(self.params.len() - 1)
    }

    /// Weight with Gaussian entries of standard deviation `sqrt(2 / fan_in)`.
    pub fn add_he_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        self.add_normal(name, shape, (2.0 / fan_in as f64).sqrt(), rng)
    }

    /// Weight with zero-mean Gaussian entries.
    pub fn add_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: impl Into<Vec<usize>>,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("positive std");
        let t = Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)));
        self.add(name, t, false)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            tensor,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer<T> {
        &self.buffers[id.0]
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
    }

    /// Installs gradients returned by [`super::Tape::backward`].
    pub fn set_grads(&mut self, grads: Vec<Option<Vec<T>>>) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::Config(format!(
                "gradient list has {} entries for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            match g {
                Some(g) => p.tensor.set_grad(g)?,
                None => p.tensor.clear_grad(),
            }
        }
        Ok(())
    }

    /// Folds batch statistics into running estimates: `r = (1 - m) r + m b`.
    pub fn apply_running_updates(&mut self, updates: Vec<RunningUpdate<T>>, momentum: f64) {
        let m = T::lit(momentum);
        let keep = T::one() - m;
        for u in updates {
            for (r, b) in self.buffers[u.mean.0]
                .tensor
                .values_mut()
                .iter_mut()
                .zip(&u.batch_mean)
            {
                *r = keep * *r + m * *b;
            }
            for (r, b) in self.buffers[u.var.0]
                .tensor
                .values_mut()
                .iter_mut()
                .zip(&u.batch_var_unbiased)
            {
                *r = keep * *r + m * *b;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    momentum: p.momentum.iter().map(|v| U::lit(v.as_f64())).collect(),
                    decay_exempt: p.decay_exempt,
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    tensor: b.tensor.cast(),
                })
                .collect(),
        }
    }
}
