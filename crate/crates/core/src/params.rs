//! Named learnable parameters and non-trainable buffers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `N(0, 2 / fan_in)` drawn from the store's seeded stream.
    HeNormal { fan_in: usize },
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub init: Init,
}

#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Owns every parameter of a model. Modules keep [`ParamId`] handles.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Shape, init: Init) -> ParamId {
        let value = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::HeNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("finite std");
                let rng = &mut self.rng;
                Tensor::from_fn(shape, |_, _, _, _| T::of(dist.sample(rng)))
            }
        };
        self.params.push(Parameter {
            name: name.into(),
            grad: Tensor::zeros(shape),
            value,
            init,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<T>) {
        self.params[id.0].grad.add_assign(g);
    }

    /// Sets every parameter whose name starts with `prefix` to `value`.
    /// Returns how many parameters were touched.
    pub fn fill_prefix(&mut self, prefix: &str, value: T) -> usize {
        let mut touched = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.value.fill(value);
            touched += 1;
        }
        touched
    }

    /// Snapshot of all parameter values and buffers (for best-checkpoint tracking).
    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .map(|p| p.value.clone())
            .chain(self.buffers.iter().map(|b| b.value.clone()))
            .collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor<T>]) {
        assert_eq!(snapshot.len(), self.params.len() + self.buffers.len());
        let (p, b) = snapshot.split_at(self.params.len());
        for (dst, src) in self.params.iter_mut().zip(p) {
            dst.value = src.clone();
        }
        for (dst, src) in self.buffers.iter_mut().zip(b) {
            dst.value = src.clone();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_tags_and_zero_grads() {
        let mut s = ParamStore::<f64>::new(7);
        let w = s.add("w", [4, 4, 1, 1], Init::HeNormal { fan_in: 4 });
        let b = s.add("b", [1, 4, 1, 1], Init::Zeros);
        let g = s.add("g", [1, 4, 1, 1], Init::Ones);
        assert_eq!(s.num_scalars(), 24);
        assert!(s.value(w).data().iter().any(|&v| v != 0.0));
        assert_eq!(s.value(b).sum(), 0.0);
        assert_eq!(s.value(g).sum(), 4.0);
        s.accumulate_grad(w, &Tensor::ones([4, 4, 1, 1]));
        assert_eq!(s.grad(w).shape(), s.value(w).shape());
        s.zero_grads();
        assert_eq!(s.grad(w).sum(), 0.0);
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let mk = || {
            let mut s = ParamStore::<f64>::new(3);
            let id = s.add("w", [2, 3, 3, 3], Init::HeNormal { fan_in: 27 });
            s.value(id).clone()
        };
        assert_eq!(mk(), mk());
    }
}
