use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Initialization rule for a new parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// He-normal with the given fan-in, suited to ReLU stacks.
    KaimingNormal { fan_in: usize },
    Uniform { bound: f64 },
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Arc<Tensor<T>>,
    trainable: bool,
}

/// Named, ordered collection of trainable parameters and state buffers.
///
/// A store created with [`ParamStore::new_meta`] holds meta tensors only; it
/// supports shape propagation and parameter counting but no arithmetic.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    by_name: BTreeMap<String, ParamId>,
    meta: bool,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: BTreeMap::new(), meta: false }
    }

    pub fn new_meta() -> Self {
        Self { meta: true, ..Self::new() }
    }

    pub fn is_meta(&self) -> bool {
        self.meta
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.entries.push(Entry { name: name.to_string(), value: Arc::new(value), trainable });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut impl Rng) -> ParamId {
        let value = if self.meta { Tensor::meta(shape) } else { init_tensor(shape, init, rng) };
        self.insert(name, value, true)
    }

    /// Non-trainable state such as running statistics.
    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let value = if self.meta { Tensor::meta(value.shape()) } else { value };
        self.insert(name, value, false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_arc(&self, id: ParamId) -> Arc<Tensor<T>> {
        Arc::clone(&self.entries[id.0].value)
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(self.entries[id.0].value.shape(), value.shape(), "parameter shape change");
        self.entries[id.0].value = Arc::new(value);
    }

    /// Exact number of trainable scalars.
    pub fn count_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) {
        for (id, value) in updates {
            assert!(!self.is_trainable(id), "buffer update targets trainable parameter");
            self.set(id, value);
        }
    }
}

fn init_tensor<T: Scalar>(shape: &[usize], init: Init, rng: &mut impl Rng) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::ones(shape),
        Init::Constant(c) => Tensor::full(shape, T::of(c)),
        Init::KaimingNormal { fan_in } => {
            let std = (2.0 / fan_in.max(1) as f64).sqrt();
            Tensor::from_fn(shape, |_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(std * z)
            })
        }
        Init::Uniform { bound } => Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound))),
    }
}
