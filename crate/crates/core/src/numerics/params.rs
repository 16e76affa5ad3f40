use std::collections::HashMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{ensure_contract, Error, Result};

/// Standard deviation of the normal used for weights and embeddings
/// (variance 0.01).
pub const INIT_STD: f64 = 0.1;

/// Index of a parameter inside a [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    name: String,
    value: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Named model parameters with their Adam moments.
///
/// Parameters are always kept in lexicographic name order; [`ParamId`]s are
/// positions in that order and stay valid for clones of the same set.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterSet {
    slots: Vec<Slot>,
    index: HashMap<String, usize>,
    step: u64,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tensors(entries: impl IntoIterator<Item = (String, Tensor)>) -> Result<Self> {
        let mut set = Self::new();
        for (name, value) in entries {
            set.insert(name, value)?;
        }
        Ok(set)
    }

    /// Adds a parameter with zeroed moments. Inserting shifts the ids of
    /// every parameter that sorts after `name`.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        ensure_contract!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let pos = self.slots.binary_search_by(|s| s.name.as_str().cmp(&name)).unwrap_err();
        let zeros = Tensor::zeros(value.shape());
        self.slots.insert(
            pos,
            Slot {
                name,
                m: zeros.clone(),
                v: zeros,
                value,
            },
        );
        self.reindex();
        Ok(ParamId(pos))
    }

    /// Adds a weight matrix (or embedding table) initialised from N(0, 0.01).
    pub fn insert_random<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        rng: &mut R,
    ) -> Result<ParamId> {
        self.insert(name, Tensor::randn(shape, INIT_STD, rng))
    }

    /// Adds a zero-initialised bias.
    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape))
    }

    fn reindex(&mut self) {
        self.index = self
            .slots
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].value
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.slots[i].value)
    }

    pub fn moments(&self, id: ParamId) -> (&Tensor, &Tensor) {
        let s = &self.slots[id.0];
        (&s.m, &s.v)
    }

    /// Adam step counter.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// `(id, name, value)` in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.slots
            .iter()
            .enumerate()
            .map(|(i, s)| (ParamId(i), s.name.as_str(), &s.value))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    /// Replaces a parameter's values, keeping its moments.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.id(name)?;
        let slot = &mut self.slots[id.0];
        ensure_contract!(
            slot.value.shape() == value.shape(),
            "shape mismatch assigning `{name}`: {:?} vs {:?}",
            slot.value.shape(),
            value.shape()
        );
        slot.value = value;
        Ok(())
    }

    pub(crate) fn slot_mut(&mut self, id: ParamId) -> (&mut Tensor, &mut Tensor, &mut Tensor) {
        let s = &mut self.slots[id.0];
        (&mut s.value, &mut s.m, &mut s.v)
    }
}

/// Gradients aligned with a [`ParameterSet`]. A parameter without an entry
/// has an implicit zero gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl GradientMap {
    pub fn for_params(params: &ParameterSet) -> Self {
        Self {
            names: params.slots.iter().map(|s| s.name.clone()).collect(),
            shapes: params.slots.iter().map(|s| s.value.shape().to_vec()).collect(),
            grads: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub(crate) fn buffer(&mut self, id: ParamId) -> &mut [f64] {
        let n: usize = self.shapes[id.0].iter().product();
        self.grads[id.0].get_or_insert_with(|| vec![0.0; n])
    }

    pub fn by_id(&self, id: ParamId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient for `name`, materialised as zeros when the parameter was never
    /// reached.
    pub fn get(&self, name: &str) -> Option<Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        let data = match &self.grads[i] {
            Some(g) => g.clone(),
            None => vec![0.0; self.shapes[i].iter().product()],
        };
        Some(Tensor::new(self.shapes[i].clone(), data).expect("shape recorded at construction"))
    }

    pub fn set(&mut self, name: &str, grad: Tensor) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::contract(format!("gradient for unknown parameter `{name}`")))?;
        ensure_contract!(
            grad.shape() == self.shapes[i].as_slice(),
            "gradient shape {:?} does not match `{name}` {:?}",
            grad.shape(),
            self.shapes[i]
        );
        self.grads[i] = Some(grad.into_data());
        Ok(())
    }

    pub fn remove(&mut self, name: &str) {
        if let Some(i) = self.names.iter().position(|n| n == name) {
            self.grads[i] = None;
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn clear(&mut self) {
        for g in self.grads.iter_mut().flatten() {
            g.fill(0.0);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}
