use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};

use crate::float::Float;

/// Handle to a trainable tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Position in store order.
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to a non-trainable state tensor (batch-norm running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct NamedTensor<T> {
    pub name: String,
    pub value: ArrayD<T>,
}

/// Named, ordered collection of parameters and buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<NamedTensor<T>>,
    buffers: Vec<NamedTensor<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), buffers: Vec::new(), by_name: HashMap::new() }
    }

    /// Registers a parameter; panics on a duplicate name since names are
    /// derived from the architecture.
    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(NamedTensor { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: ArrayD<T>) -> BufferId {
        self.buffers.push(NamedTensor { name: name.into(), value });
        BufferId(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &ArrayD<T> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut ArrayD<T> {
        &mut self.buffers[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn params(&self) -> &[NamedTensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[NamedTensor<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.buffers
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total scalar count over trainable tensors (buffers excluded).
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect()
    }

    /// Zero-filled tensors matching every parameter's shape.
    pub fn zeros_like(&self) -> Vec<ArrayD<T>> {
        self.params.iter().map(|p| ArrayD::zeros(IxDyn(p.value.shape()))).collect()
    }
}
