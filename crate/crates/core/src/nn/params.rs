use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;

use super::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in a fixed registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Mat>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter `{name}`"
        );
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            tensors: self
                .tensors
                .iter()
                .map(|t| Mat::zeros(t.raw_dim()))
                .collect(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore::new()
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    tensors: Vec<Mat>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Mat {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.tensors[id.0]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|x| x * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

/// Registers parameters with their initial values.
///
/// Matrices get a scaled uniform draw in `±sqrt(6 / (rows + cols))`;
/// biases and label embeddings start at zero, layer-norm gains at one.
pub struct ParamBuilder<'r, R: Rng> {
    pub store: ParamStore,
    rng: &'r mut R,
    prefix: Vec<String>,
}

impl<'r, R: Rng> ParamBuilder<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        ParamBuilder {
            store: ParamStore::new(),
            rng,
            prefix: Vec::new(),
        }
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    pub fn push_scope(&mut self, scope: impl Into<String>) {
        self.prefix.push(scope.into());
    }

    pub fn pop_scope(&mut self) {
        self.prefix.pop();
    }

    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let rng = &mut *self.rng;
        let value = Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..=bound));
        self.store.add(self.full_name(name), value)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.store
            .add(self.full_name(name), Mat::zeros((rows, cols)))
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.store
            .add(self.full_name(name), Mat::ones((rows, cols)))
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}
