use indexmap::IndexMap;
use ndarray::Array4;

use super::{Gradients, Graph, Real, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F> {
    entries: IndexMap<String, Array4<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Array4<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.entries.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let (idx, _) = self.entries.insert_full(name, value);
        ParamId(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }

    /// Scalar count of the parameters registered at positions `range`.
    pub fn num_scalars_in(&self, range: std::ops::Range<usize>) -> usize {
        self.entries[range].values().map(|v| v.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Array4<F> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array4<F> {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Array4<F>> {
        self.entries.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Array4<F>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array4<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Array4<F>> {
        self.entries.values_mut()
    }

    /// Flattened copy of every parameter, in registration order.
    pub fn flatten(&self) -> Vec<F> {
        self.entries.values().flat_map(|v| v.iter().copied()).collect()
    }

    /// Copies every parameter into `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph<F>, trainable: bool) -> Bound {
        Bound(
            self.entries
                .values()
                .map(|v| graph.leaf(v.clone(), trainable))
                .collect(),
        )
    }

    /// Gradients of the bound parameters, in registration order.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients<F>) -> Vec<Array4<F>> {
        self.entries
            .values()
            .zip(&bound.0)
            .map(|(value, var)| grads.get_or_zeros(*var, value))
            .collect()
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}
