//! Named parameter storage and the per-pass binding of parameters into a graph.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SanError};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Decides how a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// `[fan_in × fan_out]` matrix, Xavier-uniform.
    Weight,
    /// zeros
    Bias,
    /// ones (layer-norm gain)
    Gain,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, shape: &[usize]) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(SanError::Contract(format!("duplicate parameter name {name}")));
        }
        let value = match kind {
            ParamKind::Gain => Tensor::filled(shape, 1.0),
            _ => Tensor::zeros(shape),
        };
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.clone(),
            kind,
            grad: Tensor::zeros(shape),
            value,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.l2_norm_sq())
            .sum::<f64>()
            .sqrt()
    }

    pub fn accumulate_grads(&mut self, grads: Vec<(ParamId, Tensor)>) {
        for (id, g) in grads {
            let dst = self.params[id.0].grad.data_mut();
            dst.iter_mut().zip(g.data()).for_each(|(d, s)| *d += s);
        }
    }

    /// True when names, shapes and every value bit match.
    pub fn bit_identical(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Name and weights of one attention head, captured for inspection.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub name: String,
    pub weights: Tensor,
}

/// One forward pass: a fresh graph, the parameters it reads, the train/eval
/// mode and the dropout generator.
pub struct Forward<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: HashMap<ParamId, NodeId>,
    train: bool,
    rng: ChaCha8Rng,
    trace: Option<Vec<AttentionTrace>>,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore, train: bool, seed: u64) -> Self {
        Forward {
            graph: Graph::new(),
            store,
            bound: HashMap::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            trace: None,
        }
    }

    pub fn eval(store: &'a ParamStore) -> Self {
        Self::new(store, false, 0)
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Graph node for a parameter; each parameter is bound once per pass.
    pub fn param(&mut self, id: ParamId) -> Result<NodeId> {
        if let Some(&node) = self.bound.get(&id) {
            return Ok(node);
        }
        let node = self.graph.leaf(self.store.value(id).clone())?;
        self.bound.insert(id, node);
        Ok(node)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.graph.leaf(value)
    }

    pub fn dropout(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        self.graph.dropout(x, p, self.train, &mut self.rng)
    }

    pub fn tracing(&self) -> bool {
        self.trace.is_some()
    }

    pub fn record(&mut self, name: String, weights: NodeId) {
        if let Some(trace) = &mut self.trace {
            trace.push(AttentionTrace {
                name,
                weights: self.graph.value(weights).clone(),
            });
        }
    }

    pub fn take_trace(&mut self) -> Vec<AttentionTrace> {
        self.trace.take().unwrap_or_default()
    }

    /// Gradients of every bound parameter after `graph.backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .filter_map(|(&id, &node)| self.graph.grad(node).map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_set_initial_values() {
        let mut store = ParamStore::new();
        let b = store.add("b", ParamKind::Bias, &[3]).unwrap();
        let g = store.add("g", ParamKind::Gain, &[3]).unwrap();
        assert_eq!(store.value(b).data(), &[0.0; 3]);
        assert_eq!(store.value(g).data(), &[1.0; 3]);
        assert!(store.add("g", ParamKind::Gain, &[3]).is_err());
        assert_eq!(store.id("g"), Some(g));
    }

    #[test]
    fn param_bound_once_per_pass() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamKind::Weight, &[2, 2]).unwrap();
        let mut fwd = Forward::eval(&store);
        let a = fwd.param(w).unwrap();
        let b = fwd.param(w).unwrap();
        assert_eq!(a, b);
        assert_eq!(fwd.graph.len(), 1);
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamKind::Gain, &[2]).unwrap();
        for _ in 0..2 {
            let mut fwd = Forward::eval(&store);
            let x = fwd.param(w).unwrap();
            let s = fwd.graph.sum(x).unwrap();
            fwd.graph.backward(s).unwrap();
            let grads = fwd.param_grads();
            store.accumulate_grads(grads);
        }
        assert_eq!(store.grad(w).data(), &[2.0, 2.0]);
        store.zero_grad();
        assert_eq!(store.grad(w).data(), &[0.0, 0.0]);
    }
}
