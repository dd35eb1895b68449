//! Named parameter collections and their attachment to a tape.

use std::collections::HashMap;

use rand::Rng;

use super::graph::{Gradients, Graph, NodeId};
use super::tensor::Tensor;
use crate::{Error, Result};

/// One trainable tensor with a dotted path name
/// (e.g. `attention.encoder.u1`).
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered collection of parameters. Insertion order is part of the contract:
/// it fixes the optimizer's moment layout and the gradient accumulation
/// order, which keeps training bit-deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArg {
                op: "param_set",
                detail: format!("duplicate parameter name `{name}`"),
            });
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, tensor });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i].tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total element count across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Copies every parameter onto a fresh tape. `trainable` decides which
    /// leaves receive gradients; frozen subtrees cost nothing in backward.
    pub fn bind<F: Fn(&str) -> bool>(&self, graph: &mut Graph, trainable: F) -> Binding {
        let mut entries = Vec::with_capacity(self.params.len());
        let mut index = HashMap::with_capacity(self.params.len());
        for p in &self.params {
            let id = graph.leaf(p.tensor.clone(), trainable(&p.name));
            index.insert(p.name.clone(), entries.len());
            entries.push((p.name.clone(), id));
        }
        Binding { entries, index }
    }
}

/// Tape locations of a bound [`ParamSet`].
pub struct Binding {
    entries: Vec<(String, NodeId)>,
    index: HashMap<String, usize>,
}

impl Binding {
    /// Node id of a bound parameter. Parameter names are fixed by the network
    /// builders, so a missing name is a programming error, not a runtime
    /// condition.
    pub fn id(&self, name: &str) -> NodeId {
        match self.index.get(name) {
            Some(&i) => self.entries[i].1,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    /// Gradients for the trainable bound parameters, in binding order.
    /// Parameters off the loss path report zeros.
    pub fn grads(&self, graph: &Graph, store: &Gradients) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .filter(|(_, id)| graph.requires_grad(*id))
            .map(|(name, id)| (name.clone(), store.grad_tensor(*id, graph.value(*id))))
            .collect()
    }
}

/// Seeded initialization helpers.
pub mod init {
    use super::*;

    /// Uniform in ±`bound`.
    pub fn uniform<R: Rng>(rng: &mut R, shape: Vec<usize>, bound: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor::new(shape, data).expect("shape/product consistent by construction")
    }

    /// Uniform in ±sqrt(1/fan_in), the crate-wide layer initialization.
    pub fn fan_in<R: Rng>(rng: &mut R, fan_in: usize, shape: Vec<usize>) -> Tensor {
        uniform(rng, shape, (1.0 / fan_in.max(1) as f64).sqrt())
    }

    /// All-ones (norm gains).
    pub fn ones(shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![1.0; n]).expect("shape/product consistent by construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut set = ParamSet::new();
        set.insert("a.w", Tensor::scalar(1.0)).unwrap();
        let err = set.insert("a.w", Tensor::scalar(2.0)).unwrap_err();
        assert!(matches!(err, Error::InvalidArg { op: "param_set", .. }));
    }

    #[test]
    fn iteration_preserves_insertion_order() {
        let mut set = ParamSet::new();
        for name in ["z.w", "a.w", "m.w"] {
            set.insert(name, Tensor::scalar(0.0)).unwrap();
        }
        let names: Vec<&str> = set.names().collect();
        assert_eq!(names, ["z.w", "a.w", "m.w"]);
    }

    #[test]
    fn fan_in_bound_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = init::fan_in(&mut rng, 16, vec![8, 16]);
        let bound = 0.25;
        assert!(t.data().iter().all(|v| v.abs() < bound));
        // Not degenerate: draws actually vary.
        assert!(t.data().iter().any(|v| v.abs() > 1e-3));
    }

    #[test]
    fn frozen_binding_reports_only_trainable_grads() {
        let mut set = ParamSet::new();
        set.insert("frozen.w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        set.insert("live.w", Tensor::vector(vec![3.0, 4.0])).unwrap();
        let mut g = Graph::new();
        let b = set.bind(&mut g, |name| name.starts_with("live"));
        let sum_frozen = g.sum_all(b.id("frozen.w"));
        let sum_live = g.sum_all(b.id("live.w"));
        let loss = g.add(sum_frozen, sum_live).unwrap();
        let grads = g.backward(loss).unwrap();
        let named = b.grads(&g, &grads);
        assert_eq!(named.len(), 1);
        assert_eq!(named[0].0, "live.w");
        assert_eq!(named[0].1.data(), &[1.0, 1.0]);
    }
}
