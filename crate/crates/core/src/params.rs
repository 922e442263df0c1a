//! Named parameter storage and the recording session that binds parameters
//! into a [`Graph`].
//!
//! Layers hold [`ParamId`] handles into a [`ParamStore`]. Two layers holding
//! the same handle share one tensor: inside a [`Session`] a handle is bound to
//! a single graph leaf, so gradients from every use accumulate there.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Gradients, NodeId, NormMode};
use crate::tensor::Tensor;

/// Running-statistics momentum for batch normalization.
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StatsId(usize);

impl StatsId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn update(&mut self, batch: &BatchStats) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * b;
        }
    }
}

/// Learnable tensors in creation order, plus non-learnable normalization buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    stats: Vec<RunningStats>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stats.push(RunningStats {
            name: name.into(),
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        });
        StatsId(self.stats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.stats
    }

    pub fn apply_stat_updates(&mut self, updates: &[(StatsId, BatchStats)]) {
        for (id, batch) in updates {
            self.stats[id.0].update(batch);
        }
    }

    /// Replaces a parameter tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::contract(
                "param_store",
                format!(
                    "{}: shape {:?} does not match {:?}",
                    self.names[id.0],
                    value.shape(),
                    self.values[id.0].shape()
                ),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }
}

/// Fan-in scaled initializer.
pub struct Initializer<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Initializer<'_, R> {
    /// Uniform in `±sqrt(6 / fan_in)`.
    pub fn weight(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in as f64).sqrt();
        let t = Tensor::uniform(shape, -bound, bound, self.rng);
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: String, len: usize) -> ParamId {
        self.store.add(name, Tensor::zeros(vec![len]))
    }

    pub fn ones(&mut self, name: String, len: usize) -> ParamId {
        self.store.add(name, Tensor::ones(vec![len]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

/// Maps parameter handles onto graph leaves for one forward/backward pass.
pub struct Session<'p> {
    pub graph: Graph,
    store: &'p ParamStore,
    bound: Vec<Option<NodeId>>,
    mode: Mode,
    seed: u64,
    stat_updates: Vec<(StatsId, BatchStats)>,
    traces: Option<Vec<BlockTrace>>,
}

/// Nodes captured for one network block during a traced forward pass.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub name: String,
    pub input: NodeId,
    pub attention: NodeId,
    pub output: NodeId,
}

impl<'p> Session<'p> {
    pub fn new(store: &'p ParamStore, mode: Mode, seed: u64) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            seed,
            stat_updates: Vec::new(),
            traces: None,
        }
    }

    /// A session over an existing graph with some parameters already bound
    /// to given nodes (used to differentiate with respect to chosen leaves).
    pub fn from_graph(graph: Graph, store: &'p ParamStore, mode: Mode, seed: u64, bindings: &[(ParamId, NodeId)]) -> Self {
        let mut sess = Session::new(store, mode, seed);
        sess.graph = graph;
        for &(id, node) in bindings {
            sess.bound[id.0] = Some(node);
        }
        sess
    }

    pub fn into_graph(self) -> Graph {
        self.graph
    }

    /// Also record per-block feature and attention nodes.
    pub fn with_traces(mut self) -> Self {
        self.traces = Some(Vec::new());
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// The graph leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(node) = self.bound[id.0] {
            return node;
        }
        let node = self.graph.variable(self.store.get(id).clone());
        self.bound[id.0] = Some(node);
        node
    }

    pub fn bound_node(&self, id: ParamId) -> Option<NodeId> {
        self.bound[id.0]
    }

    pub fn batch_norm(&mut self, x: NodeId, scale: ParamId, shift: ParamId, stats: StatsId) -> Result<NodeId> {
        let s = self.param(scale);
        let b = self.param(shift);
        match self.mode {
            Mode::Train => {
                let (out, batch) = self.graph.batch_norm(x, s, b, NormMode::Batch)?;
                if let Some(batch) = batch {
                    self.stat_updates.push((stats, batch));
                }
                Ok(out)
            }
            Mode::Eval => {
                let rs = &self.store.stats()[stats.0];
                let (out, _) = self.graph.batch_norm(
                    x,
                    s,
                    b,
                    NormMode::Running {
                        mean: &rs.mean,
                        var: &rs.var,
                    },
                )?;
                Ok(out)
            }
        }
    }

    pub fn record_trace(&mut self, trace: BlockTrace) {
        if let Some(t) = &mut self.traces {
            t.push(trace);
        }
    }

    pub fn traces(&self) -> &[BlockTrace] {
        self.traces.as_deref().unwrap_or(&[])
    }

    pub fn stat_updates(&self) -> &[(StatsId, BatchStats)] {
        &self.stat_updates
    }

    /// Per-parameter gradients (`None` for parameters this pass never touched).
    pub fn backward(&mut self, loss: NodeId) -> Result<(Vec<Option<Tensor>>, Vec<(StatsId, BatchStats)>)> {
        let mut grads: Gradients = self.graph.backward(loss)?;
        let per_param = self
            .bound
            .iter()
            .map(|b| b.and_then(|node| grads.take(node)))
            .collect();
        Ok((per_param, std::mem::take(&mut self.stat_updates)))
    }
}

/// Derives an independent stream seed from a base seed and a tag
/// (SplitMix64 finalizer).
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_handle_binds_one_leaf() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(2.0));
        let mut sess = Session::new(&store, Mode::Train, 0);
        let a = sess.param(id);
        let b = sess.param(id);
        assert_eq!(a, b);
        let y = sess.graph.mul(a, b).unwrap();
        let (grads, _) = sess.backward(y).unwrap();
        assert_eq!(grads[0].as_ref().unwrap().item(), 4.0);
    }

    #[test]
    fn set_checks_shape() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros(vec![2]));
        assert!(store.set(id, Tensor::zeros(vec![3])).is_err());
        store.set(id, Tensor::ones(vec![2])).unwrap();
        assert_eq!(store.get(id).sum(), 2.0);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}
