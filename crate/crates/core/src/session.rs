//! One forward evaluation: graph, parameter bindings, and stochastic state.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Gradients, Var};
use crate::params::ParamStore;
use crate::tensor::Matrix;

/// How the adaptive fusion module chooses decisions.
#[derive(Clone, Debug)]
pub enum Routing {
    /// Gumbel-Max sampling with fresh noise from the session rng.
    Sample,
    /// `argmax P` without noise.
    Greedy,
    /// Reuse noise and hard decisions recorded by an earlier session.
    Replay(Vec<RoutingRecord>),
}

/// Gumbel noise and hard decisions drawn for one fusion stage.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingRecord {
    pub noise: Matrix,
    pub hard: Vec<usize>,
}

pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: HashMap<String, Var>,
    frozen: Vec<String>,
    train: bool,
    dropout: bool,
    rng: Option<&'a mut ChaCha8Rng>,
    routing: Routing,
    replay_cursor: usize,
    routing_log: Vec<RoutingRecord>,
    bn_updates: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl<'a> Session<'a> {
    /// Inference session: normalization uses running statistics, no dropout,
    /// greedy routing.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: HashMap::new(),
            frozen: Vec::new(),
            train: false,
            dropout: false,
            rng: None,
            routing: Routing::Greedy,
            replay_cursor: 0,
            routing_log: Vec::new(),
            bn_updates: Vec::new(),
        }
    }

    /// Training session with batch statistics, dropout and sampled routing.
    pub fn train(store: &'a ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            train: true,
            dropout: true,
            rng: Some(rng),
            routing: Routing::Sample,
            ..Self::eval(store)
        }
    }

    /// Deterministic training-mode session (batch statistics, no dropout)
    /// with explicit routing, as used by gradient checks.
    pub fn deterministic_train(store: &'a ParamStore, routing: Routing, graph: Graph) -> Self {
        Self {
            graph,
            train: true,
            routing,
            ..Self::eval(store)
        }
    }

    pub fn with_frozen(mut self, prefixes: &[&str]) -> Self {
        self.frozen = prefixes.iter().map(|p| p.to_string()).collect();
        self
    }

    pub fn with_dropout(mut self, enabled: bool) -> Self {
        self.dropout = enabled;
        self
    }

    pub fn with_routing(mut self, routing: Routing) -> Self {
        self.routing = routing;
        self
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Whether normalization under `prefix` uses batch statistics.
    pub fn batch_stats(&self, prefix: &str) -> bool {
        self.train && !self.is_frozen(prefix)
    }

    pub fn dropout_active(&self) -> bool {
        self.train && self.dropout
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    /// Graph node for a stored parameter; frozen parameters become constants.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let value = self.store.expect(name).clone();
        let v = if self.is_frozen(name) {
            self.graph.constant(value)
        } else {
            self.graph.leaf(value)
        };
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn buffer(&self, name: &str) -> &Matrix {
        self.store
            .buffer(name)
            .unwrap_or_else(|| panic!("buffer `{name}` is not initialized"))
    }

    pub fn bindings(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients of every bound, non-frozen parameter.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(String, Matrix)> {
        let mut out: Vec<(String, Matrix)> = self
            .bound
            .iter()
            .filter(|(name, _)| !self.is_frozen(name))
            .map(|(name, v)| (name.clone(), grads.get_or_zeros(&self.graph, *v)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
            .as_deref_mut()
            .expect("this session was created without an rng")
    }

    /// Inverted-dropout keep mask, scaled by `1/(1-rate)`.
    pub fn dropout_mask(&mut self, rows: usize, cols: usize, rate: f64) -> Matrix {
        let keep = 1.0 - rate;
        let rng = self.rng();
        let data = (0..rows * cols)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        Matrix::from_vec(rows, cols, data).expect("mask shape")
    }

    pub fn routing(&self) -> &Routing {
        &self.routing
    }

    pub(crate) fn next_replay(&mut self) -> RoutingRecord {
        let Routing::Replay(records) = &self.routing else {
            panic!("next_replay called outside replay routing")
        };
        let r = records
            .get(self.replay_cursor)
            .cloned()
            .expect("routing replay log exhausted");
        self.replay_cursor += 1;
        r
    }

    pub(crate) fn log_routing(&mut self, record: RoutingRecord) {
        self.routing_log.push(record);
    }

    pub fn routing_log(&self) -> &[RoutingRecord] {
        &self.routing_log
    }

    pub(crate) fn record_batch_stats(&mut self, prefix: &str, mean: Vec<f64>, var: Vec<f64>) {
        self.bn_updates.push((prefix.to_string(), mean, var));
    }

    /// Folds recorded batch statistics into the running buffers of `store`.
    pub fn take_bn_updates(&mut self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        std::mem::take(&mut self.bn_updates)
    }

    pub fn into_parts(self) -> (Graph, Vec<RoutingRecord>) {
        (self.graph, self.routing_log)
    }
}

/// Exponential moving update of running normalization statistics.
pub fn apply_bn_updates(
    store: &mut ParamStore,
    updates: &[(String, Vec<f64>, Vec<f64>)],
    momentum: f64,
) {
    for (prefix, mean, var) in updates {
        for (suffix, stat) in [("running_mean", mean), ("running_var", var)] {
            let name = format!("{prefix}.{suffix}");
            if let Some(buf) = store.buffer_mut(&name) {
                for (b, s) in buf.data_mut().iter_mut().zip(stat) {
                    *b = (1.0 - momentum) * *b + momentum * s;
                }
            }
        }
    }
}
