//! Non-star topologies: aggregation trees, decentralized neighbor averaging
//! and vertical (split-feature) training.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregator::{AggError, AggregatorState};
use crate::client::{AdamState, BatchCursor};
use crate::data::{Dataset, Matrix};
use crate::model::{backward_from_output, init_params, loss_and_output_grad, predict, Loss, ModelError, ModelSpec};
use crate::params::{weighted_sum, DType, ModelUpdate, ParamError, ParameterSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("invalid topology: {0}")]
    Invalid(String),
    #[error("no update from leaf `{0}`")]
    MissingLeafUpdate(String),
    #[error("no model for node `{0}`")]
    MissingNodeModel(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error(transparent)]
    Aggregation(#[from] AggError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn invalid(msg: impl Into<String>) -> TopologyError {
    TopologyError::Invalid(msg.into())
}

/// Rooted aggregation tree. Leaves are clients; every other node is the
/// root or an intermediate server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TreeSpec", into = "TreeSpec")]
pub struct TreeTopology {
    root: String,
    children: BTreeMap<String, Vec<String>>,
    parent: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSpec {
    pub root: String,
    pub children: BTreeMap<String, Vec<String>>,
}

impl TryFrom<TreeSpec> for TreeTopology {
    type Error = TopologyError;
    fn try_from(s: TreeSpec) -> Result<Self, Self::Error> {
        TreeTopology::new(s.root, s.children)
    }
}

impl From<TreeTopology> for TreeSpec {
    fn from(t: TreeTopology) -> Self {
        TreeSpec { root: t.root, children: t.children }
    }
}

impl TreeTopology {
    pub fn new(root: impl Into<String>, children: BTreeMap<String, Vec<String>>) -> Result<Self, TopologyError> {
        let root = root.into();
        let children: BTreeMap<String, Vec<String>> = children.into_iter().filter(|(_, c)| !c.is_empty()).collect();
        let mut parent = BTreeMap::new();
        for (p, kids) in &children {
            for k in kids {
                if k == &root {
                    return Err(invalid(format!("root `{root}` has parent `{p}`")));
                }
                if parent.insert(k.clone(), p.clone()).is_some() {
                    return Err(invalid(format!("node `{k}` has two parents")));
                }
            }
        }
        if !children.contains_key(&root) {
            return Err(invalid(format!("root `{root}` has no children")));
        }
        for p in children.keys() {
            if p != &root && !parent.contains_key(p) {
                return Err(invalid(format!("node `{p}` is detached from the root")));
            }
        }
        // Every node must reach the root without revisiting a node.
        for start in parent.keys() {
            let mut seen = BTreeSet::new();
            let mut cur = start;
            while let Some(p) = parent.get(cur) {
                if !seen.insert(cur.clone()) {
                    return Err(invalid(format!("cycle through `{cur}`")));
                }
                cur = p;
            }
            if cur != &root {
                return Err(invalid(format!("node `{start}` does not reach the root")));
            }
        }
        Ok(Self { root, children, parent })
    }

    pub fn root(&self) -> &str {
        &self.root
    }

    pub fn children(&self, node: &str) -> &[String] {
        self.children.get(node).map_or(&[], Vec::as_slice)
    }

    pub fn parent(&self, node: &str) -> Option<&str> {
        self.parent.get(node).map(String::as_str)
    }

    pub fn leaves(&self) -> Vec<String> {
        self.parent.keys().filter(|n| !self.children.contains_key(*n)).cloned().collect()
    }

    pub fn intermediates(&self) -> Vec<String> {
        self.children.keys().filter(|n| **n != self.root).cloned().collect()
    }

    /// Nine clients under five intermediate servers on two levels.
    pub fn nine_five() -> Self {
        let c = |names: &[&str]| names.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let children = BTreeMap::from([
            ("root".to_string(), c(&["s0", "s1"])),
            ("s0".to_string(), c(&["s2", "s3"])),
            ("s1".to_string(), c(&["s4", "c7", "c8"])),
            ("s2".to_string(), c(&["c0", "c1"])),
            ("s3".to_string(), c(&["c2", "c3", "c4"])),
            ("s4".to_string(), c(&["c5", "c6"])),
        ]);
        Self::new("root", children).expect("valid tree")
    }

    fn pseudo_update(&self, node: &str, leaves: &BTreeMap<&str, &ModelUpdate>) -> Result<ModelUpdate, TopologyError> {
        let kids = self.children(node);
        if kids.is_empty() {
            return leaves
                .get(node)
                .map(|u| (*u).clone())
                .ok_or_else(|| TopologyError::MissingLeafUpdate(node.to_string()));
        }
        let subs = kids.iter().map(|k| self.pseudo_update(k, leaves)).collect::<Result<Vec<_>, _>>()?;
        let total: u64 = subs.iter().map(|u| u.sample_count).sum();
        if total == 0 {
            return Err(AggError::ZeroSamples(node.to_string()).into());
        }
        let weights: Vec<f64> = subs.iter().map(|u| u.sample_count as f64 / total as f64).collect();
        let refs: Vec<&ParameterSet> = subs.iter().map(|u| &u.params).collect();
        Ok(ModelUpdate {
            client_id: node.to_string(),
            params: weighted_sum(&refs, &weights)?,
            is_delta: false,
            sample_count: total,
            local_steps: 0,
            base_epoch: subs.iter().map(|u| u.base_epoch).min().unwrap_or(0),
            wall_meta: None,
        })
    }
}

/// Intermediates average their children bottom-up; the root applies a
/// sample-weighted average of its children's pseudo-updates to `root`.
pub fn hier_round(
    tree: &TreeTopology,
    leaf_updates: &[ModelUpdate],
    root: &mut AggregatorState,
) -> Result<(), TopologyError> {
    let leaves: BTreeMap<&str, &ModelUpdate> = leaf_updates.iter().map(|u| (u.client_id.as_str(), u)).collect();
    let subs =
        tree.children(tree.root()).iter().map(|k| tree.pseudo_update(k, &leaves)).collect::<Result<Vec<_>, _>>()?;
    root.agg_weighted_avg(&subs)?;
    Ok(())
}

/// Undirected graph; mixing uses uniform weights over closed neighborhoods.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    adjacency: BTreeMap<String, BTreeSet<String>>,
}

impl NeighborGraph {
    pub fn new(nodes: &[String], edges: &[(String, String)]) -> Result<Self, TopologyError> {
        let mut adjacency: BTreeMap<String, BTreeSet<String>> =
            nodes.iter().map(|n| (n.clone(), BTreeSet::new())).collect();
        if adjacency.len() != nodes.len() {
            return Err(invalid("duplicate node id"));
        }
        for (a, b) in edges {
            if a == b {
                return Err(invalid(format!("self-loop on `{a}`")));
            }
            for (x, y) in [(a, b), (b, a)] {
                adjacency
                    .get_mut(x)
                    .ok_or_else(|| invalid(format!("edge references unknown node `{x}`")))?
                    .insert(y.clone());
            }
        }
        Ok(Self { adjacency })
    }

    pub fn from_adjacency(adjacency: &BTreeMap<String, Vec<String>>) -> Result<Self, TopologyError> {
        let nodes: Vec<String> = adjacency.keys().cloned().collect();
        let edges: Vec<(String, String)> =
            adjacency.iter().flat_map(|(a, ns)| ns.iter().map(move |b| (a.clone(), b.clone()))).collect();
        Self::new(&nodes, &edges)
    }

    pub fn complete(n: usize) -> Self {
        let nodes: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
        let edges: Vec<(String, String)> =
            (0..n).flat_map(|i| (i + 1..n).map(move |j| (format!("n{i}"), format!("n{j}")))).collect();
        Self::new(&nodes, &edges).expect("valid graph")
    }

    /// Circulant graph on `n` (even) nodes: ring neighbors plus the opposite node.
    pub fn ring_with_chords(n: usize) -> Self {
        let nodes: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
        let mut edges = Vec::new();
        for i in 0..n {
            edges.push((format!("n{i}"), format!("n{}", (i + 1) % n)));
            if i < n / 2 {
                edges.push((format!("n{i}"), format!("n{}", i + n / 2)));
            }
        }
        Self::new(&nodes, &edges).expect("valid graph")
    }

    pub fn nodes(&self) -> impl Iterator<Item = &String> {
        self.adjacency.keys()
    }

    pub fn neighbors(&self, node: &str) -> Option<&BTreeSet<String>> {
        self.adjacency.get(node)
    }

    pub fn degree(&self, node: &str) -> usize {
        self.adjacency.get(node).map_or(0, BTreeSet::len)
    }

    pub fn is_connected(&self) -> bool {
        let Some(start) = self.adjacency.keys().next() else {
            return true;
        };
        let mut seen = BTreeSet::from([start.clone()]);
        let mut stack = vec![start.clone()];
        while let Some(n) = stack.pop() {
            for m in &self.adjacency[&n] {
                if seen.insert(m.clone()) {
                    stack.push(m.clone());
                }
            }
        }
        seen.len() == self.adjacency.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DflOutcome {
    pub models: BTreeMap<String, ParameterSet>,
    /// Nodes without neighbors; they keep their own model.
    pub isolated: Vec<String>,
}

/// Every node replaces its model with the uniform average over its closed
/// neighborhood, all computed from the pre-round models.
pub fn dfl_round(graph: &NeighborGraph, models: &BTreeMap<String, ParameterSet>) -> Result<DflOutcome, TopologyError> {
    let mut out = BTreeMap::new();
    let mut isolated = Vec::new();
    for (node, nbrs) in &graph.adjacency {
        let own = models.get(node).ok_or_else(|| TopologyError::MissingNodeModel(node.clone()))?;
        if nbrs.is_empty() {
            isolated.push(node.clone());
            out.insert(node.clone(), own.clone());
            continue;
        }
        let mut closed: BTreeSet<&String> = nbrs.iter().collect();
        closed.insert(node);
        let refs = closed
            .iter()
            .map(|n| models.get(*n).ok_or_else(|| TopologyError::MissingNodeModel((*n).clone())))
            .collect::<Result<Vec<_>, _>>()?;
        let weights = vec![1.0 / refs.len() as f64; refs.len()];
        out.insert(node.clone(), weighted_sum(&refs, &weights)?);
    }
    Ok(DflOutcome { models: out, isolated })
}

/// Split-feature layout: each client embeds its own columns, the server's
/// head consumes the concatenated embeddings and holds the labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VflConfig {
    pub feature_split: Vec<Vec<usize>>,
    pub client_specs: Vec<ModelSpec>,
    pub head_spec: ModelSpec,
}

impl VflConfig {
    /// Clients get `[cols, hidden, embed]` ReLU embedders; the head is
    /// `[Σ embed, hidden, 1]` with MSE.
    pub fn regression(feature_split: Vec<Vec<usize>>, hidden: usize, embed: usize) -> Result<Self, TopologyError> {
        let client_specs = feature_split
            .iter()
            .map(|cols| ModelSpec::new(vec![cols.len(), hidden, embed], crate::model::Activation::Relu, Loss::Mse))
            .collect::<Result<Vec<_>, _>>()?;
        let head_spec =
            ModelSpec::new(vec![embed * feature_split.len(), hidden, 1], crate::model::Activation::Relu, Loss::Mse)?;
        Ok(Self { feature_split, client_specs, head_spec })
    }

    pub fn embed_widths(&self) -> Vec<usize> {
        self.client_specs.iter().map(ModelSpec::output_dim).collect()
    }

    pub fn validate(&self, n_features: usize) -> Result<(), TopologyError> {
        if self.feature_split.len() != self.client_specs.len() || self.feature_split.is_empty() {
            return Err(invalid("need one embedding spec per feature block"));
        }
        let mut seen = BTreeSet::new();
        for (cols, spec) in self.feature_split.iter().zip(&self.client_specs) {
            if cols.len() != spec.input_dim() {
                return Err(TopologyError::DimMismatch(format!(
                    "block of {} columns feeds a {}-input embedder",
                    cols.len(),
                    spec.input_dim()
                )));
            }
            for &c in cols {
                if c >= n_features || !seen.insert(c) {
                    return Err(invalid(format!("column {c} out of range or assigned twice")));
                }
            }
        }
        if seen.len() != n_features {
            return Err(invalid("feature split does not cover every column"));
        }
        let total: usize = self.embed_widths().iter().sum();
        if total != self.head_spec.input_dim() {
            return Err(TopologyError::DimMismatch(format!(
                "head expects {} inputs, embeddings provide {total}",
                self.head_spec.input_dim()
            )));
        }
        if self.head_spec.loss != Loss::Mse {
            return Err(invalid("head must use MSE"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam(AdamState),
}

impl Optimizer {
    pub fn adam(params: &ParameterSet) -> Self {
        Optimizer::Adam(AdamState::new(params.num_params()))
    }

    fn apply(&mut self, params: &ParameterSet, grads: &ParameterSet, lr: f64) -> Result<ParameterSet, TopologyError> {
        let mut w = params.flatten();
        let g = grads.flatten();
        match self {
            Optimizer::Sgd => w.iter_mut().zip(&g).for_each(|(w, g)| *w -= lr * g),
            Optimizer::Adam(state) => state.step(&mut w, &g, lr),
        }
        Ok(params.with_flat(&w)?)
    }
}

#[derive(Debug, Clone)]
pub struct VflServerStep {
    pub loss: f64,
    pub embedding_grads: Vec<Matrix>,
    pub head: ParameterSet,
}

pub fn vfl_server_step(
    cfg: &VflConfig,
    embeddings: &[Matrix],
    labels: &[f64],
    head: &ParameterSet,
    opt: &mut Optimizer,
    lr: f64,
) -> Result<VflServerStep, TopologyError> {
    let widths = cfg.embed_widths();
    if embeddings.len() != widths.len()
        || embeddings.iter().zip(&widths).any(|(e, &w)| e.cols != w || e.rows != labels.len())
    {
        return Err(TopologyError::DimMismatch(format!(
            "embeddings {:?} do not match widths {widths:?} over {} rows",
            embeddings.iter().map(|e| (e.rows, e.cols)).collect::<Vec<_>>(),
            labels.len()
        )));
    }
    let z = Matrix::hconcat(embeddings);
    let out = predict(&cfg.head_spec, head, &z)?;
    let (loss, dout) = loss_and_output_grad(Loss::Mse, &out, labels);
    let (grads, dz) = backward_from_output(&cfg.head_spec, head, &z, &dout)?;
    let head = opt.apply(head, &grads, lr)?;
    Ok(VflServerStep { loss, embedding_grads: dz.hsplit(&widths), head })
}

/// Backpropagates the server's embedding gradient through the local
/// embedder and takes one optimizer step.
pub fn vfl_client_step(
    spec: &ModelSpec,
    params: &ParameterSet,
    x: &Matrix,
    grad: &Matrix,
    opt: &mut Optimizer,
    lr: f64,
) -> Result<ParameterSet, TopologyError> {
    if grad.rows != x.rows || grad.cols != spec.output_dim() {
        return Err(TopologyError::DimMismatch(format!(
            "gradient is {}x{}, embedder outputs {}x{}",
            grad.rows,
            grad.cols,
            x.rows,
            spec.output_dim()
        )));
    }
    let (grads, _) = backward_from_output(spec, params, x, grad)?;
    opt.apply(params, &grads, lr)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VflTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for VflTrainConfig {
    fn default() -> Self {
        Self { epochs: 200, batch_size: 32, lr: 0.01, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VflReport {
    /// Validation MSE in the original label units.
    pub val_mse: f64,
    /// MSE of predicting the training-label mean on the validation set.
    pub baseline_mse: f64,
    pub train_loss: Vec<f64>,
}

pub struct VflModel {
    pub cfg: VflConfig,
    pub clients: Vec<ParameterSet>,
    pub head: ParameterSet,
    client_opts: Vec<Optimizer>,
    head_opt: Optimizer,
}

impl VflModel {
    pub fn new(cfg: VflConfig, seed: u64, adam: bool) -> Self {
        let clients: Vec<ParameterSet> = cfg
            .client_specs
            .iter()
            .enumerate()
            .map(|(i, s)| init_params(s, DType::F64, seed.wrapping_add(1 + i as u64)))
            .collect();
        let head = init_params(&cfg.head_spec, DType::F64, seed);
        let opt = |p: &ParameterSet| if adam { Optimizer::adam(p) } else { Optimizer::Sgd };
        let client_opts = clients.iter().map(opt).collect();
        let head_opt = opt(&head);
        Self { cfg, clients, head, client_opts, head_opt }
    }

    fn blocks(&self, x: &Matrix) -> Vec<Matrix> {
        self.cfg.feature_split.iter().map(|cols| x.select_cols(cols)).collect()
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix, TopologyError> {
        let embeddings = self
            .blocks(x)
            .iter()
            .zip(self.cfg.client_specs.iter().zip(&self.clients))
            .map(|(b, (s, p))| predict(s, p, b))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(predict(&self.cfg.head_spec, &self.head, &Matrix::hconcat(&embeddings))?)
    }

    /// One exchange: clients embed, the server steps the head and returns
    /// gradients, clients step their embedders. Returns the batch loss.
    pub fn step(&mut self, x: &Matrix, labels: &[f64], lr: f64) -> Result<f64, TopologyError> {
        let blocks = self.blocks(x);
        let embeddings = blocks
            .iter()
            .zip(self.cfg.client_specs.iter().zip(&self.clients))
            .map(|(b, (s, p))| predict(s, p, b))
            .collect::<Result<Vec<_>, _>>()?;
        let server = vfl_server_step(&self.cfg, &embeddings, labels, &self.head, &mut self.head_opt, lr)?;
        self.head = server.head;
        for (i, g) in server.embedding_grads.iter().enumerate() {
            self.clients[i] = vfl_client_step(
                &self.cfg.client_specs[i],
                &self.clients[i],
                &blocks[i],
                g,
                &mut self.client_opts[i],
                lr,
            )?;
        }
        Ok(server.loss)
    }
}

/// Trains on `train` with minibatch Adam and evaluates on `val`. Labels are
/// standardized with training statistics during optimization.
pub fn vfl_train(
    cfg: &VflConfig,
    train: &Dataset,
    val: &Dataset,
    tc: &VflTrainConfig,
) -> Result<VflReport, TopologyError> {
    cfg.validate(train.dim())?;
    if train.is_empty() || val.is_empty() || tc.batch_size == 0 {
        return Err(invalid("empty data or zero batch size"));
    }
    let n = train.len() as f64;
    let mean = train.labels.iter().sum::<f64>() / n;
    let std = (train.labels.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    let scaled: Vec<f64> = train.labels.iter().map(|y| (y - mean) / std).collect();
    let mut model = VflModel::new(cfg.clone(), tc.seed, true);
    let mut cursor = BatchCursor::new(train.len(), tc.seed);
    let steps_per_epoch = train.len().div_ceil(tc.batch_size);
    let mut train_loss = Vec::with_capacity(tc.epochs);
    for _ in 0..tc.epochs {
        let mut total = 0.0;
        for _ in 0..steps_per_epoch {
            let idx = cursor.next_batch(tc.batch_size);
            let x = train.features.select_rows(&idx);
            let y: Vec<f64> = idx.iter().map(|&i| scaled[i]).collect();
            total += model.step(&x, &y, tc.lr)?;
        }
        train_loss.push(total / steps_per_epoch as f64);
    }
    let pred = model.predict(&val.features)?;
    let m = val.len() as f64;
    let val_mse = (0..val.len()).map(|i| (pred.row(i)[0] * std + mean - val.labels[i]).powi(2)).sum::<f64>() / m;
    let baseline_mse = val.labels.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / m;
    Ok(VflReport { val_mse, baseline_mse, train_loss })
}
