//! Client agent: local training, evaluation and update packaging.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::model::{self, argmax, Loss, ModelError, ModelSpec};
use crate::params::{DType, MetricRecord, ModelUpdate, ParamError, ParameterSet, Tensor};
use crate::privacy::{self, PrivacyConfig, PrivacyError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("client has an empty dataset")]
    EmptyDataset,
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub local_steps: u32,
    /// Proximal coefficient; 0 disables the FedProx term.
    pub prox_mu: f64,
    pub send_delta: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Sgd,
            lr: 0.01,
            batch_size: 32,
            local_steps: 10,
            prox_mu: 0.0,
            send_delta: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(TrainError::InvalidConfig(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.local_steps == 0 {
            return Err(TrainError::InvalidConfig("local_steps must be >= 1".into()));
        }
        if !(self.prox_mu >= 0.0) {
            return Err(TrainError::InvalidConfig(format!("prox_mu must be >= 0, got {}", self.prox_mu)));
        }
        Ok(())
    }
}

/// Adam moment buffers over the flattened parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, w: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for i in 0..w.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            w[i] -= lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

/// Seeded cyclic batching: a fresh permutation every pass over the data.
#[derive(Debug, Clone)]
pub struct BatchCursor {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchCursor {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            batch.push(self.order[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

pub(crate) fn to_f64_set(p: &ParameterSet) -> ParameterSet {
    ParameterSet::from_entries(
        p.iter()
            .map(|(n, t)| (n.to_string(), Tensor::from_f64(t.shape().to_vec(), t.to_f64_vec()).expect("same layout"))),
    )
    .expect("unique names")
}

pub struct ClientState {
    pub client_id: String,
    pub dataset: Dataset,
    pub spec: ModelSpec,
    adam: Option<AdamState>,
    cursor: BatchCursor,
    privacy_rng: ChaCha8Rng,
    steps_taken: u64,
}

impl ClientState {
    pub fn new(client_id: impl Into<String>, dataset: Dataset, spec: ModelSpec, seed: u64) -> Self {
        let n = dataset.len();
        Self {
            client_id: client_id.into(),
            dataset,
            spec,
            adam: None,
            cursor: BatchCursor::new(n, seed),
            privacy_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d1ff_0000_0001),
            steps_taken: 0,
        }
    }

    /// Optimizer steps executed over the client's lifetime.
    pub fn steps_taken(&self) -> u64 {
        self.steps_taken
    }

    /// Runs exactly `steps` mini-batch steps from `base`.
    pub fn local_train(
        &mut self,
        base: &ParameterSet,
        base_epoch: u64,
        cfg: &TrainConfig,
        steps: u32,
    ) -> Result<ModelUpdate, TrainError> {
        cfg.validate()?;
        if self.dataset.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        if steps == 0 {
            return Err(TrainError::InvalidConfig("steps must be >= 1".into()));
        }
        let base64 = to_f64_set(base);
        let anchor = base64.flatten();
        let mut w = anchor.clone();
        for _ in 0..steps {
            let idx = self.cursor.next_batch(cfg.batch_size);
            let batch = self.dataset.subset(&idx);
            let current = base64.with_flat(&w).expect("layout");
            let (_, grads) = model::backward(&self.spec, &current, &batch)?;
            let mut g = grads.flatten();
            if cfg.prox_mu > 0.0 {
                for ((gi, wi), ai) in g.iter_mut().zip(&w).zip(&anchor) {
                    *gi += cfg.prox_mu * (wi - ai);
                }
            }
            match cfg.optimizer {
                OptimizerKind::Sgd => {
                    for (wi, gi) in w.iter_mut().zip(&g) {
                        *wi -= cfg.lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let n = w.len();
                    self.adam.get_or_insert_with(|| AdamState::new(n)).step(&mut w, &g, cfg.lr);
                }
            }
            self.steps_taken += 1;
        }
        let trained = base.with_flat(&w)?;
        let params = if cfg.send_delta { trained.sub(base).expect("same layout") } else { trained };
        Ok(ModelUpdate {
            client_id: self.client_id.clone(),
            params,
            is_delta: cfg.send_delta,
            sample_count: self.dataset.len() as u64,
            local_steps: steps,
            base_epoch,
            wall_meta: None,
        })
    }

    /// Applies the privacy mechanism to the transmitted object. Full-weight
    /// updates are clipped and noised on their offset from `base`.
    pub fn apply_privacy_then_package(
        &mut self,
        update: ModelUpdate,
        base: &ParameterSet,
        cfg: &PrivacyConfig,
    ) -> Result<ModelUpdate, TrainError> {
        if !cfg.enabled {
            return Ok(update);
        }
        // Skip the subtract/add round trip, which is not bit-exact.
        if cfg.epsilon.is_infinite() && cfg.clip_norm.is_infinite() {
            cfg.validate()?;
            return Ok(update);
        }
        let delta = if update.is_delta { update.params.clone() } else { update.params.sub(base)? };
        let noisy = privacy::privatize(&delta, cfg, &mut self.privacy_rng)?;
        let params = if update.is_delta { noisy } else { noisy.add(base)? };
        Ok(ModelUpdate { params, ..update })
    }
}

/// Loss plus accuracy (classification) or mse (regression) over the whole dataset.
pub fn evaluate(
    spec: &ModelSpec,
    params: &ParameterSet,
    dataset: &Dataset,
    timestamp: f64,
    entity: &str,
) -> Result<Vec<MetricRecord>, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let (outputs, loss) = model::forward(spec, params, dataset)?;
    let mut records = vec![MetricRecord::new(timestamp, entity, "val_loss", loss)];
    match (spec.loss, dataset.class_count) {
        (Loss::SoftmaxCrossEntropy, _) | (Loss::Mse, Some(_)) if spec.output_dim() > 1 => {
            let hits = (0..outputs.rows).filter(|&r| argmax(outputs.row(r)) == dataset.class_of(r)).count();
            records.push(MetricRecord::new(timestamp, entity, "val_accuracy", hits as f64 / outputs.rows as f64));
        }
        _ => records.push(MetricRecord::new(timestamp, entity, "val_mse", loss)),
    }
    Ok(records)
}

/// Zero-initialized set for `spec` with the given dtype.
pub fn zero_params(spec: &ModelSpec, dtype: DType) -> ParameterSet {
    model::init_params(spec, dtype, 0).map(|_| 0.0)
}
