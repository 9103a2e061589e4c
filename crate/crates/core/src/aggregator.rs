//! Global-model update rules.
//!
//! Synchronous: FedAvg and the server-optimizer family (FedAvgM, FedAdagrad,
//! FedAdam, FedYogi). Asynchronous: FedAsync (one update at a time, staleness
//! discounted) and FedBuff (buffer of `K` deltas). FedCompass applies a
//! population-weighted, staleness-discounted delta average to each group.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{weighted_sum, ModelUpdate, ParamError, ParameterSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggError {
    #[error("no updates to aggregate")]
    EmptyUpdateList,
    #[error("update from `{client}` is based on epoch {base} but the server is at {current}")]
    NegativeStaleness { client: String, base: u64, current: u64 },
    #[error("unknown aggregation strategy `{0}`")]
    UnknownStrategyName(String),
    #[error("aggregation strategy `{0}` is registered but has no implementation")]
    Unimplemented(String),
    #[error("update from `{0}` has zero samples")]
    ZeroSamples(String),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    FedAvg,
    FedAvgM,
    FedAdagrad,
    FedAdam,
    FedYogi,
    FedAsync,
    FedBuff,
    FedCompass,
}

/// Names accepted for strategies without an implementation.
pub const RESERVED_STRATEGIES: &[&str] = &["ICEADMMAggregator", "IIADMMAggregator", "PLFLAggregator", "AREAAggregator"];

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::FedAvg,
        Strategy::FedAvgM,
        Strategy::FedAdagrad,
        Strategy::FedAdam,
        Strategy::FedYogi,
        Strategy::FedAsync,
        Strategy::FedBuff,
        Strategy::FedCompass,
    ];

    pub fn registry_name(self) -> &'static str {
        match self {
            Strategy::FedAvg => "FedAvgAggregator",
            Strategy::FedAvgM => "FedAvgMAggregator",
            Strategy::FedAdagrad => "FedAdagradAggregator",
            Strategy::FedAdam => "FedAdamAggregator",
            Strategy::FedYogi => "FedYogiAggregator",
            Strategy::FedAsync => "FedAsyncAggregator",
            Strategy::FedBuff => "FedBuffAggregator",
            Strategy::FedCompass => "FedCompassAggregator",
        }
    }

    /// Looks up a strategy by registry name (`FedAvgAggregator`) or short name (`fedavg`).
    pub fn from_name(name: &str) -> Result<Self, AggError> {
        if let Some(s) = Strategy::ALL.iter().find(|s| {
            s.registry_name() == name || s.registry_name().trim_end_matches("Aggregator").eq_ignore_ascii_case(name)
        }) {
            return Ok(*s);
        }
        if RESERVED_STRATEGIES.contains(&name) {
            return Err(AggError::Unimplemented(name.to_string()));
        }
        Err(AggError::UnknownStrategyName(name.to_string()))
    }

    pub fn is_async(self) -> bool {
        matches!(self, Strategy::FedAsync | Strategy::FedBuff)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub server_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Adaptivity constant added to `√u`.
    pub tau: f64,
    pub momentum: f64,
    pub alpha_async: f64,
    pub staleness_exp: f64,
    pub buffer_size: usize,
    /// Past global models kept for deriving deltas of full-weight stale updates.
    pub history_depth: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            server_lr: 1.0,
            beta1: 0.9,
            beta2: 0.99,
            tau: 1e-3,
            momentum: 0.9,
            alpha_async: 0.9,
            staleness_exp: 0.5,
            buffer_size: 3,
            history_depth: 32,
        }
    }
}

impl Hyper {
    pub fn staleness_factor(&self, staleness: u64) -> f64 {
        (staleness as f64 + 1.0).powf(-self.staleness_exp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServerOpt {
    FedAvgM,
    FedAdagrad,
    FedAdam,
    FedYogi,
}

#[derive(Debug, Clone)]
pub struct AggregatorState {
    pub global: ParameterSet,
    pub epoch: u64,
    pub momentum: ParameterSet,
    pub m: ParameterSet,
    pub u: ParameterSet,
    pub hyper: Hyper,
    buffer: Vec<ModelUpdate>,
    history: VecDeque<(u64, ParameterSet)>,
}

fn by_client(updates: &[ModelUpdate]) -> Vec<&ModelUpdate> {
    let mut sorted: Vec<&ModelUpdate> = updates.iter().collect();
    sorted.sort_by(|a, b| a.client_id.cmp(&b.client_id).then(a.base_epoch.cmp(&b.base_epoch)));
    sorted
}

impl AggregatorState {
    pub fn new(global: ParameterSet, hyper: Hyper) -> Self {
        let zeros = global.zeros_like();
        let mut state = Self {
            momentum: zeros.clone(),
            m: zeros.clone(),
            u: zeros,
            global,
            epoch: 0,
            hyper,
            buffer: Vec::new(),
            history: VecDeque::new(),
        };
        state.remember();
        state
    }

    fn remember(&mut self) {
        if self.hyper.history_depth == 0 {
            return;
        }
        self.history.push_back((self.epoch, self.global.clone()));
        while self.history.len() > self.hyper.history_depth {
            self.history.pop_front();
        }
    }

    fn advance(&mut self, global: ParameterSet) {
        self.global = global;
        self.epoch += 1;
        self.remember();
    }

    pub fn staleness(&self, update: &ModelUpdate) -> Result<u64, AggError> {
        self.epoch.checked_sub(update.base_epoch).ok_or_else(|| AggError::NegativeStaleness {
            client: update.client_id.clone(),
            base: update.base_epoch,
            current: self.epoch,
        })
    }

    fn base_of(&self, update: &ModelUpdate) -> &ParameterSet {
        self.history.iter().rev().find(|(e, _)| *e == update.base_epoch).map_or(&self.global, |(_, p)| p)
    }

    /// `params - base` for full-weight updates (base looked up by version, or
    /// the current global when it has been evicted); `params` for deltas.
    pub fn delta_of(&self, update: &ModelUpdate) -> Result<ParameterSet, AggError> {
        if update.is_delta {
            Ok(self.global.zip_map(&update.params, |_, d| d)?)
        } else {
            Ok(update.params.sub(self.base_of(update))?)
        }
    }

    fn sample_weights(updates: &[&ModelUpdate]) -> Result<Vec<f64>, AggError> {
        if let Some(u) = updates.iter().find(|u| u.sample_count == 0) {
            return Err(AggError::ZeroSamples(u.client_id.clone()));
        }
        let total: f64 = updates.iter().map(|u| u.sample_count as f64).sum();
        Ok(updates.iter().map(|u| u.sample_count as f64 / total).collect())
    }

    fn mean_delta(&self, updates: &[ModelUpdate]) -> Result<ParameterSet, AggError> {
        if updates.is_empty() {
            return Err(AggError::EmptyUpdateList);
        }
        let sorted = by_client(updates);
        let weights = Self::sample_weights(&sorted)?;
        let deltas = sorted.iter().map(|u| self.delta_of(u)).collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&ParameterSet> = deltas.iter().collect();
        Ok(weighted_sum(&refs, &weights)?)
    }

    /// FedAvg: sample-weighted average of full-weight updates.
    pub fn agg_weighted_avg(&mut self, updates: &[ModelUpdate]) -> Result<(), AggError> {
        if updates.is_empty() {
            return Err(AggError::EmptyUpdateList);
        }
        let new_global = if updates.iter().all(|u| !u.is_delta) {
            let sorted = by_client(updates);
            let weights = Self::sample_weights(&sorted)?;
            let refs: Vec<&ParameterSet> = sorted.iter().map(|u| &u.params).collect();
            for r in &refs {
                self.global.zip_map(r, |a, _| a)?;
            }
            weighted_sum(&refs, &weights)?
        } else {
            self.global.add(&self.mean_delta(updates)?)?
        };
        self.advance(new_global);
        Ok(())
    }

    pub fn agg_server_opt(&mut self, updates: &[ModelUpdate], opt: ServerOpt) -> Result<(), AggError> {
        let d = self.mean_delta(updates)?;
        let h = self.hyper;
        let new_global = match opt {
            ServerOpt::FedAvgM => {
                self.momentum = self.momentum.zip_map(&d, |v, g| h.momentum * v + g)?;
                self.global.add(&self.momentum)?
            }
            ServerOpt::FedAdagrad => {
                self.u = self.u.zip_map(&d, |u, g| u + g * g)?;
                self.adaptive_step(&d)?
            }
            ServerOpt::FedAdam => {
                self.m = self.m.zip_map(&d, |m, g| h.beta1 * m + (1.0 - h.beta1) * g)?;
                self.u = self.u.zip_map(&d, |u, g| h.beta2 * u + (1.0 - h.beta2) * g * g)?;
                self.adaptive_step(&self.m)?
            }
            ServerOpt::FedYogi => {
                self.m = self.m.zip_map(&d, |m, g| h.beta1 * m + (1.0 - h.beta1) * g)?;
                self.u = self.u.zip_map(&d, |u, g| u - (1.0 - h.beta2) * g * g * sign(u - g * g))?;
                self.adaptive_step(&self.m)?
            }
        };
        self.advance(new_global);
        Ok(())
    }

    /// `global + η·dir/(√u + τ)` element-wise.
    fn adaptive_step(&self, dir: &ParameterSet) -> Result<ParameterSet, AggError> {
        let h = self.hyper;
        let step = dir.zip_map(&self.u, |g, u| h.server_lr * g / (u.sqrt() + h.tau))?;
        Ok(self.global.add(&step)?)
    }

    /// FedAsync: `(1-α_s)·global + α_s·w` with `α_s = α·(s+1)^(-a)`.
    pub fn agg_async(&mut self, update: &ModelUpdate) -> Result<(), AggError> {
        let s = self.staleness(update)?;
        let alpha = self.hyper.alpha_async * self.hyper.staleness_factor(s);
        let local = if update.is_delta { self.base_of(update).add(&update.params)? } else { update.params.clone() };
        let new_global = self.global.zip_map(&local, |g, w| (1.0 - alpha) * g + alpha * w)?;
        self.advance(new_global);
        Ok(())
    }

    /// FedBuff flush: `global + η/|B|·Σ (sᵢ+1)^(-a)·Δᵢ`.
    pub fn agg_buffered(&mut self, buffer: &[ModelUpdate]) -> Result<(), AggError> {
        if buffer.is_empty() {
            return Err(AggError::EmptyUpdateList);
        }
        let sorted = by_client(buffer);
        let scale = self.hyper.server_lr / sorted.len() as f64;
        let mut weights = Vec::with_capacity(sorted.len());
        let mut deltas = Vec::with_capacity(sorted.len());
        for u in &sorted {
            weights.push(scale * self.hyper.staleness_factor(self.staleness(u)?));
            deltas.push(self.delta_of(u)?);
        }
        let refs: Vec<&ParameterSet> = deltas.iter().collect();
        let step = weighted_sum(&refs, &weights)?;
        let new_global = self.global.add(&step)?;
        self.advance(new_global);
        Ok(())
    }

    /// Adds one update to the FedBuff buffer; flushes when it reaches `K`.
    /// Returns whether the global model changed.
    pub fn buffer_update(&mut self, update: ModelUpdate) -> Result<bool, AggError> {
        self.staleness(&update)?;
        self.buffer.push(update);
        if self.buffer.len() >= self.hyper.buffer_size.max(1) {
            let buffer = std::mem::take(&mut self.buffer);
            self.agg_buffered(&buffer)?;
            return Ok(true);
        }
        Ok(false)
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    /// Experiment-end flush of a partially filled FedBuff buffer.
    pub fn flush(&mut self) -> Result<bool, AggError> {
        if self.buffer.is_empty() {
            return Ok(false);
        }
        let buffer = std::mem::take(&mut self.buffer);
        self.agg_buffered(&buffer)?;
        Ok(true)
    }

    /// Grouped aggregation: `global + Σ (nᵢ/N)·(sᵢ+1)^(-a)·Δᵢ` where `N` is the
    /// sample count of the whole population. With every client present and no
    /// staleness this is FedAvg.
    pub fn agg_group(&mut self, updates: &[ModelUpdate], population_samples: u64) -> Result<(), AggError> {
        if updates.is_empty() {
            return Err(AggError::EmptyUpdateList);
        }
        let sorted = by_client(updates);
        let group_total: u64 = sorted.iter().map(|u| u.sample_count).sum();
        let total = population_samples.max(group_total) as f64;
        let mut weights = Vec::with_capacity(sorted.len());
        let mut deltas = Vec::with_capacity(sorted.len());
        for u in &sorted {
            if u.sample_count == 0 {
                return Err(AggError::ZeroSamples(u.client_id.clone()));
            }
            let factor = self.hyper.staleness_factor(self.staleness(u)?);
            weights.push(u.sample_count as f64 / total * factor);
            deltas.push(self.delta_of(u)?);
        }
        let refs: Vec<&ParameterSet> = deltas.iter().collect();
        let new_global = self.global.add(&weighted_sum(&refs, &weights)?)?;
        self.advance(new_global);
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Pluggable aggregation rule driven by the server agent.
pub trait AggregationRule: Send {
    fn name(&self) -> &str;

    /// Consumes the updates released by the scheduler. Returns whether the
    /// global model (and epoch) advanced.
    fn aggregate(
        &mut self,
        state: &mut AggregatorState,
        updates: Vec<ModelUpdate>,
        population_samples: u64,
    ) -> Result<bool, AggError>;

    /// Called once when the experiment ends.
    fn finish(&mut self, _state: &mut AggregatorState) -> Result<bool, AggError> {
        Ok(false)
    }

    /// Whether clients should send deltas instead of full weights.
    fn prefers_delta(&self) -> bool {
        false
    }
}

impl AggregationRule for Strategy {
    fn name(&self) -> &str {
        self.registry_name()
    }

    fn aggregate(
        &mut self,
        state: &mut AggregatorState,
        updates: Vec<ModelUpdate>,
        population_samples: u64,
    ) -> Result<bool, AggError> {
        match self {
            Strategy::FedAvg => state.agg_weighted_avg(&updates)?,
            Strategy::FedAvgM => state.agg_server_opt(&updates, ServerOpt::FedAvgM)?,
            Strategy::FedAdagrad => state.agg_server_opt(&updates, ServerOpt::FedAdagrad)?,
            Strategy::FedAdam => state.agg_server_opt(&updates, ServerOpt::FedAdam)?,
            Strategy::FedYogi => state.agg_server_opt(&updates, ServerOpt::FedYogi)?,
            Strategy::FedAsync => {
                if updates.is_empty() {
                    return Err(AggError::EmptyUpdateList);
                }
                for u in by_client(&updates) {
                    state.agg_async(u)?;
                }
            }
            Strategy::FedBuff => {
                let mut changed = false;
                for u in updates {
                    changed |= state.buffer_update(u)?;
                }
                return Ok(changed);
            }
            Strategy::FedCompass => state.agg_group(&updates, population_samples)?,
        }
        Ok(true)
    }

    fn finish(&mut self, state: &mut AggregatorState) -> Result<bool, AggError> {
        match self {
            Strategy::FedBuff => state.flush(),
            _ => Ok(false),
        }
    }

    fn prefers_delta(&self) -> bool {
        matches!(self, Strategy::FedBuff | Strategy::FedCompass)
    }
}
