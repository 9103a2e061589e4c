//! Decides when received updates reach the aggregator.
//!
//! * [`SyncScheduler`] waits for every client each round.
//! * [`AsyncScheduler`] forwards every update immediately.
//! * [`CompassScheduler`] estimates per-step client times and hands out step
//!   counts so that members of a group finish together, then aggregates the
//!   group when all members arrive or its deadline passes.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ModelUpdate;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedulerError {
    #[error("client `{0}` already submitted an update this round")]
    DuplicateUpdate(String),
    #[error("unknown client `{0}`")]
    UnknownClient(String),
    #[error("invalid step bounds: qmin {qmin} > qmax {qmax}")]
    InvalidBounds { qmin: u32, qmax: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum SchedulerAction {
    Buffered,
    Aggregate(Vec<ModelUpdate>),
}

/// Per-client instruction issued after an aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub client_id: String,
    pub steps: u32,
}

pub trait Scheduler: Send {
    fn name(&self) -> &str;

    /// First contact of a client; returns its initial step count.
    fn register(&mut self, client_id: &str, now: f64) -> Result<u32, SchedulerError>;

    fn on_update(&mut self, update: ModelUpdate, now: f64) -> Result<SchedulerAction, SchedulerError>;

    /// Clients to answer after the aggregation released by the last action.
    fn on_aggregated(&mut self, now: f64) -> Vec<Assignment>;

    /// Time-triggered aggregation (group deadlines).
    fn poll(&mut self, _now: f64) -> Option<SchedulerAction> {
        None
    }

    fn next_deadline(&self) -> Option<f64> {
        None
    }

    /// Forgets buffered updates and returns the clients still waiting on them.
    fn drain(&mut self) -> Vec<String> {
        Vec::new()
    }
}

pub struct SyncScheduler {
    n_clients: usize,
    steps: u32,
    buffer: Vec<ModelUpdate>,
    to_reply: Vec<String>,
}

impl SyncScheduler {
    pub fn new(n_clients: usize, steps: u32) -> Self {
        Self { n_clients: n_clients.max(1), steps, buffer: Vec::new(), to_reply: Vec::new() }
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }
}

impl Scheduler for SyncScheduler {
    fn name(&self) -> &str {
        "SyncScheduler"
    }

    fn register(&mut self, _client_id: &str, _now: f64) -> Result<u32, SchedulerError> {
        Ok(self.steps)
    }

    fn on_update(&mut self, update: ModelUpdate, _now: f64) -> Result<SchedulerAction, SchedulerError> {
        if self.buffer.iter().any(|u| u.client_id == update.client_id) {
            return Err(SchedulerError::DuplicateUpdate(update.client_id));
        }
        self.buffer.push(update);
        if self.buffer.len() < self.n_clients {
            return Ok(SchedulerAction::Buffered);
        }
        let round = std::mem::take(&mut self.buffer);
        self.to_reply = round.iter().map(|u| u.client_id.clone()).collect();
        self.to_reply.sort();
        Ok(SchedulerAction::Aggregate(round))
    }

    fn on_aggregated(&mut self, _now: f64) -> Vec<Assignment> {
        std::mem::take(&mut self.to_reply)
            .into_iter()
            .map(|client_id| Assignment { client_id, steps: self.steps })
            .collect()
    }

    fn drain(&mut self) -> Vec<String> {
        std::mem::take(&mut self.buffer).into_iter().map(|u| u.client_id).collect()
    }
}

pub struct AsyncScheduler {
    steps: u32,
    to_reply: Option<String>,
}

impl AsyncScheduler {
    pub fn new(steps: u32) -> Self {
        Self { steps, to_reply: None }
    }
}

impl Scheduler for AsyncScheduler {
    fn name(&self) -> &str {
        "AsyncScheduler"
    }

    fn register(&mut self, _client_id: &str, _now: f64) -> Result<u32, SchedulerError> {
        Ok(self.steps)
    }

    fn on_update(&mut self, update: ModelUpdate, _now: f64) -> Result<SchedulerAction, SchedulerError> {
        self.to_reply = Some(update.client_id.clone());
        Ok(SchedulerAction::Aggregate(vec![update]))
    }

    fn on_aggregated(&mut self, _now: f64) -> Vec<Assignment> {
        self.to_reply.take().map(|client_id| Assignment { client_id, steps: self.steps }).into_iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompassConfig {
    pub qmin: u32,
    pub qmax: u32,
    /// Deadline slack as a fraction of the group's planned duration.
    pub latitude: f64,
    /// EMA weight given to the newest per-step observation.
    pub ema_weight: f64,
}

impl Default for CompassConfig {
    fn default() -> Self {
        Self { qmin: 20, qmax: 200, latitude: 0.2, ema_weight: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedEstimate {
    pub client_id: String,
    pub per_step_time: f64,
    pub observations: u32,
}

impl SpeedEstimate {
    pub fn observe(&mut self, per_step: f64, weight: f64) {
        self.per_step_time =
            if self.observations == 0 { per_step } else { weight * per_step + (1.0 - weight) * self.per_step_time };
        self.observations += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRecord {
    pub group_id: u64,
    pub members: BTreeSet<String>,
    pub arrived: BTreeSet<String>,
    /// Planned common finish time; `None` for a bootstrap group whose only
    /// member has no speed estimate yet.
    pub expected_arrival: Option<f64>,
    pub created_at: f64,
    pub assigned_steps: BTreeMap<String, u32>,
    updates: Vec<ModelUpdate>,
}

impl GroupRecord {
    pub fn deadline(&self, latitude: f64) -> Option<f64> {
        self.expected_arrival.map(|ta| ta + latitude * (ta - self.created_at).max(0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GroupChoice {
    Join { group_id: u64, steps: u32 },
    Found { steps: u32, expected_arrival: f64 },
}

impl GroupChoice {
    pub fn steps(&self) -> u32 {
        match *self {
            GroupChoice::Join { steps, .. } | GroupChoice::Found { steps, .. } => steps,
        }
    }
}

/// Joins the earliest open group whose remaining time fits `[qmin, qmax]`
/// steps at this client's speed, otherwise founds a group with `qmax` steps.
pub fn compass_assign(
    speed: &SpeedEstimate,
    now: f64,
    groups: &[&GroupRecord],
    qmin: u32,
    qmax: u32,
) -> Result<GroupChoice, SchedulerError> {
    if qmin > qmax {
        return Err(SchedulerError::InvalidBounds { qmin, qmax });
    }
    let mut open: Vec<(f64, u64)> = groups
        .iter()
        .filter_map(|g| g.expected_arrival.map(|ta| (ta, g.group_id)))
        .filter(|&(ta, _)| ta > now)
        .collect();
    open.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    if speed.observations > 0 && speed.per_step_time > 0.0 {
        for (ta, group_id) in open {
            let q = ((ta - now) / speed.per_step_time).round();
            if q >= f64::from(qmin) && q <= f64::from(qmax) {
                return Ok(GroupChoice::Join { group_id, steps: q as u32 });
            }
        }
    }
    Ok(GroupChoice::Found { steps: qmax, expected_arrival: now + f64::from(qmax) * speed.per_step_time })
}

pub struct CompassScheduler {
    cfg: CompassConfig,
    speeds: BTreeMap<String, SpeedEstimate>,
    groups: BTreeMap<u64, GroupRecord>,
    membership: BTreeMap<String, u64>,
    dispatched: BTreeMap<String, f64>,
    next_group: u64,
    to_reply: Vec<String>,
}

impl CompassScheduler {
    pub fn new(cfg: CompassConfig) -> Result<Self, SchedulerError> {
        if cfg.qmin > cfg.qmax || cfg.qmin == 0 {
            return Err(SchedulerError::InvalidBounds { qmin: cfg.qmin, qmax: cfg.qmax });
        }
        Ok(Self {
            cfg,
            speeds: BTreeMap::new(),
            groups: BTreeMap::new(),
            membership: BTreeMap::new(),
            dispatched: BTreeMap::new(),
            next_group: 0,
            to_reply: Vec::new(),
        })
    }

    pub fn groups(&self) -> impl Iterator<Item = &GroupRecord> {
        self.groups.values()
    }

    pub fn speed(&self, client_id: &str) -> Option<&SpeedEstimate> {
        self.speeds.get(client_id)
    }

    fn assign(&mut self, client_id: &str, now: f64) -> u32 {
        let speed = self.speeds.entry(client_id.to_string()).or_insert_with(|| SpeedEstimate {
            client_id: client_id.to_string(),
            per_step_time: 0.0,
            observations: 0,
        });
        let open: Vec<&GroupRecord> = self.groups.values().collect();
        let choice = compass_assign(speed, now, &open, self.cfg.qmin, self.cfg.qmax).expect("bounds validated");
        let group_id = match choice {
            GroupChoice::Join { group_id, .. } => group_id,
            GroupChoice::Found { expected_arrival, .. } => {
                let id = self.next_group;
                self.next_group += 1;
                let known = speed.observations > 0;
                self.groups.insert(
                    id,
                    GroupRecord {
                        group_id: id,
                        members: BTreeSet::new(),
                        arrived: BTreeSet::new(),
                        expected_arrival: known.then_some(expected_arrival),
                        created_at: now,
                        assigned_steps: BTreeMap::new(),
                        updates: Vec::new(),
                    },
                );
                id
            }
        };
        let group = self.groups.get_mut(&group_id).expect("group exists");
        group.members.insert(client_id.to_string());
        group.assigned_steps.insert(client_id.to_string(), choice.steps());
        self.membership.insert(client_id.to_string(), group_id);
        self.dispatched.insert(client_id.to_string(), now);
        choice.steps()
    }

    fn close(&mut self, group_id: u64) -> SchedulerAction {
        let group = self.groups.remove(&group_id).expect("group exists");
        self.to_reply.extend(group.arrived.iter().cloned());
        SchedulerAction::Aggregate(group.updates)
    }
}

impl Scheduler for CompassScheduler {
    fn name(&self) -> &str {
        "CompassScheduler"
    }

    fn register(&mut self, client_id: &str, now: f64) -> Result<u32, SchedulerError> {
        Ok(self.assign(client_id, now))
    }

    fn on_update(&mut self, update: ModelUpdate, now: f64) -> Result<SchedulerAction, SchedulerError> {
        let client = update.client_id.clone();
        let group_id = *self.membership.get(&client).ok_or_else(|| SchedulerError::UnknownClient(client.clone()))?;
        let elapsed = now - self.dispatched.get(&client).copied().unwrap_or(now);
        if update.local_steps > 0 && elapsed > 0.0 {
            let weight = self.cfg.ema_weight;
            self.speeds.get_mut(&client).expect("registered").observe(elapsed / f64::from(update.local_steps), weight);
        }
        let latitude = self.cfg.latitude;
        match self.groups.get_mut(&group_id) {
            Some(group) => {
                if !group.arrived.insert(client.clone()) {
                    return Err(SchedulerError::DuplicateUpdate(client));
                }
                group.updates.push(update);
                let complete = group.arrived == group.members;
                let overdue = group.deadline(latitude).is_some_and(|d| now >= d);
                if complete || overdue {
                    Ok(self.close(group_id))
                } else {
                    Ok(SchedulerAction::Buffered)
                }
            }
            None => {
                // Straggler whose group was closed by its deadline.
                self.to_reply.push(client);
                Ok(SchedulerAction::Aggregate(vec![update]))
            }
        }
    }

    fn on_aggregated(&mut self, now: f64) -> Vec<Assignment> {
        let mut clients = std::mem::take(&mut self.to_reply);
        clients.sort_by(|a, b| {
            let ta = self.speeds.get(a).map_or(0.0, |s| s.per_step_time);
            let tb = self.speeds.get(b).map_or(0.0, |s| s.per_step_time);
            ta.total_cmp(&tb).then(a.cmp(b))
        });
        clients
            .into_iter()
            .map(|client_id| {
                let steps = self.assign(&client_id, now);
                Assignment { client_id, steps }
            })
            .collect()
    }

    fn poll(&mut self, now: f64) -> Option<SchedulerAction> {
        let latitude = self.cfg.latitude;
        let due = self
            .groups
            .values()
            .filter(|g| !g.arrived.is_empty())
            .filter_map(|g| g.deadline(latitude).map(|d| (d, g.group_id)))
            .filter(|&(d, _)| d <= now)
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))?;
        Some(self.close(due.1))
    }

    fn next_deadline(&self) -> Option<f64> {
        self.groups
            .values()
            .filter(|g| !g.arrived.is_empty())
            .filter_map(|g| g.deadline(self.cfg.latitude))
            .min_by(f64::total_cmp)
    }

    fn drain(&mut self) -> Vec<String> {
        let groups = std::mem::take(&mut self.groups);
        groups.into_values().flat_map(|g| g.arrived).collect()
    }
}
