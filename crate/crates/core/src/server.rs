//! Server agent: owns the global model, routes updates through a scheduler
//! into an aggregation rule and produces the replies sent back to clients.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::aggregator::{AggError, AggregationRule, AggregatorState, Hyper, Strategy};
use crate::params::{ModelUpdate, ParameterSet};
use crate::scheduler::{
    Assignment, AsyncScheduler, CompassConfig, CompassScheduler, Scheduler, SchedulerAction, SchedulerError,
    SyncScheduler,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServerError {
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Aggregation(#[from] AggError),
    #[error("client `{0}` is not registered")]
    UnknownClient(String),
}

/// When the experiment ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Budget {
    Aggregations(u64),
    Updates(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub client_id: String,
    pub global: ParameterSet,
    pub epoch: u64,
    pub steps: u32,
    pub done: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub replies: Vec<Reply>,
    /// Number of times the global model advanced while handling the call.
    pub aggregations: u64,
}

pub struct ServerAgent {
    state: AggregatorState,
    rule: Box<dyn AggregationRule>,
    scheduler: Box<dyn Scheduler>,
    budget: Budget,
    population: BTreeMap<String, u64>,
    updates_received: u64,
    aggregations: u64,
    finished: bool,
}

impl ServerAgent {
    pub fn new(
        global: ParameterSet,
        hyper: Hyper,
        rule: Box<dyn AggregationRule>,
        scheduler: Box<dyn Scheduler>,
        budget: Budget,
    ) -> Self {
        Self {
            state: AggregatorState::new(global, hyper),
            rule,
            scheduler,
            budget,
            population: BTreeMap::new(),
            updates_received: 0,
            aggregations: 0,
            finished: false,
        }
    }

    /// Pairs a strategy with its natural scheduler. Async strategies run for
    /// `epochs × n_clients` updates; the others for `epochs` aggregations.
    pub fn for_strategy(
        strategy: Strategy,
        global: ParameterSet,
        hyper: Hyper,
        n_clients: usize,
        local_steps: u32,
        epochs: u64,
        compass: CompassConfig,
    ) -> Result<Self, ServerError> {
        let (scheduler, budget): (Box<dyn Scheduler>, Budget) = match strategy {
            Strategy::FedAsync | Strategy::FedBuff => {
                (Box::new(AsyncScheduler::new(local_steps)), Budget::Updates(epochs * n_clients as u64))
            }
            Strategy::FedCompass => (Box::new(CompassScheduler::new(compass)?), Budget::Aggregations(epochs)),
            _ => (Box::new(SyncScheduler::new(n_clients, local_steps)), Budget::Aggregations(epochs)),
        };
        Ok(Self::new(global, hyper, Box::new(strategy), scheduler, budget))
    }

    pub fn global(&self) -> &ParameterSet {
        &self.state.global
    }

    pub fn epoch(&self) -> u64 {
        self.state.epoch
    }

    pub fn aggregations(&self) -> u64 {
        self.aggregations
    }

    pub fn updates_received(&self) -> u64 {
        self.updates_received
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn prefers_delta(&self) -> bool {
        self.rule.prefers_delta()
    }

    pub fn rule_name(&self) -> &str {
        self.rule.name()
    }

    pub fn scheduler_name(&self) -> &str {
        self.scheduler.name()
    }

    pub fn population_samples(&self) -> u64 {
        self.population.values().sum()
    }

    fn reply(&self, a: Assignment) -> Reply {
        Reply {
            client_id: a.client_id,
            global: self.state.global.clone(),
            epoch: self.state.epoch,
            steps: a.steps,
            done: self.finished,
        }
    }

    fn check_budget(&mut self, out: &mut Outcome) -> Result<(), ServerError> {
        if self.finished {
            return Ok(());
        }
        let reached = match self.budget {
            Budget::Aggregations(n) => self.aggregations >= n,
            Budget::Updates(n) => self.updates_received >= n,
        };
        if reached {
            self.conclude(out)?;
        }
        Ok(())
    }

    /// Flushes the rule and answers every client left waiting in the scheduler.
    fn conclude(&mut self, out: &mut Outcome) -> Result<(), ServerError> {
        if self.rule.finish(&mut self.state)? {
            self.aggregations += 1;
            out.aggregations += 1;
        }
        self.finished = true;
        for client_id in self.scheduler.drain() {
            out.replies.push(Reply { client_id, global: ParameterSet::new(), epoch: 0, steps: 0, done: true });
        }
        for r in &mut out.replies {
            r.global = self.state.global.clone();
            r.epoch = self.state.epoch;
            r.done = true;
        }
        Ok(())
    }

    pub fn register(&mut self, client_id: &str, sample_count: u64, now: f64) -> Result<Reply, ServerError> {
        self.population.insert(client_id.to_string(), sample_count);
        let steps = self.scheduler.register(client_id, now)?;
        Ok(self.reply(Assignment { client_id: client_id.to_string(), steps }))
    }

    fn run_action(&mut self, action: SchedulerAction, now: f64, out: &mut Outcome) -> Result<(), ServerError> {
        if let SchedulerAction::Aggregate(updates) = action {
            let population = self.population_samples();
            if self.rule.aggregate(&mut self.state, updates, population)? {
                self.aggregations += 1;
                out.aggregations += 1;
            }
            let assignments = self.scheduler.on_aggregated(now);
            out.replies.extend(assignments.into_iter().map(|a| self.reply(a)));
            self.check_budget(out)?;
        }
        Ok(())
    }

    pub fn submit(&mut self, update: ModelUpdate, now: f64) -> Result<Outcome, ServerError> {
        if !self.population.contains_key(&update.client_id) {
            return Err(ServerError::UnknownClient(update.client_id));
        }
        let mut out = Outcome::default();
        if self.finished {
            let client_id = update.client_id;
            out.replies.push(self.reply(Assignment { client_id, steps: 0 }));
            return Ok(out);
        }
        self.updates_received += 1;
        let action = self.scheduler.on_update(update, now)?;
        self.run_action(action, now, &mut out)?;
        self.check_budget(&mut out)?;
        Ok(out)
    }

    /// Handles time-triggered aggregations due at or before `now`.
    pub fn poll(&mut self, now: f64) -> Result<Outcome, ServerError> {
        let mut out = Outcome::default();
        while !self.finished {
            match self.scheduler.poll(now) {
                Some(action) => self.run_action(action, now, &mut out)?,
                None => break,
            }
        }
        Ok(out)
    }

    pub fn next_deadline(&self) -> Option<f64> {
        if self.finished {
            None
        } else {
            self.scheduler.next_deadline()
        }
    }

    /// Ends the experiment early (e.g. on a time budget), flushing buffers
    /// and releasing clients that were waiting on them.
    pub fn finish(&mut self) -> Result<Outcome, ServerError> {
        let mut out = Outcome::default();
        if !self.finished {
            self.conclude(&mut out)?;
        }
        Ok(out)
    }
}
