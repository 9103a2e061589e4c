//! Discrete-event simulation of heterogeneous clients on a virtual clock.
//!
//! Training runs for real; only time is modeled. A client's round costs
//! `steps × mean_batch_time` (times optional jitter) and a message costs
//! `latency + bytes / bandwidth`. Events are ordered by (time, kind, subject)
//! with an insertion counter as the last tie-break, so a run is a pure
//! function of its configuration.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use fedhub_core::aggregator::AggregatorState;
use fedhub_core::model::init_params;
use fedhub_core::server::{Outcome, Reply};
use fedhub_core::topology::{dfl_round, hier_round, vfl_train, NeighborGraph, TreeTopology, VflConfig, VflTrainConfig};
use fedhub_core::{DType, MetricRecord, ModelUpdate, ParameterSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use crate::config::{BatchTimes, ExperimentConfig, SimSection, TopologySection};
use crate::datasets::load_split;
use crate::participant::{through_wire, Participant};
use crate::utilization::UtilizationReport;
use crate::{build_agent, Error};

const NS: f64 = 1e9;
/// Nominal size of a message without a model body.
const CONTROL_BYTES: usize = 64;

fn to_ns(s: f64) -> u64 {
    (s * NS).round() as u64
}

fn to_s(ns: u64) -> f64 {
    ns as f64 / NS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventKind {
    ClientFinishesTraining = 0,
    MessageArrives = 1,
    Deadline = 2,
}

enum Payload {
    Trained(ModelUpdate),
    Register,
    ToServer(ModelUpdate),
    ToClient(Reply),
    Deadline(f64),
}

struct SimEvent {
    time_ns: u64,
    kind: EventKind,
    subject: usize,
    seq: u64,
    payload: Payload,
}

impl SimEvent {
    fn key(&self) -> (u64, EventKind, usize, u64) {
        (self.time_ns, self.kind, self.subject, self.seq)
    }
}

impl PartialEq for SimEvent {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl Eq for SimEvent {}
impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

#[derive(Default)]
struct Queue {
    heap: BinaryHeap<Reverse<SimEvent>>,
    seq: u64,
}

impl Queue {
    fn push(&mut self, time_ns: u64, kind: EventKind, subject: usize, payload: Payload) {
        self.seq += 1;
        self.heap.push(Reverse(SimEvent { time_ns, kind, subject, seq: self.seq, payload }));
    }

    fn pop(&mut self) -> Option<SimEvent> {
        self.heap.pop().map(|Reverse(e)| e)
    }

    fn peek_time(&self) -> Option<u64> {
        self.heap.peek().map(|Reverse(e)| e.time_ns)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub records: Vec<MetricRecord>,
    pub utilization: UtilizationReport,
    /// Server model for centralized and hierarchical runs.
    pub final_global: Option<ParameterSet>,
    pub end_seconds: f64,
    pub aggregations: u64,
}

impl SimResult {
    /// Last value of `kind` reported by `entity`.
    pub fn last(&self, entity: &str, kind: &str) -> Option<f64> {
        self.records.iter().rev().find(|r| r.entity == entity && r.kind == kind).map(|r| r.value)
    }
}

/// Mean batch time of every client.
pub fn batch_times(sim: &SimSection, n: usize) -> Vec<f64> {
    match &sim.mean_batch_time {
        BatchTimes::PerClient(v) => v.clone(),
        BatchTimes::Exponential { exponential: e } => {
            let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
            let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(&mut rng)).collect();
            let lo = draws.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = draws.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            draws
                .iter()
                .map(|x| if hi > lo { e.t_min * (1.0 + (e.spread - 1.0) * (x - lo) / (hi - lo)) } else { e.t_min })
                .collect()
        }
    }
}

struct Link {
    latency: f64,
    bandwidth: Option<f64>,
}

impl Link {
    fn delay_ns(&self, bytes: usize) -> u64 {
        to_ns(self.latency + self.bandwidth.map_or(0.0, |b| bytes as f64 / b))
    }
}

pub fn run_simulation(cfg: &ExperimentConfig) -> Result<SimResult, Error> {
    if cfg.clients.is_empty() {
        return Err(Error::Invalid("simulation needs at least one client".into()));
    }
    match &cfg.topology {
        TopologySection::Centralized => run_centralized(cfg),
        TopologySection::Hierarchical { .. } | TopologySection::Decentralized { .. } => run_rounds(cfg),
        TopologySection::Vertical { .. } => run_vertical(cfg),
    }
}

fn sim_section(cfg: &ExperimentConfig) -> Result<&SimSection, Error> {
    cfg.sim.as_ref().ok_or_else(|| Error::Invalid("config has no sim section".into()))
}

fn run_centralized(cfg: &ExperimentConfig) -> Result<SimResult, Error> {
    let sim = sim_section(cfg)?;
    let n = cfg.clients.len();
    let mut parts = cfg.clients.iter().map(|c| Participant::new(c, &cfg.model, n)).collect::<Result<Vec<_>, _>>()?;
    let ids: Vec<String> = parts.iter().map(|p| p.id().to_string()).collect();
    let index: BTreeMap<String, usize> = ids.iter().cloned().enumerate().map(|(i, id)| (id, i)).collect();
    let times = batch_times(sim, n);
    let link = Link { latency: sim.latency, bandwidth: sim.bandwidth };
    let mut jitter = ChaCha8Rng::seed_from_u64(sim.seed ^ 0x6a09_e667_f3bc_c908);
    let mut agent = build_agent(cfg)?;
    let send_delta = agent.prefers_delta();

    let mut q = Queue::default();
    for i in 0..n {
        q.push(link.delay_ns(CONTROL_BYTES), EventKind::MessageArrives, i, Payload::Register);
    }
    let mut compute: Vec<Vec<(u64, u64)>> = vec![Vec::new(); n];
    let mut records = parts[0].evaluate(agent.global(), 0.0, "server")?;
    let mut deadlines: BTreeSet<u64> = BTreeSet::new();
    let mut downlink: Option<(u64, ParameterSet, usize)> = None;
    let limit_ns = sim.max_virtual_time.map(to_ns);
    let mut events: u64 = 0;
    let mut end_ns = None;

    while let Some(next) = q.peek_time() {
        if let Some(limit) = limit_ns.filter(|&l| next > l) {
            let out = agent.finish()?;
            if out.aggregations > 0 {
                records.extend(parts[0].evaluate(agent.global(), to_s(limit), "server")?);
            }
            end_ns = Some(limit);
            break;
        }
        let ev = q.pop().expect("peeked");
        events += 1;
        if events > sim.max_events {
            return Err(Error::NonTerminating(events));
        }
        let now = ev.time_ns;
        let i = ev.subject;
        let mut outcome = None;
        match ev.payload {
            Payload::Register => {
                let reply = agent.register(&ids[i], parts[i].sample_count(), to_s(now))?;
                outcome = Some(Outcome { replies: vec![reply], aggregations: 0 });
            }
            Payload::ToServer(update) => outcome = Some(agent.submit(update, to_s(now))?),
            Payload::Deadline(d) => {
                deadlines.remove(&now);
                outcome = Some(agent.poll(to_s(now).max(d))?);
            }
            Payload::ToClient(reply) => {
                if !reply.done {
                    let update = parts[i].train(&reply.global, reply.epoch, reply.steps, send_delta)?;
                    let factor =
                        if sim.jitter > 0.0 { jitter.random_range(1.0 - sim.jitter..=1.0 + sim.jitter) } else { 1.0 };
                    let dur = to_ns(f64::from(reply.steps) * times[i] * factor);
                    compute[i].push((now, now + dur));
                    q.push(now + dur, EventKind::ClientFinishesTraining, i, Payload::Trained(update));
                }
            }
            Payload::Trained(update) => {
                let (params, bytes) = through_wire(&update.params, parts[i].cfg.codec.as_ref())?;
                let update = ModelUpdate { params, ..update };
                q.push(
                    now + link.delay_ns(bytes + CONTROL_BYTES),
                    EventKind::MessageArrives,
                    i,
                    Payload::ToServer(update),
                );
            }
        }
        if let Some(out) = outcome {
            if out.aggregations > 0 {
                records.extend(parts[0].evaluate(agent.global(), to_s(now), "server")?);
            }
            for r in out.replies {
                let epoch = r.epoch;
                if downlink.as_ref().is_none_or(|(e, _, _)| *e != epoch) {
                    let (g, bytes) = through_wire(&r.global, cfg.server_codec.as_ref())?;
                    downlink = Some((epoch, g, bytes));
                }
                let (_, g, bytes) = downlink.as_ref().expect("cached");
                let j = index[&r.client_id];
                let reply = Reply { global: g.clone(), ..r };
                q.push(
                    now + link.delay_ns(bytes + CONTROL_BYTES),
                    EventKind::MessageArrives,
                    j,
                    Payload::ToClient(reply),
                );
            }
        }
        if agent.is_finished() {
            end_ns = Some(now);
            break;
        }
        if let Some(d) = agent.next_deadline() {
            let dn = to_ns(d).max(now);
            if deadlines.insert(dn) {
                q.push(dn, EventKind::Deadline, usize::MAX, Payload::Deadline(d));
            }
        }
    }
    let end_ns = end_ns.ok_or_else(|| Error::Invalid("simulation stalled before the budget was reached".into()))?;
    let utilization = UtilizationReport::from_compute(&ids, &compute, end_ns);
    finish_records(&mut records, &utilization, to_s(end_ns));
    Ok(SimResult {
        records,
        utilization,
        final_global: Some(agent.global().clone()),
        end_seconds: to_s(end_ns),
        aggregations: agent.aggregations(),
    })
}

fn finish_records(records: &mut Vec<MetricRecord>, u: &UtilizationReport, end: f64) {
    for c in &u.clients {
        records.push(MetricRecord::new(end, c.client.clone(), "utilization", c.utilization));
    }
}

/// Barrier rounds for hierarchical and decentralized topologies.
fn run_rounds(cfg: &ExperimentConfig) -> Result<SimResult, Error> {
    let sim = sim_section(cfg)?;
    let n = cfg.clients.len();
    let mut parts = cfg.clients.iter().map(|c| Participant::new(c, &cfg.model, n)).collect::<Result<Vec<_>, _>>()?;
    let ids: Vec<String> = parts.iter().map(|p| p.id().to_string()).collect();
    let times = batch_times(sim, n);
    let link = Link { latency: sim.latency, bandwidth: sim.bandwidth };
    let init = init_params(&cfg.model, DType::F32, cfg.seed);
    let mut compute: Vec<Vec<(u64, u64)>> = vec![Vec::new(); n];
    let mut now: u64 = 0;
    let mut records = Vec::new();

    let hier = match &cfg.topology {
        TopologySection::Hierarchical { tree } => Some(TreeTopology::new(tree.root.clone(), tree.children.clone())?),
        _ => None,
    };
    let graph = match &cfg.topology {
        TopologySection::Decentralized { adjacency: Some(adj) } => Some(NeighborGraph::from_adjacency(adj)?),
        TopologySection::Decentralized { adjacency: None } => {
            let edges: Vec<(String, String)> = (0..n)
                .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
                .map(|(a, b)| (ids[a].clone(), ids[b].clone()))
                .collect();
            Some(NeighborGraph::new(&ids, &edges)?)
        }
        _ => None,
    };
    let mut root = AggregatorState::new(init.clone(), cfg.hyper);
    let mut models: BTreeMap<String, ParameterSet> = ids.iter().map(|id| (id.clone(), init.clone())).collect();
    let evaluate = |records: &mut Vec<MetricRecord>,
                    parts: &[Participant],
                    root: &AggregatorState,
                    models: &BTreeMap<String, ParameterSet>,
                    t: f64|
     -> Result<(), Error> {
        if hier.is_some() {
            records.extend(parts[0].evaluate(&root.global, t, "server")?);
        } else {
            for p in parts {
                records.extend(p.evaluate(&models[p.id()], t, p.id())?);
            }
        }
        Ok(())
    };
    evaluate(&mut records, &parts, &root, &models, 0.0)?;

    for epoch in 0..cfg.num_global_epochs {
        let mut round_end = now;
        let mut updates = Vec::with_capacity(n);
        for (i, p) in parts.iter_mut().enumerate() {
            let base = if hier.is_some() { root.global.clone() } else { models[&ids[i]].clone() };
            let (base, down) = through_wire(&base, cfg.server_codec.as_ref())?;
            let steps = p.cfg.train.local_steps;
            let update = p.train(&base, epoch, steps, false)?;
            let (params, up) = through_wire(&update.params, p.cfg.codec.as_ref())?;
            let start = now + link.delay_ns(down + CONTROL_BYTES);
            let end = start + to_ns(f64::from(steps) * times[i]);
            compute[i].push((start, end));
            round_end = round_end.max(end + link.delay_ns(up + CONTROL_BYTES));
            updates.push(ModelUpdate { params, ..update });
        }
        now = round_end;
        if let Some(tree) = &hier {
            hier_round(tree, &updates, &mut root)?;
        } else {
            let trained: BTreeMap<String, ParameterSet> =
                updates.into_iter().map(|u| (u.client_id.clone(), u.params)).collect();
            models = dfl_round(graph.as_ref().expect("decentralized"), &trained)?.models;
        }
        evaluate(&mut records, &parts, &root, &models, to_s(now))?;
    }
    let utilization = UtilizationReport::from_compute(&ids, &compute, now);
    finish_records(&mut records, &utilization, to_s(now));
    Ok(SimResult {
        records,
        utilization,
        final_global: hier.is_some().then(|| root.global.clone()),
        end_seconds: to_s(now),
        aggregations: cfg.num_global_epochs,
    })
}

fn run_vertical(cfg: &ExperimentConfig) -> Result<SimResult, Error> {
    let TopologySection::Vertical { feature_split, hidden, embed, epochs } = &cfg.topology else {
        unreachable!("dispatched on topology")
    };
    let lead = &cfg.clients[0];
    let (train, val) = load_split(&lead.data)?;
    let vfl = VflConfig::regression(feature_split.clone(), *hidden, *embed)?;
    let tc = VflTrainConfig { epochs: *epochs, batch_size: lead.train.batch_size, lr: lead.train.lr, seed: cfg.seed };
    let report = vfl_train(&vfl, &train, &val, &tc)?;
    let mut records: Vec<MetricRecord> = report
        .train_loss
        .iter()
        .enumerate()
        .map(|(e, l)| MetricRecord::new((e + 1) as f64, "server", "train_loss", *l))
        .collect();
    let end = *epochs as f64;
    records.push(MetricRecord::new(end, "server", "val_mse", report.val_mse));
    records.push(MetricRecord::new(end, "server", "baseline_mse", report.baseline_mse));
    Ok(SimResult {
        records,
        utilization: UtilizationReport::default(),
        final_global: None,
        end_seconds: end,
        aggregations: *epochs as u64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExponentialTimes;

    #[test]
    fn event_order_is_time_kind_subject() {
        let mut q = Queue::default();
        q.push(5, EventKind::Deadline, 0, Payload::Register);
        q.push(5, EventKind::MessageArrives, 2, Payload::Register);
        q.push(5, EventKind::MessageArrives, 1, Payload::Register);
        q.push(5, EventKind::ClientFinishesTraining, 9, Payload::Register);
        q.push(1, EventKind::Deadline, 9, Payload::Register);
        let order: Vec<(u64, EventKind, usize)> =
            std::iter::from_fn(|| q.pop()).map(|e| (e.time_ns, e.kind, e.subject)).collect();
        assert_eq!(
            order,
            vec![
                (1, EventKind::Deadline, 9),
                (5, EventKind::ClientFinishesTraining, 9),
                (5, EventKind::MessageArrives, 1),
                (5, EventKind::MessageArrives, 2),
                (5, EventKind::Deadline, 0),
            ]
        );
    }

    #[test]
    fn exponential_means_span_the_spread() {
        let sim = SimSection {
            mean_batch_time: BatchTimes::Exponential { exponential: ExponentialTimes { t_min: 0.5, spread: 10.0 } },
            latency: 0.0,
            bandwidth: None,
            jitter: 0.0,
            seed: 3,
            max_virtual_time: None,
            max_events: 10,
        };
        let t = batch_times(&sim, 10);
        let lo = t.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = t.iter().copied().fold(0.0, f64::max);
        assert_eq!(lo, 0.5);
        assert!((hi - 5.0).abs() < 1e-12);
        assert_eq!(t, batch_times(&sim, 10));
    }
}
