//! Per-client compute/idle accounting on the virtual clock.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::Error;

const NS: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalKind {
    Compute,
    Idle,
}

/// One Gantt bar. Times are integer nanoseconds so that compute and idle
/// time add up to the run length exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub client: String,
    pub start_ns: u64,
    pub end_ns: u64,
    pub kind: IntervalKind,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientUtilization {
    pub client: String,
    pub compute_seconds: f64,
    pub total_seconds: f64,
    pub utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UtilizationReport {
    pub clients: Vec<ClientUtilization>,
    pub gantt: Vec<Interval>,
}

impl UtilizationReport {
    /// Builds the report from each client's compute spans, clipped to
    /// `[0, end_ns]`; the gaps become idle spans.
    pub fn from_compute(ids: &[String], compute: &[Vec<(u64, u64)>], end_ns: u64) -> Self {
        let mut gantt = Vec::new();
        for (id, spans) in ids.iter().zip(compute) {
            let mut spans: Vec<(u64, u64)> =
                spans.iter().map(|&(s, e)| (s.min(end_ns), e.min(end_ns))).filter(|(s, e)| e > s).collect();
            spans.sort_unstable();
            let mut cursor = 0;
            for (s, e) in spans {
                let s = s.max(cursor);
                if e <= s {
                    continue;
                }
                if s > cursor {
                    gantt.push(Interval { client: id.clone(), start_ns: cursor, end_ns: s, kind: IntervalKind::Idle });
                }
                gantt.push(Interval { client: id.clone(), start_ns: s, end_ns: e, kind: IntervalKind::Compute });
                cursor = e;
            }
            if cursor < end_ns {
                gantt.push(Interval { client: id.clone(), start_ns: cursor, end_ns, kind: IntervalKind::Idle });
            }
        }
        Self::from_gantt(ids, gantt, end_ns)
    }

    pub fn from_gantt(ids: &[String], gantt: Vec<Interval>, end_ns: u64) -> Self {
        let mut compute: BTreeMap<&str, u64> = ids.iter().map(|id| (id.as_str(), 0)).collect();
        for iv in gantt.iter().filter(|iv| iv.kind == IntervalKind::Compute) {
            *compute.entry(iv.client.as_str()).or_default() += iv.end_ns - iv.start_ns;
        }
        let clients = ids
            .iter()
            .map(|id| {
                let c = compute[id.as_str()];
                ClientUtilization {
                    client: id.clone(),
                    compute_seconds: c as f64 / NS,
                    total_seconds: end_ns as f64 / NS,
                    utilization: if end_ns == 0 { 0.0 } else { c as f64 / end_ns as f64 },
                }
            })
            .collect();
        Self { clients, gantt }
    }

    pub fn utilization_of(&self, client: &str) -> Option<f64> {
        self.clients.iter().find(|c| c.client == client).map(|c| c.utilization)
    }

    pub fn end_ns(&self) -> u64 {
        self.gantt.iter().map(|iv| iv.end_ns).max().unwrap_or(0)
    }

    pub fn write_gantt_csv(&self, path: &Path) -> Result<(), Error> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["client", "start_ns", "end_ns", "kind", "start", "end"])?;
        for iv in &self.gantt {
            let kind = match iv.kind {
                IntervalKind::Compute => "compute",
                IntervalKind::Idle => "idle",
            };
            w.serialize((&iv.client, iv.start_ns, iv.end_ns, kind, iv.start_ns as f64 / NS, iv.end_ns as f64 / NS))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv(&self, path: &Path) -> Result<(), Error> {
        let mut w = csv::Writer::from_path(path)?;
        for c in &self.clients {
            w.serialize(c)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Rebuilds a report from a Gantt CSV written by [`Self::write_gantt_csv`].
    pub fn read_gantt_csv(path: &Path) -> Result<Self, Error> {
        let mut r = csv::Reader::from_path(path)?;
        let mut ids: Vec<String> = Vec::new();
        let mut gantt = Vec::new();
        for row in r.deserialize::<(String, u64, u64, IntervalKind, f64, f64)>() {
            let (client, start_ns, end_ns, kind, _, _) = row?;
            if !ids.contains(&client) {
                ids.push(client.clone());
            }
            gantt.push(Interval { client, start_ns, end_ns, kind });
        }
        let end = gantt.iter().map(|iv| iv.end_ns).max().unwrap_or(0);
        Ok(Self::from_gantt(&ids, gantt, end))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sync_pair_idle_arithmetic() {
        let ids = vec!["fast".to_string(), "slow".to_string()];
        let s = 1_000_000_000;
        let fast = vec![(0, 100 * s), (200 * s, 300 * s)];
        let slow = vec![(0, 200 * s), (200 * s, 400 * s)];
        let r = UtilizationReport::from_compute(&ids, &[fast, slow], 400 * s);
        assert_eq!(r.utilization_of("fast"), Some(0.5));
        assert_eq!(r.utilization_of("slow"), Some(1.0));
        let idle: u64 =
            r.gantt.iter().filter(|iv| iv.kind == IntervalKind::Idle).map(|iv| iv.end_ns - iv.start_ns).sum();
        assert_eq!(idle, 200 * s);
    }

    #[test]
    fn spans_are_clipped_to_the_run() {
        let ids = vec!["a".to_string()];
        let r = UtilizationReport::from_compute(&ids, &[vec![(5, 20)]], 10);
        assert_eq!(r.gantt.len(), 2);
        assert_eq!(r.clients[0].utilization, 0.5);
    }

    #[test]
    fn gantt_csv_round_trip() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let r = UtilizationReport::from_compute(&ids, &[vec![(0, 3)], vec![(1, 2)]], 4);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gantt.csv");
        r.write_gantt_csv(&p).unwrap();
        assert_eq!(UtilizationReport::read_gantt_csv(&p).unwrap(), r);
    }
}
