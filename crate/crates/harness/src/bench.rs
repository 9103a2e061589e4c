//! Size, compression and transport benchmarks plus utilization reporting.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use fedhub_comm::frame::DEFAULT_MAX_PAYLOAD;
use fedhub_comm::{
    serve, ClientOptions, CommClient, ConnectorRegistry, DataConnector, FsConnector, MemoryConnector, NoAuth,
    ServeConfig,
};
use fedhub_core::aggregator::{Hyper, Strategy};
use fedhub_core::compression::{compress_params, decompress_params, CodecConfig};
use fedhub_core::params::write_params;
use fedhub_core::scheduler::SyncScheduler;
use fedhub_core::server::{Budget, ServerAgent};
use fedhub_core::{serialized_len, ModelUpdate, ParameterSet, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::runs::GANTT_CSV;
use crate::utilization::UtilizationReport;
use crate::Error;

pub const MIB: f64 = 1024.0 * 1024.0;

/// Reference model sizes (parameter counts).
pub const TABLE_MODELS: &[(&str, usize)] = &[
    ("fc_1x1", 2),
    ("cnn", 1_200_000),
    ("resnet18", 11_170_000),
    ("resnet50", 23_520_000),
    ("resnet101", 42_510_000),
    ("vit", 88_220_000),
];

/// Largest tensor in a synthetic model.
const CHUNK: usize = 1 << 20;

/// A model of `n_params` f32 weights drawn from N(0, 0.05²), split into
/// tensors of at most 2²⁰ elements.
pub fn synthetic_params(n_params: usize, seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 0.05).expect("valid sigma");
    let mut p = ParameterSet::new();
    let mut left = n_params;
    let mut i = 0;
    while left > 0 {
        let len = left.min(CHUNK);
        let data: Vec<f32> = (0..len).map(|_| normal.sample(&mut rng)).collect();
        p.push(format!("layer{i}.weight"), Tensor::from_f32(vec![len], data).expect("shape matches")).expect("unique");
        left -= len;
        i += 1;
    }
    p
}

/// Counts bytes without storing them.
#[derive(Debug, Default)]
pub struct CountingWriter(pub usize);

impl Write for CountingWriter {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0 += buf.len();
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeRow {
    pub model: String,
    pub params: usize,
    pub data_bytes: usize,
    pub encoded_bytes: usize,
    pub data_mib: f64,
}

/// Encoded size of each reference model, measured by streaming the encoding
/// into a byte counter.
pub fn size_table(models: &[(&str, usize)]) -> Result<Vec<SizeRow>, Error> {
    models
        .iter()
        .map(|&(name, n)| {
            let p = zero_params(n);
            let mut w = CountingWriter::default();
            write_params(&p, &mut w)?;
            Ok(SizeRow {
                model: name.to_string(),
                params: n,
                data_bytes: p.data_bytes(),
                encoded_bytes: w.0,
                data_mib: p.data_bytes() as f64 / MIB,
            })
        })
        .collect()
}

fn zero_params(n_params: usize) -> ParameterSet {
    let mut p = ParameterSet::new();
    let mut left = n_params;
    let mut i = 0;
    while left > 0 {
        let len = left.min(CHUNK);
        p.push(format!("layer{i}.weight"), Tensor::from_f32(vec![len], vec![0.0; len]).expect("shape"))
            .expect("unique");
        left -= len;
        i += 1;
    }
    p
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressRow {
    pub model: String,
    pub codec: String,
    pub original_bytes: usize,
    pub compressed_bytes: usize,
    pub ratio: f64,
    pub compress_seconds: f64,
    pub decompress_seconds: f64,
    /// Largest reconstruction error relative to the tensor's value range.
    pub max_rel_error: f64,
}

pub fn codec_label(c: &CodecConfig) -> String {
    format!("{}+{}@{}", c.lossy.name(), c.lossless.name(), c.eb_rel)
}

pub fn bench_compress(models: &[(&str, usize)], codecs: &[CodecConfig], seed: u64) -> Result<Vec<CompressRow>, Error> {
    let mut rows = Vec::new();
    for &(name, n) in models {
        let p = synthetic_params(n, seed);
        let original = serialized_len(&p);
        for c in codecs {
            let t0 = Instant::now();
            let blob = compress_params(&p, c)?;
            let t1 = Instant::now();
            let back = decompress_params(&blob, c)?;
            let t2 = Instant::now();
            rows.push(CompressRow {
                model: name.to_string(),
                codec: codec_label(c),
                original_bytes: original,
                compressed_bytes: blob.len(),
                ratio: original as f64 / blob.len() as f64,
                compress_seconds: (t1 - t0).as_secs_f64(),
                decompress_seconds: (t2 - t1).as_secs_f64(),
                max_rel_error: max_rel_error(&p, &back),
            });
        }
    }
    Ok(rows)
}

/// max over tensors of (max |a − b|) / (max a − min a).
pub fn max_rel_error(a: &ParameterSet, b: &ParameterSet) -> f64 {
    a.iter()
        .zip(b.tensors())
        .map(|((_, x), y)| {
            let (lo, hi) = x.values().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
            let err = x.values().zip(y.values()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            if hi > lo {
                err / (hi - lo)
            } else {
                err
            }
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transport {
    /// Body inside the frame.
    Inline,
    /// Body in a shared in-process store, frame carries a reference.
    MemoryRef,
    /// Body in files under a temporary directory.
    FsRef,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommRow {
    pub transport: Transport,
    pub params: usize,
    pub payload_bytes: usize,
    pub trials: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    /// Whether the server's replies arrived inline.
    pub reply_inline: bool,
}

/// Round trips of one update through a single-client FedAvg server.
pub fn bench_comm(sizes: &[usize], transports: &[Transport], trials: usize) -> Result<Vec<CommRow>, Error> {
    let trials = trials.max(1);
    let mut rows = Vec::new();
    let scratch = tempfile::tempdir()?;
    for &n in sizes {
        let params = synthetic_params(n, 7);
        for &t in transports {
            let conn: Option<Arc<dyn DataConnector>> = match t {
                Transport::Inline => None,
                Transport::MemoryRef => Some(Arc::new(MemoryConnector::new("mem"))),
                Transport::FsRef => Some(Arc::new(FsConnector::new("fs", scratch.path().join(format!("{n}")))?)),
            };
            let inline_limit = if conn.is_some() { 0 } else { DEFAULT_MAX_PAYLOAD - (1 << 16) };
            let registry = conn.clone().map_or_else(ConnectorRegistry::new, |c| ConnectorRegistry::new().with(c));
            let agent = ServerAgent::new(
                params.zeros_like(),
                Hyper::default(),
                Box::new(Strategy::FedAvg),
                Box::new(SyncScheduler::new(1, 1)),
                Budget::Aggregations(trials as u64 + 1),
            );
            let cfg = ServeConfig {
                inline_limit,
                connector_id: conn.as_ref().map(|c| c.id().to_string()),
                connectors: registry.clone(),
                ..ServeConfig::default()
            };
            let handle = serve(cfg, agent, Box::new(NoAuth), None)?;
            let mut opts = ClientOptions::new("bench");
            opts.inline_limit = inline_limit;
            opts.upload_connector = conn.clone();
            opts.connectors = registry;
            let mut client = CommClient::connect(handle.addr(), opts)?;
            client.request_model(1)?;
            let update = ModelUpdate {
                client_id: "bench".into(),
                params: params.clone(),
                is_delta: false,
                sample_count: 1,
                local_steps: 1,
                base_epoch: 0,
                wall_meta: None,
            };
            let mut times = Vec::with_capacity(trials);
            let mut reply_inline = true;
            for epoch in 0..trials as u64 {
                let u = ModelUpdate { base_epoch: epoch, ..update.clone() };
                let t0 = Instant::now();
                let reply = client.submit_update(&u)?;
                times.push(t0.elapsed().as_secs_f64());
                reply_inline &= reply.inline;
            }
            drop(client);
            handle.shutdown();
            let mean = times.iter().sum::<f64>() / trials as f64;
            let var = times.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (trials.max(2) - 1) as f64;
            rows.push(CommRow {
                transport: t,
                params: n,
                payload_bytes: serialized_len(&params),
                trials,
                mean_seconds: mean,
                std_seconds: var.sqrt(),
                reply_inline,
            });
        }
    }
    Ok(rows)
}

/// Recomputes per-client utilization from a run directory's Gantt table.
pub fn report_utilization(run_dir: &Path) -> Result<UtilizationReport, Error> {
    UtilizationReport::read_gantt_csv(&run_dir.join(GANTT_CSV))
}

pub fn write_rows<T: Serialize>(rows: &[T], out: &mut dyn Write) -> Result<(), Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
