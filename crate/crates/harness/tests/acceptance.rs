//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use fedhub::bench::CountingWriter;
use fedhub::config::{parse_config, ExperimentConfig, Source};
use fedhub::datasets::load_split;
use fedhub::distributed::{run_client, run_loopback, start_server, ClientArgs, RetryPolicy};
use fedhub::runs::write_run_dir;
use fedhub::sim::{run_simulation, SimResult};
use fedhub_comm::envelope::{Envelope, DEFAULT_INLINE_LIMIT};
use fedhub_comm::frame::{MessageType, DEFAULT_MAX_PAYLOAD};
use fedhub_comm::{decode_frame, encode_frame, ConnectorRegistry, DataConnector, Frame, FrameError, MemoryConnector};
use fedhub_core::aggregator::{AggregatorState, Hyper, ServerOpt};
use fedhub_core::compression::{compress_params, decompress_params, CodecConfig};
use fedhub_core::data::{Dataset, Matrix};
use fedhub_core::model::{backward, backward_from_output, init_params, predict, Activation, Loss, ModelSpec};
use fedhub_core::params::write_params;
use fedhub_core::privacy::{perturb, privatize, sample_laplace, ClipKind, PrivacyConfig};
use fedhub_core::scheduler::{
    compass_assign, CompassConfig, CompassScheduler, Scheduler, SchedulerAction, SpeedEstimate,
};
use fedhub_core::topology::{
    dfl_round, hier_round, vfl_server_step, NeighborGraph, Optimizer, TreeTopology, VflConfig, VflModel,
};
use fedhub_core::{serialize_params, DType, ModelUpdate, ParameterSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

type Outcome = Result<String, String>;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn config_text(name: &str) -> String {
    std::fs::read_to_string(configs().join(name)).expect("shipped config")
}

fn parse(name: &str, text: String) -> ExperimentConfig {
    parse_config(&Source::new(name, text), &[]).expect("valid config")
}

/// Every `seed: 0` in the file (model, data, partition, clock) becomes `seed`.
fn with_seed(text: &str, seed: u64) -> String {
    text.replace("seed: 0", &format!("seed: {seed}"))
}

fn final_accuracy(r: &SimResult) -> f64 {
    r.last("server", "val_accuracy").expect("server accuracy recorded")
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn full_update(id: &str, params: ParameterSet, n: u64) -> ModelUpdate {
    ModelUpdate {
        client_id: id.into(),
        params,
        is_delta: false,
        sample_count: n,
        local_steps: 1,
        base_epoch: 0,
        wall_meta: None,
    }
}

fn random_set(rng: &mut ChaCha8Rng, dims: &[usize]) -> ParameterSet {
    ParameterSet::from_entries(dims.iter().enumerate().map(|(i, &d)| {
        (format!("t{i}"), Tensor::from_f64(vec![d], (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap())
    }))
    .unwrap()
}

// 1 -------------------------------------------------------------------------

const SIZE_ROWS: [(&str, usize, f64); 6] = [
    ("fc_1x1", 2, 8.0),
    ("cnn", 1_200_000, 4.58),
    ("resnet18", 11_170_000, 42.66),
    ("resnet50", 23_520_000, 89.93),
    ("resnet101", 42_510_000, 162.58),
    ("vit", 88_220_000, 336.55),
];

fn chunked_zeros(n: usize) -> ParameterSet {
    let mut p = ParameterSet::new();
    let (mut left, mut i) = (n, 0);
    while left > 0 {
        let len = left.min(1 << 22);
        p.push(format!("block{i}.w"), Tensor::from_f32(vec![len], vec![0.0; len]).unwrap()).unwrap();
        left -= len;
        i += 1;
    }
    p
}

/// Header bytes: u32 count, then per tensor u16 name length, name, dtype
/// tag, ndim and a u32 per dimension.
fn header_bytes(p: &ParameterSet) -> usize {
    4 + p.iter().map(|(n, t)| 2 + n.len() + 1 + 1 + 4 * t.shape().len()).sum::<usize>()
}

fn size_law() -> Outcome {
    let mut worst: f64 = 0.0;
    for (name, n, table) in SIZE_ROWS {
        let p = chunked_zeros(n);
        let mut w = CountingWriter::default();
        write_params(&p, &mut w).map_err(|e| e.to_string())?;
        let data = w.0 - header_bytes(&p);
        ensure(data == 4 * n, || format!("{name}: {data} data bytes for {n} params"))?;
        let rel = if name == "fc_1x1" {
            (data as f64 - table).abs() / table
        } else {
            (data as f64 / 1048576.0 - table).abs() / table
        };
        ensure(rel <= 0.01, || format!("{name}: {:.2} MiB vs {table} ({:.3}%)", data as f64 / 1048576.0, 100.0 * rel))?;
        worst = worst.max(rel);
    }
    Ok(format!("6 rows, data = 4 x params, worst MiB deviation {:.3}%", 100.0 * worst))
}

// 2 -------------------------------------------------------------------------

fn gaussian_f32(rng: &mut ChaCha8Rng, n: usize, mu: f32, sigma: f32) -> Tensor {
    let d = Normal::new(mu, sigma).unwrap();
    Tensor::from_f32(vec![n], (0..n).map(|_| d.sample(rng)).collect()).unwrap()
}

fn compression() -> Outcome {
    let codec = CodecConfig { eb_rel: 0.01, ..CodecConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst_err: f64 = 0.0;
    let mut min_ratio = f64::INFINITY;
    for (i, n) in [65_536usize, 100_000, 262_144, 1 << 20].into_iter().enumerate() {
        for trial in 0..3 {
            let mu = rng.random_range(-1.0f32..1.0);
            let sigma = [0.01f32, 0.05, 1.0][trial];
            let p = ParameterSet::from_entries([(format!("w{i}"), gaussian_f32(&mut rng, n, mu, sigma))]).unwrap();
            let blob = compress_params(&p, &codec).map_err(|e| e.to_string())?;
            let back = decompress_params(&blob, &codec).map_err(|e| e.to_string())?;
            let raw = serialize_params(&p).unwrap().len();
            min_ratio = min_ratio.min(raw as f64 / blob.len() as f64);
            for (x, y) in p.tensors().zip(back.tensors()) {
                let (lo, hi) = x.values().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
                let bound = 0.01 * (hi - lo) + 1e-12;
                let err = x.values().zip(y.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                ensure(err <= bound, || format!("n={n} sigma={sigma}: error {err:e} > bound {bound:e}"))?;
                worst_err = worst_err.max(err / (hi - lo));
            }
        }
    }
    ensure(min_ratio >= 3.0, || format!("compression ratio {min_ratio:.2} < 3"))?;
    let mut small = 0;
    for n in [1usize, 2, 17, 255, 1000, 1023] {
        let f32s = Tensor::from_f32(vec![n], (0..n).map(|_| rng.random_range(-5.0f32..5.0)).collect()).unwrap();
        let f64s = Tensor::from_f64(vec![n], (0..n).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
        let p = ParameterSet::from_entries([("a".to_string(), f32s), ("b".to_string(), f64s)]).unwrap();
        let back = decompress_params(&compress_params(&p, &codec).unwrap(), &codec).unwrap();
        ensure(p.bit_eq(&back), || format!("{n}-element tensor not bit-exact"))?;
        small += 2;
    }
    Ok(format!("max error {worst_err:.5} x range, min ratio {min_ratio:.2}, {small} small tensors bit-exact"))
}

// 3 -------------------------------------------------------------------------

fn random_tree(rng: &mut ChaCha8Rng, n_leaves: usize) -> TreeTopology {
    let mut frontier: Vec<String> = (0..n_leaves).map(|i| format!("leaf{i}")).collect();
    let mut children: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut next = 0;
    loop {
        let mut grouped = Vec::new();
        while !frontier.is_empty() {
            let take = rng.random_range(1..=4).min(frontier.len());
            let name = format!("agg{next}");
            next += 1;
            children.insert(name.clone(), frontier.drain(..take).collect());
            grouped.push(name);
        }
        frontier = grouped;
        if frontier.len() == 1 {
            break;
        }
    }
    TreeTopology::new(frontier.pop().unwrap(), children).unwrap()
}

/// Sample-weighted mean computed coordinate by coordinate.
fn weighted_mean(sets: &[(ParameterSet, u64)]) -> Vec<f64> {
    let total: f64 = sets.iter().map(|(_, n)| *n as f64).sum();
    let mut acc = vec![0.0; sets[0].0.flatten().len()];
    for (p, n) in sets {
        for (a, v) in acc.iter_mut().zip(p.flatten()) {
            *a += *n as f64 * v;
        }
    }
    acc.iter().map(|a| a / total).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let dims = [4usize, 3, 1];

    let mut hier_worst: f64 = 0.0;
    for _ in 0..100 {
        let leaves = rng.random_range(1..25);
        let tree = random_tree(&mut rng, leaves);
        let leaves: Vec<(ParameterSet, u64)> =
            tree.leaves().iter().map(|_| (random_set(&mut rng, &dims), rng.random_range(1..5000))).collect();
        let updates: Vec<ModelUpdate> =
            tree.leaves().iter().zip(&leaves).map(|(id, (p, n))| full_update(id, p.clone(), *n)).collect();
        let mut state = AggregatorState::new(random_set(&mut rng, &dims), Hyper::default());
        hier_round(&tree, &updates, &mut state).map_err(|e| e.to_string())?;
        hier_worst = hier_worst.max(max_diff(&state.global.flatten(), &weighted_mean(&leaves)));
    }
    ensure(hier_worst <= 1e-9, || format!("hierarchical vs flat differ by {hier_worst:e}"))?;

    let mut dfl_worst: f64 = 0.0;
    for n in 2..12 {
        let g = NeighborGraph::complete(n);
        let models: BTreeMap<String, ParameterSet> =
            g.nodes().map(|id| (id.clone(), random_set(&mut rng, &dims))).collect();
        let equal: Vec<(ParameterSet, u64)> = models.values().map(|p| (p.clone(), 1)).collect();
        let expect = weighted_mean(&equal);
        let out = dfl_round(&g, &models).map_err(|e| e.to_string())?;
        ensure(out.models.len() == n, || "missing node models".into())?;
        for m in out.models.values() {
            dfl_worst = dfl_worst.max(max_diff(&m.flatten(), &expect));
        }
    }
    ensure(dfl_worst <= 1e-12, || format!("complete-graph gossip vs mean differ by {dfl_worst:e}"))?;

    let mut avgm_worst: f64 = 0.0;
    for _ in 0..50 {
        let hyper = Hyper { momentum: 0.0, ..Hyper::default() };
        let start = random_set(&mut rng, &dims);
        let mut m = AggregatorState::new(start.clone(), hyper);
        let mut global = start.flatten();
        for _ in 0..4 {
            let k = rng.random_range(1..6);
            let deltas: Vec<(ParameterSet, u64)> =
                (0..k).map(|_| (random_set(&mut rng, &dims), rng.random_range(1..100))).collect();
            let updates: Vec<ModelUpdate> = deltas
                .iter()
                .enumerate()
                .map(|(i, (d, n))| ModelUpdate {
                    is_delta: true,
                    base_epoch: m.epoch,
                    ..full_update(&format!("c{i}"), d.clone(), *n)
                })
                .collect();
            m.agg_server_opt(&updates, ServerOpt::FedAvgM).map_err(|e| e.to_string())?;
            for (g, d) in global.iter_mut().zip(weighted_mean(&deltas)) {
                *g += d;
            }
            avgm_worst = avgm_worst.max(max_diff(&m.global.flatten(), &global));
        }
    }
    ensure(avgm_worst <= 1e-12, || format!("momentum 0 vs averaged deltas differ by {avgm_worst:e}"))?;

    let (assigned, qspan) = compass_bounds(&mut rng)?;
    Ok(format!(
        "hier {hier_worst:.1e}, gossip {dfl_worst:.1e}, momentum-0 {avgm_worst:.1e}, {assigned} compass assignments in {qspan}"
    ))
}

fn compass_bounds(rng: &mut ChaCha8Rng) -> Result<(usize, String), String> {
    let mut assigned = 0;
    let check = |steps: u32, qmin: u32, qmax: u32| {
        ensure((qmin..=qmax).contains(&steps), || format!("{steps} outside [{qmin}, {qmax}]"))
    };
    for _ in 0..100 {
        let qmin = rng.random_range(1..60);
        let qmax = qmin + rng.random_range(0..300);
        let n = rng.random_range(1..10);
        let speeds: Vec<f64> = (0..n).map(|_| 10f64.powf(rng.random_range(-3.0..1.0))).collect();
        let mut s = CompassScheduler::new(CompassConfig { qmin, qmax, ..CompassConfig::default() })
            .map_err(|e| e.to_string())?;
        let mut pending: Vec<(f64, String, u32)> = Vec::new();
        for (i, sp) in speeds.iter().enumerate() {
            let id = format!("c{i}");
            let steps = s.register(&id, 0.0).map_err(|e| e.to_string())?;
            check(steps, qmin, qmax)?;
            assigned += 1;
            pending.push((f64::from(steps) * sp, id, steps));
        }
        for _ in 0..80 {
            pending.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let (now, id, steps) = pending.remove(0);
            let mut reassign =
                |t: f64, pending: &mut Vec<(f64, String, u32)>, s: &mut CompassScheduler| -> Result<(), String> {
                    for a in s.on_aggregated(t) {
                        check(a.steps, qmin, qmax)?;
                        assigned += 1;
                        let i: usize = a.client_id[1..].parse().unwrap();
                        let jitter = rng.random_range(0.5..2.0);
                        pending.push((t + f64::from(a.steps) * speeds[i] * jitter, a.client_id, a.steps));
                    }
                    Ok(())
                };
            if let Some(d) = s.next_deadline() {
                if d <= now {
                    s.poll(d);
                    reassign(d, &mut pending, &mut s)?;
                }
            }
            let u = ModelUpdate { local_steps: steps, ..full_update(&id, ParameterSet::new(), 1) };
            if matches!(s.on_update(u, now).map_err(|e| e.to_string())?, SchedulerAction::Aggregate(_)) {
                reassign(now, &mut pending, &mut s)?;
            }
        }
    }
    for _ in 0..1000 {
        let (qmin, qmax) = (20, 200);
        let speed = SpeedEstimate {
            client_id: "x".into(),
            per_step_time: 10f64.powf(rng.random_range(-4.0..2.0)),
            observations: 1,
        };
        let now = rng.random_range(0.0..1e4);
        let records: Vec<_> = (0..rng.random_range(0..6))
            .map(|i| {
                let mut s = CompassScheduler::new(CompassConfig::default()).unwrap();
                s.register(&format!("g{i}"), 0.0).unwrap();
                let mut g = s.groups().next().unwrap().clone();
                g.group_id = i;
                g.expected_arrival = Some(rng.random_range(0.0..2e4));
                g
            })
            .collect();
        let refs: Vec<_> = records.iter().collect();
        let choice = compass_assign(&speed, now, &refs, qmin, qmax).map_err(|e| e.to_string())?;
        check(choice.steps(), qmin, qmax)?;
        assigned += 1;
    }
    Ok((assigned, "[qmin, qmax]".into()))
}

// 4 -------------------------------------------------------------------------

/// Mean loss evaluated straight from the network outputs.
fn oracle_loss(spec: &ModelSpec, params: &ParameterSet, x: &Matrix, labels: &[f64]) -> f64 {
    let out = predict(spec, params, x).unwrap();
    let mut total = 0.0;
    for r in 0..out.rows {
        let row = out.row(r);
        total += match spec.loss {
            Loss::Mse => (row[0] - labels[r]).powi(2),
            Loss::SoftmaxCrossEntropy => {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - row[labels[r] as usize]
            }
        };
    }
    total / out.rows as f64
}

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4)
}

fn central_difference(flat: &[f64], i: usize, f: impl Fn(&[f64]) -> f64) -> f64 {
    let h = 1e-6;
    let mut probe = flat.to_vec();
    probe[i] += h;
    let up = f(&probe);
    probe[i] -= 2.0 * h;
    (up - f(&probe)) / (2.0 * h)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect())
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4040);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let depth = rng.random_range(2..5);
        let mut dims: Vec<usize> = (0..depth).map(|_| rng.random_range(1..6)).collect();
        let classify = rng.random_bool(0.5);
        if classify {
            dims[depth - 1] = rng.random_range(2..5);
        } else {
            dims[depth - 1] = 1;
        }
        let activation = if trial % 2 == 0 { Activation::Relu } else { Activation::Identity };
        let loss = if classify { Loss::SoftmaxCrossEntropy } else { Loss::Mse };
        let spec = ModelSpec::new(dims.clone(), activation, loss).unwrap();
        let params = init_params(&spec, DType::F64, trial);
        let rows = rng.random_range(1..7);
        let x = random_matrix(&mut rng, rows, dims[0]);
        let out = dims[depth - 1];
        let labels: Vec<f64> = (0..rows)
            .map(|_| if classify { rng.random_range(0..out) as f64 } else { rng.random_range(-2.0..2.0) })
            .collect();
        let batch = Dataset::new(x.clone(), labels.clone(), classify.then_some(out)).unwrap();
        let analytic = backward(&spec, &params, &batch).map_err(|e| e.to_string())?.1.flatten();
        let flat = params.flatten();
        for i in 0..flat.len() {
            let fd = central_difference(&flat, i, |w| oracle_loss(&spec, &params.with_flat(w).unwrap(), &x, &labels));
            let e = rel_err(fd, analytic[i]);
            ensure(e < 1e-4, || format!("network trial {trial} param {i}: fd {fd} vs {}", analytic[i]))?;
            worst = worst.max(e);
        }
    }
    let vfl_worst = vfl_gradients(&mut rng)?;
    Ok(format!("network worst {worst:.1e}, split-model worst {vfl_worst:.1e} over 100 instances each"))
}

fn vfl_gradients(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for trial in 0..100u64 {
        let parties = rng.random_range(2..4);
        let mut split: Vec<Vec<usize>> = vec![Vec::new(); parties];
        let features = rng.random_range(parties..parties + 5);
        for f in 0..features {
            let p = if f < parties { f } else { rng.random_range(0..parties) };
            split[p].push(f);
        }
        let cfg = VflConfig::regression(split.clone(), rng.random_range(2..6), rng.random_range(1..4))
            .map_err(|e| e.to_string())?;
        let model = VflModel::new(cfg.clone(), trial, false);
        let rows = rng.random_range(1..7);
        let x = random_matrix(rng, rows, features);
        let labels: Vec<f64> = (0..rows).map(|_| rng.random_range(-2.0..2.0)).collect();
        let blocks: Vec<Matrix> = split.iter().map(|c| x.select_cols(c)).collect();

        // Analytic: head gradient from one unit SGD step, embedder gradients
        // from the returned embedding gradients.
        let embeddings: Vec<Matrix> = blocks
            .iter()
            .zip(cfg.client_specs.iter().zip(&model.clients))
            .map(|(b, (s, p))| predict(s, p, b).unwrap())
            .collect();
        let frozen = vfl_server_step(&cfg, &embeddings, &labels, &model.head, &mut Optimizer::Sgd, 0.0)
            .map_err(|e| e.to_string())?;
        ensure(frozen.head.bit_eq(&model.head), || "zero learning rate moved the head".into())?;
        let stepped = vfl_server_step(&cfg, &embeddings, &labels, &model.head, &mut Optimizer::Sgd, 1.0)
            .map_err(|e| e.to_string())?;
        let mut analytic: Vec<f64> =
            model.head.flatten().iter().zip(stepped.head.flatten()).map(|(a, b)| a - b).collect();
        for (k, g) in frozen.embedding_grads.iter().enumerate() {
            let (grads, _) = backward_from_output(&cfg.client_specs[k], &model.clients[k], &blocks[k], g)
                .map_err(|e| e.to_string())?;
            analytic.extend(grads.flatten());
        }

        // Numeric: perturb one coordinate of the concatenated parameters.
        let sizes: Vec<usize> = std::iter::once(model.head.flatten().len())
            .chain(model.clients.iter().map(|c| c.flatten().len()))
            .collect();
        let mut flat = model.head.flatten();
        for c in &model.clients {
            flat.extend(c.flatten());
        }
        let objective = |w: &[f64]| {
            let mut off = sizes[0];
            let head = model.head.with_flat(&w[..off]).unwrap();
            let emb: Vec<Matrix> = (0..parties)
                .map(|k| {
                    let p = model.clients[k].with_flat(&w[off..off + sizes[k + 1]]).unwrap();
                    off += sizes[k + 1];
                    predict(&cfg.client_specs[k], &p, &blocks[k]).unwrap()
                })
                .collect();
            let out = predict(&cfg.head_spec, &head, &Matrix::hconcat(&emb)).unwrap();
            (0..rows).map(|r| (out.row(r)[0] - labels[r]).powi(2)).sum::<f64>() / rows as f64
        };
        ensure((objective(&flat) - frozen.loss).abs() <= 1e-12 * frozen.loss.max(1.0), || "loss mismatch".into())?;
        for i in 0..flat.len() {
            let fd = central_difference(&flat, i, objective);
            let e = rel_err(fd, analytic[i]);
            ensure(e < 1e-4, || format!("split-model trial {trial} param {i}: fd {fd} vs {}", analytic[i]))?;
            worst = worst.max(e);
        }
    }
    Ok(worst)
}

// 5, 6 ----------------------------------------------------------------------

#[derive(Default)]
struct DriftRuns {
    /// (aggregator, seed) -> (final accuracy, lowest client utilization)
    runs: BTreeMap<(&'static str, u64), (f64, f64)>,
}

impl DriftRuns {
    fn get(&mut self, agg: &'static str, seed: u64) -> Result<(f64, f64), String> {
        if let Some(v) = self.runs.get(&(agg, seed)) {
            return Ok(*v);
        }
        let text = with_seed(&config_text("drift_compass.yaml"), seed).replace("FedCompassAggregator", agg);
        let r = run_simulation(&parse("drift.yaml", text)).map_err(|e| e.to_string())?;
        let low = r.utilization.clients.iter().map(|c| c.utilization).fold(f64::INFINITY, f64::min);
        let v = (final_accuracy(&r), low);
        self.runs.insert((agg, seed), v);
        Ok(v)
    }
}

fn utilization(drift: &mut DriftRuns) -> Outcome {
    let pair = run_simulation(&parse("sync_pair.yaml", config_text("sync_pair.yaml"))).map_err(|e| e.to_string())?;
    let u: Vec<f64> = pair.utilization.clients.iter().map(|c| c.utilization).collect();
    ensure(u == [0.5, 1.0], || format!("sync pair utilization {u:?}"))?;

    let text = config_text("sync_pair.yaml").replace("FedAvgAggregator", "FedAsyncAggregator");
    let r = run_simulation(&parse("async_pair.yaml", text)).map_err(|e| e.to_string())?;
    ensure(r.utilization.clients.iter().all(|c| c.utilization == 1.0), || "async pair not fully busy".into())?;
    let (_, async_low) = drift.get("FedAsyncAggregator", 0)?;
    ensure(async_low == 1.0, || format!("async drift lowest utilization {async_low}"))?;

    let mut low = f64::INFINITY;
    for s in SEEDS {
        low = low.min(drift.get("FedCompassAggregator", s)?.1);
    }
    ensure(low >= 0.80, || format!("compass lowest client utilization {low:.4}"))?;
    Ok(format!("sync pair {u:?}, async 1.0, compass lowest client {low:.4} over 5 seeds"))
}

fn drift_ordering(drift: &mut DriftRuns) -> Outcome {
    let mut means = Vec::new();
    for agg in ["FedAvgAggregator", "FedAsyncAggregator", "FedCompassAggregator"] {
        let accs = SEEDS.iter().map(|&s| drift.get(agg, s).map(|v| v.0)).collect::<Result<Vec<_>, _>>()?;
        means.push(mean(&accs));
    }
    let (avg, asy, compass) = (means[0], means[1], means[2]);
    let detail = format!("FedAvg {avg:.4}, FedAsync {asy:.4}, FedCompass {compass:.4}");
    ensure(avg > asy && compass > asy && compass >= avg - 0.01, || detail.clone())?;
    Ok(detail)
}

// 7 -------------------------------------------------------------------------

fn privacy() -> Outcome {
    let mut means = Vec::new();
    for eps in [".inf", "10", "1", "0.1"] {
        let mut accs = Vec::new();
        for s in SEEDS {
            let text = with_seed(&config_text("dp.yaml"), s).replace("epsilon: .inf", &format!("epsilon: {eps}"));
            accs.push(final_accuracy(&run_simulation(&parse("dp.yaml", text)).map_err(|e| e.to_string())?));
        }
        means.push(mean(&accs));
    }
    for w in means.windows(2) {
        ensure(w[1] <= w[0] + 0.01, || format!("accuracy rises as epsilon drops: {means:.4?}"))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for (c, eps) in [(1.0, 1.0), (1.0, 10.0), (0.5, 0.1), (2.0, 3.0)] {
        let b = c / eps;
        let m = (0..100_000).map(|_| sample_laplace(&mut rng, b).abs()).sum::<f64>() / 1e5;
        let dev = (m - b).abs() / b;
        ensure(dev <= 0.05, || format!("mean |noise| {m} vs {b}"))?;
        worst = worst.max(dev);
    }

    let delta = random_set(&mut rng, &[50, 7]);
    for clip_kind in [ClipKind::L1, ClipKind::L2] {
        let open = PrivacyConfig {
            enabled: true,
            epsilon: f64::INFINITY,
            clip_norm: f64::INFINITY,
            clip_kind,
            ..PrivacyConfig::default()
        };
        ensure(privatize(&delta, &open, &mut rng).unwrap().bit_eq(&delta), || {
            "privatize at infinite epsilon changed bits".into()
        })?;
        let clipped = PrivacyConfig { clip_norm: 1.0, ..open };
        ensure(perturb(&delta, &clipped, &mut rng).unwrap().bit_eq(&delta), || {
            "perturb at infinite epsilon changed bits".into()
        })?;
    }
    let base = with_seed(&config_text("dp.yaml"), 3).replace("clip_norm: 1.0", "clip_norm: .inf");
    let on = run_simulation(&parse("dp.yaml", base.clone())).map_err(|e| e.to_string())?;
    let off = run_simulation(&parse("dp.yaml", base.replace("enabled: true", "enabled: false")))
        .map_err(|e| e.to_string())?;
    ensure(on.final_global.unwrap().bit_eq(&off.final_global.unwrap()), || {
        "infinite epsilon run differs from no privacy".into()
    })?;
    Ok(format!(
        "accuracy by epsilon (inf, 10, 1, 0.1) {means:.4?}, Laplace worst deviation {:.2}%, infinite epsilon bit-exact",
        100.0 * worst
    ))
}

// 8 -------------------------------------------------------------------------

fn vertical() -> Outcome {
    let mut wins = 0;
    let mut summary = Vec::new();
    for s in SEEDS {
        let cfg = parse("vertical.yaml", with_seed(&config_text("vertical_diabetes.yaml"), s));
        let (train, val) = load_split(&cfg.clients[0].data).map_err(|e| e.to_string())?;
        ensure(train.len() + val.len() == 442 && train.dim() == 10, || "unexpected data shape".into())?;
        let mu = mean(&train.labels);
        let baseline = val.labels.iter().map(|y| (y - mu).powi(2)).sum::<f64>() / val.len() as f64;
        let r = run_simulation(&cfg).map_err(|e| e.to_string())?;
        let val_mse = r.last("server", "val_mse").ok_or("no val_mse")?;
        let curve: Vec<f64> = r.records.iter().filter(|m| m.kind == "train_loss").map(|m| m.value).collect();
        ensure(curve.len() == 200, || format!("{} epochs logged", curve.len()))?;
        let head = mean(&curve[..20]);
        let tail = mean(&curve[180..]);
        ensure(tail < head && curve[199] < curve[0], || format!("seed {s}: training loss {head:.3} -> {tail:.3}"))?;
        if val_mse < baseline {
            wins += 1;
        }
        summary.push(format!("{val_mse:.0}/{baseline:.0}"));
    }
    ensure(wins >= 4, || format!("beats baseline in {wins} of 5 seeds ({})", summary.join(", ")))?;
    Ok(format!("val/baseline MSE {}, {wins} of 5 below baseline, loss curves decreasing", summary.join(", ")))
}

// 9 -------------------------------------------------------------------------

fn socket_config(extra: &str) -> ExperimentConfig {
    let text = format!(
        "
server_configs:
  aggregator: FedAvgAggregator
  num_global_epochs: 5
  num_clients: 3
  model: {{layer_dims: [4, 8, 3], activation: relu, loss: softmax_cross_entropy}}
  seed: 21
{extra}
client_configs:
  train_configs: {{lr: 0.05, batch_size: 8, local_steps: 12}}
  data_configs:
    dataset_name: blobs
    dataset_kwargs: {{classes: 3, dim: 4, per_class: 40, seed: 4, partition: {{scheme: dirichlet, alpha: 0.5, seed: 2}}}}
sim:
  mean_batch_time: [1.0, 2.0, 0.5]
  latency: 0.1
  seed: 0
"
    );
    parse("socket.yaml", text)
}

fn protocol() -> Outcome {
    let golden = encode_frame(&Frame::new(MessageType::ConfigRequest, &[], Vec::new())).map_err(|e| e.to_string())?;
    ensure(golden == [0x41, 0x50, 0x46, 0x4C, 0x01, 0x01, 0, 0, 0, 0, 0, 0], || format!("golden frame {golden:02X?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(9009);
    let mut accepted = 0;
    for i in 0..10_000 {
        let bytes: Vec<u8> = if i % 3 == 0 {
            (0..rng.random_range(0..40)).map(|_| rng.random()).collect()
        } else {
            let token: Vec<u8> = (0..rng.random_range(0..12)).map(|_| rng.random()).collect();
            let payload: Vec<u8> = (0..rng.random_range(0..48)).map(|_| rng.random()).collect();
            let mut b = encode_frame(&Frame { msg_type: rng.random(), token, payload }).unwrap();
            let pos = rng.random_range(0..b.len());
            b[pos] = rng.random();
            if rng.random_bool(0.3) {
                b.truncate(rng.random_range(0..b.len()));
            }
            b
        };
        let result = std::panic::catch_unwind(|| decode_frame(&bytes, 4096))
            .map_err(|_| format!("decoder panicked on {bytes:02X?}"))?;
        match result {
            Ok(_) => accepted += 1,
            Err(FrameError::BadMagic(_))
            | Err(FrameError::UnsupportedVersion(_))
            | Err(FrameError::LengthMismatch { .. })
            | Err(FrameError::OversizedPayload { .. }) => {}
        }
    }

    let auth = "  comm:\n    bind: 127.0.0.1:0\n    auth: {kind: static_token, tokens: {client0: right-token}}";
    let (handle, _sink) = start_server(&socket_config(auth), None).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let own = dir.path().join("intruder.yaml");
    std::fs::write(&own, "comm_configs: {token: wrong-token}\n").unwrap();
    let args = ClientArgs {
        server: Some(handle.addr().to_string()),
        config: own,
        index: 0,
        token: None,
        retry: RetryPolicy { attempts: 1, delay: Duration::ZERO },
    };
    let refused = matches!(run_client(&args), Err(fedhub::Error::Unauthenticated));
    let (dispatched, rejected) = (handle.dispatched(), handle.rejected());
    handle.shutdown();
    ensure(refused && dispatched == 0 && rejected >= 1, || {
        format!("bad token: refused {refused}, dispatched {dispatched}")
    })?;

    let mem = Arc::new(MemoryConnector::new("mem"));
    let big = vec![7u8; DEFAULT_INLINE_LIMIT + 1];
    let env =
        Envelope::pack(big.clone(), BTreeMap::new(), Some(mem.as_ref() as &dyn DataConnector), DEFAULT_INLINE_LIMIT)
            .map_err(|e| e.to_string())?;
    let mut reg = ConnectorRegistry::new();
    reg.register(mem.clone());
    ensure(!env.is_inline() && env.body_bytes(&reg).map_err(|e| e.to_string())? == big, || {
        "large body not sent by reference".into()
    })?;
    let small = Envelope::pack(
        vec![1u8; DEFAULT_INLINE_LIMIT],
        BTreeMap::new(),
        Some(mem.as_ref() as &dyn DataConnector),
        DEFAULT_INLINE_LIMIT,
    )
    .map_err(|e| e.to_string())?;
    ensure(small.is_inline() && DEFAULT_INLINE_LIMIT == 10 << 20 && DEFAULT_MAX_PAYLOAD > 0, || {
        "limit body not inline".into()
    })?;

    let cfg = socket_config("");
    let sim = run_simulation(&cfg).map_err(|e| e.to_string())?.final_global.ok_or("no global model")?;
    let wire = run_loopback(&cfg, Duration::from_secs(120)).map_err(|e| e.to_string())?.final_global;
    let diff = sim.max_abs_diff(&wire).ok_or("layouts differ")?;
    ensure(diff <= 1e-9, || format!("simulation vs sockets differ by {diff:e}"))?;
    Ok(format!("golden frame ok, 10^4 fuzz inputs ({accepted} valid), bad token never dispatched, >10 MiB by reference, sim vs socket {diff:.1e}"))
}

// 10 ------------------------------------------------------------------------

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut names = Vec::new();
    for entry in std::fs::read_dir(configs()).map_err(|e| e.to_string())? {
        let p = entry.map_err(|e| e.to_string())?.path();
        if p.extension().is_some_and(|e| e == "yaml") {
            names.push(p.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    names.sort();
    let mut files = 0;
    for name in &names {
        let cfg = parse(name, config_text(name));
        let mut outputs = Vec::new();
        for run in ["first", "second"] {
            let r = run_simulation(&cfg).map_err(|e| format!("{name}: {e}"))?;
            let out = dir.path().join(name).join(run);
            write_run_dir(&out, &cfg.snapshot(), &r.records, Some(&r.utilization)).map_err(|e| e.to_string())?;
            let mut contents = BTreeMap::new();
            for f in std::fs::read_dir(&out).unwrap() {
                let f = f.unwrap().path();
                contents.insert(f.file_name().unwrap().to_owned(), std::fs::read(&f).unwrap());
            }
            outputs.push(contents);
        }
        ensure(outputs[0] == outputs[1], || format!("{name}: run directories differ"))?;
        files += outputs[0].len();
    }
    Ok(format!("{} configs run twice, {files} files byte-identical", names.len()))
}

fn main() -> ExitCode {
    let mut drift = DriftRuns::default();
    let criteria: Vec<(&str, u64, Box<dyn FnOnce(&mut DriftRuns) -> Outcome>)> = vec![
        ("size law", 60, Box::new(|_| size_law())),
        ("compression", 60, Box::new(|_| compression())),
        ("oracle equivalences", 60, Box::new(|_| oracles())),
        ("gradient checks", 120, Box::new(|_| gradients())),
        ("utilization", 120, Box::new(utilization)),
        ("client-drift ordering", 600, Box::new(drift_ordering)),
        ("privacy trend", 600, Box::new(|_| privacy())),
        ("vertical case study", 120, Box::new(|_| vertical())),
        ("protocol", 180, Box::new(|_| protocol())),
        ("determinism", 600, Box::new(|_| determinism())),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = check(&mut drift);
        let secs = start.elapsed().as_secs_f64();
        let outcome = outcome.and_then(|d| {
            if secs < limit as f64 {
                Ok(d)
            } else {
                Err(format!("{d}; took {secs:.1}s, limit {limit}s"))
            }
        });
        match outcome {
            Ok(d) => println!("PASS {:>2} {name}: {d} ({secs:.1}s)", i + 1),
            Err(d) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {d} ({secs:.1}s)", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
