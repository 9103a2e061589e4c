use std::thread;
use std::time::Duration;

use fedhub::config::{parse_config, ExperimentConfig, Source};
use fedhub::distributed::{finish_server, run_client, run_loopback, start_server, ClientArgs, RetryPolicy};
use fedhub::sim::run_simulation;
use fedhub::Error;

const TIMEOUT: Duration = Duration::from_secs(60);

fn config(aggregator: &str, comm: &str, client_files: &[Source]) -> ExperimentConfig {
    let text = format!(
        "
server_configs:
  aggregator: {aggregator}
  num_global_epochs: 4
  num_clients: 2
  model: {{layer_dims: [4, 8, 3], activation: relu, loss: softmax_cross_entropy}}
  seed: 11
{comm}
client_configs:
  train_configs: {{lr: 0.05, batch_size: 8, local_steps: 15}}
  data_configs:
    dataset_name: blobs
    dataset_kwargs: {{classes: 3, dim: 4, per_class: 40, seed: 2, partition: {{scheme: dirichlet, alpha: 0.5, seed: 1}}}}
sim:
  mean_batch_time: [1.0, 3.0]
  latency: 0.2
  seed: 0
"
    );
    parse_config(&Source::new("server.yaml", text), client_files).unwrap()
}

fn assert_close(cfg: &ExperimentConfig) {
    let sim = run_simulation(cfg).unwrap().final_global.unwrap();
    let wire = run_loopback(cfg, TIMEOUT).unwrap().final_global;
    let diff = sim.max_abs_diff(&wire).expect("same layout");
    assert!(diff <= 1e-9, "max abs diff {diff}");
}

#[test]
fn sync_fedavg_matches_simulation() {
    assert_close(&config("FedAvgAggregator", "", &[]));
}

#[test]
fn sync_fedavg_matches_simulation_with_compression_and_references() {
    let comm = "  compressor_configs: {error_bound: 0.001, param_cutoff: 8}\n  comm: {inline_limit: 64, connector: {kind: memory}}";
    let mut cfg = config("FedAvgAggregator", comm, &[]);
    for c in &mut cfg.clients {
        c.codec = cfg.server_codec;
        c.comm.inline_limit = Some(64);
        c.comm.connector = cfg.server_comm.connector.clone();
    }
    assert_close(&cfg);
}

#[test]
fn adaptive_server_optimizer_matches_simulation() {
    assert_close(&config("FedAdamAggregator", "", &[]));
}

fn client_file(dir: &std::path::Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(format!("{name}.yaml"));
    std::fs::write(&p, body).unwrap();
    p
}

const AUTH: &str = "  comm:\n    auth: {kind: static_token, tokens: {alice: tok-alice, bob: tok-bob}}";

#[test]
fn client_role_fetches_config_and_trains() {
    let cfg = config("FedAvgAggregator", AUTH, &[]);
    let (handle, sink) = start_server(&cfg, None).unwrap();
    let addr = handle.addr().to_string();
    let dir = tempfile::tempdir().unwrap();
    let workers: Vec<_> = [("alice", "tok-alice"), ("bob", "tok-bob")]
        .into_iter()
        .enumerate()
        .map(|(i, (name, tok))| {
            let path = client_file(dir.path(), name, &format!("comm_configs: {{token: {tok}}}\n"));
            let args = ClientArgs {
                server: Some(addr.clone()),
                config: path,
                index: i,
                token: None,
                retry: RetryPolicy::default(),
            };
            thread::spawn(move || run_client(&args))
        })
        .collect();
    let run = finish_server(handle, sink, TIMEOUT).unwrap();
    assert_eq!(run.aggregations, 4);
    for w in workers {
        assert_eq!(w.join().unwrap().unwrap(), 4);
    }
    assert!(run.records.iter().any(|r| r.kind == "val_accuracy" && r.timestamp > 0.0));
}

#[test]
fn wrong_token_is_unauthenticated() {
    let cfg = config("FedAvgAggregator", AUTH, &[]);
    let (handle, _sink) = start_server(&cfg, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = client_file(dir.path(), "mallory", "comm_configs: {token: tok-guess}\n");
    let args = ClientArgs {
        server: Some(handle.addr().to_string()),
        config: path,
        index: 0,
        token: None,
        retry: RetryPolicy::default(),
    };
    assert!(matches!(run_client(&args), Err(Error::Unauthenticated)));
    assert_eq!(handle.dispatched(), 0);
    assert!(handle.rejected() >= 1);
    handle.shutdown();
}

#[test]
fn absent_server_is_refused_after_retries() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let path = client_file(dir.path(), "c", "{}\n");
    let args = ClientArgs {
        server: Some(format!("127.0.0.1:{port}")),
        config: path,
        index: 0,
        token: None,
        retry: RetryPolicy { attempts: 3, delay: Duration::from_millis(10) },
    };
    assert!(matches!(run_client(&args), Err(Error::ConnectionRefused(_))));
}
