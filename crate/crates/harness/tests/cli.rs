use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fedhub(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedhub")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn shipped_configs_validate() {
    let mut n = 0;
    for entry in std::fs::read_dir(configs()).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "yaml") {
            let o = fedhub(&["validate-config", "--config", p.to_str().unwrap()]);
            assert!(o.status.success(), "{}: {}", p.display(), String::from_utf8_lossy(&o.stderr));
            n += 1;
        }
    }
    assert!(n >= 5);
    let d = configs().join("distributed");
    let o = Command::new(env!("CARGO_BIN_EXE_fedhub"))
        .args(["validate-config", "--config"])
        .arg(d.join("server.yaml"))
        .arg("--client")
        .arg(d.join("site_a.yaml"))
        .arg("--client")
        .arg(d.join("site_b.yaml"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn simulate_then_report_utilization() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pair");
    let cfg = configs().join("sync_pair.yaml");
    let o = fedhub(&["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "metrics.jsonl", "utilization.csv", "gantt.csv", "config.yaml"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let o = fedhub(&["report-utilization", "--run-dir", out.to_str().unwrap()]);
    let table = stdout(&o);
    assert!(table.contains("client0,300.0,600.0,0.5"), "{table}");
    assert!(table.contains("client1,600.0,600.0,1.0"), "{table}");
}

#[test]
fn size_and_comm_benches_emit_csv() {
    let o = fedhub(&["bench-size"]);
    let t = stdout(&o);
    assert!(t.starts_with("model,params,data_bytes,encoded_bytes,data_mib"));
    assert!(t.contains("fc_1x1,2,8,"));
    let o = fedhub(&["bench-comm", "--sizes", "1000", "--trials", "10"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t = stdout(&o);
    assert_eq!(t.lines().count(), 4, "{t}");
    assert!(t.contains("inline,1000,") && t.contains("memory-ref,1000,") && t.contains("fs-ref,1000,"));
    let o = fedhub(&["bench-compress", "--model", "fc_1x1"]);
    assert!(stdout(&o).contains("fc_1x1,qz+deflate@0.01"));
}

#[test]
fn bad_config_exits_with_config_status() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.yaml");
    std::fs::write(&p, "server_configs:\n  aggregator: NoSuchAgg\n  num_global_epochs: 1\n").unwrap();
    let o = fedhub(&["validate-config", "--config", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
