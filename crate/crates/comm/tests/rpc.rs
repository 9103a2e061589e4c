use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use fedhub_comm::connector::sha256;
use fedhub_comm::{
    encode_frame, serve, ClientOptions, CommClient, CommError, ConnectorError, ConnectorRegistry, DataConnector,
    ErrorCode, Frame, FsConnector, MemoryConnector, MessageType, NoAuth, ServeConfig, ServerHandle, StaticToken,
    StaticTokenAuth,
};
use fedhub_core::aggregator::{Hyper, Strategy};
use fedhub_core::compression::CodecConfig;
use fedhub_core::scheduler::CompassConfig;
use fedhub_core::server::ServerAgent;
use fedhub_core::{ModelUpdate, ParameterSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn params(n: usize, seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ParameterSet::from_entries([
        ("w".to_string(), Tensor::from_f32(vec![n], (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()),
        ("b".to_string(), Tensor::from_f32(vec![4], vec![0.5, -0.5, 0.25, 0.0]).unwrap()),
    ])
    .unwrap()
}

fn agent(strategy: Strategy, n_clients: usize, epochs: u64, global: ParameterSet) -> ServerAgent {
    ServerAgent::for_strategy(strategy, global, Hyper::default(), n_clients, 5, epochs, CompassConfig::default())
        .unwrap()
}

fn update(client: &str, p: ParameterSet, base_epoch: u64) -> ModelUpdate {
    ModelUpdate {
        client_id: client.into(),
        params: p,
        is_delta: false,
        sample_count: 10,
        local_steps: 5,
        base_epoch,
        wall_meta: None,
    }
}

fn start(strategy: Strategy, n_clients: usize, global: ParameterSet) -> ServerHandle {
    serve(ServeConfig::default(), agent(strategy, n_clients, 100, global), Box::new(NoAuth), None).unwrap()
}

fn tokens() -> BTreeMap<String, String> {
    BTreeMap::from([("alice".to_string(), "secret-a".to_string()), ("bob".to_string(), "secret-b".to_string())])
}

#[test]
fn initial_model_and_config() {
    let global = params(8, 1);
    let cfg = ServeConfig { client_config: b"train_configs: {}".to_vec(), ..ServeConfig::default() };
    let server = serve(cfg, agent(Strategy::FedAvg, 1, 3, global.clone()), Box::new(NoAuth), None).unwrap();
    let mut c = CommClient::connect(server.addr(), ClientOptions::new("c0")).unwrap();
    assert_eq!(c.get_config().unwrap(), b"train_configs: {}");
    let r = c.request_model(10).unwrap();
    assert_eq!(r.epoch, 0);
    assert_eq!(r.steps, 5);
    assert!(!r.done);
    assert!(r.global.bit_eq(&global));
}

#[test]
fn async_submit_replies_immediately() {
    let server = start(Strategy::FedAsync, 2, params(8, 1));
    let mut c = CommClient::connect(server.addr(), ClientOptions::new("c0")).unwrap();
    let r0 = c.request_model(10).unwrap();
    let r1 = c.submit_update(&update("c0", params(8, 2), r0.epoch)).unwrap();
    assert_eq!(r1.epoch, r0.epoch + 1);
}

#[test]
fn sync_submit_blocks_until_round_completes() {
    let server = start(Strategy::FedAvg, 2, params(8, 1));
    let addr = server.addr();
    let mut a = CommClient::connect(addr, ClientOptions::new("a")).unwrap();
    let mut b = CommClient::connect(addr, ClientOptions::new("b")).unwrap();
    a.request_model(10).unwrap();
    b.request_model(10).unwrap();
    let waiter = thread::spawn(move || a.submit_update(&update("a", params(8, 2), 0)).unwrap());
    thread::sleep(Duration::from_millis(200));
    assert!(!waiter.is_finished(), "sync client must wait for its peer");
    // Another connection stays responsive meanwhile.
    let mut probe = CommClient::connect(addr, ClientOptions::new("probe")).unwrap();
    assert!(probe.get_config().is_ok());
    let rb = b.submit_update(&update("b", params(8, 3), 0)).unwrap();
    let ra = waiter.join().unwrap();
    assert_eq!(ra.epoch, 1);
    assert_eq!(rb.epoch, 1);
    assert!(ra.global.bit_eq(&rb.global));
}

#[test]
fn unknown_type_and_malformed_frames() {
    let server = start(Strategy::FedAvg, 1, params(8, 1));
    let mut c = CommClient::connect(server.addr(), ClientOptions::new("c0")).unwrap();
    let err = c.call_raw(&Frame { msg_type: 99, token: vec![], payload: vec![] }).unwrap_err();
    assert!(matches!(err, CommError::Server { code: ErrorCode::UnknownType, .. }), "{err}");
    // Connection survives an unknown type.
    assert!(c.get_config().is_ok());

    let mut raw = TcpStream::connect(server.addr()).unwrap();
    let mut bad = encode_frame(&Frame::new(MessageType::ConfigRequest, &[], vec![])).unwrap();
    bad[..4].copy_from_slice(b"XXXX");
    raw.write_all(&bad).unwrap();
    let mut reply = Vec::new();
    raw.read_to_end(&mut reply).unwrap();
    let f = fedhub_comm::decode_frame(&reply, 1 << 20).unwrap();
    assert_eq!(f.kind(), Some(MessageType::ErrorReply));
    assert_eq!(u16::from_be_bytes([f.payload[0], f.payload[1]]), ErrorCode::Malformed as u16);
}

#[test]
fn authentication_gate() {
    let server = serve(
        ServeConfig::default(),
        agent(Strategy::FedAsync, 2, 100, params(8, 1)),
        Box::new(StaticTokenAuth::new(&tokens())),
        None,
    )
    .unwrap();
    let connect = |token: &[u8]| {
        let mut o = ClientOptions::new("alice");
        o.token = Some(Arc::new(StaticToken(token.to_vec())));
        CommClient::connect(server.addr(), o).unwrap()
    };
    let mut good = connect(b"secret-a");
    good.request_model(10).unwrap();
    let before = server.dispatched();
    for bad in [&b""[..], b"secret-b".as_slice().get(..7).unwrap(), b"secret-c", b"secret-a\0"] {
        let mut c = connect(bad);
        let err = c.submit_update(&update("alice", params(8, 2), 0)).unwrap_err();
        assert!(matches!(err, CommError::Server { code: ErrorCode::Unauthenticated, .. }), "{err}");
        assert!(matches!(c.get_config(), Err(CommError::Server { code: ErrorCode::Unauthenticated, .. })));
    }
    assert_eq!(server.dispatched(), before, "rejected frames must not be dispatched");
    assert_eq!(server.rejected(), 8);
    assert_eq!(server.with_agent(|a| a.updates_received()), 0);
    // Identity comes from the token, not from the claimed client_id.
    let mut bob = connect(b"secret-b");
    bob.request_model(10).unwrap();
    bob.submit_update(&update("alice", params(8, 2), 0)).unwrap();
    assert_eq!(server.with_agent(|a| a.updates_received()), 1);
    assert_eq!(server.dispatched(), before + 2);
}

fn roundtrip_case(codec: Option<CodecConfig>, inline_limit: usize, connector: Arc<dyn DataConnector>) {
    let global = params(4096, 7);
    let registry = ConnectorRegistry::new().with(connector.clone());
    let cfg = ServeConfig {
        codec,
        inline_limit,
        connector_id: Some(connector.id().to_string()),
        connectors: registry.clone(),
        ..ServeConfig::default()
    };
    // FedAsync with α = 1 and zero staleness replaces the global with the update.
    let hyper = Hyper { alpha_async: 1.0, ..Hyper::default() };
    let agent =
        ServerAgent::for_strategy(Strategy::FedAsync, global.clone(), hyper, 1, 5, 10, CompassConfig::default())
            .unwrap();
    let server = serve(cfg, agent, Box::new(NoAuth), None).unwrap();
    let mut opts = ClientOptions::new("c0");
    opts.codec = codec;
    opts.inline_limit = inline_limit;
    opts.connectors = registry;
    opts.upload_connector = Some(connector);
    let mut c = CommClient::connect(server.addr(), opts).unwrap();
    let first = c.request_model(10).unwrap();
    assert_eq!(first.inline, inline_limit >= 1 << 20);
    let sent = params(4096, 8);
    let reply = c.submit_update(&update("c0", sent.clone(), 0)).unwrap();
    let received = server.with_agent(|a| a.global().clone());
    for ((_, a), (_, b)) in sent.iter().zip(received.iter()) {
        assert_eq!(a.shape(), b.shape());
        if codec.is_none() || a.len() < CodecConfig::default().small_tensor_threshold {
            assert!(a.bit_eq(b));
        } else {
            let v = a.to_f64_vec();
            let range = v.iter().copied().fold(f64::MIN, f64::max) - v.iter().copied().fold(f64::MAX, f64::min);
            let err = v.iter().zip(b.to_f64_vec()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err <= 0.01 * range + 1e-12);
        }
    }
    assert_eq!(reply.epoch, 1);
}

#[test]
fn end_to_end_fidelity_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let fs: Arc<dyn DataConnector> = Arc::new(FsConnector::new("fs", dir.path()).unwrap());
    let mem: Arc<dyn DataConnector> = Arc::new(MemoryConnector::new("mem"));
    for codec in [None, Some(CodecConfig::default())] {
        for limit in [1 << 20, 256] {
            for conn in [fs.clone(), mem.clone()] {
                roundtrip_case(codec, limit, conn);
            }
        }
    }
}

#[test]
fn filesystem_connector_large_and_tampered() {
    let dir = tempfile::tempdir().unwrap();
    let fs = FsConnector::new("fs", dir.path()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bytes: Vec<u8> = (0..10 * 1024 * 1024).map(|_| rng.random()).collect();
    let r = fs.put(&bytes).unwrap();
    assert_eq!(r.size, bytes.len() as u64);
    assert_eq!(r.sha256, sha256(&bytes));
    assert_eq!(fs.get(&r).unwrap(), bytes);
    let mut tampered = bytes.clone();
    tampered[12345] ^= 1;
    std::fs::write(fs.path_of(&r.key), &tampered).unwrap();
    assert_eq!(fs.get(&r), Err(ConnectorError::ChecksumMismatch(r.key.clone())));
    let missing = fedhub_comm::DataRef { key: "nope".into(), ..r };
    assert_eq!(fs.get(&missing), Err(ConnectorError::MissingKey("nope".into())));
}

#[test]
fn oversized_body_uses_reference_by_default_limit() {
    let mem = Arc::new(MemoryConnector::new("mem"));
    let body = vec![1u8; 10 * 1024 * 1024 + 1];
    let env = fedhub_comm::Envelope::pack(
        body,
        BTreeMap::new(),
        Some(mem.as_ref()),
        fedhub_comm::envelope::DEFAULT_INLINE_LIMIT,
    )
    .unwrap();
    assert!(!env.is_inline());
    assert_eq!(mem.len(), 1);
}
