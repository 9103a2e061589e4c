//! Wall-clock runs over real sockets.

use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use fedhub_comm::ErrorCode;
use fedhub_comm::{
    serve, Authenticator, ClientOptions, CommClient, CommError, ConnectorRegistry, DataConnector, FsConnector,
    MemoryConnector, NoAuth, ServeConfig, ServerHandle, StaticToken, StaticTokenAuth, TokenProvider,
};
use fedhub_core::client::evaluate;
use fedhub_core::data::Dataset;
use fedhub_core::model::ModelSpec;
use fedhub_core::{MetricRecord, ParameterSet};
use log::{info, warn};

use crate::config::{
    resolve_remote_client, resolve_secret, AuthSection, ClientConfig, ClientSection, ConnectorSection,
    ExperimentConfig, RemoteBootstrap, Source,
};
use crate::datasets::load_split;
use crate::participant::Participant;
use crate::{build_agent, Error};

/// Environment variable consulted for the client token when none is given.
pub const TOKEN_ENV: &str = "FEDHUB_TOKEN";

#[derive(Debug, Clone, PartialEq)]
pub struct ServerRun {
    pub records: Vec<MetricRecord>,
    pub final_global: ParameterSet,
    pub aggregations: u64,
}

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 5, delay: Duration::from_millis(500) }
    }
}

fn connector(
    section: Option<&ConnectorSection>,
    mem: &Option<Arc<MemoryConnector>>,
) -> Result<Option<Arc<dyn DataConnector>>, Error> {
    Ok(match section {
        None => None,
        Some(ConnectorSection::Memory) => Some(
            mem.clone().map_or_else(|| Arc::new(MemoryConnector::new("mem")) as Arc<dyn DataConnector>, |m| m as _),
        ),
        Some(ConnectorSection::Filesystem { root }) => Some(Arc::new(FsConnector::new("fs", root.clone())?)),
    })
}

fn comm_error(e: CommError) -> Error {
    match e {
        CommError::Server { code: ErrorCode::Unauthenticated, .. } => Error::Unauthenticated,
        CommError::Protocol(m) => Error::Protocol(m),
        other => Error::Comm(other),
    }
}

/// Validation split used to score the global model on the server side.
fn server_val(cfg: &ExperimentConfig) -> Option<Dataset> {
    let shared: Option<ClientSection> = serde_yaml::from_value(cfg.shared_client_configs.clone()).ok();
    let data = shared.and_then(|s| s.data_configs).or_else(|| cfg.clients.first().map(|c| c.data.clone()))?;
    load_split(&data).ok().map(|(_, val)| val).filter(|v| v.dim() == cfg.model.input_dim())
}

/// Binds the server and starts serving. Each aggregation is scored on the
/// validation split and appended to the returned record sink.
pub fn start_server(
    cfg: &ExperimentConfig,
    mem: Option<Arc<MemoryConnector>>,
) -> Result<(ServerHandle, Arc<Mutex<Vec<MetricRecord>>>), Error> {
    let agent = build_agent(cfg)?;
    let sink = Arc::new(Mutex::new(Vec::new()));
    let val = server_val(cfg);
    let spec: ModelSpec = cfg.model.clone();
    if let Some(v) = &val {
        sink.lock().expect("sink").extend(evaluate(&spec, agent.global(), v, 0.0, "server")?);
    }
    let hook_sink = sink.clone();
    let hook: fedhub_comm::server::AggregationHook = Box::new(move |t, _epoch, params| {
        if let Some(v) = &val {
            match evaluate(&spec, params, v, t, "server") {
                Ok(r) => hook_sink.lock().expect("sink").extend(r),
                Err(e) => warn!("evaluation failed: {e}"),
            }
        }
    });
    let auth: Box<dyn Authenticator> = match &cfg.server_comm.auth {
        AuthSection::None => Box::new(NoAuth),
        AuthSection::StaticToken { tokens } => {
            let resolved =
                tokens.iter().map(|(c, t)| Ok((c.clone(), resolve_secret(t)?))).collect::<Result<_, Error>>()?;
            Box::new(StaticTokenAuth::new(&resolved))
        }
    };
    let conn = connector(cfg.server_comm.connector.as_ref(), &mem)?;
    let mut serve_cfg = ServeConfig {
        bind: cfg.server_comm.bind.clone(),
        client_config: cfg.remote_bootstrap().into_bytes(),
        codec: cfg.server_codec.clone(),
        connector_id: conn.as_ref().map(|c| c.id().to_string()),
        connectors: registry(conn, cfg.clients.iter().filter_map(|c| c.comm.connector.as_ref()), &mem)?,
        ..ServeConfig::default()
    };
    if let Some(limit) = cfg.server_comm.inline_limit {
        serve_cfg.inline_limit = limit;
    }
    let handle = serve(serve_cfg, agent, auth, Some(hook))?;
    info!("listening on {}", handle.addr());
    Ok((handle, sink))
}

fn registry<'a>(
    own: Option<Arc<dyn DataConnector>>,
    others: impl Iterator<Item = &'a ConnectorSection>,
    mem: &Option<Arc<MemoryConnector>>,
) -> Result<ConnectorRegistry, Error> {
    let mut reg = ConnectorRegistry::new();
    for section in others {
        if let Some(c) = connector(Some(section), mem)? {
            reg.register(c);
        }
    }
    if let Some(c) = own {
        reg.register(c);
    }
    Ok(reg)
}

/// Serves until the budget is spent or `timeout` passes.
pub fn run_server(cfg: &ExperimentConfig, timeout: Duration) -> Result<ServerRun, Error> {
    let (handle, sink) = start_server(cfg, None)?;
    finish_server(handle, sink, timeout)
}

/// Waits for the budget, stops the server and collects its records.
pub fn finish_server(
    handle: ServerHandle,
    sink: Arc<Mutex<Vec<MetricRecord>>>,
    timeout: Duration,
) -> Result<ServerRun, Error> {
    if !handle.wait_finished(timeout) {
        let _ = handle.shutdown();
        return Err(Error::Protocol(format!("experiment did not finish within {timeout:?}")));
    }
    let aggregations = handle.with_agent(|a| a.aggregations());
    // Let the final replies leave before the listener goes away.
    thread::sleep(Duration::from_millis(50));
    let final_global = handle.shutdown();
    let records = std::mem::take(&mut *sink.lock().expect("sink"));
    Ok(ServerRun { records, final_global, aggregations })
}

fn connect_with_retry(addr: &str, policy: &RetryPolicy, opts: impl Fn() -> ClientOptions) -> Result<CommClient, Error> {
    let mut last = String::new();
    for attempt in 1..=policy.attempts.max(1) {
        match CommClient::connect(addr, opts()) {
            Ok(c) => return Ok(c),
            Err(CommError::Io(e)) => {
                last = e.to_string();
                warn!("connect to {addr} failed (attempt {attempt}/{}): {e}", policy.attempts.max(1));
                if attempt < policy.attempts {
                    thread::sleep(policy.delay);
                }
            }
            Err(e) => return Err(comm_error(e)),
        }
    }
    Err(Error::ConnectionRefused(format!("{addr}: {last}")))
}

/// Request, train, submit until the server says done. Returns the number of
/// local rounds.
fn client_loop(client: &mut CommClient, part: &mut Participant) -> Result<u64, Error> {
    let mut reply = client.request_model(part.sample_count()).map_err(comm_error)?;
    let mut rounds = 0;
    while !reply.done {
        let update = part.train(&reply.global, reply.epoch, reply.steps, reply.send_delta)?;
        reply = client.submit_update(&update).map_err(comm_error)?;
        rounds += 1;
    }
    Ok(rounds)
}

fn client_options(
    cfg: &ClientConfig,
    token: Option<&str>,
    mem: &Option<Arc<MemoryConnector>>,
) -> Result<ClientOptions, Error> {
    let mut opts = ClientOptions::new(cfg.client_id.clone());
    opts.token = token.map(|t| Arc::new(StaticToken(t.as_bytes().to_vec())) as _);
    opts.codec = cfg.codec.clone();
    if let Some(limit) = cfg.comm.inline_limit {
        opts.inline_limit = limit;
    }
    let conn = connector(cfg.comm.connector.as_ref(), mem)?;
    opts.upload_connector = conn.clone();
    opts.connectors = registry(conn, std::iter::empty(), mem)?;
    Ok(opts)
}

#[derive(Debug, Clone)]
pub struct ClientArgs {
    pub server: Option<String>,
    /// The client's own YAML file.
    pub config: PathBuf,
    pub index: usize,
    /// Literal token or `env:NAME`.
    pub token: Option<String>,
    pub retry: RetryPolicy,
}

/// Token precedence: explicit argument, then the environment, then the
/// client file.
fn client_token(args: &ClientArgs, own: &Source) -> Result<Option<String>, Error> {
    if let Some(t) = &args.token {
        return Ok(Some(resolve_secret(t)?));
    }
    if let Ok(t) = std::env::var(TOKEN_ENV) {
        return Ok(Some(t));
    }
    let v: serde_yaml::Value = serde_yaml::from_str(&own.text).unwrap_or_default();
    match v.get("comm_configs").and_then(|c| c.get("token")).and_then(|t| t.as_str()) {
        Some(t) => Ok(Some(resolve_secret(t)?)),
        None => Ok(None),
    }
}

/// Client role: fetch the shared configuration, then train until done.
pub fn run_client(args: &ClientArgs) -> Result<u64, Error> {
    let own = Source::read(&args.config)?;
    let token = client_token(args, &own)?;
    let own_v: serde_yaml::Value = serde_yaml::from_str(&own.text).unwrap_or_default();
    let addr = args
        .server
        .clone()
        .or_else(|| own_v.get("comm_configs")?.get("server_address")?.as_str().map(String::from))
        .ok_or_else(|| Error::Invalid("no server address given".into()))?;

    let provider: Option<Arc<dyn TokenProvider>> =
        token.as_deref().map(|t| Arc::new(StaticToken(t.as_bytes().to_vec())) as _);
    let bytes = connect_with_retry(&addr, &args.retry, || ClientOptions {
        token: provider.clone(),
        ..ClientOptions::new(own.stem())
    })?
    .get_config()
    .map_err(comm_error)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Protocol("config is not UTF-8".into()))?;
    let boot = RemoteBootstrap::parse(&text)?;
    let cfg = resolve_remote_client(&boot.client_configs, &own, args.index, boot.seed)?;
    let mut part = Participant::new(&cfg, &boot.model, boot.num_clients)?;
    // Options are rebuilt per attempt since they are consumed by connect.
    client_options(&cfg, token.as_deref(), &None)?;
    let mut client = connect_with_retry(&addr, &args.retry, || {
        client_options(&cfg, token.as_deref(), &None).expect("checked above")
    })?;
    let rounds = client_loop(&mut client, &mut part)?;
    info!("{} finished after {rounds} rounds", cfg.client_id);
    Ok(rounds)
}

/// Server plus every configured client in one process over loopback TCP.
pub fn run_loopback(cfg: &ExperimentConfig, timeout: Duration) -> Result<ServerRun, Error> {
    let mem = Some(Arc::new(MemoryConnector::new("mem")));
    let mut cfg = cfg.clone();
    cfg.server_comm.bind = "127.0.0.1:0".into();
    let (handle, sink) = start_server(&cfg, mem.clone())?;
    let addr = handle.addr().to_string();
    let n = cfg.clients.len();
    let mut workers = Vec::with_capacity(n);
    for c in &cfg.clients {
        let mut part = Participant::new(c, &cfg.model, n)?;
        let token = c.comm.token.as_deref().map(resolve_secret).transpose()?;
        let opts = client_options(c, token.as_deref(), &mem)?;
        let addr = addr.clone();
        workers.push(thread::spawn(move || -> Result<u64, Error> {
            let mut client = CommClient::connect(addr.as_str(), opts).map_err(comm_error)?;
            client_loop(&mut client, &mut part)
        }));
    }
    let run = finish_server(handle, sink, timeout);
    for w in workers {
        w.join().map_err(|_| Error::Protocol("client thread panicked".into()))??;
    }
    run
}
