//! Threaded TCP listener in front of a [`ServerAgent`].
//!
//! Each connection gets its own thread. The agent sits behind one mutex, so
//! dispatch is serialized, and a condition variable lets an `UpdateSubmit`
//! block until the aggregation that answers it has happened.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufReader, BufWriter};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use fedhub_core::compression::CodecConfig;
use fedhub_core::server::{Outcome, Reply, ServerAgent};
use fedhub_core::{ModelUpdate, ParameterSet};
use log::{debug, warn};

use crate::auth::Authenticator;
use crate::connector::ConnectorRegistry;
use crate::envelope::{decode_params, encode_params, Envelope, DEFAULT_INLINE_LIMIT};
use crate::frame::{read_frame, write_frame, Frame, MessageType, ReadError, DEFAULT_MAX_PAYLOAD};
use crate::{CommError, ErrorCode};

pub type AggregationHook = Box<dyn FnMut(f64, u64, &ParameterSet) + Send>;
pub type CustomHandler = Arc<dyn Fn(&str, &[u8]) -> Vec<u8> + Send + Sync>;

pub struct ServeConfig {
    pub bind: String,
    pub max_payload: usize,
    pub inline_limit: usize,
    /// Returned verbatim for `ConfigRequest`.
    pub client_config: Vec<u8>,
    /// Compresses outgoing models when set.
    pub codec: Option<CodecConfig>,
    /// Connector used for outgoing bodies above the inline limit.
    pub connector_id: Option<String>,
    pub connectors: ConnectorRegistry,
    pub custom: Option<CustomHandler>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:0".into(),
            max_payload: DEFAULT_MAX_PAYLOAD,
            inline_limit: DEFAULT_INLINE_LIMIT,
            client_config: Vec::new(),
            codec: None,
            connector_id: None,
            connectors: ConnectorRegistry::new(),
            custom: None,
        }
    }
}

struct State {
    agent: ServerAgent,
    mailbox: HashMap<String, Reply>,
    steps: HashMap<String, u32>,
    hook: Option<AggregationHook>,
}

struct Shared {
    state: Mutex<State>,
    cv: Condvar,
    auth: Box<dyn Authenticator>,
    cfg: ServeConfig,
    started: Instant,
    dispatched: AtomicU64,
    rejected: AtomicU64,
    shutdown: AtomicBool,
}

impl Shared {
    fn now(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn absorb(&self, st: &mut State, out: Outcome, now: f64) {
        if out.aggregations > 0 {
            let (epoch, global) = (st.agent.epoch(), st.agent.global().clone());
            if let Some(hook) = st.hook.as_mut() {
                hook(now, epoch, &global);
            }
        }
        for r in out.replies {
            st.steps.insert(r.client_id.clone(), r.steps);
            st.mailbox.insert(r.client_id.clone(), r);
        }
        self.cv.notify_all();
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
    ticker: Option<JoinHandle<()>>,
}

/// Binds and starts serving in background threads.
pub fn serve(
    cfg: ServeConfig,
    agent: ServerAgent,
    auth: Box<dyn Authenticator>,
    hook: Option<AggregationHook>,
) -> Result<ServerHandle, CommError> {
    let listener = TcpListener::bind(&cfg.bind)?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        state: Mutex::new(State { agent, mailbox: HashMap::new(), steps: HashMap::new(), hook }),
        cv: Condvar::new(),
        auth,
        cfg,
        started: Instant::now(),
        dispatched: AtomicU64::new(0),
        rejected: AtomicU64::new(0),
        shutdown: AtomicBool::new(false),
    });
    let s = shared.clone();
    let accept = thread::spawn(move || {
        for stream in listener.incoming() {
            if s.shutdown.load(Ordering::SeqCst) {
                break;
            }
            match stream {
                Ok(stream) => {
                    let s = s.clone();
                    thread::spawn(move || handle_connection(&s, stream));
                }
                Err(e) => warn!("accept failed: {e}"),
            }
        }
    });
    let s = shared.clone();
    let ticker = thread::spawn(move || tick(&s));
    Ok(ServerHandle { addr, shared, accept: Some(accept), ticker: Some(ticker) })
}

/// Fires time-triggered aggregations (group deadlines).
fn tick(s: &Shared) {
    let mut st = s.lock();
    while !s.shutdown.load(Ordering::SeqCst) {
        let now = s.now();
        let wait = match st.agent.next_deadline() {
            Some(d) if d <= now => match st.agent.poll(now) {
                Ok(out) => {
                    s.absorb(&mut st, out, now);
                    continue;
                }
                Err(e) => {
                    warn!("deadline aggregation failed: {e}");
                    Duration::from_millis(50)
                }
            },
            Some(d) => Duration::from_secs_f64((d - now).min(0.05)),
            None => Duration::from_millis(50),
        };
        st = s.cv.wait_timeout(st, wait).unwrap_or_else(|p| p.into_inner()).0;
    }
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Frames that passed authentication and reached the agent.
    pub fn dispatched(&self) -> u64 {
        self.shared.dispatched.load(Ordering::SeqCst)
    }

    pub fn rejected(&self) -> u64 {
        self.shared.rejected.load(Ordering::SeqCst)
    }

    pub fn is_finished(&self) -> bool {
        self.shared.lock().agent.is_finished()
    }

    pub fn with_agent<T>(&self, f: impl FnOnce(&ServerAgent) -> T) -> T {
        f(&self.shared.lock().agent)
    }

    /// Blocks until the agent's budget is spent or `timeout` elapses.
    pub fn wait_finished(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut st = self.shared.lock();
        while !st.agent.is_finished() {
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            st = self.shared.cv.wait_timeout(st, deadline - now).unwrap_or_else(|p| p.into_inner()).0;
        }
        true
    }

    pub fn shutdown(mut self) -> ParameterSet {
        self.stop();
        self.shared.lock().agent.global().clone()
    }

    fn stop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        self.shared.cv.notify_all();
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        if let Some(h) = self.ticker.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

fn error_frame(code: ErrorCode, msg: &str) -> Frame {
    let mut payload = (code as u16).to_be_bytes().to_vec();
    payload.extend_from_slice(msg.as_bytes());
    Frame::new(MessageType::ErrorReply, &[], payload)
}

fn handle_connection(s: &Shared, stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    let Ok(write_half) = stream.try_clone() else { return };
    let mut reader = BufReader::new(stream);
    let mut writer = BufWriter::new(write_half);
    let max = s.cfg.max_payload;
    loop {
        let frame = match read_frame(&mut reader, max) {
            Ok(f) => f,
            Err(ReadError::Closed) => return,
            Err(ReadError::Frame(e)) => {
                debug!("malformed frame: {e}");
                let _ = write_frame(&mut writer, &error_frame(ErrorCode::Malformed, &e.to_string()), max);
                return;
            }
            Err(ReadError::Io(_)) => return,
        };
        let reply = respond(s, frame).unwrap_or_else(|(code, msg)| error_frame(code, &msg));
        if write_frame(&mut writer, &reply, max).is_err() {
            return;
        }
        if s.shutdown.load(Ordering::SeqCst) {
            return;
        }
    }
}

type Failure = (ErrorCode, String);

fn bad_request(e: impl std::fmt::Display) -> Failure {
    (ErrorCode::BadRequest, e.to_string())
}

fn respond(s: &Shared, frame: Frame) -> Result<Frame, Failure> {
    let identity = if s.auth.enabled() {
        match s.auth.validate(&frame.token) {
            Ok(id) => Some(id),
            Err(_) => {
                s.rejected.fetch_add(1, Ordering::SeqCst);
                return Err((ErrorCode::Unauthenticated, "invalid or missing token".into()));
            }
        }
    } else {
        None
    };
    let Some(kind) = frame.kind() else {
        return Err((ErrorCode::UnknownType, format!("unknown message type {}", frame.msg_type)));
    };
    s.dispatched.fetch_add(1, Ordering::SeqCst);
    let request = || Envelope::decode(&frame.payload).map_err(bad_request);
    let client_id = |env: &Envelope| -> Result<String, Failure> {
        match &identity {
            Some(id) => Ok(id.clone()),
            None => env.get("client_id").map(str::to_string).ok_or_else(|| bad_request("missing client_id")),
        }
    };
    match kind {
        MessageType::ConfigRequest => Ok(Frame::new(MessageType::ConfigReply, &[], s.cfg.client_config.clone())),
        MessageType::ModelRequest => {
            let env = request()?;
            let id = client_id(&env)?;
            let mut st = s.lock();
            let reply = if st.steps.contains_key(&id) {
                Reply {
                    client_id: id.clone(),
                    global: st.agent.global().clone(),
                    epoch: st.agent.epoch(),
                    steps: st.steps[&id],
                    done: st.agent.is_finished(),
                }
            } else {
                let samples: u64 = env.parse("sample_count").map_err(bad_request)?;
                let r = st.agent.register(&id, samples, s.now()).map_err(bad_request)?;
                st.steps.insert(id.clone(), r.steps);
                r
            };
            let delta = st.agent.prefers_delta();
            drop(st);
            model_frame(s, MessageType::ModelReply, &reply, delta)
        }
        MessageType::UpdateSubmit => {
            let env = request()?;
            let id = client_id(&env)?;
            let bytes = env.body_bytes(&s.cfg.connectors).map_err(bad_request)?;
            let params = decode_params(bytes, &env.meta).map_err(bad_request)?;
            let update = ModelUpdate {
                client_id: id.clone(),
                params,
                is_delta: env.get("is_delta") == Some("true"),
                sample_count: env.parse("sample_count").map_err(bad_request)?,
                local_steps: env.parse("steps").map_err(bad_request)?,
                base_epoch: env.parse("base_epoch").map_err(bad_request)?,
                wall_meta: None,
            };
            let mut st = s.lock();
            let now = s.now();
            st.mailbox.remove(&id);
            let out = st.agent.submit(update, now).map_err(bad_request)?;
            s.absorb(&mut st, out, now);
            let reply = loop {
                if let Some(r) = st.mailbox.remove(&id) {
                    break r;
                }
                if s.shutdown.load(Ordering::SeqCst) {
                    return Err((ErrorCode::Internal, "server shutting down".into()));
                }
                st = s.cv.wait_timeout(st, Duration::from_millis(100)).unwrap_or_else(|p| p.into_inner()).0;
            };
            let delta = st.agent.prefers_delta();
            drop(st);
            model_frame(s, MessageType::UpdateReply, &reply, delta)
        }
        MessageType::CustomTask => {
            let id = identity.unwrap_or_default();
            match &s.cfg.custom {
                Some(h) => Ok(Frame::new(MessageType::CustomTask, &[], h(&id, &frame.payload))),
                None => Err((ErrorCode::Unsupported, "no custom task handler".into())),
            }
        }
        MessageType::ConfigReply | MessageType::ModelReply | MessageType::UpdateReply | MessageType::ErrorReply => {
            Err(bad_request(format!("{kind:?} is a reply type")))
        }
    }
}

fn model_frame(s: &Shared, kind: MessageType, r: &Reply, prefers_delta: bool) -> Result<Frame, Failure> {
    let internal = |e: crate::envelope::EnvelopeError| (ErrorCode::Internal, e.to_string());
    let mut meta = BTreeMap::from([
        ("epoch".to_string(), r.epoch.to_string()),
        ("steps".to_string(), r.steps.to_string()),
        ("done".to_string(), r.done.to_string()),
        ("send_delta".to_string(), prefers_delta.to_string()),
    ]);
    let body = encode_params(&r.global, s.cfg.codec.as_ref(), &mut meta).map_err(internal)?;
    let connector = match &s.cfg.connector_id {
        Some(id) => Some(s.cfg.connectors.get(id).map_err(|e| (ErrorCode::Internal, e.to_string()))?.as_ref()),
        None => None,
    };
    let env = Envelope::pack(body, meta, connector, s.cfg.inline_limit).map_err(internal)?;
    Ok(Frame::new(kind, &[], env.encode()))
}
