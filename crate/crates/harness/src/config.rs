//! Experiment configuration: one server file plus one file per client.
//!
//! The server file carries `client_configs` shared by every client. Each
//! client file is deep-merged on top of that shared section (the client wins
//! field by field) before it is checked against the strict schema, so a typo
//! anywhere is reported instead of silently ignored.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fedhub_core::aggregator::{AggError, Hyper, Strategy};
use fedhub_core::client::{OptimizerKind, TrainConfig};
use fedhub_core::compression::{CodecConfig, LosslessCodec, LossyCodec};
use fedhub_core::model::{Activation, Loss, ModelSpec};
use fedhub_core::privacy::PrivacyConfig;
use fedhub_core::scheduler::CompassConfig;
use fedhub_core::topology::TreeSpec;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_yaml::{Mapping, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("{source_name}: {message}")]
    Parse { source_name: String, message: String },
    #[error("{source_name}: {message}")]
    UnknownKey { source_name: String, message: String },
    #[error("{source_name}: {message}")]
    MissingRequired { source_name: String, message: String },
    #[error("unknown strategy name `{0}`")]
    UnknownStrategyName(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

fn classify(source_name: &str, e: serde_yaml::Error) -> ConfigError {
    let message = e.to_string();
    let source_name = source_name.to_string();
    if message.contains("unknown field") {
        ConfigError::UnknownKey { source_name, message }
    } else if message.contains("missing field") {
        ConfigError::MissingRequired { source_name, message }
    } else {
        ConfigError::Parse { source_name, message }
    }
}

fn from_value<T: DeserializeOwned>(source_name: &str, v: Value) -> Result<T, ConfigError> {
    serde_yaml::from_value(v).map_err(|e| classify(source_name, e))
}

fn parse_yaml(source_name: &str, text: &str) -> Result<Value, ConfigError> {
    let v: Value = serde_yaml::from_str(text).map_err(|e| classify(source_name, e))?;
    Ok(if v.is_null() { Value::Mapping(Mapping::new()) } else { v })
}

/// Recursive mapping merge; scalars and sequences in `over` replace `base`.
pub fn deep_merge(base: &Value, over: &Value) -> Value {
    match (base, over) {
        (Value::Mapping(b), Value::Mapping(o)) => {
            let mut out = b.clone();
            for (k, v) in o {
                let merged = match b.get(k) {
                    Some(existing) => deep_merge(existing, v),
                    None => v.clone(),
                };
                out.insert(k.clone(), merged);
            }
            Value::Mapping(out)
        }
        (_, Value::Null) => base.clone(),
        _ => over.clone(),
    }
}

fn default_trainer() -> String {
    "VanillaTrainer".into()
}

pub const TRAINERS: &[&str] = &["VanillaTrainer", "FedProxTrainer"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_trainer")]
    pub trainer: String,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_steps")]
    pub local_steps: u32,
    #[serde(default)]
    pub prox_mu: f64,
    #[serde(default)]
    pub send_delta: bool,
    pub seed: Option<u64>,
    /// Accepted for compatibility; training always runs on the CPU.
    pub device: Option<String>,
    pub logging_dir: Option<String>,
    pub checkpoint_dir: Option<String>,
}

fn d_lr() -> f64 {
    TrainConfig::default().lr
}
fn d_batch() -> usize {
    TrainConfig::default().batch_size
}
fn d_steps() -> u32 {
    TrainConfig::default().local_steps
}

impl Default for TrainSection {
    fn default() -> Self {
        from_value("defaults", Value::Mapping(Mapping::new())).expect("all fields defaulted")
    }
}

/// Compressor block in the style of `comm_configs.compressor_configs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressorSection {
    #[serde(default = "yes")]
    pub enable_compression: bool,
    #[serde(default = "d_lossy")]
    pub lossy_compressor: String,
    #[serde(default = "d_lossless")]
    pub lossless_compressor: String,
    /// Only relative bounds are supported.
    #[serde(default = "d_mode")]
    pub error_bounding_mode: String,
    #[serde(default = "d_eb")]
    pub error_bound: f64,
    #[serde(default = "d_cutoff")]
    pub param_cutoff: usize,
}

fn yes() -> bool {
    true
}
fn d_lossy() -> String {
    "qz".into()
}
fn d_lossless() -> String {
    "deflate".into()
}
fn d_mode() -> String {
    "REL".into()
}
fn d_eb() -> f64 {
    CodecConfig::default().eb_rel
}
fn d_cutoff() -> usize {
    CodecConfig::default().small_tensor_threshold
}

impl CompressorSection {
    pub fn to_codec(&self) -> Result<Option<CodecConfig>, ConfigError> {
        if !self.enable_compression {
            return Ok(None);
        }
        if !self.error_bounding_mode.eq_ignore_ascii_case("rel") {
            return Err(invalid(format!("error_bounding_mode `{}` unsupported, use REL", self.error_bounding_mode)));
        }
        let cfg = CodecConfig {
            lossless: LosslessCodec::from_name(&self.lossless_compressor).map_err(|e| invalid(e.to_string()))?,
            lossy: LossyCodec::from_name(&self.lossy_compressor).map_err(|e| invalid(e.to_string()))?,
            eb_rel: self.error_bound,
            small_tensor_threshold: self.param_cutoff,
        };
        cfg.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(Some(cfg))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConnectorSection {
    Memory,
    Filesystem { root: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ClientCommSection {
    pub server_address: Option<String>,
    /// Literal token; `env:NAME` reads it from the environment.
    pub token: Option<String>,
    pub compressor_configs: Option<CompressorSection>,
    pub inline_limit: Option<usize>,
    pub connector: Option<ConnectorSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dataset_name: String,
    #[serde(default)]
    pub dataset_kwargs: Mapping,
    /// CSV file for the `csv` dataset.
    pub dataset_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ClientSection {
    pub client_id: Option<String>,
    pub data_configs: Option<DataSection>,
    #[serde(default)]
    pub train_configs: TrainSection,
    #[serde(default)]
    pub privacy_configs: PrivacyConfig,
    #[serde(default)]
    pub comm_configs: ClientCommSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AuthSection {
    #[default]
    None,
    StaticToken {
        tokens: BTreeMap<String, String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerCommSection {
    #[serde(default = "d_bind")]
    pub bind: String,
    #[serde(default)]
    pub auth: AuthSection,
    pub inline_limit: Option<usize>,
    pub connector: Option<ConnectorSection>,
}

fn d_bind() -> String {
    "127.0.0.1:0".into()
}

impl Default for ServerCommSection {
    fn default() -> Self {
        Self { bind: d_bind(), auth: AuthSection::None, inline_limit: None, connector: None }
    }
}

fn d_model() -> ModelSpec {
    ModelSpec { layer_dims: vec![16, 32, 10], activation: Activation::Relu, loss: Loss::SoftmaxCrossEntropy }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSection {
    pub aggregator: String,
    #[serde(default)]
    pub aggregator_kwargs: Hyper,
    pub scheduler: Option<String>,
    #[serde(default)]
    pub scheduler_kwargs: CompassConfig,
    pub num_global_epochs: u64,
    pub num_clients: Option<usize>,
    #[serde(default = "d_model")]
    pub model: ModelSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub comm: ServerCommSection,
    pub compressor_configs: Option<CompressorSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologySection {
    #[default]
    Centralized,
    /// Leaves of the tree must be the client ids.
    Hierarchical { tree: TreeSpec },
    /// Complete graph over the clients when no adjacency is given.
    Decentralized { adjacency: Option<BTreeMap<String, Vec<String>>> },
    /// Labels and features come from the first client's dataset.
    Vertical {
        feature_split: Vec<Vec<usize>>,
        #[serde(default = "d_hidden")]
        hidden: usize,
        #[serde(default = "d_embed")]
        embed: usize,
        #[serde(default = "d_vfl_epochs")]
        epochs: usize,
    },
}

fn d_hidden() -> usize {
    16
}
fn d_embed() -> usize {
    4
}
fn d_vfl_epochs() -> usize {
    200
}

/// Per-client mean batch times, or means drawn once from an exponential and
/// rescaled onto `[t_min, spread · t_min]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BatchTimes {
    PerClient(Vec<f64>),
    Exponential { exponential: ExponentialTimes },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExponentialTimes {
    pub t_min: f64,
    #[serde(default = "d_spread")]
    pub spread: f64,
}

fn d_spread() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub mean_batch_time: BatchTimes,
    /// Fixed one-way message latency in seconds.
    #[serde(default)]
    pub latency: f64,
    /// Bytes per second; unlimited when absent.
    pub bandwidth: Option<f64>,
    /// Multiplicative compute jitter, uniform in `[1 - j, 1 + j]`.
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub seed: u64,
    pub max_virtual_time: Option<f64>,
    #[serde(default = "d_max_events")]
    pub max_events: u64,
}

fn d_max_events() -> u64 {
    10_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ServerFile {
    server_configs: ServerSection,
    #[serde(default)]
    client_configs: Value,
    #[serde(default)]
    topology: TopologySection,
    sim: Option<SimSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchedulerKind {
    Sync,
    Async,
    Compass,
}

impl SchedulerKind {
    pub fn from_name(name: &str) -> Result<Self, ConfigError> {
        let short = name.trim_end_matches("Scheduler").to_ascii_lowercase();
        match short.as_str() {
            "sync" => Ok(Self::Sync),
            "async" => Ok(Self::Async),
            "compass" => Ok(Self::Compass),
            _ => Err(ConfigError::UnknownStrategyName(name.to_string())),
        }
    }

    pub fn natural(strategy: Strategy) -> Self {
        match strategy {
            Strategy::FedAsync | Strategy::FedBuff => Self::Async,
            Strategy::FedCompass => Self::Compass,
            _ => Self::Sync,
        }
    }
}

/// Fully resolved settings of one client.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientConfig {
    pub client_id: String,
    pub index: usize,
    pub data: DataSection,
    pub trainer: String,
    pub train: TrainConfig,
    pub logging_dir: Option<String>,
    pub checkpoint_dir: Option<String>,
    pub privacy: PrivacyConfig,
    pub codec: Option<CodecConfig>,
    pub comm: ClientCommSection,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub scheduler: SchedulerKind,
    pub hyper: Hyper,
    pub compass: CompassConfig,
    pub num_global_epochs: u64,
    pub num_clients: usize,
    pub model: ModelSpec,
    pub seed: u64,
    pub server_comm: ServerCommSection,
    pub server_codec: Option<CodecConfig>,
    pub clients: Vec<ClientConfig>,
    pub topology: TopologySection,
    pub sim: Option<SimSection>,
    /// The shared `client_configs` section handed to clients at startup.
    pub shared_client_configs: Value,
}

/// A named YAML document (file path or in-memory label).
#[derive(Debug, Clone)]
pub struct Source {
    pub name: String,
    pub text: String,
}

impl Source {
    pub fn new(name: impl Into<String>, text: impl Into<String>) -> Self {
        Self { name: name.into(), text: text.into() }
    }

    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Ok(Self { name: path.display().to_string(), text })
    }

    pub fn stem(&self) -> String {
        Path::new(&self.name).file_stem().map_or_else(|| self.name.clone(), |s| s.to_string_lossy().into_owned())
    }
}

pub fn load_config(server_yaml: &Path, client_yamls: &[PathBuf]) -> Result<ExperimentConfig, ConfigError> {
    let server = Source::read(server_yaml)?;
    let clients = client_yamls.iter().map(|p| Source::read(p)).collect::<Result<Vec<_>, _>>()?;
    parse_config(&server, &clients)
}

fn strategy(name: &str) -> Result<Strategy, ConfigError> {
    Strategy::from_name(name).map_err(|e| match e {
        AggError::UnknownStrategyName(n) => ConfigError::UnknownStrategyName(n),
        other => invalid(other.to_string()),
    })
}

pub fn parse_config(server: &Source, clients: &[Source]) -> Result<ExperimentConfig, ConfigError> {
    let file: ServerFile = from_value(&server.name, parse_yaml(&server.name, &server.text)?)?;
    let s = file.server_configs;
    let strategy = strategy(&s.aggregator)?;
    let scheduler = match &s.scheduler {
        Some(name) => SchedulerKind::from_name(name)?,
        None => SchedulerKind::natural(strategy),
    };
    if s.num_global_epochs == 0 {
        return Err(invalid("num_global_epochs must be >= 1"));
    }
    s.model.validate().map_err(|e| invalid(e.to_string()))?;
    if s.scheduler_kwargs.qmin == 0 || s.scheduler_kwargs.qmin > s.scheduler_kwargs.qmax {
        return Err(invalid("scheduler_kwargs needs 1 <= qmin <= qmax"));
    }
    let server_codec = s.compressor_configs.as_ref().map(CompressorSection::to_codec).transpose()?.flatten();

    let shared = if file.client_configs.is_null() { Value::Mapping(Mapping::new()) } else { file.client_configs };
    // The shared section alone must already be schema-clean.
    let _: ClientSection = from_value(&format!("{} (client_configs)", server.name), shared.clone())?;

    // A simulation without client files gets `num_clients` copies of the
    // shared section, named client0, client1, ...
    let generated: Vec<Source>;
    let clients = match (clients.is_empty(), &file.sim, s.num_clients) {
        (true, Some(_), Some(n)) => {
            generated = (0..n).map(|i| Source::new(format!("client{i}"), "{}")).collect();
            &generated[..]
        }
        _ => clients,
    };
    let mut resolved = Vec::with_capacity(clients.len());
    for (index, src) in clients.iter().enumerate() {
        let own = parse_yaml(&src.name, &src.text)?;
        let merged: ClientSection = from_value(&src.name, deep_merge(&shared, &own))?;
        resolved.push(resolve_client(merged, index, src, s.seed)?);
    }
    let mut ids: Vec<&str> = resolved.iter().map(|c| c.client_id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(invalid("duplicate client_id"));
    }
    let num_clients = s.num_clients.unwrap_or(resolved.len());
    if !resolved.is_empty() && num_clients != resolved.len() {
        return Err(invalid(format!("num_clients is {num_clients} but {} client files were given", resolved.len())));
    }
    if let Some(sim) = &file.sim {
        validate_sim(sim, num_clients)?;
    }
    validate_topology(&file.topology, &resolved)?;
    Ok(ExperimentConfig {
        strategy,
        scheduler,
        hyper: s.aggregator_kwargs,
        compass: s.scheduler_kwargs,
        num_global_epochs: s.num_global_epochs,
        num_clients,
        model: s.model,
        seed: s.seed,
        server_comm: s.comm,
        server_codec,
        clients: resolved,
        topology: file.topology,
        sim: file.sim,
        shared_client_configs: shared,
    })
}

/// Applies a client's own file on top of the shared section received from a
/// server (distributed client role).
pub fn resolve_remote_client(
    shared: &Value,
    own: &Source,
    index: usize,
    seed: u64,
) -> Result<ClientConfig, ConfigError> {
    let own_v = parse_yaml(&own.name, &own.text)?;
    let merged: ClientSection = from_value(&own.name, deep_merge(shared, &own_v))?;
    resolve_client(merged, index, own, seed)
}

fn resolve_client(c: ClientSection, index: usize, src: &Source, seed: u64) -> Result<ClientConfig, ConfigError> {
    let client_id = c.client_id.unwrap_or_else(|| src.stem());
    let t = c.train_configs;
    if !TRAINERS.contains(&t.trainer.as_str()) {
        return Err(ConfigError::UnknownStrategyName(t.trainer));
    }
    let train = TrainConfig {
        optimizer: t.optimizer,
        lr: t.lr,
        batch_size: t.batch_size,
        local_steps: t.local_steps,
        prox_mu: t.prox_mu,
        send_delta: t.send_delta,
        seed: t.seed.unwrap_or_else(|| client_seed(seed, index)),
    };
    train.validate().map_err(|e| invalid(format!("{client_id}: {e}")))?;
    if c.privacy_configs.enabled {
        c.privacy_configs.validate().map_err(|e| invalid(format!("{client_id}: {e}")))?;
    }
    let data = c.data_configs.ok_or_else(|| ConfigError::MissingRequired {
        source_name: src.name.clone(),
        message: "missing field `data_configs`".into(),
    })?;
    crate::datasets::check_name(&data.dataset_name)?;
    let codec = c.comm_configs.compressor_configs.as_ref().map(CompressorSection::to_codec).transpose()?.flatten();
    Ok(ClientConfig {
        client_id,
        index,
        data,
        trainer: t.trainer,
        train,
        logging_dir: t.logging_dir,
        checkpoint_dir: t.checkpoint_dir,
        privacy: c.privacy_configs,
        codec,
        comm: c.comm_configs,
    })
}

/// Seed of client `index` when its file does not set one.
pub fn client_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1)
}

fn validate_sim(sim: &SimSection, n: usize) -> Result<(), ConfigError> {
    match &sim.mean_batch_time {
        BatchTimes::PerClient(v) => {
            if v.len() != n {
                return Err(invalid(format!("sim.mean_batch_time has {} entries for {n} clients", v.len())));
            }
            if v.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
                return Err(invalid("batch times must be positive"));
            }
        }
        BatchTimes::Exponential { exponential: e } => {
            if !(e.t_min > 0.0 && e.spread >= 1.0) {
                return Err(invalid("exponential batch times need t_min > 0 and spread >= 1"));
            }
        }
    }
    if !(sim.latency >= 0.0) || sim.bandwidth.is_some_and(|b| !(b > 0.0)) {
        return Err(invalid("latency must be >= 0 and bandwidth > 0"));
    }
    if !(0.0..1.0).contains(&sim.jitter) {
        return Err(invalid("jitter must be in [0, 1)"));
    }
    Ok(())
}

fn validate_topology(t: &TopologySection, clients: &[ClientConfig]) -> Result<(), ConfigError> {
    let ids: std::collections::BTreeSet<&str> = clients.iter().map(|c| c.client_id.as_str()).collect();
    match t {
        TopologySection::Hierarchical { tree } => {
            let topo = fedhub_core::topology::TreeTopology::new(tree.root.clone(), tree.children.clone())
                .map_err(|e| invalid(e.to_string()))?;
            let leaves = topo.leaves();
            if !clients.is_empty()
                && leaves.iter().map(String::as_str).collect::<std::collections::BTreeSet<_>>() != ids
            {
                return Err(invalid("tree leaves must be exactly the client ids"));
            }
        }
        TopologySection::Decentralized { adjacency: Some(adj) } => {
            if !clients.is_empty() && adj.keys().map(String::as_str).collect::<std::collections::BTreeSet<_>>() != ids {
                return Err(invalid("adjacency nodes must be exactly the client ids"));
            }
        }
        TopologySection::Vertical { feature_split, .. } if feature_split.is_empty() => {
            return Err(invalid("vertical topology needs a feature_split"));
        }
        _ => {}
    }
    Ok(())
}

impl ExperimentConfig {
    /// YAML snapshot of the resolved configuration.
    pub fn snapshot(&self) -> String {
        serde_yaml::to_string(self).expect("config serializes")
    }

    /// Local steps the server assigns; taken from the shared client section.
    pub fn server_local_steps(&self) -> u32 {
        serde_yaml::from_value::<ClientSection>(self.shared_client_configs.clone())
            .map(|c| c.train_configs.local_steps)
            .unwrap_or_else(|_| TrainSection::default().local_steps)
    }

    /// Payload served for `ConfigRequest`: the shared client section plus
    /// what a remote client needs to build its model.
    pub fn remote_bootstrap(&self) -> String {
        let boot = RemoteBootstrap {
            model: self.model.clone(),
            seed: self.seed,
            num_clients: self.num_clients,
            client_configs: self.shared_client_configs.clone(),
        };
        serde_yaml::to_string(&boot).expect("bootstrap serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteBootstrap {
    pub model: ModelSpec,
    pub seed: u64,
    pub num_clients: usize,
    pub client_configs: Value,
}

impl RemoteBootstrap {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        from_value("bootstrap", parse_yaml("bootstrap", text)?)
    }
}

/// Resolves `env:NAME` token indirections.
pub fn resolve_secret(value: &str) -> Result<String, ConfigError> {
    match value.strip_prefix("env:") {
        Some(var) => std::env::var(var).map_err(|_| invalid(format!("environment variable {var} is not set"))),
        None => Ok(value.to_string()),
    }
}
