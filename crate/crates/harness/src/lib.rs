//! Experiment harness: configuration loading, the discrete-event simulator,
//! the socket runner, benchmarks and metric export.

pub mod bench;
pub mod config;
pub mod datasets;
pub mod distributed;
pub mod metrics;
pub mod participant;
pub mod runs;
pub mod sim;
pub mod utilization;

use fedhub_comm::{CommError, ConnectorError};
use fedhub_core::client::TrainError;
use fedhub_core::compression::CompressionError;
use fedhub_core::model::init_params;
use fedhub_core::scheduler::{AsyncScheduler, CompassScheduler, Scheduler, SyncScheduler};
use fedhub_core::server::{Budget, ServerAgent, ServerError};
use fedhub_core::topology::TopologyError;
use fedhub_core::{DType, ParamError};
use thiserror::Error;

use config::{ConfigError, ExperimentConfig, SchedulerKind};
use datasets::DatasetError;
use metrics::MetricsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Compression(#[from] CompressionError),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Connector(#[from] ConnectorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
    #[error("simulation did not terminate after {0} events")]
    NonTerminating(u64),
    #[error("server rejected the client token")]
    Unauthenticated,
    #[error("connection refused: {0}")]
    ConnectionRefused(String),
    #[error("protocol: {0}")]
    Protocol(String),
}

/// Server agent for an experiment: initial model, rule, scheduler and the
/// stopping budget. Async schedulers count updates, the others aggregations.
pub fn build_agent(cfg: &ExperimentConfig) -> Result<ServerAgent, Error> {
    let global = init_params(&cfg.model, DType::F32, cfg.seed);
    let steps = cfg.server_local_steps();
    let n = cfg.num_clients;
    let epochs = cfg.num_global_epochs;
    let (scheduler, budget): (Box<dyn Scheduler>, Budget) = match cfg.scheduler {
        SchedulerKind::Sync => (Box::new(SyncScheduler::new(n, steps)), Budget::Aggregations(epochs)),
        SchedulerKind::Async => (Box::new(AsyncScheduler::new(steps)), Budget::Updates(epochs * n as u64)),
        SchedulerKind::Compass => {
            (Box::new(CompassScheduler::new(cfg.compass).map_err(ServerError::from)?), Budget::Aggregations(epochs))
        }
    };
    Ok(ServerAgent::new(global, cfg.hyper, Box::new(cfg.strategy), scheduler, budget))
}
