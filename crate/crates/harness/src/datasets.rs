//! Named dataset generators addressed by `data_configs.dataset_name`.

use fedhub_core::data::{make_blobs, partition, read_csv, DataError, Dataset, PartitionScheme, PartitionSpec};
use serde::Deserialize;
use serde_yaml::Value;
use thiserror::Error;

use crate::config::{ConfigError, DataSection};

/// 442 × 10 regression table with a quantitative disease-progression target.
pub const DIABETES_CSV: &str = include_str!("../data/diabetes.csv");

pub const DATASETS: &[&str] = &["blobs", "diabetes", "csv"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("unknown dataset `{0}`")]
    Unknown(String),
    #[error("bad dataset_kwargs: {0}")]
    Kwargs(String),
    #[error("client index {index} out of range for {parts} partitions")]
    Index { index: usize, parts: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

pub fn check_name(name: &str) -> Result<(), ConfigError> {
    if DATASETS.contains(&name) {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!("unknown dataset `{name}`, expected one of {DATASETS:?}")))
    }
}

/// A client's training shard and the shared validation split.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub train: Dataset,
    pub val: Dataset,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
enum PartitionKw {
    /// Every client sees the whole training split.
    None,
    #[default]
    Iid,
    ClassRestricted {
        min_classes: usize,
        max_classes: usize,
        #[serde(default)]
        seed: u64,
    },
    Dirichlet {
        alpha: f64,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct Common {
    #[serde(default = "d_val")]
    val_fraction: f64,
    #[serde(default)]
    split_seed: u64,
    #[serde(default)]
    partition: PartitionKw,
    client_index: Option<usize>,
    // blobs
    #[serde(default = "d_classes")]
    classes: usize,
    #[serde(default = "d_dim")]
    dim: usize,
    #[serde(default = "d_per_class")]
    per_class: usize,
    #[serde(default = "d_spread")]
    spread: f64,
    #[serde(default)]
    seed: u64,
    // csv
    class_count: Option<usize>,
}

fn d_val() -> f64 {
    0.2
}
fn d_classes() -> usize {
    10
}
fn d_dim() -> usize {
    16
}
fn d_per_class() -> usize {
    100
}
fn d_spread() -> f64 {
    1.0
}

const BLOBS_ONLY: &[&str] = &["classes", "dim", "per_class", "spread", "seed"];

fn kwargs(data: &DataSection) -> Result<Common, DatasetError> {
    if data.dataset_name != "blobs" {
        if let Some(k) = BLOBS_ONLY.iter().find(|k| data.dataset_kwargs.contains_key(**k)) {
            return Err(DatasetError::Kwargs(format!("`{k}` only applies to blobs")));
        }
    }
    serde_yaml::from_value(Value::Mapping(data.dataset_kwargs.clone())).map_err(|e| DatasetError::Kwargs(e.to_string()))
}

fn base_dataset(data: &DataSection, k: &Common) -> Result<Dataset, DatasetError> {
    Ok(match data.dataset_name.as_str() {
        "blobs" => make_blobs(k.classes, k.dim, k.per_class, k.spread, k.seed)?,
        "diabetes" => read_csv(DIABETES_CSV.as_bytes(), None)?,
        "csv" => {
            let path = data
                .dataset_path
                .as_ref()
                .ok_or_else(|| DatasetError::Kwargs("csv dataset needs dataset_path".into()))?;
            fedhub_core::data::load_csv(path, k.class_count)?
        }
        other => return Err(DatasetError::Unknown(other.to_string())),
    })
}

/// Full dataset split into (train, val) without partitioning.
pub fn load_split(data: &DataSection) -> Result<(Dataset, Dataset), DatasetError> {
    let k = kwargs(data)?;
    let ds = base_dataset(data, &k)?;
    if !(0.0..1.0).contains(&k.val_fraction) || k.val_fraction == 0.0 {
        return Err(DatasetError::Kwargs("val_fraction must be in (0, 1)".into()));
    }
    Ok(ds.split(1.0 - k.val_fraction, k.split_seed))
}

/// Shard `index` of `n_clients` plus the shared validation split.
pub fn load_client(data: &DataSection, index: usize, n_clients: usize) -> Result<ClientData, DatasetError> {
    let k = kwargs(data)?;
    let (train, val) = load_split(data)?;
    let index = k.client_index.unwrap_or(index);
    let scheme = match k.partition {
        PartitionKw::None => return Ok(ClientData { train, val }),
        PartitionKw::Iid => (PartitionScheme::Iid, 0),
        PartitionKw::ClassRestricted { min_classes, max_classes, seed } => {
            (PartitionScheme::ClassRestricted { min_classes, max_classes }, seed)
        }
        PartitionKw::Dirichlet { alpha, seed } => (PartitionScheme::Dirichlet { alpha }, seed),
    };
    let mut parts = partition(&train, &PartitionSpec { scheme: scheme.0, n_clients, seed: scheme.1 })?;
    if index >= parts.len() {
        return Err(DatasetError::Index { index, parts: parts.len() });
    }
    Ok(ClientData { train: parts.swap_remove(index), val })
}
