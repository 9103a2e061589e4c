pub mod aggregator;
pub mod client;
pub mod compression;
pub mod data;
pub mod model;
pub mod params;
pub mod privacy;
pub mod scheduler;
pub mod server;
pub mod topology;
pub mod wire;

pub use params::{
    axpy, deserialize_params, norms, serialize_params, serialized_len, weighted_sum, DType, MetricRecord, ModelUpdate,
    Norms, ParamError, ParameterSet, Tensor, TensorData,
};
