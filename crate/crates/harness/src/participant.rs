//! One training client as used by both the simulator and the socket runner.

use fedhub_core::client::{evaluate, ClientState};
use fedhub_core::compression::{compress_params, decompress_params, CodecConfig};
use fedhub_core::data::Dataset;
use fedhub_core::model::ModelSpec;
use fedhub_core::{serialized_len, MetricRecord, ModelUpdate, ParameterSet};

use crate::config::ClientConfig;
use crate::datasets::load_client;
use crate::Error;

pub struct Participant {
    pub cfg: ClientConfig,
    pub state: ClientState,
    pub val: Dataset,
}

impl Participant {
    pub fn new(cfg: &ClientConfig, model: &ModelSpec, n_clients: usize) -> Result<Self, Error> {
        let data = load_client(&cfg.data, cfg.index, n_clients)?;
        if data.train.dim() != model.input_dim() {
            return Err(Error::Invalid(format!(
                "{}: dataset has {} features but the model expects {}",
                cfg.client_id,
                data.train.dim(),
                model.input_dim()
            )));
        }
        let state = ClientState::new(cfg.client_id.clone(), data.train, model.clone(), cfg.train.seed);
        Ok(Self { cfg: cfg.clone(), state, val: data.val })
    }

    pub fn id(&self) -> &str {
        &self.cfg.client_id
    }

    pub fn sample_count(&self) -> u64 {
        self.state.dataset.len() as u64
    }

    /// Local training from `global`, then the privacy stage.
    pub fn train(
        &mut self,
        global: &ParameterSet,
        epoch: u64,
        steps: u32,
        send_delta: bool,
    ) -> Result<ModelUpdate, Error> {
        let mut tc = self.cfg.train.clone();
        tc.send_delta |= send_delta;
        let update = self.state.local_train(global, epoch, &tc, steps)?;
        Ok(self.state.apply_privacy_then_package(update, global, &self.cfg.privacy)?)
    }

    pub fn evaluate(&self, params: &ParameterSet, t: f64, entity: &str) -> Result<Vec<MetricRecord>, Error> {
        Ok(evaluate(&self.state.spec, params, &self.val, t, entity)?)
    }
}

/// What a parameter set looks like after one trip over the wire, and how
/// many body bytes that trip costs.
pub fn through_wire(p: &ParameterSet, codec: Option<&CodecConfig>) -> Result<(ParameterSet, usize), Error> {
    match codec {
        None => Ok((p.clone(), serialized_len(p))),
        Some(c) => {
            let blob = compress_params(p, c)?;
            Ok((decompress_params(&blob, c)?, blob.len()))
        }
    }
}
