use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BaselineConfig, FusionMethod, Network};
use crate::autograd::serialize;
use crate::error::{Error, Result};

/// JSON sidecar describing a weight file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub config: BaselineConfig,
    pub method: FusionMethod,
    pub parameter_count: usize,
    /// SHA-256 of the TFLW1 encoding of the weights.
    pub weights_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_from: Option<String>,
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ModelCard {
    pub fn new(net: &Network) -> Self {
        Self {
            config: net.arch.config.clone(),
            method: net.arch.method,
            parameter_count: net.params.num_values(),
            weights_sha256: sha256_hex(&serialize::encode(&net.params)),
            train_seed: None,
            pretrained_from: None,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json("model card", e))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    /// Loads the weights at `weights` and checks them against this card.
    pub fn load_network(&self, weights: &Path) -> Result<Network> {
        let bytes = std::fs::read(weights).map_err(|e| Error::io(weights, e))?;
        let digest = sha256_hex(&bytes);
        if digest != self.weights_sha256 {
            return Err(Error::invalid(format!(
                "{} has sha256 {digest}, model card expects {}",
                weights.display(),
                self.weights_sha256
            )));
        }
        Network::from_params(self.config.clone(), self.method, serialize::decode(&bytes)?)
    }
}
