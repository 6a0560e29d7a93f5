//! Versioned, checksummed snapshots of trained state.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fed::Mode;
use crate::nets::{Aggregator, CommModel, HyperNet};
use crate::preference::DirichletParams;

pub const FORMAT_VERSION: u32 = 1;

/// Trained state at the end of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config_hash: String,
    pub seed: u64,
    pub mode: Mode,
    pub rounds: usize,
    /// Aggregated encoder, used for the global front.
    pub comm: CommModel,
    /// Each client's encoder after its last local round, paired with its
    /// hypernet for the local front.
    pub local_comms: Vec<CommModel>,
    pub hypernets: Vec<HyperNet>,
    pub alphas: Vec<DirichletParams>,
    pub aggregator: Aggregator,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    version: u32,
    sha256: String,
    payload: Checkpoint,
}

fn digest(payload: &str) -> String {
    hex::encode(Sha256::digest(payload.as_bytes()))
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let payload = serde_json::to_string(self)?;
        Ok(format!(
            "{{\"version\":{FORMAT_VERSION},\"sha256\":\"{}\",\"payload\":{payload}}}\n",
            digest(&payload)
        ))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let env: Envelope = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        if env.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                env.version
            )));
        }
        let actual = digest(&serde_json::to_string(&env.payload)?);
        if actual != env.sha256 {
            return Err(Error::Checkpoint(format!(
                "checksum mismatch: recorded {}, computed {actual}",
                env.sha256
            )));
        }
        Ok(env.payload)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
