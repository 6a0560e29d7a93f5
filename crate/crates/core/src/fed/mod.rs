//! Federated training: Phase I rounds of local encoder, hypernet and
//! sampling-distribution updates with FedAvg of the encoder, then Phase II
//! training of the server-side fusion network.

pub(crate) mod client;
mod server;
mod telemetry;

pub use client::{
    local_alpha_update, local_comm_update, local_hyper_update, ClientData, ClientState,
};
pub use server::{phase2_collect, phase2_train_fusion, server_aggregate_psi, ServerState};
pub use telemetry::{validation_metrics, RoundRecord, ValidationMetrics, VALIDATION_PREFS};

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preference::{PreferenceVector, ReferencePoint};

/// Which of the two adaptive components are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Hetpfl,
    /// Sampling distributions frozen at the uniform Dirichlet.
    AblatePsa,
    /// Global hypernet is the plain average of client hypernets.
    AblatePhf,
    AblateBoth,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Hetpfl, Mode::AblatePsa, Mode::AblatePhf, Mode::AblateBoth];

    pub fn adapts_sampling(self) -> bool {
        matches!(self, Mode::Hetpfl | Mode::AblatePhf)
    }

    pub fn learns_fusion(self) -> bool {
        matches!(self, Mode::Hetpfl | Mode::AblatePsa)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Hetpfl => "hetpfl",
            Mode::AblatePsa => "ablate-psa",
            Mode::AblatePhf => "ablate-phf",
            Mode::AblateBoth => "ablate-both",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

/// Update rule for the Dirichlet parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaOptimizerKind {
    #[default]
    Adam,
    /// Plain gradient step.
    Sgd,
}

/// Optimization hyperparameters shared by both phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundConfig {
    /// Communication rounds T.
    pub rounds: usize,
    /// Encoder epochs per round.
    pub tau_c: usize,
    /// Hypernet epochs per round, each followed by a sampling update.
    pub tau_p: usize,
    /// Preferences sampled per hypernet epoch.
    pub prefs_per_step: usize,
    pub fusion_epochs: usize,
    pub batch_size: usize,
    /// Learning rate for every network unless overridden below.
    pub lr: f64,
    pub lr_comm: Option<f64>,
    pub lr_hyper: Option<f64>,
    pub lr_fusion: Option<f64>,
    /// Learning rate for the Dirichlet parameters.
    pub alpha_lr: f64,
    pub alpha_optimizer: AlphaOptimizerKind,
    /// Fixed preference used while training the encoder.
    pub comm_preference: PreferenceVector,
    /// Rows in the batch that scores sampled preferences; `None` uses the
    /// whole training set.
    pub eval_batch: Option<usize>,
    pub reference: ReferencePoint,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            rounds: 15,
            tau_c: 15,
            tau_p: 15,
            prefs_per_step: 4,
            fusion_epochs: 200,
            batch_size: 128,
            lr: 0.01,
            lr_comm: None,
            lr_hyper: None,
            lr_fusion: None,
            alpha_lr: 0.05,
            alpha_optimizer: AlphaOptimizerKind::Adam,
            comm_preference: PreferenceVector::balanced(),
            eval_batch: Some(128),
            reference: ReferencePoint::unit(),
        }
    }
}

/// Local epochs per round in the reference configuration.
pub const LOCAL_EPOCHS: usize = 30;

impl RoundConfig {
    pub fn lr_comm(&self) -> f64 {
        self.lr_comm.unwrap_or(self.lr)
    }

    pub fn lr_hyper(&self) -> f64 {
        self.lr_hyper.unwrap_or(self.lr)
    }

    pub fn lr_fusion(&self) -> f64 {
        self.lr_fusion.unwrap_or(self.lr)
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("lr", Some(self.lr)),
            ("lr_comm", self.lr_comm),
            ("lr_hyper", self.lr_hyper),
            ("lr_fusion", self.lr_fusion),
            ("alpha_lr", Some(self.alpha_lr)),
        ];
        for (name, v) in rates {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::Config(format!("{name} must be positive, got {v}")));
                }
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.prefs_per_step == 0 {
            return Err(Error::Config("prefs_per_step must be at least 1".into()));
        }
        if self.eval_batch == Some(0) {
            return Err(Error::Config("eval_batch must be at least 1".into()));
        }
        Ok(())
    }

    /// Whether the local epoch budget differs from the reference 30.
    pub fn nonstandard_local_epochs(&self) -> bool {
        self.tau_c + self.tau_p != LOCAL_EPOCHS
    }
}

/// One Phase I round: broadcast the global encoder, run every client's local
/// updates, then average the encoders. Each client keeps its own last encoder
/// until the next broadcast. Returns one telemetry record per client, in
/// client order, with validation metrics of the client's own model.
pub fn phase1_round(
    clients: &mut [ClientState],
    server: &mut ServerState,
    cfg: &RoundConfig,
    mode: Mode,
    round: usize,
    seed: u64,
) -> Result<Vec<RoundRecord>> {
    for c in clients.iter_mut() {
        c.comm = server.comm.clone();
    }
    let losses: Vec<(Option<f64>, Option<f64>)> = clients
        .par_iter_mut()
        .map(|c| c.run_round(cfg, mode, round, seed))
        .collect::<Result<_>>()?;
    server.comm = server_aggregate_psi(&clients.iter().map(|c| &c.comm).collect::<Vec<_>>())?;
    clients
        .iter()
        .zip(losses)
        .map(|(c, (train_ce, train_tch))| {
            let val = validation_metrics(&c.comm, &c.hyper, &c.data.validation, cfg)?;
            Ok(RoundRecord {
                round,
                client: c.id,
                train_ce,
                train_tch,
                alpha: c.alpha.alpha(),
                alpha_mean_first: c.alpha.mean_first(),
                validation: val,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!(matches!("fancy".parse::<Mode>(), Err(Error::Config(_))));
        assert!(Mode::Hetpfl.adapts_sampling() && Mode::Hetpfl.learns_fusion());
        assert!(!Mode::AblatePsa.adapts_sampling() && Mode::AblatePsa.learns_fusion());
        assert!(Mode::AblatePhf.adapts_sampling() && !Mode::AblatePhf.learns_fusion());
        assert!(!Mode::AblateBoth.adapts_sampling() && !Mode::AblateBoth.learns_fusion());
    }

    #[test]
    fn defaults_and_validation() {
        let cfg = RoundConfig::default();
        assert_eq!((cfg.rounds, cfg.tau_c + cfg.tau_p, cfg.prefs_per_step, cfg.batch_size), (15, 30, 4, 128));
        assert!(!cfg.nonstandard_local_epochs());
        assert!(cfg.validate().is_ok());
        let bad = RoundConfig { lr_hyper: Some(-1.0), ..RoundConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let parsed: RoundConfig = serde_json::from_str(r#"{"rounds": 3}"#).unwrap();
        assert_eq!(parsed.rounds, 3);
        assert_eq!(parsed.tau_c, 15);
        assert!(serde_json::from_str::<RoundConfig>(r#"{"roundz": 3}"#).is_err());
    }
}
