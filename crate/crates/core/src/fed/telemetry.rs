use serde::{Deserialize, Serialize};

use super::RoundConfig;
use crate::data::Dataset;
use crate::error::Result;
use crate::eval::{dp_disparity, error_rate, THRESHOLD};
use crate::nets::{CommModel, HyperNet};
use crate::objectives::{loss_vector, tch_value};
use crate::preference::PreferenceVector;

/// Interior preferences over which the validation scalarized loss is averaged.
pub const VALIDATION_PREFS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    /// Error rate at the encoder-training preference.
    pub error: f64,
    /// `None` when the validation split holds a single sensitive group.
    pub dp: Option<f64>,
    pub ce: f64,
    pub fair: f64,
    pub tch_fixed: f64,
    /// Scalarized loss averaged over [`VALIDATION_PREFS`].
    pub tch_grid: f64,
}

/// One client's state at the end of a Phase I round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub client: usize,
    pub train_ce: Option<f64>,
    pub train_tch: Option<f64>,
    pub alpha: [f64; 2],
    pub alpha_mean_first: f64,
    pub validation: ValidationMetrics,
}

pub fn validation_metrics(
    comm: &CommModel,
    hyper: &HyperNet,
    data: &Dataset,
    cfg: &RoundConfig,
) -> Result<ValidationMetrics> {
    let latents = comm.encode(data.features())?;
    let fixed = cfg.comm_preference;
    let preds = hyper.head(&fixed).predict(&latents);
    let loss = loss_vector(&preds, data.labels(), data.sensitive());
    let dp = if data.has_both_groups() {
        Some(dp_disparity(&preds, data.sensitive(), THRESHOLD)?)
    } else {
        None
    };
    let mut grid = 0.0;
    for l1 in VALIDATION_PREFS {
        let lambda = PreferenceVector::from_first(l1)?;
        let p = hyper.head(&lambda).predict(&latents);
        grid += tch_value(loss_vector(&p, data.labels(), data.sensitive()), &lambda);
    }
    Ok(ValidationMetrics {
        error: error_rate(&preds, data.labels(), THRESHOLD)?,
        dp,
        ce: loss.ce,
        fair: loss.fair,
        tch_fixed: tch_value(loss, &fixed),
        tch_grid: grid / VALIDATION_PREFS.len() as f64,
    })
}
