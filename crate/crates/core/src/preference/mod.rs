//! Preference vectors, Dirichlet sampling distributions and the
//! hypervolume-contribution gradient used to adapt them.

mod dirichlet;
mod hv;
mod nes;
mod special;

pub use dirichlet::{log_density_grad, sample_dirichlet};
pub use hv::{hv_2d, hvc};
pub use nes::{nes_gradient, nes_gradient_from_values, update_alpha, AlphaOptimizer};
pub use special::digamma;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::LossVector;

/// Lower bound on every preference component.
pub const LAMBDA_FLOOR: f64 = 1e-3;
pub const ALPHA_MIN: f64 = 0.1;
pub const ALPHA_MAX: f64 = 50.0;
const SIMPLEX_TOL: f64 = 1e-9;

/// Point on the 2-simplex, `(weight on cross-entropy, weight on fairness)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct PreferenceVector([f64; 2]);

impl PreferenceVector {
    pub fn new(first: f64, second: f64) -> Result<Self> {
        if !(first.is_finite() && second.is_finite()) || (first + second - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::contract(format!(
                "preference ({first}, {second}) is off the simplex"
            )));
        }
        if first.min(second) < LAMBDA_FLOOR - SIMPLEX_TOL {
            return Err(Error::contract(format!(
                "preference ({first}, {second}) has a component below {LAMBDA_FLOOR}"
            )));
        }
        let first = first.clamp(LAMBDA_FLOOR, 1.0 - LAMBDA_FLOOR);
        Ok(PreferenceVector([first, 1.0 - first]))
    }

    pub fn from_first(first: f64) -> Result<Self> {
        Self::new(first, 1.0 - first)
    }

    /// `(1/2, 1/2)`.
    pub fn balanced() -> Self {
        PreferenceVector([0.5, 0.5])
    }

    pub fn first(&self) -> f64 {
        self.0[0]
    }

    pub fn second(&self) -> f64 {
        self.0[1]
    }

    pub fn as_array(&self) -> [f64; 2] {
        self.0
    }

    /// Evenly spaced preferences with first component running from
    /// `LAMBDA_FLOOR` to `1 - LAMBDA_FLOOR`.
    pub fn grid(m: usize) -> Vec<PreferenceVector> {
        match m {
            0 => Vec::new(),
            1 => vec![PreferenceVector::balanced()],
            _ => {
                let span = 1.0 - 2.0 * LAMBDA_FLOOR;
                (0..m)
                    .map(|i| {
                        let first = LAMBDA_FLOOR + i as f64 * span / (m - 1) as f64;
                        PreferenceVector([first, 1.0 - first])
                    })
                    .collect()
            }
        }
    }
}

impl TryFrom<[f64; 2]> for PreferenceVector {
    type Error = Error;

    fn try_from(v: [f64; 2]) -> Result<Self> {
        PreferenceVector::new(v[0], v[1])
    }
}

impl From<PreferenceVector> for [f64; 2] {
    fn from(p: PreferenceVector) -> Self {
        p.0
    }
}

/// Concentration parameters of a two-component Dirichlet.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct DirichletParams([f64; 2]);

impl DirichletParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        for v in [a, b] {
            if !(ALPHA_MIN..=ALPHA_MAX).contains(&v) {
                return Err(Error::contract(format!(
                    "Dirichlet parameter {v} outside [{ALPHA_MIN}, {ALPHA_MAX}]"
                )));
            }
        }
        Ok(DirichletParams([a, b]))
    }

    /// `(1, 1)`: uniform over the simplex.
    pub fn uniform() -> Self {
        DirichletParams([1.0, 1.0])
    }

    pub fn alpha(&self) -> [f64; 2] {
        self.0
    }

    /// Expected first component, `α1 / (α1 + α2)`.
    pub fn mean_first(&self) -> f64 {
        self.0[0] / (self.0[0] + self.0[1])
    }

    pub(crate) fn clamped(a: f64, b: f64) -> Self {
        DirichletParams([a.clamp(ALPHA_MIN, ALPHA_MAX), b.clamp(ALPHA_MIN, ALPHA_MAX)])
    }
}

impl TryFrom<[f64; 2]> for DirichletParams {
    type Error = Error;

    fn try_from(v: [f64; 2]) -> Result<Self> {
        DirichletParams::new(v[0], v[1])
    }
}

impl From<DirichletParams> for [f64; 2] {
    fn from(p: DirichletParams) -> Self {
        p.0
    }
}

/// Hypervolume reference point; both coordinates strictly positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct ReferencePoint([f64; 2]);

impl ReferencePoint {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !(x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite()) {
            return Err(Error::contract(format!("reference point ({x}, {y}) must be positive")));
        }
        Ok(ReferencePoint([x, y]))
    }

    pub const fn unit() -> Self {
        ReferencePoint([1.0, 1.0])
    }

    pub fn coords(&self) -> [f64; 2] {
        self.0
    }
}

impl Default for ReferencePoint {
    fn default() -> Self {
        Self::unit()
    }
}

impl TryFrom<[f64; 2]> for ReferencePoint {
    type Error = Error;

    fn try_from(v: [f64; 2]) -> Result<Self> {
        ReferencePoint::new(v[0], v[1])
    }
}

impl From<ReferencePoint> for [f64; 2] {
    fn from(p: ReferencePoint) -> Self {
        p.0
    }
}

/// Sampled preferences together with the loss vectors their models reached,
/// all drawn from one sampling distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefBatch {
    pub alpha: DirichletParams,
    pub entries: Vec<(PreferenceVector, LossVector)>,
}

impl PrefBatch {
    pub fn new(alpha: DirichletParams, entries: Vec<(PreferenceVector, LossVector)>) -> Result<Self> {
        if entries.len() < 2 {
            return Err(Error::contract(format!(
                "preference batch needs at least 2 entries, got {}",
                entries.len()
            )));
        }
        if entries.iter().any(|(_, l)| !l.is_finite()) {
            return Err(Error::Numeric("preference batch loss vector".into()));
        }
        Ok(PrefBatch { alpha, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn points(&self) -> Vec<[f64; 2]> {
        self.entries.iter().map(|(_, l)| l.as_array()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preference_validation() {
        assert!(PreferenceVector::new(0.5, 0.5).is_ok());
        assert!(PreferenceVector::new(0.5, 0.6).is_err());
        assert!(PreferenceVector::new(0.0005, 0.9995).is_err());
        let p = PreferenceVector::new(0.3, 0.7 + 5e-10).unwrap();
        assert!((p.first() + p.second() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn grid_endpoints_and_nesting() {
        let g = PreferenceVector::grid(1000);
        assert_eq!(g.len(), 1000);
        assert_eq!(g[0].first(), LAMBDA_FLOOR);
        assert!((g[999].first() - (1.0 - LAMBDA_FLOOR)).abs() < 1e-15);
        // every 10-point grid value appears in the 1000-point grid
        let coarse = PreferenceVector::grid(10);
        for (i, p) in coarse.iter().enumerate() {
            assert!((p.first() - g[i * 111].first()).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_bounds() {
        assert!(DirichletParams::new(0.1, 50.0).is_ok());
        assert!(DirichletParams::new(0.05, 1.0).is_err());
        assert!(DirichletParams::new(1.0, 51.0).is_err());
        assert!(ReferencePoint::new(1.0, 0.0).is_err());
    }

    #[test]
    fn batch_needs_two_entries() {
        let e = (PreferenceVector::balanced(), LossVector::new(0.1, 0.1));
        assert!(PrefBatch::new(DirichletParams::uniform(), vec![e]).is_err());
        assert!(PrefBatch::new(DirichletParams::uniform(), vec![e, e]).is_ok());
    }
}
