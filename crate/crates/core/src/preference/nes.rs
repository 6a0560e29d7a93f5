use super::dirichlet::log_density_grad;
use super::hv::hvc;
use super::{DirichletParams, PrefBatch, PreferenceVector, ReferencePoint};
use crate::adam::{adam_step, AdamState};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Score-function estimate of `∇_α E[f(λ)]` from samples `λ ~ Dirichlet(α)`
/// and their values `f(λ)`.
///
/// Each sample is baselined by the mean of the other samples, which keeps the
/// estimate unbiased: `(1/(N-1)) Σ (f_v - f̄) ∇_α log p(λ_v | α)`.
pub fn nes_gradient_from_values(
    alpha: DirichletParams,
    prefs: &[PreferenceVector],
    values: &[f64],
) -> Result<[f64; 2]> {
    let n = prefs.len();
    if n < 2 || values.len() != n {
        return Err(Error::contract(format!(
            "NES needs matching samples and values, at least 2; got {n} and {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("NES sample value".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut g = [0.0; 2];
    for (p, &f) in prefs.iter().zip(values) {
        let s = log_density_grad(alpha, p);
        let w = f - mean;
        g[0] += w * s[0];
        g[1] += w * s[1];
    }
    let scale = 1.0 / (n - 1) as f64;
    Ok([g[0] * scale, g[1] * scale])
}

/// NES gradient of the expected negative hypervolume contribution of a batch.
pub fn nes_gradient(batch: &PrefBatch, r: ReferencePoint) -> Result<[f64; 2]> {
    let points = batch.points();
    let values: Vec<f64> = (0..points.len()).map(|i| -hvc(i, &points, r)).collect();
    let prefs: Vec<PreferenceVector> = batch.entries.iter().map(|(p, _)| *p).collect();
    nes_gradient_from_values(batch.alpha, &prefs, &values)
}

fn check_step(grad: [f64; 2], kappa: f64) -> Result<()> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::contract(format!("alpha learning rate {kappa} must be positive")));
    }
    if !(grad[0].is_finite() && grad[1].is_finite()) {
        return Err(Error::Numeric("gradient of alpha".into()));
    }
    Ok(())
}

/// Plain gradient step `clamp(α - κ ĝ)`.
pub fn update_alpha(alpha: DirichletParams, grad: [f64; 2], kappa: f64) -> Result<DirichletParams> {
    check_step(grad, kappa)?;
    let [a, b] = alpha.alpha();
    Ok(DirichletParams::clamped(a - kappa * grad[0], b - kappa * grad[1]))
}

/// Adam on `α`, clamped back into bounds after every step.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AlphaOptimizer {
    state: AdamState,
}

impl Default for AlphaOptimizer {
    fn default() -> Self {
        AlphaOptimizer { state: AdamState::new([&Tensor::zeros(&[2])]) }
    }
}

impl AlphaOptimizer {
    pub fn step(&mut self, alpha: DirichletParams, grad: [f64; 2], kappa: f64) -> Result<DirichletParams> {
        check_step(grad, kappa)?;
        let mut params = [Tensor::vector(alpha.alpha().to_vec())];
        let grads = [Tensor::vector(grad.to_vec())];
        adam_step(&mut params, &grads, &mut self.state, kappa, "alpha")?;
        let d = params[0].data();
        Ok(DirichletParams::clamped(d[0], d[1]))
    }

    pub fn steps(&self) -> u64 {
        self.state.steps()
    }
}
