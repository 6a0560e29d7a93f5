use rand::Rng as _;
use rand_distr::{Distribution, Gamma};

use super::special::digamma_positive;
use super::{DirichletParams, PreferenceVector, LAMBDA_FLOOR};
use crate::rng::Rng;

/// `n` i.i.d. draws from `Dirichlet(α)` via normalized Gamma variates, with
/// each component floored at [`LAMBDA_FLOOR`].
pub fn sample_dirichlet(alpha: DirichletParams, n: usize, rng: &mut Rng) -> Vec<PreferenceVector> {
    let [a, b] = alpha.alpha();
    // shapes are bounded to [0.1, 50] so construction cannot fail
    let ga = Gamma::new(a, 1.0).expect("valid gamma shape");
    let gb = Gamma::new(b, 1.0).expect("valid gamma shape");
    (0..n)
        .map(|_| loop {
            let x: f64 = ga.sample(rng);
            let y: f64 = gb.sample(rng);
            let s = x + y;
            if s > 0.0 && s.is_finite() {
                let first = (x / s).clamp(LAMBDA_FLOOR, 1.0 - LAMBDA_FLOOR);
                break PreferenceVector::from_first(first).expect("clamped into the simplex");
            }
            // both variates underflowed; extremely rare for small shapes
            let _: u32 = rng.random();
        })
        .collect()
}

/// Gradient of `log p(λ | α)` with respect to `α`.
pub fn log_density_grad(alpha: DirichletParams, lambda: &PreferenceVector) -> [f64; 2] {
    score(alpha, lambda.first(), lambda.second())
}

fn score(alpha: DirichletParams, first: f64, second: f64) -> [f64; 2] {
    let [a, b] = alpha.alpha();
    let total = digamma_positive(a + b);
    [
        first.ln() - digamma_positive(a) + total,
        second.ln() - digamma_positive(b) + total,
    ]
}
