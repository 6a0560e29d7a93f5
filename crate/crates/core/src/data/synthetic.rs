use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{partition_dirichlet, Dataset};
use crate::error::{Error, Result};
use crate::rng::{purpose, stream};
use crate::tensor::Tensor;

/// Probability that the sensitive attribute equals the label. For balanced
/// binary variables this gives a correlation of 2p - 1 = 0.4.
const SENSITIVE_AGREEMENT: f64 = 0.7;
const CLUSTER_SPREAD: f64 = 0.8;
const SENSITIVE_SHIFT: f64 = 0.5;

/// Draws `n` rows from four Gaussian clusters indexed by (label, sensitive).
///
/// Columns are the two non-sensitive coordinates followed by the sensitive
/// attribute itself. Label 0 centres at (-1, -1), label 1 at (1, 1), and the
/// sensitive group shifts the first coordinate by ±0.5.
pub fn generate_pool(n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = stream(seed, &[purpose::DATA]);
    let noise = Normal::new(0.0, CLUSTER_SPREAD).expect("valid spread");
    let mut features = Vec::with_capacity(n * 3);
    let mut labels = Vec::with_capacity(n);
    let mut sensitive = Vec::with_capacity(n);
    for _ in 0..n {
        let y: u8 = rng.random_bool(0.5).into();
        let a = if rng.random_bool(SENSITIVE_AGREEMENT) { y } else { 1 - y };
        let centre = if y == 1 { 1.0 } else { -1.0 };
        let shift = if a == 1 { SENSITIVE_SHIFT } else { -SENSITIVE_SHIFT };
        features.push(centre + shift + noise.sample(&mut rng));
        features.push(centre + noise.sample(&mut rng));
        features.push(f64::from(a));
        labels.push(y);
        sensitive.push(a);
    }
    Dataset::new(Tensor::matrix(n, 3, features)?, labels, sensitive)
}

/// Generates a pool of `n` rows and splits it across `clients` with a
/// label-wise Dirichlet partition of concentration `heterogeneity`.
pub fn generate_synthetic(
    n: usize,
    clients: usize,
    heterogeneity: f64,
    seed: u64,
) -> Result<Vec<Dataset>> {
    if n < 100 * clients {
        return Err(Error::contract(format!(
            "need at least 100 samples per client, got n={n} for {clients} clients"
        )));
    }
    if !(heterogeneity > 0.0 && heterogeneity.is_finite()) {
        return Err(Error::contract(format!(
            "heterogeneity must be positive, got {heterogeneity}"
        )));
    }
    let pool = generate_pool(n, seed)?;
    partition_dirichlet(&pool, clients, heterogeneity, seed)
}
