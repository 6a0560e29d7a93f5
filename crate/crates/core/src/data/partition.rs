use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{purpose, stream, Rng};

pub const MIN_CLIENT_SAMPLES: usize = 20;
pub const MAX_ATTEMPTS: u64 = 100;

fn symmetric_dirichlet(k: usize, concentration: f64, rng: &mut Rng) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// Splits `ds` across `k` clients. For each label class, client shares are
/// drawn from a symmetric Dirichlet; smaller concentrations give more skewed
/// clients. Draws are repeated until every client holds at least
/// [`MIN_CLIENT_SAMPLES`] rows with both labels and both sensitive groups.
pub fn partition_dirichlet(
    ds: &Dataset,
    k: usize,
    concentration: f64,
    seed: u64,
) -> Result<Vec<Dataset>> {
    let idx = partition_indices(ds, k, concentration, seed)?;
    Ok(idx.iter().map(|i| ds.subset(i)).collect())
}

/// Row indices assigned to each client by [`partition_dirichlet`].
pub fn partition_indices(
    ds: &Dataset,
    k: usize,
    concentration: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::contract(format!("partition needs at least 2 clients, got {k}")));
    }
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::contract(format!(
            "concentration must be positive, got {concentration}"
        )));
    }
    let by_class: Vec<Vec<usize>> = (0..2u8)
        .map(|c| (0..ds.len()).filter(|&i| ds.labels()[i] == c).collect())
        .collect();

    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = stream(seed, &[purpose::PARTITION, attempt]);
        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); k];
        for class in &by_class {
            let mut idx = class.clone();
            idx.shuffle(&mut rng);
            let shares = symmetric_dirichlet(k, concentration, &mut rng);
            let mut start = 0;
            let mut cum = 0.0;
            for (client, share) in shares.iter().enumerate() {
                cum += share;
                let end = if client + 1 == k {
                    idx.len()
                } else {
                    ((cum * idx.len() as f64).round() as usize).clamp(start, idx.len())
                };
                assigned[client].extend_from_slice(&idx[start..end]);
                start = end;
            }
        }
        for idx in assigned.iter_mut() {
            idx.sort_unstable();
        }
        let ok = assigned.iter().all(|idx| {
            let p = ds.subset(idx);
            p.len() >= MIN_CLIENT_SAMPLES && p.has_both_labels() && p.has_both_groups()
        });
        if ok {
            return Ok(assigned);
        }
    }
    Err(Error::Partition(format!(
        "no valid {k}-client partition with concentration {concentration} after {MAX_ATTEMPTS} draws"
    )))
}
