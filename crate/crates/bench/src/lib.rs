//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hetpfl_core::experiment::{prepare_clients, DatasetConfig, ExperimentConfig};
use hetpfl_core::fed::{ClientData, ClientState, ServerState};
use hetpfl_core::nets::{CommModel, FusionNet, HyperNet};
use hetpfl_core::rng::stream;

/// `n` uniform points in the unit square.
pub fn random_points(n: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| [rng.random(), rng.random()]).collect()
}

/// `n` points on a convex front, none dominated.
pub fn front_points(n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|i| {
            let t = (i as f64 + 0.5) / n as f64;
            [t, (1.0 - t.sqrt()).powi(2)]
        })
        .collect()
}

/// Reference hyperparameters on a smaller synthetic pool.
pub fn bench_config(n: usize) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetConfig::Synthetic { n },
        ..ExperimentConfig::default()
    }
}

/// Freshly initialized clients and server, as at the start of a run.
pub fn fresh_federation(cfg: &ExperimentConfig, seed: u64) -> (Vec<ClientState>, ServerState) {
    let (data, _): (Vec<ClientData>, _) = prepare_clients(cfg, seed).expect("bench data");
    let comm = CommModel::init(data[0].train.dim(), &mut stream(seed, &[0]));
    let clients = data
        .into_iter()
        .enumerate()
        .map(|(i, d)| ClientState::new(i, comm.clone(), HyperNet::init(&mut stream(seed, &[1, i as u64])), d))
        .collect::<Vec<_>>();
    let fusion = FusionNet::init(clients.len(), &mut stream(seed, &[2]));
    (clients, ServerState::new(comm, fusion))
}
