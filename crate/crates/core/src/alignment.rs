//! Convex two-objective toy with a closed-form Pareto front, used to check
//! that minimizing the Tchebycheff loss for a preference lands on the front
//! point whose loss vector points along that preference.
//!
//! The objectives are `f1(x) = |x - a|^2` and `f2(x) = |x - b|^2` over
//! `x ∈ R^2`. The front is the segment from `a` to `b`, with ideal point at
//! the origin of loss space, and its image is convex.

use rand::Rng as _;
use serde::Serialize;

use crate::adam::{adam_step, AdamState};
use crate::error::Result;
use crate::objectives::tch_loss;
use crate::preference::PreferenceVector;
use crate::rng::stream;
use crate::tape::Tape;
use crate::tensor::Tensor;

const A: [f64; 2] = [0.0, 0.0];
const B: [f64; 2] = [1.0, 0.5];

fn losses(x: [f64; 2]) -> [f64; 2] {
    let d = |p: [f64; 2]| (x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2);
    [d(A), d(B)]
}

/// Angle in degrees between a loss vector and the preference direction.
pub fn angle_deg(loss: [f64; 2], lambda: &PreferenceVector) -> f64 {
    let [l1, l2] = lambda.as_array();
    let dot = loss[0] * l1 + loss[1] * l2;
    let cross = loss[0] * l2 - loss[1] * l1;
    cross.abs().atan2(dot).to_degrees()
}

/// Front point whose loss vector is proportional to `lambda`.
pub fn analytic_solution(lambda: &PreferenceVector) -> [f64; 2] {
    let (s1, s2) = (lambda.first().sqrt(), lambda.second().sqrt());
    let t = s1 / (s1 + s2);
    [A[0] + t * (B[0] - A[0]), A[1] + t * (B[1] - A[1])]
}

#[derive(Clone, Debug, Serialize)]
pub struct AlignmentRun {
    pub lambda: [f64; 2],
    pub seed: u64,
    pub solution: [f64; 2],
    pub losses: [f64; 2],
    pub angle_deg: f64,
}

/// Minimizes the Tchebycheff loss from a random start with Adam and a
/// decaying step.
pub fn train(lambda: &PreferenceVector, seed: u64, steps: usize) -> Result<AlignmentRun> {
    let mut rng = stream(seed, &[0x61_6c_69_67_6e]);
    let mut x = vec![Tensor::vector(vec![rng.random_range(-1.0..2.0), rng.random_range(-1.0..2.0)])];
    let mut state = AdamState::new(&x);
    for step in 0..steps {
        let tape = Tape::new();
        let v = tape.leaf(x[0].clone());
        let f = |p: [f64; 2]| -> Result<_> {
            let d = v.sub(tape.leaf(Tensor::vector(p.to_vec())))?;
            Ok(d.mul(d)?.sum())
        };
        let loss = tch_loss(f(A)?, f(B)?, lambda)?;
        let grads = tape.backward(loss)?;
        let lr = 0.05 / (1.0 + step as f64 / 50.0);
        adam_step(&mut x, &[grads.get(v)], &mut state, lr, "alignment")?;
    }
    let solution = [x[0].data()[0], x[0].data()[1]];
    let l = losses(solution);
    Ok(AlignmentRun {
        lambda: lambda.as_array(),
        seed,
        solution,
        losses: l,
        angle_deg: angle_deg(l, lambda),
    })
}

/// Median over `seeds` of the angular deviation for each preference.
pub fn median_angles(prefs: &[PreferenceVector], seeds: &[u64], steps: usize) -> Result<Vec<f64>> {
    prefs
        .iter()
        .map(|lambda| {
            let mut angles = seeds
                .iter()
                .map(|&s| train(lambda, s, steps).map(|r| r.angle_deg))
                .collect::<Result<Vec<_>>>()?;
            angles.sort_by(f64::total_cmp);
            Ok(angles[angles.len() / 2])
        })
        .collect()
}

/// The nine interior preferences `λ1 = 0.1, ..., 0.9`.
pub fn interior_prefs() -> Vec<PreferenceVector> {
    (1..10)
        .map(|i| PreferenceVector::from_first(i as f64 / 10.0).expect("interior"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_solution_is_aligned() {
        for lambda in interior_prefs() {
            let l = losses(analytic_solution(&lambda));
            assert!(angle_deg(l, &lambda) < 1e-6);
        }
    }

    #[test]
    fn trained_solutions_align_with_preferences() {
        let angles = median_angles(&interior_prefs(), &[0, 1, 2], 2000).unwrap();
        for (i, a) in angles.iter().enumerate() {
            assert!(*a <= 5.0, "λ1=0.{}: {a}°", i + 1);
        }
    }

    #[test]
    fn trained_solution_reaches_front_point() {
        let lambda = PreferenceVector::from_first(0.3).unwrap();
        let run = train(&lambda, 4, 2000).unwrap();
        let target = analytic_solution(&lambda);
        let gap = (run.solution[0] - target[0]).hypot(run.solution[1] - target[1]);
        assert!(gap < 0.02, "{:?} vs {target:?}", run.solution);
    }
}
