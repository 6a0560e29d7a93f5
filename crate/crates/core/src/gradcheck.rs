//! Finite-difference verification of every taped derivative, plus a Monte
//! Carlo check of the NES estimator.
//!
//! Each check draws random instances, records the function on a tape and
//! compares the reverse-mode gradient of every input coordinate against a
//! central difference. Instances whose forward pass sits within
//! [`KINK_MARGIN`] of a ReLU, `abs` or `max` branch switch are redrawn, since
//! the derivative is not defined there.

use rand::Rng as _;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fed::client::batch_losses;
use crate::nets::{comm_forward, fuse, fusion_weights, head_forward, hyper_forward, CommModel, FusionNet, HyperNet, Mlp};
use crate::objectives::{ce_loss, fair_loss, tch_loss};
use crate::preference::{nes_gradient_from_values, sample_dirichlet, log_density_grad, DirichletParams, PreferenceVector};
use crate::rng::{stream, Rng};
use crate::tape::{Fault, Tape, Var};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 50;
pub const KINK_MARGIN: f64 = 1e-4;
/// Relative errors are measured against at least this magnitude, so
/// gradients that are zero analytically are compared absolutely.
pub const ERROR_FLOOR: f64 = 1e-3;
const STEP: f64 = 1e-6;
const MAX_REDRAWS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Monte Carlo comparison of an estimator mean with its analytic value.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NesCheck {
    pub name: String,
    pub alpha: [f64; 2],
    pub estimate: [f64; 2],
    pub expected: [f64; 2],
    pub std_err: [f64; 2],
    /// Largest |estimate - expected| / std_err over both components.
    pub max_z: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub checks: Vec<CheckResult>,
    pub nes: Vec<NesCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed) && self.nes.iter().all(|c| c.passed)
    }

    /// Names of all failing checks.
    pub fn failures(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .chain(self.nes.iter().filter(|c| !c.passed).map(|c| c.name.as_str()))
            .collect()
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {:<16} instances={:<3} coords={:<6} max_rel_err={:.3e}",
                if c.passed { "ok  " } else { "FAIL" },
                c.name,
                c.instances,
                c.coordinates,
                c.max_rel_err
            )?;
        }
        for c in &self.nes {
            writeln!(
                f,
                "{} {:<16} alpha=({}, {}) max_z={:.2}",
                if c.passed { "ok  " } else { "FAIL" },
                c.name,
                c.alpha[0],
                c.alpha[1],
                c.max_z
            )?;
        }
        Ok(())
    }
}

fn uniform(rng: &mut Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

fn matrix(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, uniform(rng, rows * cols, -1.0, 1.0)).expect("shape")
}

fn vector(rng: &mut Rng, len: usize) -> Tensor {
    Tensor::vector(uniform(rng, len, -1.0, 1.0))
}

fn bits(rng: &mut Rng, len: usize) -> Vec<u8> {
    // both values always present
    let mut v: Vec<u8> = (0..len).map(|_| u8::from(rng.random_bool(0.5))).collect();
    v[0] = 0;
    v[len - 1] = 1;
    v
}

fn interior_pref(rng: &mut Rng) -> PreferenceVector {
    PreferenceVector::from_first(rng.random_range(0.1..0.9)).expect("interior")
}

/// Reduces any output to a scalar with fixed random weights so every output
/// coordinate contributes.
fn project<'t>(out: Var<'t>, weights: &Tensor) -> Result<Var<'t>> {
    let w = out.tape().leaf(weights.reshape(&out.shape())?);
    Ok(out.mul(w)?.sum())
}

fn mlp_params(sizes: &[usize], rng: &mut Rng) -> Vec<Tensor> {
    Mlp::init(sizes, rng).params().to_vec()
}

/// Runs one finite-difference check. `gen` draws the differentiable inputs and
/// any constant context; `f` records the scalar function.
fn check<C>(
    name: &str,
    instances: usize,
    fault: Option<Fault>,
    rng: &mut Rng,
    mut gen: impl FnMut(&mut Rng) -> (Vec<Tensor>, C),
    f: impl for<'t> Fn(&'t Tape, &[Var<'t>], &C) -> Result<Var<'t>>,
) -> Result<CheckResult> {
    let eval = |inputs: &[Tensor], ctx: &C| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        Ok(f(&tape, &vars, ctx)?.item())
    };
    let mut max_err: f64 = 0.0;
    let mut coordinates = 0;
    for _ in 0..instances {
        let mut redraws = 0;
        let (inputs, ctx, analytic) = loop {
            let (inputs, ctx) = gen(rng);
            let tape = Tape::new();
            tape.inject_fault(fault);
            let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = f(&tape, &vars, &ctx)?;
            if tape.kink_margin() >= KINK_MARGIN {
                let grads = tape.backward(out)?;
                let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get(*v)).collect();
                break (inputs, ctx, analytic);
            }
            redraws += 1;
            if redraws > MAX_REDRAWS {
                return Err(Error::contract(format!("{name}: no instance away from kinks")));
            }
        };
        for (i, input) in inputs.iter().enumerate() {
            for j in 0..input.len() {
                let x = input.data()[j];
                let h = STEP * x.abs().max(1.0);
                let mut shifted = inputs.clone();
                shifted[i].data_mut()[j] = x + h;
                let plus = eval(&shifted, &ctx)?;
                shifted[i].data_mut()[j] = x - h;
                let minus = eval(&shifted, &ctx)?;
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic[i].data()[j];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ERROR_FLOOR);
                max_err = if err.is_nan() { f64::INFINITY } else { max_err.max(err) };
                coordinates += 1;
            }
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        instances,
        coordinates,
        max_rel_err: max_err,
        passed: max_err <= TOLERANCE,
    })
}

/// Finite-difference checks for every tape op, network, loss and the
/// composed training objectives.
pub fn gradient_checks(seed: u64, instances: usize, fault: Option<Fault>) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut rng = stream(seed, &[0x6772_6164]);
    let rng = &mut rng;
    let n = instances;

    // primitive ops
    out.push(check("matmul", n, fault, rng, |r| (vec![matrix(r, 3, 4), matrix(r, 4, 2), matrix(r, 3, 2)], ()), |_, v, _| {
        v[0].matmul(v[1])?.mul(v[2])?.sum().into_ok()
    })?);
    out.push(check("add_row", n, fault, rng, |r| (vec![matrix(r, 3, 4), vector(r, 4), matrix(r, 3, 4)], ()), |_, v, _| {
        v[0].add_row(v[1])?.mul(v[2])?.sum().into_ok()
    })?);
    out.push(check("add", n, fault, rng, |r| (vec![vector(r, 5), vector(r, 5), vector(r, 5)], ()), |_, v, _| {
        v[0].add(v[1])?.mul(v[2])?.sum().into_ok()
    })?);
    out.push(check("sub", n, fault, rng, |r| (vec![vector(r, 5), vector(r, 5), vector(r, 5)], ()), |_, v, _| {
        v[0].sub(v[1])?.mul(v[2])?.sum().into_ok()
    })?);
    out.push(check("mul", n, fault, rng, |r| (vec![vector(r, 5), vector(r, 5)], ()), |_, v, _| {
        v[0].mul(v[1])?.sum().into_ok()
    })?);
    out.push(check("scale", n, fault, rng, |r| (vec![matrix(r, 2, 3), Tensor::scalar(r.random_range(-1.0..1.0)), matrix(r, 2, 3)], ()), |_, v, _| {
        v[0].scale(v[1])?.mul(v[2])?.sum().into_ok()
    })?);
    out.push(check("mul_const", n, fault, rng, |r| (vec![vector(r, 4), vector(r, 4)], r.random_range(-3.0..3.0)), |_, v, c| {
        v[0].mul_const(*c).mul(v[1])?.sum().into_ok()
    })?);
    out.push(check("add_const", n, fault, rng, |r| (vec![vector(r, 4), vector(r, 4)], r.random_range(-3.0..3.0)), |_, v, c| {
        v[0].add_const(*c).mul(v[0])?.mul(v[1])?.sum().into_ok()
    })?);
    out.push(check("relu", n, fault, rng, |r| (vec![vector(r, 6), vector(r, 6)], ()), |_, v, _| {
        v[0].relu().mul(v[1])?.sum().into_ok()
    })?);
    out.push(check("sigmoid", n, fault, rng, |r| (vec![Tensor::vector(uniform(r, 6, -4.0, 4.0)), vector(r, 6)], ()), |_, v, _| {
        v[0].sigmoid().mul(v[1])?.sum().into_ok()
    })?);
    out.push(check("log", n, fault, rng, |r| (vec![Tensor::vector(uniform(r, 6, 0.1, 2.0)), vector(r, 6)], ()), |_, v, _| {
        v[0].log().mul(v[1])?.sum().into_ok()
    })?);
    out.push(check("abs", n, fault, rng, |r| (vec![vector(r, 6), vector(r, 6)], ()), |_, v, _| {
        v[0].abs().mul(v[1])?.sum().into_ok()
    })?);
    out.push(check("sum", n, fault, rng, |r| (vec![matrix(r, 3, 3)], ()), |_, v, _| {
        v[0].mul(v[0])?.sum().into_ok()
    })?);
    out.push(check("mean", n, fault, rng, |r| (vec![matrix(r, 3, 3)], ()), |_, v, _| {
        v[0].mul(v[0])?.mean().into_ok()
    })?);
    out.push(check("slice", n, fault, rng, |r| (vec![matrix(r, 2, 5), matrix(r, 2, 2)], ()), |_, v, _| {
        v[0].slice(3, &[2, 2])?.mul(v[1])?.sum().into_ok()
    })?);
    out.push(check("reshape", n, fault, rng, |r| (vec![matrix(r, 2, 3), matrix(r, 3, 2)], ()), |_, v, _| {
        v[0].reshape(&[3, 2])?.mul(v[1])?.sum().into_ok()
    })?);
    out.push(check("softmax", n, fault, rng, |r| (vec![Tensor::vector(uniform(r, 4, -2.0, 2.0)), vector(r, 4)], ()), |_, v, _| {
        v[0].softmax().mul(v[1])?.sum().into_ok()
    })?);
    out.push(check("max", n, fault, rng, |r| (vec![Tensor::scalar(r.random_range(-1.0..1.0)), Tensor::scalar(r.random_range(-1.0..1.0))], ()), |_, v, _| {
        v[0].mul(v[0])?.max(v[1].mul_const(3.0))?.into_ok()
    })?);

    // networks
    let comm_sizes = CommModel::sizes(3);
    out.push(check(
        "comm_forward",
        n,
        fault,
        rng,
        |r| {
            let mut inputs = mlp_params(&comm_sizes, r);
            inputs.push(matrix(r, 5, 3));
            (inputs, matrix(r, 5, 4))
        },
        |_, v, w| project(comm_forward(&v[..4], v[4])?, w),
    )?);
    out.push(check(
        "hyper_forward",
        n,
        fault,
        rng,
        |r| (mlp_params(&HyperNet::SIZES, r), (interior_pref(r), vector(r, 5))),
        |_, v, (lambda, w)| project(hyper_forward(v, lambda)?, w),
    )?);
    out.push(check(
        "head_forward",
        n,
        fault,
        rng,
        |r| (vec![matrix(r, 6, 4), matrix(r, 1, 5)], vector(r, 6)),
        |_, v, w| project(head_forward(v[0], v[1])?, w),
    )?);
    let fusion_sizes = FusionNet::sizes(3);
    out.push(check(
        "fusion_weights",
        n,
        fault,
        rng,
        |r| (mlp_params(&fusion_sizes, r), (interior_pref(r), vector(r, 3))),
        |_, v, (lambda, w)| project(fusion_weights(v, lambda)?, w),
    )?);
    out.push(check(
        "fuse",
        n,
        fault,
        rng,
        |r| {
            let mut inputs = vec![Tensor::vector(uniform(r, 2, 0.1, 0.9))];
            inputs.extend(mlp_params(&HyperNet::SIZES, r));
            inputs.extend(mlp_params(&HyperNet::SIZES, r));
            (inputs, vector(r, 5))
        },
        |_, v, w| {
            let fused = fuse(v[0], &[v[1..7].to_vec(), v[7..13].to_vec()])?;
            let lambda = PreferenceVector::from_first(0.3)?;
            project(hyper_forward(&fused, &lambda)?, w)
        },
    )?);

    // losses
    out.push(check(
        "ce_loss",
        n,
        fault,
        rng,
        |r| (vec![Tensor::vector(uniform(r, 8, 0.05, 0.95))], bits(r, 8)),
        |_, v, y| ce_loss(v[0], y),
    )?);
    out.push(check(
        "fair_loss",
        n,
        fault,
        rng,
        |r| (vec![Tensor::vector(uniform(r, 8, 0.05, 0.95))], bits(r, 8)),
        |_, v, a| fair_loss(v[0], a),
    )?);
    out.push(check(
        "tch_loss",
        n,
        fault,
        rng,
        |r| (vec![Tensor::scalar(r.random_range(0.0..1.0)), Tensor::scalar(r.random_range(0.0..1.0))], interior_pref(r)),
        |_, v, lambda| tch_loss(v[0], v[1], lambda),
    )?);

    // composed objectives
    out.push(check(
        "comm_step",
        n,
        fault,
        rng,
        |r| {
            let hyper = HyperNet::init(r);
            (mlp_params(&comm_sizes, r), (matrix(r, 8, 3), bits(r, 8), hyper))
        },
        |tape, v, (x, y, hyper)| {
            let latents = comm_forward(v, tape.leaf(x.clone()))?;
            let theta = hyper_forward(&hyper.0.bind(tape), &PreferenceVector::balanced())?;
            ce_loss(head_forward(latents, theta)?, y)
        },
    )?);
    out.push(check(
        "hypernet_step",
        n,
        fault,
        rng,
        |r| {
            let prefs = vec![interior_pref(r), interior_pref(r), interior_pref(r), interior_pref(r)];
            let q = matrix(r, 8, 4).map(f64::abs);
            (mlp_params(&HyperNet::SIZES, r), (q, bits(r, 8), bits(r, 8), prefs))
        },
        |tape, v, (q, y, a, prefs)| {
            let q = tape.leaf(q.clone());
            let mut acc = tape.scalar(0.0);
            for lambda in prefs {
                let (ce, fair) = batch_losses(head_forward(q, hyper_forward(v, lambda)?)?, y, a)?;
                acc = acc.add(tch_loss(ce, fair, lambda)?)?;
            }
            Ok(acc.mul_const(1.0 / prefs.len() as f64))
        },
    )?);
    out.push(check(
        "fusion_chain",
        n,
        fault,
        rng,
        |r| {
            let hypers: Vec<HyperNet> = (0..3).map(|_| HyperNet::init(r)).collect();
            let batches: Vec<(Tensor, Vec<u8>, Vec<u8>)> = (0..3)
                .map(|_| (matrix(r, 6, 4).map(f64::abs), bits(r, 6), bits(r, 6)))
                .collect();
            let prefs = vec![interior_pref(r), interior_pref(r)];
            (mlp_params(&fusion_sizes, r), (hypers, batches, prefs))
        },
        |tape, v, (hypers, batches, prefs)| {
            let hparams: Vec<Vec<Var<'_>>> = hypers.iter().map(|h| h.0.bind(tape)).collect();
            let mut acc = tape.scalar(0.0);
            for lambda in prefs {
                let global = fuse(fusion_weights(v, lambda)?, &hparams)?;
                let theta = hyper_forward(&global, lambda)?;
                for (q, y, a) in batches {
                    let (ce, fair) = batch_losses(head_forward(tape.leaf(q.clone()), theta)?, y, a)?;
                    acc = acc.add(tch_loss(ce, fair, lambda)?)?;
                }
            }
            Ok(acc.mul_const(1.0 / (prefs.len() * batches.len()) as f64))
        },
    )?);
    Ok(out)
}

trait IntoOk: Sized {
    fn into_ok(self) -> Result<Self> {
        Ok(self)
    }
}

impl IntoOk for Var<'_> {}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn z_check(name: &str, alpha: [f64; 2], samples: [Vec<f64>; 2], expected: [f64; 2], bound: f64) -> NesCheck {
    let (m0, s0) = mean_se(&samples[0]);
    let (m1, s1) = mean_se(&samples[1]);
    let z = ((m0 - expected[0]).abs() / s0).max((m1 - expected[1]).abs() / s1);
    NesCheck {
        name: name.to_string(),
        alpha,
        estimate: [m0, m1],
        expected,
        std_err: [s0, s1],
        max_z: z,
        passed: z <= bound,
    }
}

/// With `f(λ) = λ1` in place of the negative hypervolume contribution, the
/// mean NES estimate must match `∇_α α1/(α1+α2)`; the score itself must
/// average to zero. Both within `z_bound` standard errors.
pub fn nes_checks(seed: u64, batches: usize, batch_size: usize, z_bound: f64) -> Result<Vec<NesCheck>> {
    let mut out = Vec::new();
    for (i, [a, b]) in [[1.0, 1.0], [2.0, 5.0]].into_iter().enumerate() {
        let alpha = DirichletParams::new(a, b)?;
        let mut rng = stream(seed, &[0x6e_65_73, i as u64]);
        let mut est = [Vec::with_capacity(batches), Vec::with_capacity(batches)];
        let mut score = [Vec::new(), Vec::new()];
        for _ in 0..batches {
            let prefs = sample_dirichlet(alpha, batch_size, &mut rng);
            let values: Vec<f64> = prefs.iter().map(PreferenceVector::first).collect();
            let g = nes_gradient_from_values(alpha, &prefs, &values)?;
            est[0].push(g[0]);
            est[1].push(g[1]);
            for p in &prefs {
                let s = log_density_grad(alpha, p);
                score[0].push(s[0]);
                score[1].push(s[1]);
            }
        }
        let t = (a + b) * (a + b);
        out.push(z_check("nes_toy", [a, b], est, [b / t, -a / t], z_bound));
        out.push(z_check("score_identity", [a, b], score, [0.0, 0.0], z_bound));
    }
    Ok(out)
}

/// The full suite as run by the command line.
pub fn run_suite(seed: u64, fault: Option<Fault>) -> Result<GradcheckReport> {
    Ok(GradcheckReport {
        tolerance: TOLERANCE,
        checks: gradient_checks(seed, DEFAULT_INSTANCES, fault)?,
        nes: nes_checks(seed, 20_000, 4, 3.0)?,
    })
}
