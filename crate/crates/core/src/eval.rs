//! Test-time metrics and Pareto-front reports.
//!
//! Fronts live in (error rate, DP disparity) space with reference point
//! (1, 1); training-time hypervolume contributions use clipped losses instead.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nets::{Aggregator, CommModel, HyperNet};
use crate::preference::{hv_2d, PreferenceVector, ReferencePoint};
use crate::tensor::Tensor;

pub const THRESHOLD: f64 = 0.5;
pub const DEFAULT_GRID: usize = 1000;

/// Fraction of rows where `(pred >= threshold) != label`.
pub fn error_rate(preds: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::contract(format!(
            "error rate needs matching non-empty inputs, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    let wrong = preds
        .iter()
        .zip(labels)
        .filter(|(&p, &y)| (p >= threshold) != (y == 1))
        .count();
    Ok(wrong as f64 / preds.len() as f64)
}

/// `|P(ŷ=1 | a=0) - P(ŷ=1 | a=1)|` with `ŷ = pred >= threshold`.
pub fn dp_disparity(preds: &[f64], sensitive: &[u8], threshold: f64) -> Result<f64> {
    if preds.len() != sensitive.len() {
        return Err(Error::contract("DP disparity inputs differ in length"));
    }
    let mut positive = [0usize; 2];
    let mut count = [0usize; 2];
    for (&p, &a) in preds.iter().zip(sensitive) {
        let g = usize::from(a == 1);
        count[g] += 1;
        positive[g] += usize::from(p >= threshold);
    }
    if count[0] == 0 || count[1] == 0 {
        return Err(Error::contract("DP disparity needs both sensitive groups"));
    }
    let rate = |g: usize| positive[g] as f64 / count[g] as f64;
    Ok((rate(0) - rate(1)).abs())
}

/// Indices of the non-dominated points, in input order. Of several equal
/// points only the first is kept.
pub fn pareto_filter(points: &[[f64; 2]]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a][0]
            .total_cmp(&points[b][0])
            .then(points[a][1].total_cmp(&points[b][1]))
            .then(a.cmp(&b))
    });
    let mut keep = Vec::new();
    let mut best = f64::INFINITY;
    for i in order {
        if points[i][1] < best {
            keep.push(i);
            best = points[i][1];
        }
    }
    keep.sort_unstable();
    keep
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontPoint {
    pub lambda: PreferenceVector,
    pub error_rate: f64,
    pub dp: f64,
}

impl FrontPoint {
    pub fn coords(&self) -> [f64; 2] {
        [self.error_rate, self.dp]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Scope {
    Local { client: usize },
    Global,
}

impl std::fmt::Display for Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scope::Local { client } => write!(f, "local-{client}"),
            Scope::Global => f.write_str("global"),
        }
    }
}

/// Identifies the run an output belongs to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontReport {
    pub scope: Scope,
    pub points: Vec<FrontPoint>,
    /// Indices into `points`.
    pub non_dominated: Vec<usize>,
    pub hv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontSummary {
    pub scope: Scope,
    pub hv: f64,
    pub m: usize,
    pub non_dominated: usize,
    pub config_hash: String,
    pub seed: u64,
}

impl FrontReport {
    pub fn from_points(scope: Scope, points: Vec<FrontPoint>) -> Self {
        let coords: Vec<[f64; 2]> = points.iter().map(FrontPoint::coords).collect();
        let hv = hv_2d(&coords, ReferencePoint::unit());
        FrontReport {
            scope,
            non_dominated: pareto_filter(&coords),
            points,
            hv,
        }
    }

    pub fn summary(&self, provenance: &Provenance) -> FrontSummary {
        FrontSummary {
            scope: self.scope,
            hv: self.hv,
            m: self.points.len(),
            non_dominated: self.non_dominated.len(),
            config_hash: provenance.config_hash.clone(),
            seed: provenance.seed,
        }
    }

    /// One row per grid point; `dominated` is 1 for points outside the
    /// non-dominated subset.
    pub fn write_csv(&self, path: &Path, provenance: &Provenance) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "lambda1",
            "lambda2",
            "error_rate",
            "dp_disparity",
            "dominated",
            "config_hash",
            "seed",
        ])?;
        let mut nd = vec![false; self.points.len()];
        for &i in &self.non_dominated {
            nd[i] = true;
        }
        for (p, keep) in self.points.iter().zip(nd) {
            w.write_record([
                p.lambda.first().to_string(),
                p.lambda.second().to_string(),
                p.error_rate.to_string(),
                p.dp.to_string(),
                u8::from(!keep).to_string(),
                provenance.config_hash.clone(),
                provenance.seed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn front(
    scope: Scope,
    latents: &Tensor,
    data: &Dataset,
    m: usize,
    head_for: impl Fn(&PreferenceVector) -> Result<HyperNet> + Sync,
) -> Result<FrontReport> {
    if m == 0 {
        return Err(Error::contract("front needs at least one grid point"));
    }
    let points = PreferenceVector::grid(m)
        .into_par_iter()
        .map(|lambda| {
            let preds = head_for(&lambda)?.head(&lambda).predict(latents);
            Ok(FrontPoint {
                lambda,
                error_rate: error_rate(&preds, data.labels(), THRESHOLD)?,
                dp: dp_disparity(&preds, data.sensitive(), THRESHOLD)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FrontReport::from_points(scope, points))
}

/// Front of one client's preference-specific models on its own test set.
pub fn local_hv_report(
    client: usize,
    comm: &CommModel,
    hyper: &HyperNet,
    test: &Dataset,
    m: usize,
) -> Result<FrontReport> {
    let latents = comm.encode(test.features())?;
    front(Scope::Local { client }, &latents, test, m, |_| Ok(hyper.clone()))
}

/// Front of the fused global models on the union of all test sets.
pub fn global_hv_report(
    comm: &CommModel,
    hypernets: &[HyperNet],
    aggregator: &Aggregator,
    tests: &[&Dataset],
    m: usize,
) -> Result<FrontReport> {
    if aggregator.clients() != hypernets.len() {
        return Err(Error::Protocol(format!(
            "aggregator expects {} hypernets, got {}",
            aggregator.clients(),
            hypernets.len()
        )));
    }
    let union = Dataset::concat(tests)?;
    let latents = comm.encode(union.features())?;
    front(Scope::Global, &latents, &union, m, |l| aggregator.global_hypernet(l, hypernets))
}

/// Mean of the local hypervolumes.
pub fn mean_hv(reports: &[FrontReport]) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    reports.iter().map(|r| r.hv).sum::<f64>() / reports.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_pool;
    use crate::nets::Mlp;
    use crate::rng::stream;
    use proptest::prelude::*;

    #[test]
    fn error_rate_examples() {
        assert_eq!(error_rate(&[0.9, 0.1], &[1, 0], THRESHOLD).unwrap(), 0.0);
        assert_eq!(error_rate(&[0.1, 0.9], &[1, 0], THRESHOLD).unwrap(), 1.0);
        assert_eq!(error_rate(&[0.6, 0.4, 0.6, 0.4], &[1, 0, 0, 0], THRESHOLD).unwrap(), 0.25);
        assert!(error_rate(&[], &[], THRESHOLD).is_err());
    }

    #[test]
    fn dp_examples() {
        assert_eq!(dp_disparity(&[0.9, 0.1, 0.9, 0.1], &[0, 0, 1, 1], THRESHOLD).unwrap(), 0.0);
        let preds = [0.9, 0.9, 0.9, 0.1, 0.9, 0.1, 0.1, 0.1];
        let groups = [0, 0, 0, 0, 1, 1, 1, 1];
        assert_eq!(dp_disparity(&preds, &groups, THRESHOLD).unwrap(), 0.5);
        assert_eq!(dp_disparity(&[0.7; 4], &[0, 1, 0, 1], THRESHOLD).unwrap(), 0.0);
        assert!(dp_disparity(&[0.7; 3], &[1, 1, 1], THRESHOLD).is_err());
        // threshold 1.0 sends all rates to zero
        assert_eq!(dp_disparity(&preds, &groups, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn pareto_examples() {
        assert_eq!(pareto_filter(&[[0.1, 0.9], [0.9, 0.1], [0.5, 0.5]]), vec![0, 1, 2]);
        assert_eq!(pareto_filter(&[[0.2, 0.2], [0.3, 0.3]]), vec![0]);
        assert_eq!(pareto_filter(&[[0.4, 0.4]]), vec![0]);
        assert_eq!(pareto_filter(&[[0.4, 0.4], [0.4, 0.4]]), vec![0]);
        assert_eq!(pareto_filter(&[[0.2, 0.5], [0.2, 0.3]]), vec![1]);
    }

    fn pt(e: f64, d: f64) -> impl Strategy<Value = [f64; 2]> {
        (0.0..e, 0.0..d).prop_map(|(a, b)| [a, b])
    }

    proptest! {
        #[test]
        fn filter_is_exactly_the_minimal_set(pts in proptest::collection::vec(pt(1.0, 1.0), 1..60)) {
            let keep = pareto_filter(&pts);
            for (i, p) in pts.iter().enumerate() {
                let dominated = pts.iter().any(|q| q[0] <= p[0] && q[1] <= p[1] && q != p);
                let earlier_dup = pts[..i].iter().any(|q| q == p);
                prop_assert_eq!(keep.contains(&i), !dominated && !earlier_dup);
            }
            let nd: Vec<[f64; 2]> = keep.iter().map(|&i| pts[i]).collect();
            let r = ReferencePoint::unit();
            prop_assert_eq!(hv_2d(&pts, r), hv_2d(&nd, r));
        }
    }

    fn constant_hypernet(bias: f64) -> HyperNet {
        let mut h = HyperNet::zeros();
        let last = h.0.params().len() - 1;
        h.0.params_mut()[last].data_mut()[crate::nets::LATENT_DIM] = bias;
        h
    }

    #[test]
    fn constant_hypernet_front_is_one_rectangle() {
        let data = generate_pool(400, 2).unwrap();
        let comm = CommModel::init(3, &mut stream(1, &[1]));
        let report = local_hv_report(0, &comm, &constant_hypernet(0.3), &data, 25).unwrap();
        let p = report.points[0];
        assert!(report.points.iter().all(|q| q.coords() == p.coords()));
        assert!((report.hv - (1.0 - p.error_rate) * (1.0 - p.dp)).abs() < 1e-12);
        assert_eq!(report.non_dominated, vec![0]);
    }

    #[test]
    fn single_client_global_matches_local() {
        let data = generate_pool(300, 3).unwrap();
        let mut rng = stream(2, &[0]);
        let comm = CommModel::init(3, &mut rng);
        let h = HyperNet::init(&mut rng);
        let fusion = crate::nets::FusionNet::init(1, &mut rng);
        let local = local_hv_report(0, &comm, &h, &data, 50).unwrap();
        let global =
            global_hv_report(&comm, std::slice::from_ref(&h), &Aggregator::Fusion(fusion), &[&data], 50).unwrap();
        assert_eq!(local.points, global.points);
        assert_eq!(local.hv, global.hv);
    }

    #[test]
    fn averaging_constant_hypernets_gives_identical_points() {
        let data = generate_pool(300, 4).unwrap();
        let comm = CommModel::init(3, &mut stream(3, &[0]));
        let hs = [constant_hypernet(0.5), constant_hypernet(-0.2)];
        let report =
            global_hv_report(&comm, &hs, &Aggregator::Average { clients: 2 }, &[&data], 40).unwrap();
        assert!(report.points.iter().all(|q| q.coords() == report.points[0].coords()));
        assert!((0.0..=1.0).contains(&report.hv));
    }

    #[test]
    fn nested_grid_never_loses_area() {
        let data = generate_pool(500, 5).unwrap();
        let mut rng = stream(4, &[0]);
        let comm = CommModel::init(3, &mut rng);
        let h = HyperNet(Mlp::init(&HyperNet::SIZES, &mut rng));
        let coarse = local_hv_report(0, &comm, &h, &data, 10).unwrap();
        let fine = local_hv_report(0, &comm, &h, &data, 1000).unwrap();
        let doubled = local_hv_report(0, &comm, &h, &data, 19).unwrap();
        assert!(fine.hv >= coarse.hv - 1e-12);
        assert!(doubled.hv >= coarse.hv - 1e-12);
        assert_eq!(local_hv_report(0, &comm, &h, &data, 10).unwrap(), coarse);
    }

    #[test]
    fn csv_export_has_provenance_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("front.csv");
        let points = vec![
            FrontPoint { lambda: PreferenceVector::balanced(), error_rate: 0.2, dp: 0.1 },
            FrontPoint { lambda: PreferenceVector::from_first(0.3).unwrap(), error_rate: 0.3, dp: 0.2 },
        ];
        let report = FrontReport::from_points(Scope::Global, points);
        let prov = Provenance { config_hash: "abc".into(), seed: 9 };
        report.write_csv(&path, &prov).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "lambda1,lambda2,error_rate,dp_disparity,dominated,config_hash,seed");
        assert!(lines[1].ends_with(",0,abc,9"));
        assert!(lines[2].ends_with(",1,abc,9"));
        assert_eq!(report.summary(&prov).m, 2);
    }
}
