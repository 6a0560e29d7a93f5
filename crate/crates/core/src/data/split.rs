use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{purpose, stream, Rng};

const MAX_ATTEMPTS: u64 = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub train_val_ratio: (f64, f64),
    pub seed: u64,
}

impl SplitSpec {
    /// 30% test, remainder split 9:1 into train and validation.
    pub fn standard(seed: u64) -> Self {
        SplitSpec {
            test_fraction: 0.3,
            train_val_ratio: (9.0, 1.0),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let (a, b) = self.train_val_ratio;
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) || !(a > 0.0 && b > 0.0) {
            return Err(Error::contract(format!("invalid split spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub train_idx: Vec<usize>,
    pub validation_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

/// Distributes `total` across buckets proportionally to `sizes` with the
/// largest-remainder rule; ties between equal remainders are broken randomly.
fn apportion(sizes: &[usize], total: usize, rng: &mut Rng) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let quotas: Vec<f64> = sizes.iter().map(|&s| s as f64 * total as f64 / n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<(usize, f64, u64)> = quotas
        .iter()
        .enumerate()
        .map(|(i, q)| (i, q - q.floor(), rng.random()))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.2.cmp(&b.2)));
    let mut left = total - counts.iter().sum::<usize>();
    for (i, _, _) in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if counts[*i] < sizes[*i] {
            counts[*i] += 1;
            left -= 1;
        }
    }
    counts
}

/// Stratified train/validation/test split over (label, sensitive) strata.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let n = ds.len();
    let test_n = (n as f64 * spec.test_fraction).round() as usize;
    let rest = n - test_n;
    let (a, b) = spec.train_val_ratio;
    let val_n = (rest as f64 * b / (a + b)).round() as usize;
    let train_n = rest - val_n;
    if test_n == 0 || val_n == 0 || train_n == 0 {
        return Err(Error::contract(format!(
            "dataset of {n} rows too small for a three-way split"
        )));
    }

    let strata: Vec<Vec<usize>> = (0..4u8)
        .map(|s| {
            (0..n)
                .filter(|&i| ds.labels()[i] * 2 + ds.sensitive()[i] == s)
                .collect()
        })
        .collect();
    let sizes: Vec<usize> = strata.iter().map(Vec::len).collect();

    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = stream(spec.seed, &[purpose::SPLIT, attempt]);
        let test_counts = apportion(&sizes, test_n, &mut rng);
        let remaining: Vec<usize> = sizes.iter().zip(&test_counts).map(|(s, t)| s - t).collect();
        let val_counts = apportion(&remaining, val_n, &mut rng);

        let (mut train_idx, mut validation_idx, mut test_idx) = (Vec::new(), Vec::new(), Vec::new());
        for (s, stratum) in strata.iter().enumerate() {
            let mut idx = stratum.clone();
            idx.shuffle(&mut rng);
            let (t, v) = (test_counts[s], val_counts[s]);
            test_idx.extend_from_slice(&idx[..t]);
            validation_idx.extend_from_slice(&idx[t..t + v]);
            train_idx.extend_from_slice(&idx[t + v..]);
        }
        train_idx.sort_unstable();
        validation_idx.sort_unstable();
        test_idx.sort_unstable();

        let train = ds.subset(&train_idx);
        let test = ds.subset(&test_idx);
        if train.has_both_groups() && train.has_both_labels() && test.has_both_groups() {
            return Ok(Splits {
                train,
                validation: ds.subset(&validation_idx),
                test,
                train_idx,
                validation_idx,
                test_idx,
            });
        }
    }
    Err(Error::Partition(format!(
        "stratified split of {n} rows leaves a sensitive group or label class out of train/test after {MAX_ATTEMPTS} draws"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_pool;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    #[test]
    fn thousand_rows_give_standard_sizes() {
        let ds = generate_pool(1000, 0).unwrap();
        let s = split(&ds, &SplitSpec::standard(1)).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (630, 70, 300));
    }

    #[test]
    fn same_seed_same_split() {
        let ds = generate_pool(500, 0).unwrap();
        let a = split(&ds, &SplitSpec::standard(4)).unwrap();
        let b = split(&ds, &SplitSpec::standard(4)).unwrap();
        assert_eq!(a.train_idx, b.train_idx);
        assert_eq!(a.validation_idx, b.validation_idx);
        assert_eq!(a.test_idx, b.test_idx);
    }

    #[test]
    fn single_sensitive_group_errors() {
        let ds = Dataset::new(
            Tensor::zeros(&[10, 2]),
            vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1],
            vec![1; 10],
        )
        .unwrap();
        assert!(matches!(split(&ds, &SplitSpec::standard(0)), Err(Error::Partition(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn split_is_exact_partition(n in 40usize..600, seed in 0u64..1000) {
            let ds = generate_pool(n, seed).unwrap();
            let s = split(&ds, &SplitSpec::standard(seed)).unwrap();
            let mut all = [s.train_idx.clone(), s.validation_idx.clone(), s.test_idx.clone()].concat();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            let test_target = n as f64 * 0.3;
            prop_assert!((s.test.len() as f64 - test_target).abs() <= 1.0);
            let val_target = n as f64 * 0.07;
            prop_assert!((s.validation.len() as f64 - val_target).abs() <= 1.0);
        }
    }
}
