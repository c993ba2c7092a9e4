//! Wasserstein-1 k-variance `Var_k(mu) = E[W1(mu_S, mu_S')]` for independent
//! size-`k` samples `S, S'`, estimated from a finite sample by averaging `n`
//! split repeats.
//!
//! The default sampling draws the two subsets disjointly, without replacement,
//! from the available rows. With an odd row count (or `2k < m`) the unused rows
//! differ from repeat to repeat. [`SplitSampling::Overlapping`] instead draws
//! both subsets i.i.d. with replacement. [`SplitSampling::Partitioned`] makes
//! all `2n` subsets of one estimate mutually disjoint, so `m >= 2nk` is needed.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ingest::{class_partition, ModelDump};
use crate::matrix::Matrix;
use crate::rng::{derive_seed, stream};
use crate::transport::w1_uniform;

const TAG_SPLIT: u64 = 0x4b56_4152;
const TAG_TRIAL: u64 = 0x5452_4941;
const TAG_PARTITION: u64 = 0x5041_5254;
/// Stream tag used by [`k_variance`] when no class is attached.
const UNCLASSED: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplitSampling {
    #[default]
    Disjoint,
    Overlapping,
    Partitioned,
}

/// Settings for per-class estimates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KVarianceConfig {
    /// Split size; `None` means `floor(m_c / 2)`.
    pub k: Option<usize>,
    /// Number of split repeats `n`.
    pub repeats: usize,
    pub sampling: SplitSampling,
}

impl Default for KVarianceConfig {
    fn default() -> Self {
        Self {
            k: None,
            repeats: 1,
            sampling: SplitSampling::Disjoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KVarianceEstimate {
    pub class_id: Option<usize>,
    pub k: usize,
    pub n: usize,
    /// Mean of `repeats`.
    pub value: f64,
    pub repeats: Vec<f64>,
    pub seed: u64,
}

/// Empirical k-variance of the rows of `features` with disjoint splits.
pub fn k_variance(features: &Matrix, k: usize, n: usize, seed: u64) -> Result<KVarianceEstimate> {
    estimate(features, k, n, seed, UNCLASSED, SplitSampling::Disjoint)
}

pub fn k_variance_with(
    features: &Matrix,
    k: usize,
    n: usize,
    seed: u64,
    sampling: SplitSampling,
) -> Result<KVarianceEstimate> {
    estimate(features, k, n, seed, UNCLASSED, sampling)
}

fn estimate(
    features: &Matrix,
    k: usize,
    n: usize,
    seed: u64,
    tag: u64,
    sampling: SplitSampling,
) -> Result<KVarianceEstimate> {
    let m = features.rows();
    if k == 0 || n == 0 {
        return Err(Error::SampleSize(format!("need k >= 1 and n >= 1, got k={k}, n={n}")));
    }
    if sampling == SplitSampling::Disjoint && m < 2 * k {
        return Err(Error::SampleSize(format!(
            "{m} rows cannot hold two disjoint subsets of size {k}"
        )));
    }
    if sampling == SplitSampling::Partitioned && m < 2 * k * n {
        return Err(Error::SampleSize(format!(
            "{m} rows cannot hold {} disjoint subsets of size {k}",
            2 * n
        )));
    }
    if m == 0 {
        return Err(Error::SampleSize("no rows".into()));
    }
    if !features.is_finite() {
        return Err(Error::Data("non-finite features".into()));
    }
    if sampling == SplitSampling::Partitioned {
        let mut rng = stream(seed, &[TAG_PARTITION, tag]);
        let idx = rand::seq::index::sample(&mut rng, m, 2 * k * n).into_vec();
        let repeats = idx
            .chunks_exact(2 * k)
            .map(|block| {
                w1_uniform(&features.select_rows(&block[..k]), &features.select_rows(&block[k..]))
            })
            .collect::<Result<Vec<f64>>>()?;
        return Ok(finish(repeats, k, n, seed, tag));
    }
    let repeats = (0..n)
        .map(|j| {
            let mut rng = stream(seed, &[TAG_SPLIT, tag, j as u64]);
            split_w1(features, k, &mut rng, sampling)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(finish(repeats, k, n, seed, tag))
}

fn finish(repeats: Vec<f64>, k: usize, n: usize, seed: u64, tag: u64) -> KVarianceEstimate {
    let value = repeats.iter().sum::<f64>() / n as f64;
    KVarianceEstimate {
        class_id: (tag != UNCLASSED).then_some(tag as usize),
        k,
        n,
        value,
        repeats,
        seed,
    }
}

/// One repeat: W1 between two random size-`k` subsets of the rows.
/// `Partitioned` behaves like `Disjoint` for a single repeat.
pub fn split_w1(
    features: &Matrix,
    k: usize,
    rng: &mut impl Rng,
    sampling: SplitSampling,
) -> Result<f64> {
    let m = features.rows();
    let (first, second): (Vec<usize>, Vec<usize>) = match sampling {
        SplitSampling::Disjoint | SplitSampling::Partitioned => {
            let idx = rand::seq::index::sample(rng, m, 2 * k).into_vec();
            (idx[..k].to_vec(), idx[k..].to_vec())
        }
        SplitSampling::Overlapping => (
            (0..k).map(|_| rng.random_range(0..m)).collect(),
            (0..k).map(|_| rng.random_range(0..m)).collect(),
        ),
    };
    w1_uniform(&features.select_rows(&first), &features.select_rows(&second))
}

/// Per-class estimates at `layer_id`, with `k = floor(m_c / 2)` unless the
/// config fixes `k`.
pub fn class_k_variances(
    dump: &ModelDump,
    layer_id: &str,
    seed: u64,
    config: &KVarianceConfig,
) -> Result<BTreeMap<usize, KVarianceEstimate>> {
    let parts = class_partition(dump, layer_id)?;
    let mut out = BTreeMap::new();
    for (c, rows) in parts {
        if rows.rows() < 2 {
            return Err(Error::SampleSize(format!(
                "class {c} has {} sample(s); the k-variance needs at least 2",
                rows.rows()
            )));
        }
        let k = config.k.unwrap_or(rows.rows() / 2);
        let est = estimate(&rows, k, config.repeats, seed, c as u64, config.sampling).map_err(
            |e| match e {
                Error::SampleSize(msg) => Error::SampleSize(format!("class {c}: {msg}")),
                other => other,
            },
        )?;
        out.insert(c, est);
    }
    Ok(out)
}

/// Total variance `E|x - mean|^2` of the rows (population normalization).
pub fn feature_variance(features: &Matrix) -> f64 {
    let mean = features.mean_row();
    let total: f64 = features
        .iter_rows()
        .map(|r| r.iter().zip(&mean).map(|(x, mu)| (x - mu) * (x - mu)).sum::<f64>())
        .sum();
    total / features.rows() as f64
}

/// Sample variance of repeated estimates against `4 Var(phi) / (n k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorVarianceCheck {
    pub empirical_variance: f64,
    pub bound: f64,
    pub feature_variance: f64,
    pub estimates: Vec<f64>,
}

impl EstimatorVarianceCheck {
    pub fn ratio(&self) -> f64 {
        if self.bound == 0.0 {
            if self.empirical_variance == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.empirical_variance / self.bound
        }
    }
}

/// `4 Var(phi) / (n k)`.
pub fn estimator_variance_bound(feature_variance: f64, k: usize, n: usize) -> f64 {
    4.0 * feature_variance / (n as f64 * k as f64)
}

/// Seed of trial `t` in [`estimator_variance_check`].
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    derive_seed(seed, &[TAG_TRIAL, trial as u64])
}

/// Runs `trials` independent estimates and compares their spread with the
/// variance bound.
pub fn estimator_variance_check(
    features: &Matrix,
    k: usize,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<EstimatorVarianceCheck> {
    let estimates = (0..trials)
        .map(|t| k_variance(features, k, n, trial_seed(seed, t)).map(|e| e.value))
        .collect::<Result<Vec<f64>>>()?;
    summarize_trials(features, k, n, estimates)
}

/// Builds the check from externally computed trial estimates (for callers that
/// run the trials in parallel).
pub fn summarize_trials(
    features: &Matrix,
    k: usize,
    n: usize,
    estimates: Vec<f64>,
) -> Result<EstimatorVarianceCheck> {
    if estimates.len() < 2 {
        return Err(Error::SampleSize(format!(
            "need at least 2 trials, got {}",
            estimates.len()
        )));
    }
    let t = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / t;
    let empirical_variance = estimates.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (t - 1.0);
    let feature_variance = feature_variance(features);
    Ok(EstimatorVarianceCheck {
        empirical_variance,
        bound: estimator_variance_bound(feature_variance, k, n),
        feature_variance,
        estimates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::dump_from_parts;
    use alloc::vec;

    fn pm_one() -> Matrix {
        Matrix::column(&[-1.0, 1.0, -1.0, 1.0])
    }

    /// Exact expectation over all ordered pairs of disjoint size-k subsets.
    fn enumerate_expectation(features: &Matrix, k: usize) -> f64 {
        let m = features.rows();
        let subsets: Vec<Vec<usize>> = (0u32..(1 << m))
            .filter(|mask| mask.count_ones() as usize == k)
            .map(|mask| (0..m).filter(|i| mask & (1 << i) != 0).collect())
            .collect();
        let mut total = 0.0;
        let mut count = 0usize;
        for s in &subsets {
            for t in &subsets {
                if s.iter().any(|i| t.contains(i)) {
                    continue;
                }
                total += brute_w1(&features.select_rows(s), &features.select_rows(t));
                count += 1;
            }
        }
        total / count as f64
    }

    fn brute_w1(a: &Matrix, b: &Matrix) -> f64 {
        use crate::transport::{brute_force_w1, PointCloud};
        brute_force_w1(
            &PointCloud::uniform(a.clone()).unwrap(),
            &PointCloud::uniform(b.clone()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn enumeration_oracle_for_pm_one() {
        // Splits of {-1,+1,-1,+1} into two pairs: 2 of 3 partitions give W1 = 1.
        assert!((enumerate_expectation(&pm_one(), 2) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_matches_enumeration() {
        let est = k_variance(&pm_one(), 2, 10_000, 42).unwrap();
        assert!((est.value - 2.0 / 3.0).abs() < 0.05, "{}", est.value);
        assert!((est.value - est.repeats.iter().sum::<f64>() / 10_000.0).abs() < 1e-12);
    }

    #[test]
    fn small_instances_within_three_standard_errors() {
        let mut rng = stream(8, &[]);
        for (m, k) in [(5, 2), (6, 3), (7, 3), (8, 2)] {
            let data = (0..m * 2).map(|_| rng.random::<f64>()).collect();
            let x = Matrix::new(m, 2, data).unwrap();
            let exact = enumerate_expectation(&x, k);
            let est = k_variance(&x, k, 10_000, 3).unwrap();
            let n = est.repeats.len() as f64;
            let var = est.repeats.iter().map(|r| (r - est.value).powi(2)).sum::<f64>() / (n - 1.0);
            let se = (var / n).sqrt();
            assert!((est.value - exact).abs() <= 3.0 * se + 1e-12, "m={m} k={k}");
        }
    }

    #[test]
    fn point_mass_is_exactly_zero() {
        let x = Matrix::new(6, 3, vec![0.7; 18]).unwrap();
        for seed in 0..5 {
            let est = k_variance(&x, 3, 4, seed).unwrap();
            assert_eq!(est.value, 0.0);
        }
    }

    #[test]
    fn translation_and_scale() {
        let mut rng = stream(9, &[]);
        let data: Vec<f64> = (0..40 * 3).map(|_| rng.random::<f64>()).collect();
        let x = Matrix::new(40, 3, data).unwrap();
        let base = k_variance(&x, 20, 3, 1).unwrap().value;
        let shifted = k_variance(&x.map(|v| v + 5.0), 20, 3, 1).unwrap().value;
        assert!((base - shifted).abs() < 1e-9);
        let scaled = k_variance(&x.map(|v| -2.5 * v), 20, 3, 1).unwrap().value;
        assert!((scaled - 2.5 * base).abs() < 1e-9);
    }

    #[test]
    fn sample_size_errors() {
        assert!(matches!(k_variance(&pm_one(), 3, 1, 0), Err(Error::SampleSize(_))));
        assert!(matches!(k_variance(&pm_one(), 0, 1, 0), Err(Error::SampleSize(_))));
        let bad = Matrix::column(&[0.0, f64::NAN]);
        assert!(matches!(k_variance(&bad, 1, 1, 0), Err(Error::Data(_))));
        // Overlapping sampling only needs one row.
        assert!(k_variance_with(&pm_one(), 3, 2, 0, SplitSampling::Overlapping).is_ok());
    }

    #[test]
    fn partitioned_splits_use_disjoint_blocks() {
        // Six distinct points split into 3 pairs of singletons: each repeat is
        // the distance between two different points, and together the pairs
        // cover every row once.
        let x = Matrix::column(&[0.0, 1.0, 10.0, 100.0, 1000.0, 10000.0]);
        let est = k_variance_with(&x, 1, 3, 4, SplitSampling::Partitioned).unwrap();
        assert_eq!(est.repeats.len(), 3);
        assert!(est.repeats.iter().all(|&r| r > 0.0));
        assert!(matches!(
            k_variance_with(&x, 2, 2, 0, SplitSampling::Partitioned),
            Err(Error::SampleSize(_))
        ));
    }

    fn two_class_dump(counts: [usize; 2], features: Vec<f64>) -> crate::ingest::ModelDump {
        let labels: Vec<usize> = (0..counts[0]).map(|_| 0).chain((0..counts[1]).map(|_| 1)).collect();
        let m = labels.len();
        dump_from_parts("t", 2, labels, Matrix::zeros(m, 2), "l", Matrix::column(&features))
    }

    #[test]
    fn per_class_k_follows_floor_rule() {
        let feats: Vec<f64> = (0..17).map(|i| i as f64).collect();
        let d = two_class_dump([10, 7], feats);
        let est = class_k_variances(&d, "l", 0, &KVarianceConfig::default()).unwrap();
        assert_eq!(est[&0].k, 5);
        assert_eq!(est[&1].k, 3);
        assert_eq!(est[&1].class_id, Some(1));
    }

    #[test]
    fn per_class_point_masses_and_forced_k() {
        let d = two_class_dump([3, 4], vec![1.0, 1.0, 1.0, -2.0, -2.0, -2.0, -2.0]);
        let est = class_k_variances(&d, "l", 0, &KVarianceConfig::default()).unwrap();
        assert!(est.values().all(|e| e.value == 0.0));

        let d = two_class_dump([4, 2], vec![-1.0, 1.0, -1.0, 1.0, 0.0, 0.0]);
        let cfg = KVarianceConfig {
            k: Some(2),
            repeats: 10_000,
            ..Default::default()
        };
        let err = class_k_variances(&d, "l", 0, &cfg).unwrap_err();
        assert!(matches!(&err, Error::SampleSize(msg) if msg.contains("class 1")));

        let cfg = KVarianceConfig { k: None, ..cfg };
        let est = class_k_variances(&d, "l", 5, &cfg).unwrap();
        assert!((est[&0].value - 2.0 / 3.0).abs() < 0.05);
    }

    #[test]
    fn singleton_class_is_rejected() {
        let d = two_class_dump([3, 1], vec![0.0, 1.0, 2.0, 3.0]);
        let err = class_k_variances(&d, "l", 0, &KVarianceConfig::default()).unwrap_err();
        assert!(matches!(&err, Error::SampleSize(msg) if msg.contains("class 1")));
    }

    #[test]
    fn estimator_variance_examples() {
        let x = Matrix::new(8, 2, vec![3.0; 16]).unwrap();
        let check = estimator_variance_check(&x, 2, 1, 5, 0).unwrap();
        assert_eq!(check.empirical_variance, 0.0);
        assert_eq!(check.bound, 0.0);
        assert_eq!(
            estimator_variance_bound(2.0, 8, 1),
            2.0 * estimator_variance_bound(2.0, 16, 1)
        );
        assert!(estimator_variance_check(&x, 2, 1, 1, 0).is_err());
    }
}
