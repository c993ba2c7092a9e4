//! Empirical margin bound and the feature-separation inequalities as checkable
//! numbers.
//!
//! The bound on the test error assembled by [`corollary_bound`] is
//!
//! ```text
//! R_gamma + sum_c p_c (Lip_c / gamma) (Var_{k_c,n} + 2B sqrt(log(2K/delta) / (n k_c)))
//!         + sqrt(log(2/delta) / (2 m'))
//! ```
//!
//! with `k_c = floor(m_c / 2n)` and `m' = sum_c k_c`. `B` is the empirical
//! feature diameter, so the result is a plug-in estimate rather than a
//! certified bound.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::ingest::{class_indices, ModelDump};
use crate::kvariance::{k_variance_with, SplitSampling};
use crate::margins::{class_lipschitz, gn_margins, raw_margins, MarginDistribution, GN_EPSILON};
use crate::matrix::{euclidean, Matrix};
use crate::rng::stream;
use crate::transport::{w1_exact, PointCloud};

/// Largest cloud for which [`feature_diameter`] scans all pairs.
pub const EXACT_DIAMETER_MAX: usize = 4096;
/// Classes larger than this are subsampled before the W1 solve in
/// [`separation_check`].
pub const SEPARATION_MAX_CLASS: usize = 1024;
/// Slack below the lower bound tolerated before flagging a violation.
pub const SEPARATION_TOL: f64 = 1e-9;

const TAG_SEPARATION: u64 = 0x5345_5041;

/// Fraction of values `<= gamma`.
pub fn margin_loss(dist: &MarginDistribution, gamma: f64) -> Result<f64> {
    margin_loss_values(&dist.values, gamma)
}

pub fn margin_loss_values(values: &[f64], gamma: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::SampleSize("empty margin distribution".into()));
    }
    Ok(values.iter().filter(|&&v| v <= gamma).count() as f64 / values.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diameter {
    pub value: f64,
    /// `false` when `value` is the centroid upper bound.
    pub exact: bool,
}

pub fn feature_diameter(features: &Matrix) -> Result<Diameter> {
    if features.rows() == 0 {
        return Err(Error::SampleSize("no points".into()));
    }
    if !features.is_finite() {
        return Err(Error::Data("non-finite features".into()));
    }
    if features.rows() <= EXACT_DIAMETER_MAX {
        Ok(Diameter {
            value: exact_diameter(features),
            exact: true,
        })
    } else {
        Ok(Diameter {
            value: centroid_diameter_bound(features),
            exact: false,
        })
    }
}

pub fn exact_diameter(features: &Matrix) -> f64 {
    let mut best = 0.0f64;
    for i in 0..features.rows() {
        for j in i + 1..features.rows() {
            best = best.max(euclidean(features.row(i), features.row(j)));
        }
    }
    best
}

/// `2 max_i |x_i - centroid|`, an upper bound on the diameter.
pub fn centroid_diameter_bound(features: &Matrix) -> f64 {
    let c = features.mean_row();
    2.0 * features.iter_rows().map(|r| euclidean(r, &c)).fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BoundVariant {
    /// Raw margins with the Jacobian-based Lipschitz estimate.
    #[default]
    Raw,
    /// Gradient-normalized margins with Lipschitz constant 1.
    Gn,
}

impl BoundVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            BoundVariant::Raw => "raw",
            BoundVariant::Gn => "gn",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassBoundTerms {
    pub prior: f64,
    pub k: usize,
    pub kvariance: f64,
    pub lipschitz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub variant: BoundVariant,
    pub gamma: f64,
    pub delta: f64,
    pub n_splits: usize,
    pub margin_loss: f64,
    pub kvariance_term: f64,
    pub diameter_term: f64,
    pub concentration_term: f64,
    pub total: f64,
    pub b_estimate: f64,
    pub b_exact: bool,
    /// Always true: `B` comes from the sample, not from the input domain.
    pub plug_in: bool,
    pub effective_m: usize,
    pub per_class: BTreeMap<usize, ClassBoundTerms>,
}

pub fn corollary_bound(
    dump: &ModelDump,
    layer_id: &str,
    gamma: f64,
    delta: f64,
    n_splits: usize,
    seed: u64,
) -> Result<BoundReport> {
    corollary_bound_with(dump, layer_id, gamma, delta, n_splits, seed, BoundVariant::Raw)
}

pub fn corollary_bound_with(
    dump: &ModelDump,
    layer_id: &str,
    gamma: f64,
    delta: f64,
    n_splits: usize,
    seed: u64,
    variant: BoundVariant,
) -> Result<BoundReport> {
    if !(gamma > 0.0) {
        return Err(Error::Domain(format!("gamma must be positive, got {gamma}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    if n_splits == 0 {
        return Err(Error::SampleSize("n_splits must be at least 1".into()));
    }
    let features = &dump.layer(layer_id)?.features;
    let margins = match variant {
        BoundVariant::Raw => raw_margins(dump)?,
        BoundVariant::Gn => gn_margins(dump, layer_id, GN_EPSILON)?,
    };
    let lips = match variant {
        BoundVariant::Raw => class_lipschitz(dump, layer_id)?,
        BoundVariant::Gn => dump.class_counts().keys().map(|&c| (c, 1.0)).collect(),
    };
    let priors = dump.priors();
    let mut per_class = BTreeMap::new();
    for (c, rows) in class_indices(&dump.labels) {
        let k = rows.len() / (2 * n_splits);
        if k == 0 {
            return Err(Error::SampleSize(format!(
                "class {c} has {} samples, fewer than 2 * n_splits = {}",
                rows.len(),
                2 * n_splits
            )));
        }
        let class_rows = features.select_rows(&rows);
        let est = k_variance_with(&class_rows, k, n_splits, seed, SplitSampling::Partitioned)
            .map_err(|e| match e {
                Error::SampleSize(msg) => Error::SampleSize(format!("class {c}: {msg}")),
                other => other,
            })?;
        per_class.insert(
            c,
            ClassBoundTerms {
                prior: priors[&c],
                k,
                kvariance: est.value,
                lipschitz: lips[&c],
            },
        );
    }

    let b = feature_diameter(features)?;
    let log_k = libm::log(2.0 * dump.num_classes as f64 / delta);
    let mut kvariance_term = 0.0;
    let mut diameter_term = 0.0;
    for t in per_class.values() {
        let w = t.prior * t.lipschitz / gamma;
        kvariance_term += w * t.kvariance;
        diameter_term += w * 2.0 * b.value * libm::sqrt(log_k / (n_splits * t.k) as f64);
    }
    let effective_m: usize = per_class.values().map(|t| t.k).sum();
    let concentration_term = concentration_term(effective_m, delta);
    let margin_loss = margin_loss_values(&margins, gamma)?;
    Ok(BoundReport {
        variant,
        gamma,
        delta,
        n_splits,
        margin_loss,
        kvariance_term,
        diameter_term,
        concentration_term,
        total: margin_loss + kvariance_term + diameter_term + concentration_term,
        b_estimate: b.value,
        b_exact: b.exact,
        plug_in: true,
        effective_m,
        per_class,
    })
}

/// `sqrt(log(2/delta) / (2m))`.
pub fn concentration_term(m: usize, delta: f64) -> f64 {
    libm::sqrt(libm::log(2.0 / delta) / (2.0 * m as f64))
}

fn class_rows(dump: &ModelDump, y: usize) -> Result<Vec<usize>> {
    let rows: Vec<usize> = (0..dump.sample_count()).filter(|&i| dump.labels[i] == y).collect();
    if rows.is_empty() {
        return Err(Error::Label(format!("class {y} has no samples")));
    }
    Ok(rows)
}

/// Symmetric hinge average
/// `(mean_y [gamma - f_y + f_y']_+ + mean_y' [gamma - f_y' + f_y]_+) / 2`.
pub fn pairwise_margin_loss(dump: &ModelDump, y: usize, y2: usize, gamma: f64) -> Result<f64> {
    for c in [y, y2] {
        if c >= dump.num_classes {
            return Err(Error::Label(format!("class {c} outside [0, {})", dump.num_classes)));
        }
    }
    let hinge = |rows: &[usize], a: usize, b: usize| {
        rows.iter()
            .map(|&i| {
                let s = dump.scores.row(i);
                (gamma - s[a] + s[b]).max(0.0)
            })
            .sum::<f64>()
            / rows.len() as f64
    };
    let ry = class_rows(dump, y)?;
    let ry2 = class_rows(dump, y2)?;
    Ok(0.5 * (hinge(&ry, y, y2) + hinge(&ry2, y2, y)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparationReport {
    pub class_pair: (usize, usize),
    /// Empirical W1 between the two class clouds.
    pub w1_distance: f64,
    /// `(gamma - pairwise_loss) / L`.
    pub lower_bound: f64,
    pub margin_gamma: f64,
    pub pairwise_loss: f64,
    pub lipschitz_l: f64,
    pub violation: bool,
    /// Rows used per class after subsampling.
    pub sample_sizes: (usize, usize),
}

pub fn separation_check(
    dump: &ModelDump,
    layer_id: &str,
    y: usize,
    y2: usize,
    gamma: f64,
    lipschitz_l: f64,
    seed: u64,
) -> Result<SeparationReport> {
    if !(lipschitz_l > 0.0) {
        return Err(Error::Domain(format!("Lipschitz constant must be positive, got {lipschitz_l}")));
    }
    let pairwise_loss = pairwise_margin_loss(dump, y, y2, gamma)?;
    let features = &dump.layer(layer_id)?.features;
    let cloud = |c: usize| -> Result<Matrix> {
        let rows = class_rows(dump, c)?;
        let pts = features.select_rows(&rows);
        if rows.len() <= SEPARATION_MAX_CLASS {
            return Ok(pts);
        }
        let mut rng = stream(seed, &[TAG_SEPARATION, c as u64]);
        let mut keep = sample(&mut rng, rows.len(), SEPARATION_MAX_CLASS).into_vec();
        keep.sort_unstable();
        Ok(pts.select_rows(&keep))
    };
    let a = cloud(y)?;
    let b = cloud(y2)?;
    let sample_sizes = (a.rows(), b.rows());
    let w1 = w1_exact(&PointCloud::uniform(a)?, &PointCloud::uniform(b)?)?.cost();
    let lower_bound = (gamma - pairwise_loss) / lipschitz_l;
    Ok(SeparationReport {
        class_pair: (y, y2),
        w1_distance: w1,
        lower_bound,
        margin_gamma: gamma,
        pairwise_loss,
        lipschitz_l,
        violation: w1 < lower_bound - SEPARATION_TOL,
        sample_sizes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::dump_from_parts;
    use crate::margins::MarginKind;
    use alloc::vec;
    use rand::Rng;

    fn dist(values: Vec<f64>) -> MarginDistribution {
        MarginDistribution {
            kind: MarginKind::Raw,
            layer_id: None,
            values,
            params: BTreeMap::new(),
            normalizer: None,
        }
    }

    #[test]
    fn margin_loss_examples() {
        let d = dist(vec![1.0, 2.0, 3.0]);
        assert_eq!(margin_loss(&d, 0.0).unwrap(), 0.0);
        assert_eq!(margin_loss(&d, 2.0).unwrap(), 2.0 / 3.0);
        assert_eq!(margin_loss(&d, f64::INFINITY).unwrap(), 1.0);
        assert!(matches!(margin_loss(&dist(vec![]), 1.0), Err(Error::SampleSize(_))));
    }

    #[test]
    fn diameter_examples() {
        assert_eq!(feature_diameter(&Matrix::column(&[4.0])).unwrap().value, 0.0);
        let d = feature_diameter(&Matrix::column(&[0.0, 3.0])).unwrap();
        assert_eq!(d, Diameter { value: 3.0, exact: true });

        let mut rng = crate::rng::stream(5, &[]);
        let x = Matrix::new(100, 3, (0..300).map(|_| rng.random::<f64>()).collect()).unwrap();
        let mut oracle = 0.0f64;
        for i in 0..100 {
            for j in 0..100 {
                let d: f64 = (0..3).map(|t| (x[(i, t)] - x[(j, t)]).powi(2)).sum();
                oracle = oracle.max(d.sqrt());
            }
        }
        assert!((feature_diameter(&x).unwrap().value - oracle).abs() < 1e-12);
        assert!(centroid_diameter_bound(&x) >= oracle);
    }

    fn toy(sep: f64, spread: f64) -> ModelDump {
        // z = -sep +/- spread for class 0, +sep +/- spread for class 1; scores (-z, z).
        let z: Vec<f64> = [-1.0, 1.0]
            .iter()
            .flat_map(|s| [s * sep - spread, s * sep + spread])
            .collect();
        let scores = Matrix::from_rows(&z.iter().map(|&v| [-v, v]).collect::<Vec<_>>()).unwrap();
        let mut d = dump_from_parts("toy", 2, vec![0, 0, 1, 1], scores, "phi", Matrix::column(&z));
        d.jac_diff_norms.insert("phi".into(), vec![2.0; 4]);
        d.grad_feature_norms.insert("phi".into(), vec![2.0; 4]);
        d
    }

    #[test]
    fn bound_terms_sum_and_limits() {
        let d = toy(1.0, 0.5);
        let r = corollary_bound(&d, "phi", 1.0, 0.1, 1, 0).unwrap();
        let sum = r.margin_loss + r.kvariance_term + r.diameter_term + r.concentration_term;
        assert!((r.total - sum).abs() < 1e-12);
        assert_eq!(r.effective_m, 2);
        assert!((r.concentration_term - (20f64.ln() / 4.0).sqrt()).abs() < 1e-12);
        assert_eq!(r.b_estimate, 3.0);
        // Class terms: Var = 1, Lip = 2, k = 1, prior 1/2.
        assert!((r.kvariance_term - 2.0).abs() < 1e-12);
        assert!((r.diameter_term - 2.0 * 2.0 * 3.0 * 40f64.ln().sqrt()).abs() < 1e-9);

        let far = corollary_bound(&d, "phi", 1e12, 0.1, 1, 0).unwrap();
        assert_eq!(far.margin_loss, 1.0);
        assert!(far.kvariance_term < 1e-9 && far.diameter_term < 1e-9);
        assert!((far.total - 1.0 - far.concentration_term).abs() < 1e-9);
    }

    #[test]
    fn point_mass_classes_have_zero_kvariance_term() {
        let d = toy(1.0, 0.0);
        let r = corollary_bound(&d, "phi", 1.5, 0.1, 1, 0).unwrap();
        assert_eq!(r.kvariance_term, 0.0);
        assert_eq!(r.margin_loss, 0.0);
    }

    #[test]
    fn bound_errors() {
        let d = toy(1.0, 0.5);
        assert!(matches!(corollary_bound(&d, "phi", 1.0, 0.1, 2, 0), Err(Error::SampleSize(_))));
        assert!(matches!(corollary_bound(&d, "phi", 0.0, 0.1, 1, 0), Err(Error::Domain(_))));
        assert!(matches!(corollary_bound(&d, "phi", 1.0, 1.0, 1, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn gn_variant_uses_unit_lipschitz() {
        let d = toy(1.0, 0.5);
        let r = corollary_bound_with(&d, "phi", 1.0, 0.1, 1, 0, BoundVariant::Gn).unwrap();
        assert!(r.per_class.values().all(|t| t.lipschitz == 1.0));
        assert!((r.kvariance_term - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kvariance_term_is_non_increasing_in_gamma() {
        let d = toy(1.0, 0.5);
        let mut last = f64::INFINITY;
        for g in [0.5, 1.0, 2.0, 4.0] {
            let r = corollary_bound(&d, "phi", g, 0.1, 1, 7).unwrap();
            assert!(r.kvariance_term <= last);
            last = r.kvariance_term;
        }
    }

    #[test]
    fn point_mass_toy_is_tight() {
        let d = toy(1.0, 0.0);
        assert_eq!(pairwise_margin_loss(&d, 0, 1, 2.0).unwrap(), 0.0);
        let r = separation_check(&d, "phi", 0, 1, 2.0, 1.0, 0).unwrap();
        assert!((r.w1_distance - 2.0).abs() < 1e-9);
        assert!((r.lower_bound - 2.0).abs() < 1e-12);
        assert!(!r.violation);
    }

    #[test]
    fn identical_classes_have_no_separation() {
        let z = [0.3, -0.2, 0.3, -0.2];
        let scores = Matrix::from_rows(&[[0.0, 0.0]; 4]).unwrap();
        let d = dump_from_parts("same", 2, vec![0, 0, 1, 1], scores, "phi", Matrix::column(&z));
        assert_eq!(pairwise_margin_loss(&d, 0, 1, 0.7).unwrap(), 0.7);
        let r = separation_check(&d, "phi", 0, 1, 0.7, 1.0, 0).unwrap();
        assert!(r.w1_distance.abs() < 1e-12);
        assert!(r.lower_bound <= 0.0);
    }

    #[test]
    fn scaling_scores_and_lipschitz_together_keeps_lower_bound() {
        let d = toy(1.0, 0.3);
        let mut d2 = d.clone();
        d2.scores = d.scores.map(|s| 2.0 * s);
        let a = separation_check(&d, "phi", 0, 1, 1.5, 1.0, 0).unwrap();
        let b = separation_check(&d2, "phi", 0, 1, 3.0, 2.0, 0).unwrap();
        assert!((a.lower_bound - b.lower_bound).abs() < 1e-12);
    }

    #[test]
    fn pairwise_loss_matches_scalar_loop() {
        let mut rng = crate::rng::stream(11, &[]);
        let m = 30;
        let labels: Vec<usize> = (0..m).map(|i| i % 3).collect();
        let scores = Matrix::new(m, 3, (0..3 * m).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let d = dump_from_parts("r", 3, labels.clone(), scores.clone(), "phi", Matrix::zeros(m, 1));
        let gamma = 0.4;
        let (mut a, mut na, mut b, mut nb) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..m {
            if labels[i] == 0 {
                a += f64::max(0.0, gamma - scores[(i, 0)] + scores[(i, 2)]);
                na += 1.0;
            } else if labels[i] == 2 {
                b += f64::max(0.0, gamma - scores[(i, 2)] + scores[(i, 0)]);
                nb += 1.0;
            }
        }
        let oracle = 0.5 * (a / na + b / nb);
        assert!((pairwise_margin_loss(&d, 0, 2, gamma).unwrap() - oracle).abs() < 1e-12);
        assert!(matches!(pairwise_margin_loss(&d, 0, 3, gamma), Err(Error::Label(_))));
    }
}
