//! Per-sample margins and their normalized variants.
//!
//! | kind    | value                                                   |
//! |---------|---------------------------------------------------------|
//! | `raw`   | `f_y - max_{y' != y} f_y'`                              |
//! | `gn`    | raw / (`|grad_phi rho|` + eps)                          |
//! | `kv`    | raw / `sum_c p_c Var_c Lip_c`                           |
//! | `kv_gn` | gn / `sum_c p_c Var_c`                                  |
//! | `tv_gn` | gn / `sqrt(Var |phi|^2)`                                |
//! | `sn`    | raw / product of layer spectral norms                   |
//!
//! Gradient and Jacobian norms are read from the dump; nothing here
//! differentiates.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::ingest::{class_indices, ModelDump};
use crate::kvariance::{class_k_variances, KVarianceConfig};
use crate::matrix::{norm, Matrix};

/// Default floor added to gradient norms.
pub const GN_EPSILON: f64 = 1e-6;
/// Tolerance on the class priors summing to one.
pub const PRIOR_SUM_TOL: f64 = 1e-9;
pub const SPECTRAL_TOL: f64 = 1e-6;
pub const SPECTRAL_MAX_ITER: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MarginKind {
    Raw,
    Gn,
    Kv,
    KvGn,
    Sn,
    TvGn,
}

impl MarginKind {
    pub const ALL: [MarginKind; 6] = [
        MarginKind::Raw,
        MarginKind::Gn,
        MarginKind::Kv,
        MarginKind::KvGn,
        MarginKind::Sn,
        MarginKind::TvGn,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MarginKind::Raw => "raw",
            MarginKind::Gn => "gn",
            MarginKind::Kv => "kv",
            MarginKind::KvGn => "kv_gn",
            MarginKind::Sn => "sn",
            MarginKind::TvGn => "tv_gn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Domain(format!("unknown margin kind `{s}`")))
    }

    /// Whether the kind depends on a feature layer.
    pub fn needs_layer(&self) -> bool {
        !matches!(self, MarginKind::Raw | MarginKind::Sn)
    }
}

impl fmt::Display for MarginKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizerReport {
    pub per_class_kvariance: BTreeMap<usize, f64>,
    pub per_class_lipschitz: BTreeMap<usize, f64>,
    pub class_priors: BTreeMap<usize, f64>,
    pub denominator: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginDistribution {
    pub kind: MarginKind,
    /// `None` for kinds computed from scores alone.
    pub layer_id: Option<String>,
    pub values: Vec<f64>,
    pub params: BTreeMap<String, f64>,
    pub normalizer: Option<NormalizerReport>,
}

impl MarginDistribution {
    fn new(kind: MarginKind, layer_id: Option<&str>, values: Vec<f64>) -> Self {
        Self {
            kind,
            layer_id: layer_id.map(ToString::to_string),
            values,
            params: BTreeMap::new(),
            normalizer: None,
        }
    }

    fn param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Best competing class: `argmax_{j != y} scores[j]`, smallest index on ties.
pub fn runner_up(scores: &[f64], y: usize) -> Result<usize> {
    check_scores(scores, y)?;
    let mut best = if y == 0 { 1 } else { 0 };
    for (j, &s) in scores.iter().enumerate() {
        if j != y && s > scores[best] {
            best = j;
        }
    }
    Ok(best)
}

fn check_scores(scores: &[f64], y: usize) -> Result<()> {
    if scores.len() < 2 {
        return Err(Error::ClassCount(scores.len()));
    }
    if y >= scores.len() {
        return Err(Error::Label(format!("label {y} outside [0, {})", scores.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Data("non-finite score".into()));
    }
    Ok(())
}

/// `f_y - max_{y' != y} f_y'`. Zero or negative means misclassified.
pub fn margin(scores: &[f64], y: usize) -> Result<f64> {
    let j = runner_up(scores, y)?;
    Ok(scores[y] - scores[j])
}

pub fn gn_margin(raw_margin: f64, grad_norm: f64, epsilon: f64) -> Result<f64> {
    if !(grad_norm >= 0.0) {
        return Err(Error::Data(format!("gradient norm {grad_norm} is negative")));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(raw_margin / (grad_norm + epsilon))
}

/// Largest per-sample Jacobian-difference norm of one class.
pub fn lipschitz_hat(jac_diff_norms: &[f64]) -> Result<f64> {
    if jac_diff_norms.is_empty() {
        return Err(Error::SampleSize("no samples for the Lipschitz estimate".into()));
    }
    if jac_diff_norms.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(Error::Data("Jacobian norms must be finite and nonnegative".into()));
    }
    Ok(jac_diff_norms.iter().copied().fold(0.0, f64::max))
}

/// `sum_c p_c kvar_c lip_c`.
pub fn normalizer(
    kvars: &BTreeMap<usize, f64>,
    lips: &BTreeMap<usize, f64>,
    priors: &BTreeMap<usize, f64>,
) -> Result<NormalizerReport> {
    if !kvars.keys().eq(lips.keys()) || !kvars.keys().eq(priors.keys()) {
        return Err(Error::schema(
            "normalizer",
            "k-variance, Lipschitz and prior maps cover different classes",
        ));
    }
    let total: f64 = priors.values().sum();
    if priors.values().any(|p| !(0.0..=1.0).contains(p)) || (total - 1.0).abs() > PRIOR_SUM_TOL {
        return Err(Error::schema("class_priors", format!("not a distribution (sum {total})")));
    }
    for (name, map) in [("per_class_kvariance", kvars), ("per_class_lipschitz", lips)] {
        if map.values().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::Data(format!("`{name}` must be finite and nonnegative")));
        }
    }
    let denominator: f64 = priors.iter().map(|(c, p)| p * kvars[c] * lips[c]).sum();
    if denominator == 0.0 {
        return Err(Error::DegenerateNormalizer(
            "sum of prior * k-variance * Lipschitz is zero".into(),
        ));
    }
    Ok(NormalizerReport {
        per_class_kvariance: kvars.clone(),
        per_class_lipschitz: lips.clone(),
        class_priors: priors.clone(),
        denominator,
    })
}

pub fn raw_margins(dump: &ModelDump) -> Result<Vec<f64>> {
    if dump.scores.rows() != dump.sample_count() {
        return Err(Error::schema("scores", "row count differs from label count"));
    }
    dump.labels
        .iter()
        .enumerate()
        .map(|(i, &y)| margin(dump.scores.row(i), y))
        .collect()
}

pub fn raw_margin_distribution(dump: &ModelDump) -> Result<MarginDistribution> {
    Ok(MarginDistribution::new(MarginKind::Raw, None, raw_margins(dump)?))
}

pub fn gn_margins(dump: &ModelDump, layer_id: &str, epsilon: f64) -> Result<Vec<f64>> {
    let grads = ModelDump::layer_vector(&dump.grad_feature_norms, "grad_feature_norms", layer_id)?;
    let raw = raw_margins(dump)?;
    if grads.len() != raw.len() {
        return Err(Error::schema(
            "grad_feature_norms",
            format!("length {}, expected {}", grads.len(), raw.len()),
        ));
    }
    raw.iter()
        .zip(grads)
        .map(|(&r, &g)| gn_margin(r, g, epsilon))
        .collect()
}

pub fn gn_margin_distribution(
    dump: &ModelDump,
    layer_id: &str,
    epsilon: f64,
) -> Result<MarginDistribution> {
    let values = gn_margins(dump, layer_id, epsilon)?;
    Ok(MarginDistribution::new(MarginKind::Gn, Some(layer_id), values).param("epsilon", epsilon))
}

/// Per-class `Lip` estimates from the dump's Jacobian-difference norms.
pub fn class_lipschitz(dump: &ModelDump, layer_id: &str) -> Result<BTreeMap<usize, f64>> {
    let norms = ModelDump::layer_vector(&dump.jac_diff_norms, "jac_diff_norms", layer_id)?;
    if norms.len() != dump.sample_count() {
        return Err(Error::schema("jac_diff_norms", "length differs from label count"));
    }
    class_indices(&dump.labels)
        .into_iter()
        .map(|(c, rows)| {
            let v: Vec<f64> = rows.iter().map(|&i| norms[i]).collect();
            lipschitz_hat(&v).map(|l| (c, l))
        })
        .collect()
}

fn kv_params(dist: MarginDistribution, seed: u64, config: &KVarianceConfig) -> MarginDistribution {
    let den = dist.normalizer.as_ref().map_or(f64::NAN, |n| n.denominator);
    let dist = dist
        .param("denominator", den)
        .param("seed", seed as f64)
        .param("n_splits", config.repeats as f64);
    match config.k {
        Some(k) => dist.param("k", k as f64),
        None => dist,
    }
}

pub fn kv_margin_distribution(dump: &ModelDump, layer_id: &str, seed: u64) -> Result<MarginDistribution> {
    kv_margin_distribution_with(dump, layer_id, seed, &KVarianceConfig::default())
}

pub fn kv_margin_distribution_with(
    dump: &ModelDump,
    layer_id: &str,
    seed: u64,
    config: &KVarianceConfig,
) -> Result<MarginDistribution> {
    let raw = raw_margins(dump)?;
    let lips = class_lipschitz(dump, layer_id)?;
    let kvars = class_kvalues(dump, layer_id, seed, config)?;
    let report = normalizer(&kvars, &lips, &dump.priors())?;
    let values = raw.iter().map(|r| r / report.denominator).collect();
    let mut dist = MarginDistribution::new(MarginKind::Kv, Some(layer_id), values);
    dist.normalizer = Some(report);
    Ok(kv_params(dist, seed, config))
}

pub fn kv_gn_margin_distribution(
    dump: &ModelDump,
    layer_id: &str,
    seed: u64,
) -> Result<MarginDistribution> {
    kv_gn_margin_distribution_with(dump, layer_id, seed, &KVarianceConfig::default(), GN_EPSILON)
}

pub fn kv_gn_margin_distribution_with(
    dump: &ModelDump,
    layer_id: &str,
    seed: u64,
    config: &KVarianceConfig,
    epsilon: f64,
) -> Result<MarginDistribution> {
    let gn = gn_margins(dump, layer_id, epsilon)?;
    let kvars = class_kvalues(dump, layer_id, seed, config)?;
    let lips = kvars.keys().map(|&c| (c, 1.0)).collect();
    let report = normalizer(&kvars, &lips, &dump.priors())?;
    let values = gn.iter().map(|r| r / report.denominator).collect();
    let mut dist = MarginDistribution::new(MarginKind::KvGn, Some(layer_id), values);
    dist.normalizer = Some(report);
    Ok(kv_params(dist, seed, config).param("epsilon", epsilon))
}

fn class_kvalues(
    dump: &ModelDump,
    layer_id: &str,
    seed: u64,
    config: &KVarianceConfig,
) -> Result<BTreeMap<usize, f64>> {
    Ok(class_k_variances(dump, layer_id, seed, config)?
        .into_iter()
        .map(|(c, e)| (c, e.value))
        .collect())
}

/// Population variance (`1/m`) of the squared feature norms.
pub fn squared_norm_variance(features: &Matrix) -> f64 {
    let sq: Vec<f64> = features.iter_rows().map(|r| r.iter().map(|x| x * x).sum()).collect();
    let m = sq.len() as f64;
    let mean = sq.iter().sum::<f64>() / m;
    sq.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / m
}

pub fn tv_gn_margin_distribution(dump: &ModelDump, layer_id: &str) -> Result<MarginDistribution> {
    tv_gn_margin_distribution_with(dump, layer_id, GN_EPSILON)
}

pub fn tv_gn_margin_distribution_with(
    dump: &ModelDump,
    layer_id: &str,
    epsilon: f64,
) -> Result<MarginDistribution> {
    let gn = gn_margins(dump, layer_id, epsilon)?;
    let var = squared_norm_variance(&dump.layer(layer_id)?.features);
    if !(var > 0.0) {
        return Err(Error::DegenerateNormalizer(
            "squared feature norms have zero variance".into(),
        ));
    }
    let den = libm::sqrt(var);
    let values = gn.iter().map(|g| g / den).collect();
    Ok(MarginDistribution::new(MarginKind::TvGn, Some(layer_id), values)
        .param("denominator", den)
        .param("epsilon", epsilon))
}

fn mat_vec(w: &Matrix, v: &[f64]) -> Vec<f64> {
    w.iter_rows()
        .map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn mat_t_vec(w: &Matrix, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (r, &ui) in w.iter_rows().zip(u) {
        for (o, a) in out.iter_mut().zip(r) {
            *o += a * ui;
        }
    }
    out
}

/// Largest singular value of `w` by power iteration on `w^T w`.
pub fn spectral_norm(w: &Matrix) -> Result<f64> {
    if !w.is_finite() {
        return Err(Error::Data("non-finite weight matrix".into()));
    }
    let n = w.cols();
    if n == 0 || w.rows() == 0 {
        return Ok(0.0);
    }
    // Fixed irregular start; if it happens to lie in the null space of w,
    // fall back to the coordinate axes.
    let golden = 0.618_033_988_749_894_9;
    let irregular: Vec<f64> = (0..n).map(|i| 0.5 + (golden * (i + 1) as f64) % 1.0).collect();
    let starts = core::iter::once(irregular).chain((0..n).map(|j| {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        e
    }));
    for start in starts {
        if let Some(sigma) = power_iterate(w, start) {
            return Ok(sigma);
        }
    }
    Ok(0.0)
}

fn power_iterate(w: &Matrix, mut v: Vec<f64>) -> Option<f64> {
    let scale = norm(&v);
    v.iter_mut().for_each(|x| *x /= scale);
    let mut lambda = 0.0;
    for _ in 0..SPECTRAL_MAX_ITER {
        let next = mat_t_vec(w, &mat_vec(w, &v));
        let len = norm(&next);
        if len == 0.0 {
            return (lambda > 0.0).then(|| libm::sqrt(lambda));
        }
        // Rayleigh quotient and residual of the current unit vector.
        lambda = next.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
        let residual = libm::sqrt(
            next.iter()
                .zip(&v)
                .map(|(a, b)| (a - lambda * b) * (a - lambda * b))
                .sum::<f64>(),
        );
        v = next.into_iter().map(|x| x / len).collect();
        if residual <= SPECTRAL_TOL * lambda.abs() {
            break;
        }
    }
    Some(libm::sqrt(lambda.max(0.0)))
}

/// Product of per-layer spectral norms.
pub fn spectral_complexity(weights: &[Matrix]) -> Result<f64> {
    weights.iter().try_fold(1.0, |acc, w| Ok(acc * spectral_norm(w)?))
}

/// Product of the dump's `weight_spectral_norms`.
pub fn dump_spectral_complexity(dump: &ModelDump) -> Result<f64> {
    let norms = dump
        .weight_spectral_norms
        .as_ref()
        .ok_or_else(|| Error::schema("weight_spectral_norms", "absent from dump"))?;
    Ok(norms.iter().product())
}

pub fn sn_margin_distribution(dump: &ModelDump, spectral_complexity: f64) -> Result<MarginDistribution> {
    if !(spectral_complexity > 0.0) || !spectral_complexity.is_finite() {
        return Err(Error::DegenerateNormalizer(format!(
            "spectral complexity must be positive, got {spectral_complexity}"
        )));
    }
    let values = raw_margins(dump)?.iter().map(|r| r / spectral_complexity).collect();
    Ok(MarginDistribution::new(MarginKind::Sn, None, values)
        .param("spectral_complexity", spectral_complexity))
}

/// Fraction of values inside `[lo, hi]`.
pub fn fraction_within(values: &[f64], lo: f64, hi: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::SampleSize("no values".into()));
    }
    let inside = values.iter().filter(|v| (lo..=hi).contains(*v)).count();
    Ok(inside as f64 / values.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Statistic {
    #[default]
    Median,
    Mean,
    /// Lower-interpolated quantile: element `floor(q (n - 1))` of the sorted
    /// values.
    Quantile(f64),
}

impl Statistic {
    /// Parses `median`, `mean` or `quantile:<q>` / `q<q>`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "median" => Ok(Statistic::Median),
            "mean" => Ok(Statistic::Mean),
            _ => {
                let q = s
                    .strip_prefix("quantile:")
                    .or_else(|| s.strip_prefix('q'))
                    .and_then(|q| q.parse::<f64>().ok())
                    .ok_or_else(|| Error::Domain(format!("unknown statistic `{s}`")))?;
                if !(0.0..=1.0).contains(&q) {
                    return Err(Error::Domain(format!("quantile {q} outside [0, 1]")));
                }
                Ok(Statistic::Quantile(q))
            }
        }
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Statistic::Median => f.write_str("median"),
            Statistic::Mean => f.write_str("mean"),
            Statistic::Quantile(q) => write!(f, "quantile:{q}"),
        }
    }
}

/// Median averages the two middle values on even lengths.
pub fn summarize_values(values: &[f64], statistic: Statistic) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::SampleSize("cannot summarize an empty distribution".into()));
    }
    if statistic == Statistic::Mean {
        return Ok(values.iter().sum::<f64>() / values.len() as f64);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Ok(match statistic {
        Statistic::Median if n % 2 == 1 => sorted[n / 2],
        Statistic::Median => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
        Statistic::Quantile(q) => {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::Domain(format!("quantile {q} outside [0, 1]")));
            }
            sorted[libm::floor(q * (n - 1) as f64) as usize]
        }
        Statistic::Mean => unreachable!(),
    })
}

pub fn summarize(dist: &MarginDistribution, statistic: Statistic) -> Result<f64> {
    summarize_values(&dist.values, statistic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::dump_from_parts;
    use approx::assert_relative_eq;

    #[test]
    fn margin_examples() {
        assert_eq!(margin(&[2.0, 0.5, 1.0], 0).unwrap(), 1.0);
        assert_eq!(margin(&[0.5, 0.5], 0).unwrap(), 0.0);
        assert_eq!(margin(&[0.0, 3.0, 1.0], 0).unwrap(), -3.0);
        assert!(matches!(margin(&[1.0], 0), Err(Error::ClassCount(1))));
        assert!(matches!(margin(&[1.0, 2.0], 2), Err(Error::Label(_))));
        assert!(matches!(margin(&[f64::NAN, 2.0], 0), Err(Error::Data(_))));
    }

    #[test]
    fn runner_up_breaks_ties_by_smallest_index() {
        assert_eq!(runner_up(&[1.0, 5.0, 5.0, 0.0], 3).unwrap(), 1);
        assert_eq!(runner_up(&[9.0, 2.0, 2.0], 0).unwrap(), 1);
        assert_eq!(runner_up(&[3.0, 3.0, 3.0], 1).unwrap(), 0);
    }

    #[test]
    fn gn_examples() {
        assert_relative_eq!(gn_margin(1.0, 4.0, 1e-6).unwrap(), 1.0 / 4.000001, max_relative = 1e-15);
        assert_relative_eq!(gn_margin(1.0, 0.0, 1e-6).unwrap(), 1e6, max_relative = 1e-12);
        assert_relative_eq!(gn_margin(-2.0, 1.0, 1e-6).unwrap(), -2.0, max_relative = 1e-5);
        assert!(matches!(gn_margin(1.0, -0.1, 1e-6), Err(Error::Data(_))));
    }

    #[test]
    fn lipschitz_examples() {
        assert_eq!(lipschitz_hat(&[1.0, 3.0, 2.0]).unwrap(), 3.0);
        assert_eq!(lipschitz_hat(&[0.0]).unwrap(), 0.0);
        assert!(matches!(lipschitz_hat(&[]), Err(Error::SampleSize(_))));
    }

    fn map(v: &[f64]) -> BTreeMap<usize, f64> {
        v.iter().copied().enumerate().collect()
    }

    #[test]
    fn normalizer_examples() {
        let r = normalizer(&map(&[2.0, 4.0]), &map(&[1.0, 0.5]), &map(&[0.5, 0.5])).unwrap();
        assert_eq!(r.denominator, 2.0);
        let r = normalizer(&map(&[3.0, 3.0, 3.0]), &map(&[1.0; 3]), &map(&[0.2, 0.3, 0.5])).unwrap();
        assert_relative_eq!(r.denominator, 3.0, max_relative = 1e-15);
        let r = normalizer(&map(&[0.7]), &map(&[2.0]), &map(&[1.0])).unwrap();
        assert_relative_eq!(r.denominator, 1.4);
        assert!(matches!(
            normalizer(&map(&[1.0, 1.0]), &map(&[1.0]), &map(&[0.5, 0.5])),
            Err(Error::Schema { .. })
        ));
        assert!(matches!(
            normalizer(&map(&[1.0, 1.0]), &map(&[1.0, 1.0]), &map(&[0.6, 0.6])),
            Err(Error::Schema { .. })
        ));
        assert!(matches!(
            normalizer(&map(&[0.0, 0.0]), &map(&[1.0, 1.0]), &map(&[0.5, 0.5])),
            Err(Error::DegenerateNormalizer(_))
        ));
    }

    /// Class 0 at {-1.5, -0.5}, class 1 at {0.5, 1.5}, scores `(-z, z)`.
    fn linear_toy() -> ModelDump {
        let z = [-1.5, -0.5, 0.5, 1.5];
        let scores = Matrix::from_rows(&z.iter().map(|&x| [-x, x]).collect::<Vec<_>>()).unwrap();
        let mut d = dump_from_parts("toy", 2, vec![0, 0, 1, 1], scores, "phi", Matrix::column(&z));
        d.jac_diff_norms.insert("phi".into(), vec![2.0; 4]);
        d.grad_feature_norms.insert("phi".into(), vec![2.0; 4]);
        d
    }

    #[test]
    fn kv_pipeline_on_linear_toy() {
        let d = linear_toy();
        let raw = raw_margins(&d).unwrap();
        assert_eq!(raw, vec![3.0, 1.0, 1.0, 3.0]);
        let kv = kv_margin_distribution(&d, "phi", 0).unwrap();
        let n = kv.normalizer.as_ref().unwrap();
        assert_eq!(n.per_class_kvariance, map(&[1.0, 1.0]));
        assert_eq!(n.denominator, 2.0);
        assert_eq!(kv.values, vec![1.5, 0.5, 0.5, 1.5]);
        assert_eq!(summarize(&kv, Statistic::Median).unwrap(), 1.0);
        assert_eq!(kv.params["denominator"], 2.0);

        let kvgn = kv_gn_margin_distribution(&d, "phi", 0).unwrap();
        assert_eq!(kvgn.normalizer.as_ref().unwrap().denominator, 1.0);
        let expected = 2.0 / (2.0 + 1e-6);
        assert!((summarize(&kvgn, Statistic::Median).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn unit_gradients_make_kv_gn_match_unit_lipschitz_kv() {
        let mut d = linear_toy();
        d.grad_feature_norms.insert("phi".into(), vec![1.0 - 1e-6; 4]);
        d.jac_diff_norms.insert("phi".into(), vec![1.0; 4]);
        let kv = kv_margin_distribution(&d, "phi", 3).unwrap();
        let kvgn = kv_gn_margin_distribution(&d, "phi", 3).unwrap();
        for (a, b) in kv.values.iter().zip(&kvgn.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn point_mass_classes_are_degenerate() {
        let mut d = linear_toy();
        d.layers[0].features = Matrix::column(&[-1.0, -1.0, 1.0, 1.0]);
        assert!(matches!(
            kv_margin_distribution(&d, "phi", 0),
            Err(Error::DegenerateNormalizer(_))
        ));
        assert!(matches!(
            tv_gn_margin_distribution(&d, "phi"),
            Err(Error::DegenerateNormalizer(_))
        ));
    }

    #[test]
    fn missing_inputs_are_schema_errors() {
        let mut d = linear_toy();
        d.jac_diff_norms.clear();
        assert!(matches!(kv_margin_distribution(&d, "phi", 0), Err(Error::Schema { .. })));
        assert!(matches!(gn_margin_distribution(&d, "nope", 1e-6), Err(Error::Schema { .. })));
    }

    #[test]
    fn tv_gn_against_two_pass_variance() {
        let feats = Matrix::from_rows(&[[1.0, 2.0], [0.5, -1.0], [3.0, 0.0], [-2.0, 2.0]]).unwrap();
        let sq = [5.0, 1.25, 9.0, 8.0];
        let mean = sq.iter().sum::<f64>() / 4.0;
        let var = sq.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / 4.0;
        assert!((squared_norm_variance(&feats) - var).abs() < 1e-9);

        let mut d = linear_toy();
        d.layers[0].features = feats.clone();
        let tv = tv_gn_margin_distribution(&d, "phi").unwrap();
        let gn = gn_margins(&d, "phi", GN_EPSILON).unwrap();
        for (t, g) in tv.values.iter().zip(&gn) {
            assert!((t - g / var.sqrt()).abs() < 1e-9);
        }
        d.layers[0].features = feats.map(|x| 3.0 * x);
        let scaled = tv_gn_margin_distribution(&d, "phi").unwrap();
        assert_relative_eq!(scaled.params["denominator"], 9.0 * tv.params["denominator"], max_relative = 1e-12);
    }

    #[test]
    fn spectral_examples() {
        let eye = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_relative_eq!(spectral_norm(&eye).unwrap(), 1.0, max_relative = 1e-12);
        let d31 = Matrix::from_rows(&[[3.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_relative_eq!(spectral_norm(&d31).unwrap(), 3.0, max_relative = 1e-9);
        assert_eq!(spectral_norm(&Matrix::zeros(2, 3)).unwrap(), 0.0);
        let d2 = Matrix::from_rows(&[[2.0]]).unwrap();
        let d3 = Matrix::from_rows(&[[3.0]]).unwrap();
        assert_relative_eq!(spectral_complexity(&[d2, d3]).unwrap(), 6.0, max_relative = 1e-12);
        assert!(matches!(
            spectral_norm(&Matrix::from_rows(&[[f64::INFINITY]]).unwrap()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn spectral_norm_matches_svd() {
        use rand::Rng;
        let mut rng = crate::rng::stream(17, &[]);
        for _ in 0..20 {
            let data: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w = Matrix::new(5, 4, data.clone()).unwrap();
            let oracle = nalgebra::DMatrix::from_row_slice(5, 4, &data).singular_values().max();
            assert!((spectral_norm(&w).unwrap() - oracle).abs() < 1e-5);
        }
    }

    #[test]
    fn sn_examples() {
        let d = linear_toy();
        assert_eq!(sn_margin_distribution(&d, 1.0).unwrap().values, raw_margins(&d).unwrap());
        let half = sn_margin_distribution(&d, 2.0).unwrap().values;
        assert_eq!(half, vec![1.5, 0.5, 0.5, 1.5]);
        assert!(matches!(sn_margin_distribution(&d, 0.0), Err(Error::DegenerateNormalizer(_))));
    }

    #[test]
    fn summary_examples() {
        let v = [3.0, 1.0, 2.0];
        assert_eq!(summarize_values(&v, Statistic::Median).unwrap(), 2.0);
        assert_eq!(summarize_values(&v, Statistic::Mean).unwrap(), 2.0);
        assert_eq!(summarize_values(&v, Statistic::Quantile(0.5)).unwrap(), 2.0);
        assert_eq!(summarize_values(&[1.0, 2.0, 3.0, 4.0], Statistic::Median).unwrap(), 2.5);
        assert_eq!(summarize_values(&[1.0, 2.0, 3.0, 4.0], Statistic::Quantile(0.5)).unwrap(), 2.0);
        assert_eq!(summarize_values(&[1.0, 2.0, 3.0, 4.0], Statistic::Quantile(1.0)).unwrap(), 4.0);
        assert!(matches!(summarize_values(&[], Statistic::Median), Err(Error::SampleSize(_))));
        assert_eq!(Statistic::parse("quantile:0.25").unwrap(), Statistic::Quantile(0.25));
        assert_eq!(Statistic::parse("q0.9").unwrap(), Statistic::Quantile(0.9));
        assert!(Statistic::parse("mode").is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in MarginKind::ALL {
            assert_eq!(MarginKind::parse(k.as_str()).unwrap(), k);
        }
    }
}
