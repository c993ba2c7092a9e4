//! Synthetic measures for the concentration checks, log-log rate fits, and
//! linear-scorer model dumps with closed-form margins and gradients.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ingest::{class_indices, FeatureLayer, GradientReference, ModelDump, FORMAT_VERSION};
use crate::margins::{runner_up, GN_EPSILON};
use crate::matrix::{euclidean, norm, Matrix};
use crate::rng::{derive_seed, stream, StreamRng};
use crate::transport::w1_uniform;

/// Rejected center draws tolerated before giving up on a packing.
pub const MAX_CENTER_REJECTIONS: usize = 10_000;

const TAG_CENTERS: u64 = 0x4345_4e54;
const TAG_SAMPLES: u64 = 0x5341_4d50;
const TAG_ROTATION: u64 = 0x524f_5441;
const TAG_POPULATION: u64 = 0x504f_5055;
const TAG_DUMP: u64 = 0x4455_4d50;

/// A distribution that can be sampled from a seeded stream.
pub trait Measure {
    fn dim(&self) -> usize;
    fn sample(&self, m: usize, rng: &mut StreamRng) -> Matrix;
}

fn gaussian_vec(d: usize, rng: &mut StreamRng) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

/// Uniform point in the `d`-ball of the given radius.
fn ball_point(d: usize, radius: f64, rng: &mut StreamRng) -> Vec<f64> {
    let mut dir = gaussian_vec(d, rng);
    let mut len = norm(&dir);
    while len == 0.0 {
        dir = gaussian_vec(d, rng);
        len = norm(&dir);
    }
    let r = radius * libm::pow(rng.random::<f64>(), 1.0 / d as f64);
    dir.iter().map(|x| x * r / len).collect()
}

/// Uniform mixture of balls of radius `delta` around well-separated centers in
/// the unit cube.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterableMeasure {
    pub centers: Matrix,
    pub delta: f64,
}

impl ClusterableMeasure {
    /// Draws `n_clusters` centers uniformly in `[0,1]^dim`, rejecting any
    /// candidate closer than `4 delta` to an accepted one.
    pub fn new(n_clusters: usize, delta: f64, dim: usize, seed: u64) -> Result<Self> {
        if n_clusters == 0 || dim == 0 {
            return Err(Error::Domain(format!(
                "need n_clusters >= 1 and dim >= 1, got {n_clusters} and {dim}"
            )));
        }
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::Domain(format!("delta must be positive, got {delta}")));
        }
        let mut rng = stream(seed, &[TAG_CENTERS]);
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(n_clusters);
        let mut rejections = 0;
        while centers.len() < n_clusters {
            let c: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
            if centers.iter().all(|o| euclidean(o, &c) >= 4.0 * delta) {
                centers.push(c);
            } else {
                rejections += 1;
                if rejections > MAX_CENTER_REJECTIONS {
                    return Err(Error::Geometry(format!(
                        "could not place {n_clusters} centers at distance {} in [0,1]^{dim}",
                        4.0 * delta
                    )));
                }
            }
        }
        Ok(Self {
            centers: Matrix::from_rows(&centers)?,
            delta,
        })
    }

    pub fn n_clusters(&self) -> usize {
        self.centers.rows()
    }

    /// Samples with the index of the center each one was drawn around.
    pub fn sample_labeled(&self, m: usize, rng: &mut StreamRng) -> (Matrix, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(m * d);
        let mut owners = Vec::with_capacity(m);
        for _ in 0..m {
            let c = rng.random_range(0..self.n_clusters());
            let offset = ball_point(d, self.delta, rng);
            data.extend(self.centers.row(c).iter().zip(&offset).map(|(a, b)| a + b));
            owners.push(c);
        }
        (Matrix::new(m, d, data).expect("consistent shape"), owners)
    }
}

impl Measure for ClusterableMeasure {
    fn dim(&self) -> usize {
        self.centers.cols()
    }

    fn sample(&self, m: usize, rng: &mut StreamRng) -> Matrix {
        self.sample_labeled(m, rng).0
    }
}

/// `m` samples of a fresh clusterable measure built from `seed`.
pub fn gen_clusterable(n_clusters: usize, delta: f64, dim: usize, m: usize, seed: u64) -> Result<Matrix> {
    let measure = ClusterableMeasure::new(n_clusters, delta, dim, seed)?;
    Ok(measure.sample(m, &mut stream(seed, &[TAG_SAMPLES])))
}

/// Uniform measure on `[0,1]^intrinsic` embedded isometrically in
/// `R^ambient` by a random orthonormal frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LowDimMeasure {
    /// `ambient x intrinsic`, orthonormal columns.
    pub frame: Matrix,
}

impl LowDimMeasure {
    pub fn new(ambient_dim: usize, intrinsic_dim: usize, seed: u64) -> Result<Self> {
        if intrinsic_dim == 0 || intrinsic_dim > ambient_dim {
            return Err(Error::Domain(format!(
                "need 1 <= intrinsic_dim <= ambient_dim, got {intrinsic_dim} and {ambient_dim}"
            )));
        }
        let mut rng = stream(seed, &[TAG_ROTATION]);
        Ok(Self {
            frame: orthonormal_frame(ambient_dim, intrinsic_dim, &mut rng),
        })
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.frame.cols()
    }

    /// Maps intrinsic coordinates into the ambient space.
    pub fn embed(&self, u: &Matrix) -> Matrix {
        let (n, d) = (self.frame.rows(), self.frame.cols());
        let mut out = Matrix::zeros(u.rows(), n);
        for (i, row) in u.iter_rows().enumerate() {
            for a in 0..n {
                out[(i, a)] = (0..d).map(|j| self.frame[(a, j)] * row[j]).sum();
            }
        }
        out
    }
}

impl Measure for LowDimMeasure {
    fn dim(&self) -> usize {
        self.frame.rows()
    }

    fn sample(&self, m: usize, rng: &mut StreamRng) -> Matrix {
        let d = self.intrinsic_dim();
        let u = Matrix::new(m, d, (0..m * d).map(|_| rng.random::<f64>()).collect())
            .expect("consistent shape");
        self.embed(&u)
    }
}

/// Gram-Schmidt (applied twice for stability) on a Gaussian matrix.
fn orthonormal_frame(n: usize, d: usize, rng: &mut StreamRng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v = gaussian_vec(n, rng);
        for _ in 0..2 {
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let len = norm(&v);
        if len > 1e-8 {
            cols.push(v.into_iter().map(|x| x / len).collect());
        }
    }
    let mut frame = Matrix::zeros(n, d);
    for (j, c) in cols.iter().enumerate() {
        for (i, &x) in c.iter().enumerate() {
            frame[(i, j)] = x;
        }
    }
    frame
}

pub fn gen_low_dim(ambient_dim: usize, intrinsic_dim: usize, m: usize, seed: u64) -> Result<Matrix> {
    let measure = LowDimMeasure::new(ambient_dim, intrinsic_dim, seed)?;
    Ok(measure.sample(m, &mut stream(seed, &[TAG_SAMPLES])))
}

/// One draw of `W1(mu_S, mu_S')` for two fresh independent `m`-samples.
/// Repeat `j` uses its own derived stream, so repeats can run in any order.
pub fn population_split_w1(measure: &impl Measure, m: usize, seed: u64, j: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::SampleSize("m must be at least 1".into()));
    }
    let mut rng = stream(seed, &[TAG_POPULATION, m as u64, j as u64]);
    let a = measure.sample(m, &mut rng);
    let b = measure.sample(m, &mut rng);
    w1_uniform(&a, &b)
}

/// Monte-Carlo `Var_m(mu)` averaged over `repeats`.
pub fn population_k_variance(measure: &impl Measure, m: usize, repeats: usize, seed: u64) -> Result<f64> {
    if repeats == 0 {
        return Err(Error::SampleSize("repeats must be at least 1".into()));
    }
    let mut total = 0.0;
    for j in 0..repeats {
        total += population_split_w1(measure, m, seed, j)?;
    }
    Ok(total / repeats as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateSeries {
    pub sizes: Vec<usize>,
    pub values: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
}

/// Least-squares line through `(log m, log value)`.
pub fn rate_fit(sizes: &[usize], values: &[f64]) -> Result<RateSeries> {
    if sizes.len() != values.len() {
        return Err(Error::Dimension {
            expected: sizes.len(),
            found: values.len(),
        });
    }
    if sizes.len() < 3 {
        return Err(Error::SampleSize(format!("need at least 3 points, got {}", sizes.len())));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) || sizes[0] == 0 {
        return Err(Error::Domain("sizes must be positive and strictly increasing".into()));
    }
    if let Some(v) = values.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("rate fit needs positive values, got {v}")));
    }
    let xs: Vec<f64> = sizes.iter().map(|&m| libm::log(m as f64)).collect();
    let ys: Vec<f64> = values.iter().map(|&v| libm::log(v)).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    Ok(RateSeries {
        sizes: sizes.to_vec(),
        values: values.to_vec(),
        slope,
        intercept: my - slope * mx,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClassShape {
    /// Isotropic Gaussian around the center.
    Gaussian { sigma: f64 },
    /// Axis-aligned Gaussian with one standard deviation per coordinate.
    Diagonal { sigmas: Vec<f64> },
    /// Uniform in a ball around the center.
    Ball { radius: f64 },
    /// Fixed offsets from the center, one row per sample; `count` must match.
    Points(Matrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSpec {
    pub count: usize,
    pub center: Vec<f64>,
    pub shape: ClassShape,
}

/// A linear-scorer model: scores `W phi + b` over per-class feature clouds.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub model_id: String,
    pub layer_id: String,
    pub classes: Vec<ClassSpec>,
    /// `K x d`, one scorer per class.
    pub weights: Matrix,
    /// Length `K`; empty means zero.
    pub bias: Vec<f64>,
    pub hyperparams: BTreeMap<String, String>,
    pub gen_gap: Option<f64>,
    pub mixup_accuracy: Option<f64>,
}

impl SyntheticSpec {
    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    fn check(&self) -> Result<()> {
        let (k, d) = (self.num_classes(), self.dim());
        if k < 2 {
            return Err(Error::ClassCount(k));
        }
        if d == 0 {
            return Err(Error::schema("weights", "need at least one feature column"));
        }
        if !self.weights.is_finite() {
            return Err(Error::Data("non-finite weights".into()));
        }
        if self.classes.len() != k {
            return Err(Error::schema(
                "classes",
                format!("{} class specs for {k} scorers", self.classes.len()),
            ));
        }
        if !self.bias.is_empty() && self.bias.len() != k {
            return Err(Error::schema("bias", format!("length {}, expected {k}", self.bias.len())));
        }
        for (c, spec) in self.classes.iter().enumerate() {
            let field = format!("classes[{c}]");
            if spec.center.len() != d {
                return Err(Error::schema(field, format!("center has length {}, expected {d}", spec.center.len())));
            }
            let ok = match &spec.shape {
                ClassShape::Gaussian { sigma } => *sigma >= 0.0,
                ClassShape::Diagonal { sigmas } => sigmas.len() == d && sigmas.iter().all(|s| *s >= 0.0),
                ClassShape::Ball { radius } => *radius >= 0.0,
                ClassShape::Points(p) => p.rows() == spec.count && p.cols() == d,
            };
            if !ok {
                return Err(Error::schema(field, "malformed shape"));
            }
        }
        Ok(())
    }
}

fn class_samples(spec: &ClassSpec, rng: &mut StreamRng) -> Vec<Vec<f64>> {
    let d = spec.center.len();
    (0..spec.count)
        .map(|i| {
            let offset = match &spec.shape {
                ClassShape::Gaussian { sigma } => gaussian_vec(d, rng).iter().map(|z| sigma * z).collect(),
                ClassShape::Diagonal { sigmas } => {
                    gaussian_vec(d, rng).iter().zip(sigmas).map(|(z, s)| s * z).collect()
                }
                ClassShape::Ball { radius } => ball_point(d, *radius, rng),
                ClassShape::Points(p) => p.row(i).to_vec(),
            };
            spec.center.iter().zip(offset).map(|(c, o)| c + o).collect()
        })
        .collect()
}

/// Samples features from `spec` and fills in the closed-form quantities of a
/// linear scorer: scores, `|w_y - w_{y*}|` for both gradient fields, and the
/// GN-margin Jacobian norm `|g| / (|g| + eps)`.
pub fn make_synthetic_dump(spec: &SyntheticSpec, seed: u64) -> Result<ModelDump> {
    spec.check()?;
    let (k, d) = (spec.num_classes(), spec.dim());
    let mut rng = stream(seed, &[TAG_DUMP]);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (c, class) in spec.classes.iter().enumerate() {
        for x in class_samples(class, &mut rng) {
            rows.push(x);
            labels.push(c);
        }
    }
    let features = if rows.is_empty() {
        Matrix::zeros(0, d)
    } else {
        Matrix::from_rows(&rows)?
    };
    let dump = linear_dump(spec, labels, features)?;
    debug_assert_eq!(dump.num_classes, k);
    Ok(dump)
}

/// Builds the dump of the linear scorer in `spec` on given features.
pub fn linear_dump(spec: &SyntheticSpec, labels: Vec<usize>, features: Matrix) -> Result<ModelDump> {
    spec.check()?;
    let k = spec.num_classes();
    let m = labels.len();
    let mut scores = Matrix::zeros(m, k);
    let mut grads = Vec::with_capacity(m);
    let mut gn_jac = Vec::with_capacity(m);
    for (i, &y) in labels.iter().enumerate() {
        let x = features.row(i);
        for c in 0..k {
            let b = spec.bias.get(c).copied().unwrap_or(0.0);
            scores[(i, c)] = spec.weights.row(c).iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b;
        }
        let other = runner_up(scores.row(i), y)?;
        let g = euclidean(spec.weights.row(y), spec.weights.row(other));
        grads.push(g);
        gn_jac.push(g / (g + GN_EPSILON));
    }
    let layer = spec.layer_id.clone();
    let dump = ModelDump {
        model_id: spec.model_id.clone(),
        num_classes: k,
        labels,
        scores,
        layers: vec![FeatureLayer {
            layer_id: layer.clone(),
            features,
        }],
        grad_feature_norms: BTreeMap::from([(layer.clone(), grads.clone())]),
        jac_diff_norms: BTreeMap::from([(layer.clone(), grads)]),
        gn_jacobian_norms: BTreeMap::from([(layer, gn_jac)]),
        gradient_reference: GradientReference::FeatureSpace,
        weight_spectral_norms: None,
        mixup_accuracy: spec.mixup_accuracy,
        gen_gap: spec.gen_gap,
        hyperparams: spec.hyperparams.clone(),
        dropped_samples: None,
        format_version: FORMAT_VERSION,
    };
    dump.validate()?;
    Ok(dump)
}

/// Moves every feature row of `layer_id` toward its class mean by `factor`
/// (`x -> mean_c + factor (x - mean_c)`), leaving scores and gradient fields
/// untouched.
pub fn contract_toward_class_means(dump: &ModelDump, layer_id: &str, factor: f64) -> Result<ModelDump> {
    if !factor.is_finite() || factor < 0.0 {
        return Err(Error::Domain(format!("factor must be finite and nonnegative, got {factor}")));
    }
    let mut out = dump.clone();
    let pos = out
        .layers
        .iter()
        .position(|l| l.layer_id == layer_id)
        .ok_or_else(|| Error::schema("layers", format!("unknown layer `{layer_id}`")))?;
    let features = &mut out.layers[pos].features;
    for rows in class_indices(&dump.labels).values() {
        let mean = features.select_rows(rows).mean_row();
        for &i in rows {
            for (x, mu) in features.row_mut(i).iter_mut().zip(&mean) {
                *x = mu + factor * (*x - mu);
            }
        }
    }
    Ok(out)
}

/// Two-class scorer `f_0 = -z_0`, `f_1 = z_0` reading only the first feature
/// coordinate.
pub fn first_axis_weights(dim: usize) -> Matrix {
    let mut w = Matrix::zeros(2, dim);
    w[(0, 0)] = -1.0;
    w[(1, 0)] = 1.0;
    w
}

/// Classes at exactly `z = -1` and `z = +1` in one dimension, scorers
/// `(-z, z)`, so every margin is 2.
pub fn toy_1d(per_class: usize) -> SyntheticSpec {
    let point = |c: f64| ClassSpec {
        count: per_class,
        center: vec![c],
        shape: ClassShape::Points(Matrix::zeros(per_class, 1)),
    };
    SyntheticSpec {
        model_id: "toy-1d".into(),
        layer_id: "phi".into(),
        classes: vec![point(-1.0), point(1.0)],
        weights: first_axis_weights(1),
        bias: Vec::new(),
        hyperparams: BTreeMap::new(),
        gen_gap: None,
        mixup_accuracy: None,
    }
}

/// Class 0 at `{-1.5, -0.5}`, class 1 at `{0.5, 1.5}` with scorers `(-z, z)`.
/// Raw margins are `{3, 1, 1, 3}`, each class has two-point k-variance 1 and
/// Lipschitz estimate 2.
pub fn two_point_fixture() -> SyntheticSpec {
    let pair = |c: f64| ClassSpec {
        count: 2,
        center: vec![c],
        shape: ClassShape::Points(Matrix::column(&[-0.5, 0.5])),
    };
    SyntheticSpec {
        model_id: "two-point".into(),
        classes: vec![pair(-1.0), pair(1.0)],
        ..toy_1d(0)
    }
}

/// Two isotropic Gaussians at `-separation/2` and `+separation/2` along the
/// first axis, scored by the first coordinate.
pub fn two_gaussians(per_class: usize, separation: f64, sigma: f64, dim: usize) -> SyntheticSpec {
    let mut lo = vec![0.0; dim];
    let mut hi = vec![0.0; dim];
    lo[0] = -separation / 2.0;
    hi[0] = separation / 2.0;
    let class = |center| ClassSpec {
        count: per_class,
        center,
        shape: ClassShape::Gaussian { sigma },
    };
    SyntheticSpec {
        model_id: "two-gaussians".into(),
        layer_id: "phi".into(),
        classes: vec![class(lo), class(hi)],
        weights: first_axis_weights(dim),
        bias: Vec::new(),
        hyperparams: BTreeMap::new(),
        gen_gap: None,
        mixup_accuracy: None,
    }
}

/// Same scorer and first-axis spread as [`two_gaussians`], with standard
/// deviation `nuisance` on the coordinates the scorer ignores. With a shared
/// seed, two values of `nuisance` give identical scores and margins.
pub fn nuisance_gaussians(per_class: usize, separation: f64, sigma: f64, nuisance: f64, dim: usize) -> SyntheticSpec {
    let mut spec = two_gaussians(per_class, separation, sigma, dim);
    let mut sigmas = vec![nuisance; dim];
    sigmas[0] = sigma;
    for class in &mut spec.classes {
        class.shape = ClassShape::Diagonal { sigmas: sigmas.clone() };
    }
    spec
}

/// Misclassification rate (margin `<= 0`) of the fixture's scorer on a fresh
/// sample drawn from `seed`.
pub fn held_out_error(spec: &SyntheticSpec, seed: u64) -> Result<f64> {
    let dump = make_synthetic_dump(spec, derive_seed(seed, &[TAG_DUMP, 1]))?;
    let margins = crate::margins::raw_margins(&dump)?;
    Ok(margins.iter().filter(|&&r| r <= 0.0).count() as f64 / margins.len() as f64)
}

impl SyntheticSpec {
    pub fn with_model_id(mut self, id: &str) -> Self {
        self.model_id = id.to_string();
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kvariance::k_variance;
    use crate::margins::{kv_gn_margin_distribution, kv_margin_distribution, raw_margins, summarize, Statistic};

    #[test]
    fn clusterable_samples_stay_in_their_balls() {
        let mu = ClusterableMeasure::new(10, 0.01, 5, 3).unwrap();
        for i in 0..10 {
            for j in 0..i {
                assert!(euclidean(mu.centers.row(i), mu.centers.row(j)) >= 0.04);
            }
        }
        let (x, owners) = mu.sample_labeled(500, &mut stream(1, &[]));
        for (r, &c) in x.iter_rows().zip(&owners) {
            assert!(euclidean(r, mu.centers.row(c)) <= 0.01 + 1e-15);
        }
        let tiny = ClusterableMeasure::new(3, 1e-14, 2, 3).unwrap();
        let (x, owners) = tiny.sample_labeled(50, &mut stream(2, &[]));
        for (r, &c) in x.iter_rows().zip(&owners) {
            assert!(euclidean(r, tiny.centers.row(c)) <= 1e-12);
        }
    }

    #[test]
    fn single_cluster_k_variance_is_within_the_diameter() {
        let x = gen_clusterable(1, 0.05, 3, 64, 4).unwrap();
        for seed in 0..5 {
            assert!(k_variance(&x, 32, 1, seed).unwrap().value <= 0.1);
        }
    }

    #[test]
    fn infeasible_packing_is_a_geometry_error() {
        assert!(matches!(ClusterableMeasure::new(50, 0.5, 1, 0), Err(Error::Geometry(_))));
        assert!(matches!(ClusterableMeasure::new(2, 0.0, 1, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(gen_clusterable(4, 0.01, 3, 20, 9).unwrap(), gen_clusterable(4, 0.01, 3, 20, 9).unwrap());
        assert_eq!(gen_low_dim(6, 2, 20, 9).unwrap(), gen_low_dim(6, 2, 20, 9).unwrap());
        assert_ne!(gen_low_dim(6, 2, 20, 9).unwrap(), gen_low_dim(6, 2, 20, 10).unwrap());
    }

    #[test]
    fn low_dim_embedding_is_an_isometry() {
        let mu = LowDimMeasure::new(7, 3, 5).unwrap();
        let mut rng = stream(6, &[]);
        let u = Matrix::new(30, 3, (0..90).map(|_| rng.random::<f64>()).collect()).unwrap();
        let x = mu.embed(&u);
        for i in 0..30 {
            for j in 0..30 {
                let du = euclidean(u.row(i), u.row(j));
                assert!((du - euclidean(x.row(i), x.row(j))).abs() < 1e-12);
            }
            assert!((norm(u.row(i)) - norm(x.row(i))).abs() < 1e-12);
        }
    }

    #[test]
    fn intrinsic_dim_one_is_colinear() {
        let x = gen_low_dim(5, 1, 40, 2).unwrap();
        let mu = LowDimMeasure::new(5, 1, 2).unwrap();
        let dir = mu.frame.transpose();
        // Every centered point is parallel to the frame column.
        let mean = x.mean_row();
        for r in x.iter_rows() {
            let c: Vec<f64> = r.iter().zip(&mean).map(|(a, b)| a - b).collect();
            let along: f64 = c.iter().zip(dir.row(0)).map(|(a, b)| a * b).sum();
            let resid: f64 = c.iter().zip(dir.row(0)).map(|(a, b)| (a - along * b).powi(2)).sum();
            assert!(resid.sqrt() < 1e-9);
        }
    }

    #[test]
    fn rate_fit_examples() {
        let sizes = [16, 64, 256, 1024];
        let v: Vec<f64> = sizes.iter().map(|&m| (m as f64).powf(-0.5)).collect();
        assert!((rate_fit(&sizes, &v).unwrap().slope + 0.5).abs() < 1e-9);
        assert!(rate_fit(&sizes, &[2.0; 4]).unwrap().slope.abs() < 1e-12);
        let v: Vec<f64> = sizes.iter().map(|&m| 3.0 * (m as f64).powf(-0.25)).collect();
        let r = rate_fit(&sizes, &v).unwrap();
        assert!((r.slope + 0.25).abs() < 1e-9 && (r.intercept - 3f64.ln()).abs() < 1e-9);
        assert!(matches!(rate_fit(&sizes, &[1.0, 0.0, 1.0, 1.0]), Err(Error::Domain(_))));
        assert!(matches!(rate_fit(&sizes[..2], &[1.0, 1.0]), Err(Error::SampleSize(_))));
    }

    #[test]
    fn toy_margins_are_two() {
        let d = make_synthetic_dump(&toy_1d(4), 0).unwrap();
        assert!(raw_margins(&d).unwrap().iter().all(|&r| r == 2.0));
        assert!(d.jac_diff_norms["phi"].iter().all(|&g| g == 2.0));
    }

    #[test]
    fn two_point_fixture_closed_forms() {
        let d = make_synthetic_dump(&two_point_fixture(), 0).unwrap();
        assert_eq!(summarize(&kv_margin_distribution(&d, "phi", 1).unwrap(), Statistic::Median).unwrap(), 1.0);
        let kvgn = summarize(&kv_gn_margin_distribution(&d, "phi", 1).unwrap(), Statistic::Median).unwrap();
        assert!((kvgn - 2.0 / (2.0 + 1e-6)).abs() < 1e-12);
    }

    #[test]
    fn orthonormal_scorers_on_point_masses_are_degenerate() {
        let mut spec = toy_1d(3);
        spec.classes[0].center = vec![0.0, 0.0];
        spec.classes[0].shape = ClassShape::Points(Matrix::zeros(3, 2));
        spec.classes[1].center = vec![1.0, 1.0];
        spec.classes[1].shape = ClassShape::Points(Matrix::zeros(3, 2));
        spec.weights = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let d = make_synthetic_dump(&spec, 0).unwrap();
        assert!(matches!(kv_margin_distribution(&d, "phi", 0), Err(Error::DegenerateNormalizer(_))));
    }

    #[test]
    fn contraction_scales_kv_values() {
        let d = make_synthetic_dump(&two_gaussians(40, 3.0, 1.0, 3), 5).unwrap();
        let half = contract_toward_class_means(&d, "phi", 0.5).unwrap();
        assert_eq!(half.scores, d.scores);
        let a = kv_margin_distribution(&d, "phi", 2).unwrap();
        let b = kv_margin_distribution(&half, "phi", 2).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((2.0 * x - y).abs() < 1e-9 * y.abs().max(1.0));
        }
    }

    #[test]
    fn nuisance_noise_keeps_margins() {
        let clean = make_synthetic_dump(&nuisance_gaussians(50, 4.0, 0.5, 0.05, 4), 8).unwrap();
        let noisy = make_synthetic_dump(&nuisance_gaussians(50, 4.0, 0.5, 1.0, 4), 8).unwrap();
        assert_eq!(raw_margins(&clean).unwrap(), raw_margins(&noisy).unwrap());
    }

    #[test]
    fn permutation_leaves_summaries_unchanged() {
        let d = make_synthetic_dump(&two_gaussians(30, 2.0, 1.0, 2), 1).unwrap();
        let mut order: Vec<usize> = (0..60).collect();
        order.reverse();
        let p = d.select_rows(&order);
        let raw = |x: &ModelDump| crate::margins::summarize_values(&raw_margins(x).unwrap(), Statistic::Median).unwrap();
        assert_eq!(raw(&d), raw(&p));
    }

    #[test]
    fn malformed_specs_are_schema_errors() {
        let mut spec = two_gaussians(5, 2.0, 1.0, 2);
        spec.classes[1].center = vec![0.0];
        assert!(matches!(make_synthetic_dump(&spec, 0), Err(Error::Schema { .. })));
        let mut spec = two_gaussians(5, 2.0, 1.0, 2);
        spec.classes.pop();
        assert!(matches!(make_synthetic_dump(&spec, 0), Err(Error::Schema { .. })));
    }

    #[test]
    fn population_estimate_is_deterministic_and_order_free() {
        let mu = LowDimMeasure::new(4, 2, 1).unwrap();
        let total = population_k_variance(&mu, 16, 4, 3).unwrap();
        let manual: f64 = (0..4).rev().map(|j| population_split_w1(&mu, 16, 3, j).unwrap()).sum::<f64>() / 4.0;
        assert!((total - manual).abs() < 1e-15);
    }
}
