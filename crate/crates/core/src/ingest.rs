//! In-memory model dump: per-sample labels, classifier scores, feature layers
//! and the gradient norms exported alongside them.
//!
//! Reading and writing the on-disk format is done by the `kvmargin` crate;
//! this module owns the data model, its validation, class partitioning and
//! the subsampling rule `min(200 * K, m)`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{derive_seed, stream};

pub const FORMAT_VERSION: u32 = 1;

/// Samples per class targeted by [`subsample`].
pub const SAMPLES_PER_CLASS: usize = 200;

const TAG_SUBSAMPLE: u64 = 0x5355_4253;

/// Which variable the exported gradient norms were taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientReference {
    #[default]
    FeatureSpace,
    InputSpace,
}

impl GradientReference {
    pub fn as_str(&self) -> &'static str {
        match self {
            GradientReference::FeatureSpace => "feature_space",
            GradientReference::InputSpace => "input_space",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "feature_space" => Ok(Self::FeatureSpace),
            "input_space" => Ok(Self::InputSpace),
            other => Err(Error::schema(
                "gradient_reference",
                format!("unknown value `{other}`"),
            )),
        }
    }
}

/// Features of all samples at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayer {
    pub layer_id: String,
    pub features: Matrix,
}

impl FeatureLayer {
    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// One trained model's exported evaluation data.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDump {
    pub model_id: String,
    pub num_classes: usize,
    pub labels: Vec<usize>,
    /// `m x K` classifier outputs `f(phi(x))`.
    pub scores: Matrix,
    pub layers: Vec<FeatureLayer>,
    /// Per layer, `|grad_phi rho_f|` for every sample (GN margins).
    pub grad_feature_norms: BTreeMap<String, Vec<f64>>,
    /// Per layer, `|grad f_y - grad f_{y*}|` for every sample (Lipschitz estimate).
    pub jac_diff_norms: BTreeMap<String, Vec<f64>>,
    /// Per layer, norms of the Jacobian of the GN margin itself (diagnostic).
    pub gn_jacobian_norms: BTreeMap<String, Vec<f64>>,
    pub gradient_reference: GradientReference,
    pub weight_spectral_norms: Option<Vec<f64>>,
    pub mixup_accuracy: Option<f64>,
    pub gen_gap: Option<f64>,
    pub hyperparams: BTreeMap<String, String>,
    /// Samples the exporter dropped (for example, non-finite gradients).
    pub dropped_samples: Option<u64>,
    pub format_version: u32,
}

impl ModelDump {
    /// Number of samples `m`.
    pub fn sample_count(&self) -> usize {
        self.labels.len()
    }

    pub fn layer(&self, layer_id: &str) -> Result<&FeatureLayer> {
        self.layers
            .iter()
            .find(|l| l.layer_id == layer_id)
            .ok_or_else(|| Error::schema("layers", format!("unknown layer `{layer_id}`")))
    }

    pub fn layer_ids(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|l| l.layer_id.as_str())
    }

    pub fn layer_vector<'a>(
        map: &'a BTreeMap<String, Vec<f64>>,
        field: &str,
        layer_id: &str,
    ) -> Result<&'a [f64]> {
        map.get(layer_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::schema(field, format!("missing entry for layer `{layer_id}`")))
    }

    /// Sample count of every class that occurs in `labels`.
    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for &y in &self.labels {
            *counts.entry(y).or_insert(0) += 1;
        }
        counts
    }

    /// Empirical class frequencies `m_c / m`.
    pub fn priors(&self) -> BTreeMap<usize, f64> {
        let m = self.sample_count() as f64;
        self.class_counts()
            .into_iter()
            .map(|(c, n)| (c, n as f64 / m))
            .collect()
    }

    /// Checks every structural invariant of the dump.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::schema(
                "format_version",
                format!("expected {FORMAT_VERSION}, found {}", self.format_version),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::ClassCount(self.num_classes));
        }
        let m = self.sample_count();
        if m == 0 {
            return Err(Error::schema("labels", "dump has no samples"));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::schema(
                "labels",
                format!("label {bad} outside [0, {})", self.num_classes),
            ));
        }
        if self.scores.rows() != m || self.scores.cols() != self.num_classes {
            return Err(Error::schema(
                "scores",
                format!(
                    "shape {}x{}, expected {m}x{}",
                    self.scores.rows(),
                    self.scores.cols(),
                    self.num_classes
                ),
            ));
        }
        if !self.scores.is_finite() {
            return Err(Error::Data("non-finite value in `scores`".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let field = format!("layers[{}]", layer.layer_id);
            if self.layers[..i].iter().any(|l| l.layer_id == layer.layer_id) {
                return Err(Error::schema(field, "duplicate layer id"));
            }
            if layer.features.rows() != m || layer.dim() == 0 {
                return Err(Error::schema(
                    field,
                    format!(
                        "shape {}x{}, expected {m}xd with d >= 1",
                        layer.features.rows(),
                        layer.dim()
                    ),
                ));
            }
            if !layer.features.is_finite() {
                return Err(Error::Data(format!("non-finite feature in `{field}`")));
            }
        }
        for (field, map) in [
            ("grad_feature_norms", &self.grad_feature_norms),
            ("jac_diff_norms", &self.jac_diff_norms),
            ("gn_jacobian_norms", &self.gn_jacobian_norms),
        ] {
            for (layer_id, values) in map {
                let field = format!("{field}[{layer_id}]");
                if self.layer(layer_id).is_err() {
                    return Err(Error::schema(field, "refers to an unknown layer"));
                }
                if values.len() != m {
                    return Err(Error::schema(
                        field,
                        format!("length {}, expected {m}", values.len()),
                    ));
                }
                if values.iter().any(|x| !x.is_finite() || *x < 0.0) {
                    return Err(Error::Data(format!("`{field}` must be finite and nonnegative")));
                }
            }
        }
        if let Some(norms) = &self.weight_spectral_norms {
            if norms.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::schema(
                    "weight_spectral_norms",
                    "values must be finite and nonnegative",
                ));
            }
        }
        for (field, value) in [("mixup_accuracy", self.mixup_accuracy), ("gen_gap", self.gen_gap)] {
            if let Some(x) = value {
                if !(0.0..=1.0).contains(&x) {
                    return Err(Error::schema(field, format!("{x} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }

    /// A dump restricted to the given rows, with every per-sample tensor
    /// sliced consistently.
    pub fn select_rows(&self, rows: &[usize]) -> ModelDump {
        let slice = |v: &Vec<f64>| rows.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        let slice_map = |map: &BTreeMap<String, Vec<f64>>| {
            map.iter()
                .map(|(k, v)| (k.clone(), slice(v)))
                .collect::<BTreeMap<_, _>>()
        };
        ModelDump {
            model_id: self.model_id.clone(),
            num_classes: self.num_classes,
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            scores: self.scores.select_rows(rows),
            layers: self
                .layers
                .iter()
                .map(|l| FeatureLayer {
                    layer_id: l.layer_id.clone(),
                    features: l.features.select_rows(rows),
                })
                .collect(),
            grad_feature_norms: slice_map(&self.grad_feature_norms),
            jac_diff_norms: slice_map(&self.jac_diff_norms),
            gn_jacobian_norms: slice_map(&self.gn_jacobian_norms),
            gradient_reference: self.gradient_reference,
            weight_spectral_norms: self.weight_spectral_norms.clone(),
            mixup_accuracy: self.mixup_accuracy,
            gen_gap: self.gen_gap,
            hyperparams: self.hyperparams.clone(),
            dropped_samples: self.dropped_samples,
            format_version: self.format_version,
        }
    }
}

/// Row indices of each class, in original order.
pub fn class_indices(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        groups.entry(y).or_default().push(i);
    }
    groups
}

/// Feature rows of each class at `layer_id`, original order kept within a
/// class.
pub fn class_partition(dump: &ModelDump, layer_id: &str) -> Result<BTreeMap<usize, Matrix>> {
    let layer = dump.layer(layer_id)?;
    Ok(class_indices(&dump.labels)
        .into_iter()
        .map(|(c, rows)| (c, layer.features.select_rows(&rows)))
        .collect())
}

/// `min(200 * K, m)`.
pub fn subsample_size(num_classes: usize, sample_count: usize) -> usize {
    (SAMPLES_PER_CLASS * num_classes).min(sample_count)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsampleOptions {
    pub per_class: usize,
    /// Take `min(per_class, m_c)` rows from each class instead of a plain
    /// uniform sample of `min(per_class * K, m)` rows.
    pub stratified: bool,
    /// Classes with at least this many rows must keep at least this many.
    pub min_class_size: usize,
    pub max_attempts: usize,
}

impl Default for SubsampleOptions {
    fn default() -> Self {
        Self {
            per_class: SAMPLES_PER_CLASS,
            stratified: false,
            min_class_size: 2,
            max_attempts: 16,
        }
    }
}

/// Uniform without-replacement subsample of `min(200 * K, m)` rows.
pub fn subsample(dump: &ModelDump, seed: u64) -> Result<ModelDump> {
    subsample_with(dump, seed, &SubsampleOptions::default())
}

pub fn subsample_with(dump: &ModelDump, seed: u64, opts: &SubsampleOptions) -> Result<ModelDump> {
    let m = dump.sample_count();
    if opts.stratified {
        let mut rows = Vec::new();
        for (c, idx) in class_indices(&dump.labels) {
            let take = opts.per_class.min(idx.len());
            let mut rng = stream(seed, &[TAG_SUBSAMPLE, 1, c as u64]);
            let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, idx.len(), take)
                .into_iter()
                .map(|k| idx[k])
                .collect();
            rows.append(&mut picked);
        }
        rows.sort_unstable();
        return Ok(dump.select_rows(&rows));
    }

    let size = (opts.per_class * dump.num_classes).min(m);
    if size == m {
        return Ok(dump.clone());
    }
    let counts = dump.class_counts();
    for attempt in 0..opts.max_attempts {
        let mut rng = stream(derive_seed(seed, &[TAG_SUBSAMPLE, attempt as u64]), &[]);
        let mut rows = rand::seq::index::sample(&mut rng, m, size).into_vec();
        rows.sort_unstable();
        let sub = dump.select_rows(&rows);
        let sub_counts = sub.class_counts();
        let starved = counts.iter().any(|(c, &n)| {
            n >= opts.min_class_size && sub_counts.get(c).copied().unwrap_or(0) < opts.min_class_size
        });
        if !starved {
            return Ok(sub);
        }
    }
    Err(Error::SampleSize(format!(
        "subsampling {size} of {m} rows left a class with fewer than {} samples after {} attempts",
        opts.min_class_size, opts.max_attempts
    )))
}

impl core::fmt::Display for GradientReference {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Builds a minimal dump around one feature layer; mostly for tests and
/// fixtures.
pub fn dump_from_parts(
    model_id: &str,
    num_classes: usize,
    labels: Vec<usize>,
    scores: Matrix,
    layer_id: &str,
    features: Matrix,
) -> ModelDump {
    ModelDump {
        model_id: model_id.to_string(),
        num_classes,
        labels,
        scores,
        layers: alloc::vec![FeatureLayer {
            layer_id: layer_id.to_string(),
            features,
        }],
        grad_feature_norms: BTreeMap::new(),
        jac_diff_norms: BTreeMap::new(),
        gn_jacobian_norms: BTreeMap::new(),
        gradient_reference: GradientReference::FeatureSpace,
        weight_spectral_norms: None,
        mixup_accuracy: None,
        gen_gap: None,
        hyperparams: BTreeMap::new(),
        dropped_samples: None,
        format_version: FORMAT_VERSION,
    }
}
