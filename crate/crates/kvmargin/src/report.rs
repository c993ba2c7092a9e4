//! Report serialization. Every float is written with 17 significant digits
//! (`d.dddddddddddddddde±x`), so reports parse back to the same `f64` in any
//! language. Non-finite values become `null`.

use std::collections::BTreeMap;

use kvmargin_core::{MarginDistribution, NormalizerReport};
use serde::ser::{Serialize, Serializer};
use serde::Serialize as DeriveSerialize;
use serde_json::value::RawValue;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sig17(pub f64);

pub fn sig17(x: f64) -> String {
    format!("{x:.16e}")
}

impl Serialize for Sig17 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return s.serialize_none();
        }
        RawValue::from_string(sig17(self.0))
            .map_err(serde::ser::Error::custom)?
            .serialize(s)
    }
}

pub fn sig_map<K: ToString>(map: &BTreeMap<K, f64>) -> BTreeMap<String, Sig17> {
    map.iter().map(|(k, v)| (k.to_string(), Sig17(*v))).collect()
}

#[derive(Debug, Clone, DeriveSerialize)]
pub struct NormalizerJson {
    pub per_class_kvariance: BTreeMap<String, Sig17>,
    pub per_class_lipschitz: BTreeMap<String, Sig17>,
    pub class_priors: BTreeMap<String, Sig17>,
    pub denominator: Sig17,
}

impl From<&NormalizerReport> for NormalizerJson {
    fn from(n: &NormalizerReport) -> Self {
        Self {
            per_class_kvariance: sig_map(&n.per_class_kvariance),
            per_class_lipschitz: sig_map(&n.per_class_lipschitz),
            class_priors: sig_map(&n.class_priors),
            denominator: Sig17(n.denominator),
        }
    }
}

#[derive(Debug, Clone, DeriveSerialize)]
pub struct MeasureRow {
    pub kind: String,
    pub layer: Option<String>,
    pub statistic: String,
    pub value: Sig17,
    pub samples: usize,
    pub params: BTreeMap<String, Sig17>,
    pub normalizer: Option<NormalizerJson>,
}

impl MeasureRow {
    pub fn new(dist: &MarginDistribution, statistic: String, value: f64) -> Self {
        Self {
            kind: dist.kind.as_str().to_string(),
            layer: dist.layer_id.clone(),
            statistic,
            value: Sig17(value),
            samples: dist.values.len(),
            params: sig_map(&dist.params),
            normalizer: dist.normalizer.as_ref().map(NormalizerJson::from),
        }
    }
}

#[derive(Debug, Clone, DeriveSerialize)]
pub struct SubsampleJson {
    pub applied: bool,
    pub stratified: bool,
    pub original_samples: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, DeriveSerialize)]
pub struct MeasureReport {
    pub path: String,
    pub model_id: String,
    pub format_version: u32,
    pub seed: u64,
    pub gradient_reference: String,
    pub subsample: SubsampleJson,
    pub results: Vec<MeasureRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing_ms: Option<Sig17>,
}

/// Fixed column order of `measure --csv`.
pub const MEASURE_CSV_HEADER: [&str; 8] = [
    "path", "model_id", "kind", "layer", "statistic", "value", "samples", "seed",
];

pub fn measure_csv(reports: &[MeasureReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MEASURE_CSV_HEADER).expect("in-memory write");
    for r in reports {
        for row in &r.results {
            w.write_record([
                r.path.as_str(),
                r.model_id.as_str(),
                row.kind.as_str(),
                row.layer.as_deref().unwrap_or(""),
                row.statistic.as_str(),
                sig17(row.value.0).as_str(),
                row.samples.to_string().as_str(),
                r.seed.to_string().as_str(),
            ])
            .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}
