//! Measure computation for one dump and CMI ranking over a collection.

use std::path::{Path, PathBuf};
use std::time::Instant;

use kvmargin_core::ingest::{subsample_with, SubsampleOptions};
use kvmargin_core::margins::{
    dump_spectral_complexity, gn_margin_distribution, kv_gn_margin_distribution_with,
    kv_margin_distribution_with, raw_margin_distribution, sn_margin_distribution, summarize,
    tv_gn_margin_distribution_with, GN_EPSILON,
};
use kvmargin_core::scoring::{cmi_score, kendall_tau, mixup_combine, CmiReport, ModelPoint};
use kvmargin_core::{KVarianceConfig, MarginDistribution, MarginKind, ModelDump, Statistic};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::format::load_dump;
use crate::report::{MeasureReport, MeasureRow, Sig17, SubsampleJson};

#[derive(Debug, Clone, PartialEq)]
pub struct MeasureOptions {
    /// `None` means every layer in the dump.
    pub layers: Option<Vec<String>>,
    /// `None` means every kind whose inputs the dump carries.
    pub kinds: Option<Vec<MarginKind>>,
    pub statistic: Statistic,
    pub seed: u64,
    pub subsample: bool,
    pub stratified: bool,
    /// Split repeats `n` of the k-variance estimate.
    pub repeats: usize,
    pub timing: bool,
}

impl Default for MeasureOptions {
    fn default() -> Self {
        Self {
            layers: None,
            kinds: None,
            statistic: Statistic::Median,
            seed: 0,
            subsample: false,
            stratified: false,
            repeats: 1,
            timing: false,
        }
    }
}

/// Applies the `min(200 K, m)` subsampling rule when requested.
pub fn prepare(dump: &ModelDump, opts: &MeasureOptions) -> Result<ModelDump> {
    if !opts.subsample {
        return Ok(dump.clone());
    }
    let sub = SubsampleOptions {
        stratified: opts.stratified,
        ..SubsampleOptions::default()
    };
    Ok(subsample_with(dump, opts.seed, &sub)?)
}

fn has_inputs(dump: &ModelDump, kind: MarginKind, layer: &str) -> bool {
    match kind {
        MarginKind::Raw => true,
        MarginKind::Sn => dump.weight_spectral_norms.is_some(),
        MarginKind::Gn | MarginKind::KvGn | MarginKind::TvGn => dump.grad_feature_norms.contains_key(layer),
        MarginKind::Kv => dump.jac_diff_norms.contains_key(layer),
    }
}

pub fn margin_distribution(
    dump: &ModelDump,
    kind: MarginKind,
    layer: Option<&str>,
    seed: u64,
    repeats: usize,
) -> Result<MarginDistribution> {
    let config = KVarianceConfig {
        repeats,
        ..KVarianceConfig::default()
    };
    let layer = || {
        layer.ok_or_else(|| Error::schema("layers", format!("margin kind `{kind}` needs a feature layer")))
    };
    Ok(match kind {
        MarginKind::Raw => raw_margin_distribution(dump)?,
        MarginKind::Sn => sn_margin_distribution(dump, dump_spectral_complexity(dump)?)?,
        MarginKind::Gn => gn_margin_distribution(dump, layer()?, GN_EPSILON)?,
        MarginKind::Kv => kv_margin_distribution_with(dump, layer()?, seed, &config)?,
        MarginKind::KvGn => kv_gn_margin_distribution_with(dump, layer()?, seed, &config, GN_EPSILON)?,
        MarginKind::TvGn => tv_gn_margin_distribution_with(dump, layer()?, GN_EPSILON)?,
    })
}

/// All requested `(kind, layer)` summaries of one dump.
pub fn measure_dump(dump: &ModelDump, path: &str, opts: &MeasureOptions) -> Result<MeasureReport> {
    let start = Instant::now();
    let work = prepare(dump, opts)?;
    let layers: Vec<String> = match &opts.layers {
        Some(l) => {
            for id in l {
                work.layer(id)?;
            }
            l.clone()
        }
        None => work.layer_ids().map(str::to_string).collect(),
    };
    let explicit = opts.kinds.is_some();
    let kinds = opts.kinds.clone().unwrap_or_else(|| MarginKind::ALL.to_vec());
    let mut results = Vec::new();
    for kind in kinds {
        let targets: Vec<Option<&str>> = if kind.needs_layer() {
            layers.iter().map(|l| Some(l.as_str())).collect()
        } else {
            vec![None]
        };
        for layer in targets {
            if !explicit && !has_inputs(&work, kind, layer.unwrap_or("")) {
                log::info!("{path}: skipping `{kind}`{}: inputs absent", layer.map(|l| format!(" on `{l}`")).unwrap_or_default());
                continue;
            }
            let dist = margin_distribution(&work, kind, layer, opts.seed, opts.repeats)?;
            let value = summarize(&dist, opts.statistic)?;
            results.push(MeasureRow::new(&dist, opts.statistic.to_string(), value));
        }
    }
    Ok(MeasureReport {
        path: path.to_string(),
        model_id: work.model_id.clone(),
        format_version: work.format_version,
        seed: opts.seed,
        gradient_reference: work.gradient_reference.as_str().to_string(),
        subsample: SubsampleJson {
            applied: opts.subsample,
            stratified: opts.subsample && opts.stratified,
            original_samples: dump.sample_count(),
            samples: work.sample_count(),
        },
        results,
        timing_ms: opts.timing.then(|| Sig17(start.elapsed().as_secs_f64() * 1e3)),
    })
}

/// The per-model number fed to the ranking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankMeasure {
    Margin(MarginKind),
    /// The dump's own `gen_gap`; a test hook whose ranking is perfect by
    /// construction.
    OracleGap,
}

impl RankMeasure {
    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        if s == "oracle-gap" {
            return Ok(RankMeasure::OracleGap);
        }
        MarginKind::parse(s).map(RankMeasure::Margin).map_err(|e| e.to_string())
    }

    pub fn name(&self) -> String {
        match self {
            RankMeasure::Margin(k) => k.as_str().to_string(),
            RankMeasure::OracleGap => "oracle-gap".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankOptions {
    pub measure: RankMeasure,
    /// Defaults to each dump's first layer.
    pub layer: Option<String>,
    pub statistic: Statistic,
    pub seed: u64,
    pub subsample: bool,
    pub repeats: usize,
    pub mixup: bool,
    /// Clamp negative measures at 0 before the Mixup combination.
    pub clamp: bool,
    pub max_subset_size: usize,
}

impl Default for RankOptions {
    fn default() -> Self {
        Self {
            measure: RankMeasure::Margin(MarginKind::Kv),
            layer: None,
            statistic: Statistic::Median,
            seed: 0,
            subsample: false,
            repeats: 1,
            mixup: false,
            clamp: false,
            max_subset_size: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RankedModel {
    pub path: String,
    pub model_id: String,
    pub layer: Option<String>,
    pub measure: Sig17,
    pub gen_gap: Sig17,
}

#[derive(Debug, Clone, Serialize)]
pub struct SubsetJson {
    pub axes: Vec<String>,
    pub mi: Sig17,
    pub entropy: Sig17,
    pub normalized: Sig17,
    pub cells: usize,
    pub pairs: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CmiJson {
    pub score: Sig17,
    pub min_subset: String,
    pub per_subset: std::collections::BTreeMap<String, SubsetJson>,
    pub skipped: Vec<String>,
}

impl From<&CmiReport> for CmiJson {
    fn from(r: &CmiReport) -> Self {
        Self {
            score: Sig17(r.score),
            min_subset: r.min_subset.clone(),
            per_subset: r
                .per_subset
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        SubsetJson {
                            axes: s.axes.clone(),
                            mi: Sig17(s.mi),
                            entropy: Sig17(s.entropy),
                            normalized: Sig17(s.normalized),
                            cells: s.cells,
                            pairs: s.pairs,
                        },
                    )
                })
                .collect(),
            skipped: r.skipped.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RankReport {
    pub schema: &'static str,
    pub measure_kind: String,
    pub statistic: String,
    pub seed: u64,
    pub mixup: bool,
    pub clamp: bool,
    pub max_subset_size: usize,
    pub models: Vec<RankedModel>,
    pub cmi: CmiJson,
    pub kendall_tau: Option<Sig17>,
}

fn describe(path: &Path) -> String {
    path.display().to_string()
}

/// Scalar measure of one dump under `opts`, before any Mixup combination.
pub fn model_measure(dump: &ModelDump, opts: &RankOptions) -> Result<(f64, Option<String>)> {
    match opts.measure {
        RankMeasure::OracleGap => {
            let gap = dump
                .gen_gap
                .ok_or_else(|| Error::schema("gen_gap", format!("model `{}` has no gen_gap", dump.model_id)))?;
            Ok((gap, None))
        }
        RankMeasure::Margin(kind) => {
            let m_opts = MeasureOptions {
                seed: opts.seed,
                subsample: opts.subsample,
                ..MeasureOptions::default()
            };
            let work = prepare(dump, &m_opts)?;
            let layer = match (&opts.layer, kind.needs_layer()) {
                (_, false) => None,
                (Some(l), true) => Some(l.clone()),
                (None, true) => Some(
                    work.layer_ids()
                        .next()
                        .ok_or_else(|| Error::schema("layers", format!("model `{}` has no feature layer", dump.model_id)))?
                        .to_string(),
                ),
            };
            let dist = margin_distribution(&work, kind, layer.as_deref(), opts.seed, opts.repeats)?;
            Ok((summarize(&dist, opts.statistic)?, layer))
        }
    }
}

/// Loads every dump (in parallel, results kept in input order), computes the
/// measure and scores the collection.
pub fn rank_collection(paths: &[PathBuf], opts: &RankOptions) -> Result<RankReport> {
    let dumps: Vec<ModelDump> = paths.par_iter().map(|p| load_dump(p)).collect::<Result<_>>()?;
    rank_dumps(paths, &dumps, opts)
}

pub fn rank_dumps(paths: &[PathBuf], dumps: &[ModelDump], opts: &RankOptions) -> Result<RankReport> {
    let missing: Vec<&str> = dumps.iter().filter(|d| d.gen_gap.is_none()).map(|d| d.model_id.as_str()).collect();
    if !missing.is_empty() {
        return Err(Error::schema("gen_gap", format!("missing for models: {}", missing.join(", "))));
    }
    if opts.mixup {
        let missing: Vec<&str> =
            dumps.iter().filter(|d| d.mixup_accuracy.is_none()).map(|d| d.model_id.as_str()).collect();
        if !missing.is_empty() {
            return Err(Error::schema("mixup_accuracy", format!("missing for models: {}", missing.join(", "))));
        }
    }
    let measured: Vec<(f64, Option<String>)> =
        dumps.par_iter().map(|d| model_measure(d, opts)).collect::<Result<_>>()?;
    let mut points = Vec::with_capacity(dumps.len());
    let mut models = Vec::with_capacity(dumps.len());
    for ((dump, path), (value, layer)) in dumps.iter().zip(paths).zip(measured) {
        let mut measure = value;
        if opts.mixup {
            if opts.clamp {
                measure = measure.max(0.0);
            }
            measure = mixup_combine(measure, dump.mixup_accuracy.expect("checked above"))?;
        }
        let gap = dump.gen_gap.expect("checked above");
        models.push(RankedModel {
            path: describe(path),
            model_id: dump.model_id.clone(),
            layer,
            measure: Sig17(measure),
            gen_gap: Sig17(gap),
        });
        points.push(ModelPoint {
            model_id: dump.model_id.clone(),
            measure,
            gen_gap: gap,
            hyperparams: dump.hyperparams.clone(),
            mixup_accuracy: dump.mixup_accuracy,
        });
    }
    let cmi = cmi_score(&points, opts.max_subset_size)?;
    for s in &cmi.skipped {
        log::warn!("conditioning subset {s} has no cell with 2 comparable pairs; skipped");
    }
    let kendall = match kendall_tau(&points) {
        Ok(t) => Some(Sig17(t)),
        Err(e) => {
            log::warn!("Kendall's tau unavailable: {e}");
            None
        }
    };
    Ok(RankReport {
        schema: "kvmargin.rank/1",
        measure_kind: opts.measure.name(),
        statistic: opts.statistic.to_string(),
        seed: opts.seed,
        mixup: opts.mixup,
        clamp: opts.clamp,
        max_subset_size: opts.max_subset_size,
        models,
        cmi: CmiJson::from(&cmi),
        kendall_tau: kendall,
    })
}
