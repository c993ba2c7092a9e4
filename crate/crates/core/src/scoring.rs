//! Collection-level scores for a generalization measure: conditional mutual
//! information between pairwise orderings, Kendall's tau, and the Mixup
//! combination.
//!
//! CMI estimator: for a conditioning set `U` of hyperparameter axes, models are
//! grouped into cells sharing their values on `U`. Within a cell every
//! unordered pair whose measures and gaps both differ is counted in both
//! orientations, giving binary variables `V_c = sign(dmeasure)` and
//! `V_g = sign(dgap)` with plug-in probabilities. Counting both orientations
//! makes `V_g` uniform, so `H(V_g | cell) = ln 2` and
//! `I(V_c; V_g | cell) = ln 2 - h(a)` with `a` the fraction of concordant
//! pairs and `h` the binary entropy. Cells are weighted by their share of
//! comparable pairs; cells with fewer than 2 such pairs are dropped. The
//! score is `100 * min_U I / H` over all `|U| <= max_subset_size`, `U = {}`
//! included.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Minimum comparable pairs for a cell to enter the estimate.
pub const MIN_CELL_PAIRS: usize = 2;
pub const DEFAULT_MAX_SUBSET_SIZE: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelPoint {
    pub model_id: String,
    pub measure: f64,
    pub gen_gap: f64,
    pub hyperparams: BTreeMap<String, String>,
    pub mixup_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetScore {
    pub axes: Vec<String>,
    pub mi: f64,
    pub entropy: f64,
    pub normalized: f64,
    /// Cells that entered the estimate.
    pub cells: usize,
    /// Unordered comparable pairs over those cells.
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmiReport {
    pub per_subset: BTreeMap<String, SubsetScore>,
    pub min_subset: String,
    pub score: f64,
    /// Subsets without any usable cell.
    pub skipped: Vec<String>,
}

/// `{}` for the empty set, `{a,b}` otherwise.
pub fn subset_id(axes: &[String]) -> String {
    let mut s = String::from("{");
    for (i, a) in axes.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(a);
    }
    s.push('}');
    s
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Natural-log binary entropy with `0 log 0 = 0`.
fn binary_entropy(p: f64) -> f64 {
    let h = |q: f64| if q > 0.0 { -q * libm::log(q) } else { 0.0 };
    h(p) + h(1.0 - p)
}

fn check_points(points: &[ModelPoint]) -> Result<Vec<String>> {
    if points.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 models, got {}",
            points.len()
        )));
    }
    for p in points {
        if !p.measure.is_finite() || !p.gen_gap.is_finite() {
            return Err(Error::Data(format!("model `{}` has a non-finite measure or gap", p.model_id)));
        }
    }
    let axes: Vec<String> = points[0].hyperparams.keys().cloned().collect();
    for p in &points[1..] {
        if !p.hyperparams.keys().eq(axes.iter()) {
            return Err(Error::schema(
                "hyperparams",
                format!("model `{}` has a different axis set", p.model_id),
            ));
        }
    }
    Ok(axes)
}

/// All subsets of `axes` with at most `max` elements, by size then
/// lexicographically.
fn subsets(axes: &[String], max: usize) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<usize>> = alloc::vec![Vec::new()];
    let mut frontier = out.clone();
    for _ in 0..max.min(axes.len()) {
        let mut next = Vec::new();
        for s in &frontier {
            let start = s.last().map_or(0, |&l| l + 1);
            for j in start..axes.len() {
                let mut t = s.clone();
                t.push(j);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out.into_iter()
        .map(|s| s.into_iter().map(|j| axes[j].clone()).collect())
        .collect()
}

/// Concordant and comparable unordered pairs among `members`.
fn cell_counts(points: &[ModelPoint], members: &[usize]) -> (usize, usize) {
    let (mut agree, mut total) = (0, 0);
    for (a, &i) in members.iter().enumerate() {
        for &j in &members[a + 1..] {
            let vc = sign(points[i].measure - points[j].measure);
            let vg = sign(points[i].gen_gap - points[j].gen_gap);
            if vc != 0 && vg != 0 {
                total += 1;
                agree += usize::from(vc == vg);
            }
        }
    }
    (agree, total)
}

fn score_subset(points: &[ModelPoint], axes: &[String]) -> Option<SubsetScore> {
    let mut cells: BTreeMap<Vec<&str>, Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        let key = axes.iter().map(|a| p.hyperparams[a].as_str()).collect();
        cells.entry(key).or_default().push(i);
    }
    let counts: Vec<(usize, usize)> = cells
        .values()
        .map(|m| cell_counts(points, m))
        .filter(|&(_, total)| total >= MIN_CELL_PAIRS)
        .collect();
    let pairs: usize = counts.iter().map(|c| c.1).sum();
    if pairs == 0 {
        return None;
    }
    let ln2 = core::f64::consts::LN_2;
    let mut mi = 0.0;
    let mut entropy = 0.0;
    for &(agree, total) in &counts {
        let w = total as f64 / pairs as f64;
        mi += w * (ln2 - binary_entropy(agree as f64 / total as f64));
        entropy += w * ln2;
    }
    let mi = mi.max(0.0);
    Some(SubsetScore {
        axes: axes.to_vec(),
        mi,
        entropy,
        normalized: if entropy > 0.0 { (mi / entropy).min(1.0) } else { 0.0 },
        cells: counts.len(),
        pairs,
    })
}

pub fn cmi_score(points: &[ModelPoint], max_subset_size: usize) -> Result<CmiReport> {
    let axes = check_points(points)?;
    let mut per_subset = BTreeMap::new();
    let mut skipped = Vec::new();
    let mut best: Option<(String, f64)> = None;
    for u in subsets(&axes, max_subset_size) {
        let id = subset_id(&u);
        match score_subset(points, &u) {
            Some(s) => {
                if best.as_ref().is_none_or(|(_, v)| s.normalized < *v) {
                    best = Some((id.clone(), s.normalized));
                }
                per_subset.insert(id, s);
            }
            None => skipped.push(id),
        }
    }
    let (min_subset, min) = best.ok_or_else(|| {
        Error::InsufficientData("no conditioning subset has a cell with 2 comparable pairs".into())
    })?;
    Ok(CmiReport {
        per_subset,
        min_subset,
        score: 100.0 * min,
        skipped,
    })
}

/// `(concordant - discordant) / comparable` over model pairs.
pub fn kendall_tau(points: &[ModelPoint]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 models, got {}",
            points.len()
        )));
    }
    let all: Vec<usize> = (0..points.len()).collect();
    let (agree, total) = cell_counts(points, &all);
    if total == 0 {
        return Err(Error::InsufficientData("no comparable model pairs".into()));
    }
    Ok((2.0 * agree as f64 - total as f64) / total as f64)
}

/// `sqrt(measure * mixup_accuracy)`.
pub fn mixup_combine(measure: f64, mixup_accuracy: f64) -> Result<f64> {
    if !(measure >= 0.0) {
        return Err(Error::Domain(format!(
            "Mixup combination needs a nonnegative measure, got {measure}"
        )));
    }
    if !(0.0..=1.0).contains(&mixup_accuracy) {
        return Err(Error::Domain(format!("Mixup accuracy {mixup_accuracy} outside [0, 1]")));
    }
    Ok(libm::sqrt(measure * mixup_accuracy))
}
