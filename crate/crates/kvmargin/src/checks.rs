//! Synthetic invariant checks behind `kvmargin synth`. Repeats and trials
//! run on the rayon pool with per-repeat derived seeds, so results do not
//! depend on the thread count.

use kvmargin_core::bounds::{pairwise_margin_loss, separation_check};
use kvmargin_core::kvariance::{k_variance, summarize_trials, trial_seed};
use kvmargin_core::matrix::Matrix;
use kvmargin_core::rng::{derive_seed, stream};
use kvmargin_core::synthgen::{
    make_synthetic_dump, population_split_w1, rate_fit, toy_1d, ClassShape, ClusterableMeasure,
    LowDimMeasure, Measure,
};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::report::Sig17;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Check {
    Prop8,
    Rates,
    EfronStein,
    Separation,
}

impl Check {
    pub const ALL: [Check; 4] = [Check::Prop8, Check::Rates, Check::EfronStein, Check::Separation];

    pub fn name(&self) -> &'static str {
        match self {
            Check::Prop8 => "prop8",
            Check::Rates => "rates",
            Check::EfronStein => "efron_stein",
            Check::Separation => "separation",
        }
    }

    pub fn run(&self, seed: u64) -> Result<CheckOutcome> {
        match self {
            Check::Prop8 => prop8(seed),
            Check::Rates => rates(seed),
            Check::EfronStein => efron_stein(seed),
            Check::Separation => separation(seed),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub value: Sig17,
    pub limit: Sig17,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub check: &'static str,
    pub seed: u64,
    pub passed: bool,
    pub assertions: Vec<Assertion>,
    pub metrics: std::collections::BTreeMap<String, Sig17>,
}

impl CheckOutcome {
    fn new(check: Check, seed: u64) -> Self {
        Self {
            check: check.name(),
            seed,
            passed: true,
            assertions: Vec::new(),
            metrics: Default::default(),
        }
    }

    /// Records `value <= limit`.
    fn at_most(&mut self, name: impl Into<String>, value: f64, limit: f64) {
        self.assert(name, value <= limit, value, limit);
    }

    fn assert(&mut self, name: impl Into<String>, passed: bool, value: f64, limit: f64) {
        self.passed &= passed;
        self.assertions.push(Assertion {
            name: name.into(),
            passed,
            value: Sig17(value),
            limit: Sig17(limit),
        });
    }

    fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.insert(name.into(), Sig17(value));
    }

    /// One line per failed assertion.
    pub fn failures(&self) -> Vec<String> {
        self.assertions
            .iter()
            .filter(|a| !a.passed)
            .map(|a| format!("{}: {} vs limit {}", a.name, a.value.0, a.limit.0))
            .collect()
    }
}

/// Monte-Carlo `Var_m` per size, repeats in parallel.
pub fn population_series<M: Measure + Sync>(measure: &M, sizes: &[usize], repeats: usize, seed: u64) -> Result<Vec<f64>> {
    sizes
        .iter()
        .map(|&m| {
            let draws: Vec<f64> = (0..repeats)
                .into_par_iter()
                .map(|j| population_split_w1(measure, m, seed, j))
                .collect::<std::result::Result<_, _>>()?;
            Ok(draws.iter().sum::<f64>() / repeats as f64)
        })
        .collect()
}

pub const PROP8_CLUSTERS: usize = 10;
pub const PROP8_DELTA: f64 = 0.001;
pub const PROP8_DIM: usize = 16;
pub const PROP8_SIZES: [usize; 4] = [16, 64, 256, 1024];
pub const REPEATS: usize = 32;

/// Clusterable measure: `Var_m <= 24 sqrt(n/m)`, slope near `-1/2`, and
/// non-increasing in `m` within a 5% band.
pub fn prop8(seed: u64) -> Result<CheckOutcome> {
    let mut out = CheckOutcome::new(Check::Prop8, seed);
    let mu = ClusterableMeasure::new(PROP8_CLUSTERS, PROP8_DELTA, PROP8_DIM, seed)?;
    let values = population_series(&mu, &PROP8_SIZES, REPEATS, seed)?;
    let n = PROP8_CLUSTERS as f64;
    for (&m, &v) in PROP8_SIZES.iter().zip(&values) {
        debug_assert!(m as f64 <= n / (4.0 * PROP8_DELTA * PROP8_DELTA));
        out.at_most(format!("var_m[{m}] <= 24 sqrt(n/m)"), v, 24.0 * (n / m as f64).sqrt());
    }
    for (w, s) in values.windows(2).zip(PROP8_SIZES.windows(2)) {
        out.at_most(format!("var_m[{}] <= 1.05 var_m[{}]", s[1], s[0]), w[1], 1.05 * w[0]);
    }
    let fit = rate_fit(&PROP8_SIZES, &values)?;
    out.assert("slope >= -0.65", fit.slope >= -0.65, fit.slope, -0.65);
    out.at_most("slope <= -0.35", fit.slope, -0.35);
    out.metric("slope", fit.slope);
    Ok(out)
}

pub const RATE_AMBIENT: usize = 16;
pub const RATE_SIZES: [usize; 7] = [64, 128, 256, 512, 1024, 2048, 4096];

/// Intrinsic dimension 2 must decay faster than 8 by at least 0.1 in the
/// log-log exponent.
pub fn rates(seed: u64) -> Result<CheckOutcome> {
    let mut out = CheckOutcome::new(Check::Rates, seed);
    let mut slopes = Vec::new();
    for intrinsic in [2usize, 8] {
        let mu = LowDimMeasure::new(RATE_AMBIENT, intrinsic, derive_seed(seed, &[intrinsic as u64]))?;
        let values = population_series(&mu, &RATE_SIZES, REPEATS, derive_seed(seed, &[intrinsic as u64, 1]))?;
        let fit = rate_fit(&RATE_SIZES, &values)?;
        out.metric(format!("slope[d={intrinsic}]"), fit.slope);
        slopes.push(fit.slope);
    }
    out.at_most("slope[d=2] - slope[d=8] <= -0.1", slopes[0] - slopes[1], -0.1);
    Ok(out)
}

pub const ES_M: usize = 512;
pub const ES_DIM: usize = 4;
pub const ES_K: usize = 64;
pub const ES_TRIALS: usize = 200;

/// Estimator variance against `4 Var(phi) / (n k)` on Gaussian and uniform
/// features, with slack factor 1.1.
pub fn efron_stein(seed: u64) -> Result<CheckOutcome> {
    let mut out = CheckOutcome::new(Check::EfronStein, seed);
    let mut rng = stream(seed, &[0x4553]);
    let gaussian: Vec<f64> = (0..ES_M * ES_DIM).map(|_| rng.sample(StandardNormal)).collect();
    let uniform: Vec<f64> = (0..ES_M * ES_DIM).map(|_| rng.random::<f64>()).collect();
    for (name, data) in [("gaussian", gaussian), ("uniform", uniform)] {
        let x = Matrix::new(ES_M, ES_DIM, data)?;
        let check = estimator_check(&x, ES_K, 1, ES_TRIALS, derive_seed(seed, &[name.len() as u64]))?;
        out.metric(format!("{name}.bound"), check.1);
        out.at_most(format!("{name}: variance <= 1.1 bound"), check.0, 1.1 * check.1);
    }
    Ok(out)
}

/// `(empirical variance, bound)` with trials in parallel.
pub fn estimator_check(x: &Matrix, k: usize, n: usize, trials: usize, seed: u64) -> Result<(f64, f64)> {
    let estimates: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| k_variance(x, k, n, trial_seed(seed, t)).map(|e| e.value))
        .collect::<std::result::Result<_, _>>()?;
    let check = summarize_trials(x, k, n, estimates)?;
    Ok((check.empirical_variance, check.bound))
}

pub const SEPARATION_TOL: f64 = 1e-9;

/// Point-mass toy: W1 = gamma / L = 2 and zero pairwise loss; spread toy with
/// 256 points per class: W1 >= lower bound - 0.1 gamma / L.
pub fn separation(seed: u64) -> Result<CheckOutcome> {
    let mut out = CheckOutcome::new(Check::Separation, seed);
    let toy = make_synthetic_dump(&toy_1d(8), seed)?;
    let r = separation_check(&toy, "phi", 0, 1, 2.0, 1.0, seed)?;
    out.at_most("toy |w1 - 2|", (r.w1_distance - 2.0).abs(), SEPARATION_TOL);
    out.at_most("toy |lower_bound - w1|", (r.lower_bound - r.w1_distance).abs(), SEPARATION_TOL);
    out.at_most("toy pairwise loss at gamma 2", pairwise_margin_loss(&toy, 0, 1, 2.0)?, 0.0);

    let mut spec = toy_1d(256);
    for class in &mut spec.classes {
        class.shape = ClassShape::Ball { radius: 0.3 };
    }
    let spread = make_synthetic_dump(&spec, seed)?;
    for gamma in [0.5, 1.0, 2.0, 3.0] {
        let l = 1.0;
        let r = separation_check(&spread, "phi", 0, 1, gamma, l, seed)?;
        out.at_most(
            format!("spread gamma {gamma}: lower_bound - w1 <= 0.1 gamma / L"),
            r.lower_bound - r.w1_distance,
            0.1 * gamma / l,
        );
    }
    Ok(out)
}
