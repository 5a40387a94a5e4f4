//! Variant orchestration, post-hoc selection, metrics and batch benchmarks.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSchema, Direction, FeatureKind, MadWeights, Monotone, RawValue, Value};
use crate::error::{Error, Result};
use crate::formulation::{CeConstraints, Formulation};
use crate::mio::{self, SolveParams, SolveStatus};
use crate::nn::{argmax, class_margin, Mlp};
use crate::spn::Spn;
use crate::spn_learn::with_class;
use crate::stats;

/// Tolerance for re-validating decoded counterfactuals.
pub const CHECK_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Median,
    Quartile,
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    /// Distance-only model; the pool is ranked by likelihood afterwards.
    MioPosthoc,
    LiceOptimize { alpha: f64 },
    LiceThreshold { mode: ThresholdMode },
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::MioPosthoc => "mio_posthoc",
            Variant::LiceOptimize { .. } => "lice_optimize",
            Variant::LiceThreshold {
                mode: ThresholdMode::Median,
            } => "lice_threshold_median",
            Variant::LiceThreshold {
                mode: ThresholdMode::Quartile,
            } => "lice_threshold_quartile",
            Variant::LiceThreshold {
                mode: ThresholdMode::Sample,
            } => "lice_threshold_sample",
        }
    }

    fn uses_spn(&self) -> bool {
        !matches!(self, Variant::MioPosthoc)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Accepts the short command-line names and the long names.
impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mio" | "mio_posthoc" => Variant::MioPosthoc,
            "lice-opt" | "lice_optimize" => Variant::LiceOptimize { alpha: 0.1 },
            "lice-med" | "lice_threshold_median" => Variant::LiceThreshold {
                mode: ThresholdMode::Median,
            },
            "lice-q" | "lice_threshold_quartile" => Variant::LiceThreshold {
                mode: ThresholdMode::Quartile,
            },
            "lice-sample" | "lice_threshold_sample" => Variant::LiceThreshold {
                mode: ThresholdMode::Sample,
            },
            other => return Err(Error::Config(format!("unknown variant `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantConfig {
    pub variant: Variant,
    pub pool_size: usize,
    pub time_limit: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub target_class: Option<usize>,
    pub sparsity_cap: Option<usize>,
    /// Keep only pool entries within `(1 + rho)` of the closest one. Off by default.
    pub relative_distance: Option<f64>,
}

impl VariantConfig {
    pub fn new(variant: Variant) -> Self {
        VariantConfig {
            variant,
            pool_size: 10,
            time_limit: 120.0,
            tau: 1e-4,
            epsilon: 1e-4,
            seed: 0,
            target_class: None,
            sparsity_cap: None,
            relative_distance: None,
        }
    }

    fn check(&self) -> Result<()> {
        if let Variant::LiceOptimize { alpha } = self.variant {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::Config("lice_optimize needs alpha > 0".into()));
            }
        }
        if self.pool_size == 0 || !(self.time_limit > 0.0) {
            return Err(Error::Config("pool size must be >= 1 and the time limit positive".into()));
        }
        if self.relative_distance.is_some_and(|r| !(r >= 0.0)) {
            return Err(Error::Config("relative distance must be non-negative".into()));
        }
        Ok(())
    }
}

/// Likelihood threshold from training log-likelihoods.
pub fn compute_threshold(lls: &[f64], mode: ThresholdMode, factual_ll: f64) -> Result<f64> {
    let med = stats::median(lls).ok_or(Error::EmptyDataset)?;
    Ok(match mode {
        ThresholdMode::Median => med,
        ThresholdMode::Quartile => stats::lower_quartile(lls).ok_or(Error::EmptyDataset)?,
        ThresholdMode::Sample => med.min(factual_ll),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub nll_exact: f64,
    pub nll_max_approx: f64,
    pub distance_mad: f64,
    pub sparsity: usize,
    pub valid: bool,
    pub actionable: bool,
    /// Raw-score margin towards the counterfactual class.
    pub margin: f64,
    pub predicted_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CeResult {
    pub ce_row: Vec<RawValue>,
    #[serde(skip)]
    pub ce_normalized: Vec<Value>,
    #[serde(flatten)]
    pub metrics: Metrics,
    /// Root value of the density network as held by the solver.
    pub o_root_mio: Option<f64>,
    pub objective: f64,
    pub optimal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Explanation {
    pub variant: String,
    pub status: SolveStatus,
    pub factual_row: Vec<RawValue>,
    pub factual_class: usize,
    pub delta_spn: Option<f64>,
    pub pool: Vec<CeResult>,
    /// Index into `pool` of the most likely valid entry.
    pub selected: Option<usize>,
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl Explanation {
    pub fn selected(&self) -> Option<&CeResult> {
        self.selected.map(|i| &self.pool[i])
    }
}

/// Shared read-only artifacts for explaining factuals.
#[derive(Debug, Clone)]
pub struct Explainer<'a> {
    pub schema: &'a DatasetSchema,
    pub mlp: &'a Mlp,
    pub spn: &'a Spn,
    pub weights: &'a MadWeights,
    /// Exact log-likelihoods of the training rows, needed by threshold variants.
    pub train_ll: Option<Vec<f64>>,
}

impl<'a> Explainer<'a> {
    pub fn new(schema: &'a DatasetSchema, mlp: &'a Mlp, spn: &'a Spn, weights: &'a MadWeights) -> Result<Self> {
        if mlp.input_dim() != schema.encoded_width() {
            return Err(Error::Dimension {
                expected: schema.encoded_width(),
                got: mlp.input_dim(),
            });
        }
        if mlp.num_classes() != schema.num_classes() {
            return Err(Error::Network(format!(
                "network has {} classes, schema has {}",
                mlp.num_classes(),
                schema.num_classes()
            )));
        }
        Ok(Explainer {
            schema,
            mlp,
            spn,
            weights,
            train_ll: None,
        })
    }

    /// Stores exact log-likelihoods of labelled training rows.
    pub fn with_training(mut self, rows: &[Vec<Value>], labels: &[usize]) -> Result<Self> {
        let lls = rows
            .iter()
            .zip(labels)
            .map(|(r, y)| self.log_likelihood(r, *y))
            .collect::<Result<Vec<_>>>()?;
        self.train_ll = Some(lls);
        Ok(self)
    }

    fn spn_point(&self, row: &[Value], class: usize) -> Vec<Value> {
        if self.spn.num_features() > self.schema.len() {
            with_class(row, class)
        } else {
            row.to_vec()
        }
    }

    pub fn log_likelihood(&self, row: &[Value], class: usize) -> Result<f64> {
        self.spn.log_likelihood(&self.spn_point(row, class))
    }

    pub fn predict(&self, row: &[Value]) -> Result<usize> {
        self.mlp.classify(&self.schema.to_vector(row))
    }

    /// Validity margin of `raw` towards the counterfactual class.
    fn validity_margin(&self, raw: &[f64], factual_class: usize, target: Option<usize>) -> f64 {
        if raw.len() == 1 {
            return class_margin(raw, 1 - factual_class);
        }
        match target {
            Some(t) => class_margin(raw, t),
            None => {
                let best = raw
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| *k != factual_class)
                    .map(|(_, v)| *v)
                    .fold(f64::NEG_INFINITY, f64::max);
                best - raw[factual_class]
            }
        }
    }

    /// Metrics of `ce` against `factual`, recomputed from the decoded rows.
    pub fn evaluate_metrics(&self, factual: &[Value], ce: &[Value], cfg: &VariantConfig) -> Result<Metrics> {
        let x = self.schema.to_vector(ce);
        let raw = self.mlp.forward_raw(&x)?;
        let predicted = if raw.len() == 1 { usize::from(raw[0] >= 0.0) } else { argmax(&raw) };
        let factual_class = self.predict(factual)?;
        let margin = self.validity_margin(&raw, factual_class, cfg.target_class);
        let point = self.spn_point(ce, predicted);
        Ok(Metrics {
            nll_exact: -self.spn.log_likelihood(&point)?,
            nll_max_approx: -self.spn.log_likelihood_max_approx(&point)?,
            distance_mad: self.weights.distance(self.schema, factual, ce)?,
            sparsity: sparsity(self.schema, factual, ce, cfg.epsilon),
            valid: margin >= cfg.tau - CHECK_TOL,
            actionable: is_actionable(self.schema, factual, ce, cfg.epsilon),
            margin,
            predicted_class: predicted,
        })
    }

    /// Solves one factual with one variant.
    pub fn explain(&self, factual: &[Value], cfg: &VariantConfig) -> Result<Explanation> {
        cfg.check()?;
        let start = Instant::now();
        let factual_class = self.predict(factual)?;
        let mut cons = CeConstraints {
            tau: cfg.tau,
            epsilon: cfg.epsilon,
            sparsity_cap: cfg.sparsity_cap,
            target_class: cfg.target_class,
            ..Default::default()
        };
        match cfg.variant {
            Variant::MioPosthoc => {}
            Variant::LiceOptimize { alpha } => cons.alpha = alpha,
            Variant::LiceThreshold { mode } => {
                let lls = self
                    .train_ll
                    .as_deref()
                    .ok_or_else(|| Error::Config("threshold variants need training likelihoods".into()))?;
                let fll = self.log_likelihood(factual, factual_class)?;
                cons.delta_spn = Some(compute_threshold(lls, mode, fll)?);
            }
        }
        let spn = cfg.variant.uses_spn().then_some(self.spn);
        let form = Formulation::build(self.schema, factual, factual_class, self.mlp, spn, self.weights, &cons)?;
        let params = SolveParams {
            time_limit: cfg.time_limit,
            pool_size: cfg.pool_size,
            seed: cfg.seed,
            ..Default::default()
        };
        let pool = mio::solve(&form.model, &params)?;
        let mut results = Vec::with_capacity(pool.entries.len());
        for entry in &pool.entries {
            let ce = form.decode(self.schema, entry)?;
            results.push(CeResult {
                ce_row: self.schema.denormalize_row(&ce)?,
                metrics: self.evaluate_metrics(factual, &ce, cfg)?,
                ce_normalized: ce,
                o_root_mio: form.o_root.map(|o| entry.value(o)),
                objective: entry.objective,
                optimal: entry.optimal,
            });
        }
        if let Some(rho) = cfg.relative_distance {
            let best = results
                .iter()
                .map(|r| r.metrics.distance_mad)
                .fold(f64::INFINITY, f64::min);
            results.retain(|r| r.metrics.distance_mad <= (1.0 + rho) * best + CHECK_TOL);
        }
        let selected = select_best(&results);
        Ok(Explanation {
            variant: cfg.variant.name().to_string(),
            status: pool.status,
            factual_row: self.schema.denormalize_row(factual)?,
            factual_class,
            delta_spn: cons.delta_spn,
            pool: results,
            selected,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    }

    /// Explains every factual with every variant. Failures count against the
    /// rates and never abort the batch.
    pub fn run_benchmark(&self, factuals: &[Vec<Value>], configs: &[VariantConfig], opts: &BenchmarkOptions) -> Report {
        let mut rows = Vec::new();
        if factuals.is_empty() {
            return Report { rows };
        }
        for cfg in configs {
            let outcomes = self.explain_all(factuals, cfg, opts.jobs.max(1));
            rows.push(aggregate(cfg.variant.name(), &outcomes, opts.record_time));
        }
        Report { rows }
    }

    fn explain_all(&self, factuals: &[Vec<Value>], cfg: &VariantConfig, jobs: usize) -> Vec<Outcome> {
        let run = |f: &Vec<Value>| -> Outcome {
            let start = Instant::now();
            match self.explain(f, cfg) {
                Ok(e) => Outcome {
                    best: e.selected().cloned(),
                    seconds: e.wall_time_s,
                },
                Err(err) => {
                    log::warn!("factual failed: {err}");
                    Outcome {
                        best: None,
                        seconds: start.elapsed().as_secs_f64(),
                    }
                }
            }
        };
        if jobs == 1 {
            return factuals.iter().map(run).collect();
        }
        let chunk = factuals.len().div_ceil(jobs);
        std::thread::scope(|s| {
            let handles: Vec<_> = factuals
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(run).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
        })
    }
}

/// Most likely valid entry; ties go to the smaller distance, then pool order.
pub fn select_best(pool: &[CeResult]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in pool.iter().enumerate() {
        if !r.metrics.valid {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let cur = &pool[b].metrics;
                let better = r.metrics.nll_exact < cur.nll_exact
                    || (r.metrics.nll_exact == cur.nll_exact && r.metrics.distance_mad < cur.distance_mad);
                Some(if better { i } else { b })
            }
        };
    }
    best
}

/// Number of features whose value changed (continuous moves above `eps`).
pub fn sparsity(schema: &DatasetSchema, factual: &[Value], ce: &[Value], eps: f64) -> usize {
    schema
        .features()
        .iter()
        .zip(factual.iter().zip(ce))
        .filter(|(_, (a, b))| match (a, b) {
            (Value::Real(x), Value::Real(y)) => (x - y).abs() > eps,
            (Value::Level(x), Value::Level(y)) => x != y,
            _ => true,
        })
        .count()
}

/// Signed move of feature `j` in `dir` (positive means it moved that way),
/// in normalized units for numbers and in levels for ordered level kinds.
fn signed_move(kind: &FeatureKind, a: Value, b: Value, dir: Direction) -> f64 {
    let delta = match (kind, a, b) {
        (_, Value::Real(x), Value::Real(y)) => y - x,
        (_, Value::Level(x), Value::Level(y)) => y as f64 - x as f64,
        _ => 0.0,
    };
    delta * dir.sign()
}

/// Immutability, monotonicity and causal rules on decoded rows.
pub fn is_actionable(schema: &DatasetSchema, factual: &[Value], ce: &[Value], eps: f64) -> bool {
    for (j, f) in schema.features().iter().enumerate() {
        let (a, b) = (factual[j], ce[j]);
        if !f.mutable {
            let same = match (a, b) {
                (Value::Real(x), Value::Real(y)) => (x - y).abs() <= CHECK_TOL,
                (Value::Level(x), Value::Level(y)) => x == y,
                _ => false,
            };
            if !same {
                return false;
            }
        }
        let dir = match f.monotone {
            Monotone::None => None,
            Monotone::NonDecreasing => Some(Direction::Decrease),
            Monotone::NonIncreasing => Some(Direction::Increase),
        };
        if let Some(forbidden) = dir {
            if signed_move(&f.kind, a, b, forbidden) > CHECK_TOL {
                return false;
            }
        }
    }
    for rule in schema.causal_rules() {
        let (Some(c), Some(e)) = (
            schema.feature_index(&rule.cause_feature),
            schema.feature_index(&rule.effect_feature),
        ) else {
            return false;
        };
        let kc = &schema.feature(c).kind;
        let ke = &schema.feature(e).kind;
        if signed_move(kc, factual[c], ce[c], rule.cause_direction) > CHECK_TOL {
            let need = if ke.has_continuous() { eps - CHECK_TOL } else { 0.5 };
            if signed_move(ke, factual[e], ce[e], rule.effect_direction) < need {
                return false;
            }
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkOptions {
    pub jobs: usize,
    /// Include wall-clock medians; reports are then no longer reproducible byte for byte.
    pub record_time: bool,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        BenchmarkOptions {
            jobs: 1,
            record_time: false,
        }
    }
}

struct Outcome {
    best: Option<CeResult>,
    seconds: f64,
}

/// One report line per variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub valid_rate: f64,
    pub actionable_rate: f64,
    pub nll_mean: Option<f64>,
    pub nll_sd: Option<f64>,
    pub dist_mean: Option<f64>,
    pub dist_sd: Option<f64>,
    pub sparsity_mean: Option<f64>,
    pub sparsity_sd: Option<f64>,
    pub approx_err_mean: Option<f64>,
    pub median_time_s: Option<f64>,
}

pub const REPORT_COLUMNS: [&str; 11] = [
    "variant",
    "valid_rate",
    "actionable_rate",
    "nll_mean",
    "nll_sd",
    "dist_mean",
    "dist_sd",
    "sparsity_mean",
    "sparsity_sd",
    "approx_err_mean",
    "median_time_s",
];

fn aggregate(name: &str, outcomes: &[Outcome], record_time: bool) -> ReportRow {
    let n = outcomes.len() as f64;
    let best: Vec<&CeResult> = outcomes.iter().filter_map(|o| o.best.as_ref()).collect();
    let valid = best.iter().filter(|r| r.metrics.valid).count() as f64;
    let actionable = best.iter().filter(|r| r.metrics.valid && r.metrics.actionable).count() as f64;
    let col = |f: &dyn Fn(&CeResult) -> f64| best.iter().map(|r| f(r)).collect::<Vec<f64>>();
    let nll = col(&|r| r.metrics.nll_exact);
    let dist = col(&|r| r.metrics.distance_mad);
    let sp = col(&|r| r.metrics.sparsity as f64);
    let err = col(&|r| (r.metrics.nll_max_approx - r.metrics.nll_exact).abs());
    let times: Vec<f64> = outcomes.iter().map(|o| o.seconds).collect();
    ReportRow {
        variant: name.to_string(),
        valid_rate: valid / n,
        actionable_rate: actionable / n,
        nll_mean: stats::mean(&nll),
        nll_sd: stats::std_dev(&nll),
        dist_mean: stats::mean(&dist),
        dist_sd: stats::std_dev(&dist),
        sparsity_mean: stats::mean(&sp),
        sparsity_sd: stats::std_dev(&sp),
        approx_err_mean: stats::mean(&err),
        median_time_s: if record_time { stats::median(&times) } else { None },
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

#[derive(Serialize)]
struct ReportFile<'a> {
    format_version: u32,
    columns: &'a [&'a str],
    rows: &'a [ReportRow],
}

impl Report {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(REPORT_COLUMNS)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.variant.clone(),
                r.valid_rate.to_string(),
                r.actionable_rate.to_string(),
                opt(r.nll_mean),
                opt(r.nll_sd),
                opt(r.dist_mean),
                opt(r.dist_sd),
                opt(r.sparsity_mean),
                opt(r.sparsity_sd),
                opt(r.approx_err_mean),
                opt(r.median_time_s),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ReportFile {
            format_version: 1,
            columns: &REPORT_COLUMNS,
            rows: &self.rows,
        })?)
    }
}
