//! Experiment orchestration: Monte Carlo bias grids over simulated panels,
//! the weighting workflow on a single observed panel, and report output.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balance::{build_constraints, solve_entropy_balance, BalanceError, CovariateBlock, SolverSettings};
use crate::did::{fit_did, percent_bias_reduction, pretrend_test, DidError, DidFit, PretrendTest, TimeSpec};
use crate::matching::{match_nearest, match_weights, MatchError};
use crate::panel::{balance_table, BalanceColumn, BalanceTable, Panel, PanelError, UnitId, UnitWeights};
use crate::simulate::{generate_panel_stream, scenario_spec, trend_reliability, Overrides, ScenarioId, SimulateError};
use crate::trends::{estimate_trends, TrendError, TrendKind, TrendMatrix};

pub const DEFAULT_RHO_GRID: [f64; 7] = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("panel: {0}")]
    Panel(#[from] PanelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Numerical(String),
    /// Balancing failed; the overlap summary says where support is missing.
    #[error("{message}")]
    Infeasible { message: String, overlap: Box<OverlapSummary> },
}

impl HarnessError {
    /// True for failures of the estimation itself rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, HarnessError::Numerical(_) | HarnessError::Infeasible { .. })
    }
}

impl From<SimulateError> for HarnessError {
    fn from(e: SimulateError) -> Self {
        HarnessError::Config(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    None,
    Entropy,
    Match,
}

/// Trend features used for balancing or matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendFeature {
    Linear,
    FirstDifferences,
    Quadratic,
}

impl TrendFeature {
    pub fn kind(self) -> TrendKind {
        match self {
            TrendFeature::Linear => TrendKind::LINEAR,
            TrendFeature::FirstDifferences => TrendKind::FirstDifference,
            TrendFeature::Quadratic => TrendKind::QUADRATIC,
        }
    }
}

impl fmt::Display for TrendFeature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.kind(), f)
    }
}

impl FromStr for TrendFeature {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(TrendFeature::Linear),
            "first_differences" | "first-differences" | "fd" => Ok(TrendFeature::FirstDifferences),
            "quadratic" => Ok(TrendFeature::Quadratic),
            other => Err(format!("unknown trend feature `{other}`")),
        }
    }
}

/// One estimator: a weighting method on some trend features, then a DD fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub method: Method,
    #[serde(default = "default_trend")]
    pub trend: TrendFeature,
    pub time_spec: TimeSpec,
}

fn default_trend() -> TrendFeature {
    TrendFeature::Linear
}

impl ArmSpec {
    /// `none`, or `method-trend` such as `entropy-linear`.
    pub fn label(&self) -> String {
        match self.method {
            Method::None => "none".into(),
            Method::Entropy => format!("entropy-{}", self.trend),
            Method::Match => format!("match-{}", self.trend),
        }
    }
}

fn default_rho_grid() -> Vec<f64> {
    DEFAULT_RHO_GRID.to_vec()
}
fn default_replications() -> usize {
    500
}
fn default_moments() -> BTreeSet<u8> {
    BTreeSet::from([1])
}
fn default_caliper() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioId,
    #[serde(default)]
    pub overrides: Overrides,
    #[serde(default = "default_rho_grid")]
    pub rho_grid: Vec<f64>,
    /// Error variances to sweep at every ρ; the scenario's own σ² if absent.
    #[serde(default)]
    pub sigma2_grid: Option<Vec<f64>>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    pub arms: Vec<ArmSpec>,
    #[serde(default)]
    pub seed: u64,
    /// Moment orders balanced by entropy arms.
    #[serde(default = "default_moments")]
    pub moments: BTreeSet<u8>,
    #[serde(default = "default_caliper")]
    pub caliper: f64,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        if self.arms.is_empty() || !self.arms.iter().any(|a| a.method == Method::None) {
            return bad("at least one arm must use method `none`".into());
        }
        let mut seen = BTreeSet::new();
        for arm in &self.arms {
            if !seen.insert((arm.label(), arm.time_spec.to_string())) {
                return bad(format!("duplicate arm {} / {}", arm.label(), arm.time_spec));
            }
        }
        if self.rho_grid.is_empty() {
            return bad("rho_grid is empty".into());
        }
        if let Some(g) = &self.sigma2_grid {
            if g.is_empty() {
                return bad("sigma2_grid is empty".into());
            }
        }
        if self.moments.is_empty() || self.moments.iter().any(|m| !(1..=2).contains(m)) {
            return bad("moments must be a non-empty subset of {1, 2}".into());
        }
        if !(self.caliper > 0.0 && self.caliper.is_finite()) {
            return bad(format!("caliper must be positive, got {}", self.caliper));
        }
        for (rho, sigma2) in self.cells() {
            let o = Overrides { rho: Some(rho), sigma2: sigma2.or(self.overrides.sigma2), ..self.overrides.clone() };
            scenario_spec(self.scenario, &o)?;
        }
        Ok(())
    }

    /// Grid cells in report order: ρ outer, σ² inner.
    fn cells(&self) -> Vec<(f64, Option<f64>)> {
        let sigmas: Vec<Option<f64>> = match &self.sigma2_grid {
            Some(g) => g.iter().map(|&s| Some(s)).collect(),
            None => vec![None],
        };
        self.rho_grid.iter().flat_map(|&r| sigmas.iter().map(move |&s| (r, s))).collect()
    }
}

/// One (arm, time spec, cell) line of a [`BiasReport`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasRow {
    pub arm: String,
    pub method: Method,
    pub trend: Option<TrendFeature>,
    pub time_spec: TimeSpec,
    pub rho: f64,
    pub sigma2: f64,
    /// Mean of `τ̂ - τ` over replications that produced an estimate.
    pub mean_bias: f64,
    /// `sd / sqrt(n)`; NaN with fewer than two estimates.
    pub mc_se: f64,
    pub pbr: Option<f64>,
    pub reliability: Option<f64>,
    /// Share of replications without an estimate; for matching arms, the
    /// mean share of treated units left unmatched.
    pub fail_rate: f64,
    pub n_estimates: usize,
    pub n_failed: usize,
    /// Mean share of unmatched treated units (matching arms only).
    pub match_failure_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBin {
    pub label: String,
    pub group: String,
    pub bin: usize,
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasReport {
    pub scenario: ScenarioId,
    pub seed: u64,
    pub replications: usize,
    pub sweep_sigma2: bool,
    pub rows: Vec<BiasRow>,
    /// Linear-trend histograms from the first replication of each cell.
    pub histograms: Vec<HistogramBin>,
    pub warnings: Vec<String>,
}

impl BiasReport {
    pub fn row(&self, arm: &str, time_spec: TimeSpec, rho: f64) -> Option<&BiasRow> {
        self.rows.iter().find(|r| r.arm == arm && r.time_spec == time_spec && r.rho == rho)
    }

    pub fn rows_for(&self, arm: &str, time_spec: TimeSpec) -> Vec<&BiasRow> {
        self.rows.iter().filter(|r| r.arm == arm && r.time_spec == time_spec).collect()
    }

    /// `arm,time_spec,rho,[sigma2,]mean_bias,mc_se,pbr,reliability,fail_rate`;
    /// the `sigma2` column appears only for σ² sweeps.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["arm", "time_spec", "rho"];
        if self.sweep_sigma2 {
            header.push("sigma2");
        }
        header.extend(["mean_bias", "mc_se", "pbr", "reliability", "fail_rate"]);
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.arm.clone(), r.time_spec.to_string(), num(r.rho)];
            if self.sweep_sigma2 {
                rec.push(num(r.sigma2));
            }
            rec.extend([num(r.mean_bias), num(r.mc_se), opt(r.pbr), opt(r.reliability), num(r.fail_rate)]);
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn num(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        "NA".into()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), num)
}

#[derive(Debug, Clone, Copy, Default)]
struct ArmOutcome {
    bias: Option<f64>,
    unmatched: Option<f64>,
}

fn histogram(label: &str, groups: &[(&str, Vec<f64>)], bins: usize) -> Vec<HistogramBin> {
    let all = groups.iter().flat_map(|(_, v)| v.iter().copied());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() || bins == 0 {
        return Vec::new();
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut out = Vec::new();
    for (group, values) in groups {
        let mut counts = vec![0usize; bins];
        for &v in values {
            counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
        }
        for (b, &count) in counts.iter().enumerate() {
            out.push(HistogramBin {
                label: label.to_string(),
                group: group.to_string(),
                bin: b,
                low: lo + b as f64 * width,
                high: lo + (b + 1) as f64 * width,
                count,
            });
        }
    }
    out
}

fn trend_histogram(label: &str, panel: &Panel, trends: &TrendMatrix, feature: usize, bins: usize) -> Vec<HistogramBin> {
    let pick = |idx: Vec<usize>| idx.into_iter().map(|i| trends.features[(i, feature)]).collect::<Vec<_>>();
    histogram(label, &[("comparison", pick(panel.comparison_indices())), ("treated", pick(panel.treated_indices()))], bins)
}

fn run_replication(
    cfg: &ExperimentConfig,
    panel: &Panel,
    tau: f64,
) -> Vec<ArmOutcome> {
    let mut trends: BTreeMap<TrendFeature, Option<(TrendMatrix, TrendMatrix)>> = BTreeMap::new();
    let mut entropy: BTreeMap<TrendFeature, Option<UnitWeights>> = BTreeMap::new();
    let mut matched: BTreeMap<TrendFeature, (Option<UnitWeights>, f64)> = BTreeMap::new();
    let mut split = |feature: TrendFeature| {
        trends
            .entry(feature)
            .or_insert_with(|| estimate_trends(panel, feature.kind()).ok().map(|t| t.split(panel)))
            .clone()
    };
    cfg.arms
        .iter()
        .map(|arm| {
            let weights = match arm.method {
                Method::None => None,
                Method::Entropy => {
                    let w = entropy.entry(arm.trend).or_insert_with(|| {
                        let (treated, comparison) = split(arm.trend)?;
                        let prob = build_constraints(&comparison, &treated, None, &cfg.moments).ok()?;
                        let bw = solve_entropy_balance(&prob, &cfg.solver).ok()?;
                        bw.unit_weights(panel).ok()
                    });
                    match w {
                        Some(w) => Some(w.clone()),
                        None => return ArmOutcome::default(),
                    }
                }
                Method::Match => {
                    let (w, unmatched) = matched.entry(arm.trend).or_insert_with(|| match split(arm.trend) {
                        Some((treated, comparison)) => match match_nearest(&treated, &comparison, cfg.caliper) {
                            Ok(ms) => (match_weights(&ms, panel).ok(), ms.failure_rate()),
                            Err(_) => (None, 1.0),
                        },
                        None => (None, 1.0),
                    });
                    let unmatched = Some(*unmatched);
                    match w {
                        Some(w) => return fit_outcome(panel, Some(&*w), arm.time_spec, tau, unmatched),
                        None => return ArmOutcome { bias: None, unmatched },
                    }
                }
            };
            fit_outcome(panel, weights.as_ref(), arm.time_spec, tau, None)
        })
        .collect()
}

fn fit_outcome(panel: &Panel, w: Option<&UnitWeights>, spec: TimeSpec, tau: f64, unmatched: Option<f64>) -> ArmOutcome {
    let bias = fit_did(panel, w, spec).ok().map(|f| f.tau_hat - tau).filter(|b| b.is_finite());
    ArmOutcome { bias, unmatched }
}

/// Runs every (cell, replication) on a pool of `threads` workers (0 = rayon
/// default) and aggregates in a fixed order, so the report does not depend
/// on the thread count.
///
/// Replication `r` of cell `c` draws from substream `(c << 32) | r` of the
/// configured seed; all arms in a replication share the same panel.
pub fn run_experiment(cfg: &ExperimentConfig, threads: usize) -> Result<BiasReport, HarnessError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    let cells = cfg.cells();
    let specs = cells
        .iter()
        .map(|&(rho, sigma2)| {
            let o = Overrides { rho: Some(rho), sigma2: sigma2.or(cfg.overrides.sigma2), ..cfg.overrides.clone() };
            scenario_spec(cfg.scenario, &o)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let reps = cfg.replications;
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..reps).map(move |r| (c, r))).collect();
    let outcomes: Vec<Result<Vec<ArmOutcome>, SimulateError>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, r)| {
                let stream = ((c as u64) << 32) | r as u64;
                let panel = generate_panel_stream(&specs[c], cfg.seed, stream)?;
                Ok(run_replication(cfg, &panel, specs[c].tau))
            })
            .collect()
    });

    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    let mut histograms = Vec::new();
    for (c, spec) in specs.iter().enumerate() {
        let cell = &outcomes[c * reps..(c + 1) * reps];
        let mut per_arm: Vec<Vec<ArmOutcome>> = vec![Vec::with_capacity(reps); cfg.arms.len()];
        for rep in cell {
            let rep = rep.as_ref().map_err(|e| HarnessError::Numerical(e.to_string()))?;
            for (a, o) in rep.iter().enumerate() {
                per_arm[a].push(*o);
            }
        }
        let reliability = trend_reliability(spec, TrendKind::LINEAR).ok();
        if let Some(w) = reliability.as_ref().and_then(|r| r.warning.clone()) {
            warnings.push(format!("rho={} sigma2={}: {w}", spec.rho, spec.sigma2));
        }
        let first = rows.len();
        for (arm, outs) in cfg.arms.iter().zip(&per_arm) {
            let biases: Vec<f64> = outs.iter().filter_map(|o| o.bias).collect();
            let n = biases.len();
            let mean = if n > 0 { biases.iter().sum::<f64>() / n as f64 } else { f64::NAN };
            let mc_se = if n > 1 {
                (biases.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt()
            } else {
                f64::NAN
            };
            let label = arm.label();
            if n == 0 {
                if arm.method == Method::None {
                    return Err(HarnessError::Numerical(format!(
                        "unweighted arm ({}) failed in every replication at rho={}",
                        arm.time_spec, spec.rho
                    )));
                }
                warnings.push(format!("{label} ({}) produced no estimate at rho={}", arm.time_spec, spec.rho));
            } else if n < 2 {
                warnings.push(format!(
                    "{label} ({}) at rho={}: Monte Carlo SE undefined with one estimate",
                    arm.time_spec, spec.rho
                ));
            }
            let match_failure_rate = (arm.method == Method::Match)
                .then(|| outs.iter().map(|o| o.unmatched.unwrap_or(1.0)).sum::<f64>() / reps as f64);
            rows.push(BiasRow {
                arm: label,
                method: arm.method,
                trend: (arm.method != Method::None).then_some(arm.trend),
                time_spec: arm.time_spec,
                rho: spec.rho,
                sigma2: spec.sigma2,
                mean_bias: mean,
                mc_se,
                pbr: None,
                reliability: reliability.as_ref().map(|r| r.value),
                fail_rate: match_failure_rate.unwrap_or((reps - n) as f64 / reps as f64),
                n_estimates: n,
                n_failed: reps - n,
                match_failure_rate,
            });
        }
        let cell_rows = &mut rows[first..];
        let baselines: Vec<(TimeSpec, f64)> = cell_rows
            .iter()
            .filter(|r| r.method == Method::None)
            .map(|r| (r.time_spec, r.mean_bias))
            .collect();
        for r in cell_rows.iter_mut() {
            r.pbr = if r.method == Method::None {
                Some(0.0)
            } else if r.n_estimates == 0 {
                None
            } else {
                baselines
                    .iter()
                    .find(|(s, _)| *s == r.time_spec)
                    .and_then(|&(_, b)| percent_bias_reduction(r.mean_bias, b))
            };
        }

        let panel = generate_panel_stream(spec, cfg.seed, (c as u64) << 32)?;
        if let Ok(t) = estimate_trends(&panel, TrendKind::LINEAR) {
            let label = format!("rho={} sigma2={}", spec.rho, spec.sigma2);
            histograms.extend(trend_histogram(&label, &panel, &t, 0, 30));
        }
    }
    Ok(BiasReport {
        scenario: cfg.scenario,
        seed: cfg.seed,
        replications: reps,
        sweep_sigma2: cfg.sigma2_grid.is_some(),
        rows,
        histograms,
        warnings,
    })
}

/// Settings for the single-panel workflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Panel CSV; relative paths resolve against the config file.
    #[serde(default)]
    pub panel: Option<PathBuf>,
    pub intervention_time: f64,
    /// Covariates to balance; every covariate column when absent.
    #[serde(default)]
    pub covariates: Option<Vec<String>>,
    #[serde(default = "default_analysis_trend")]
    pub trend: TrendFeature,
    #[serde(default = "default_moments")]
    pub moments: BTreeSet<u8>,
    #[serde(default = "default_analysis_time")]
    pub time_spec: TimeSpec,
    #[serde(default = "default_analysis_method")]
    pub method: Method,
    #[serde(default = "default_caliper")]
    pub caliper: f64,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    #[serde(default)]
    pub solver: SolverSettings,
}

fn default_analysis_trend() -> TrendFeature {
    TrendFeature::FirstDifferences
}
fn default_analysis_time() -> TimeSpec {
    TimeSpec::Nonparametric
}
fn default_analysis_method() -> Method {
    Method::Entropy
}
fn default_bins() -> usize {
    20
}

impl AnalysisConfig {
    pub fn new(intervention_time: f64) -> Self {
        serde_json::from_value(serde_json::json!({ "intervention_time": intervention_time }))
            .expect("defaults deserialize")
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: AnalysisConfig = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        if cfg.method == Method::None {
            return Err(HarnessError::Config("analysis method must be `entropy` or `match`".into()));
        }
        if cfg.moments.is_empty() || cfg.moments.iter().any(|m| !(1..=2).contains(m)) {
            return Err(HarnessError::Config("moments must be a non-empty subset of {1, 2}".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let (Some(p), Some(dir)) = (&cfg.panel, path.parent()) {
            if p.is_relative() {
                cfg.panel = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureOverlap {
    pub feature: String,
    pub treated_min: f64,
    pub treated_max: f64,
    pub comparison_min: f64,
    pub comparison_max: f64,
    pub n_treated_outside: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapSummary {
    pub trend: TrendFeature,
    pub features: Vec<FeatureOverlap>,
    /// Treated units with some feature outside the comparison range.
    pub treated_outside_support: Vec<UnitId>,
    pub histogram: Vec<HistogramBin>,
}

pub fn overlap_summary(panel: &Panel, trends: &TrendMatrix, trend: TrendFeature, bins: usize) -> OverlapSummary {
    let treated = panel.treated_indices();
    let comparison = panel.comparison_indices();
    let range = |idx: &[usize], f: usize| {
        idx.iter()
            .map(|&i| trends.features[(i, f)])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
    };
    let mut outside = BTreeSet::new();
    let mut features = Vec::new();
    let mut hist = Vec::new();
    for (f, name) in trends.feature_names().into_iter().enumerate() {
        let (tmin, tmax) = range(&treated, f);
        let (cmin, cmax) = range(&comparison, f);
        let mut n_out = 0;
        for &i in &treated {
            let v = trends.features[(i, f)];
            if v < cmin || v > cmax {
                n_out += 1;
                outside.insert(i);
            }
        }
        hist.extend(trend_histogram(&name, panel, trends, f, bins));
        features.push(FeatureOverlap {
            feature: name,
            treated_min: tmin,
            treated_max: tmax,
            comparison_min: cmin,
            comparison_max: cmax,
            n_treated_outside: n_out,
        });
    }
    OverlapSummary {
        trend,
        features,
        treated_outside_support: outside.into_iter().map(|i| panel.unit_ids()[i].clone()).collect(),
        histogram: hist,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceSection {
    pub method: Method,
    pub table: BalanceTable,
    /// Solver diagnostics (entropy) or match summary, as free-form JSON.
    pub details: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrendSection {
    pub before: Option<PretrendTest>,
    pub after: Option<PretrendTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateSection {
    pub before: DidFit,
    pub after: DidFit,
    /// `estimate (low--high)` strings keyed by `before` / `after`.
    pub table: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub balance: BalanceSection,
    pub overlap: OverlapSummary,
    pub pretrend: PretrendSection,
    pub estimates: EstimateSection,
    pub warnings: Vec<String>,
}

fn numerical<E: fmt::Display>(e: E) -> HarnessError {
    HarnessError::Numerical(e.to_string())
}

/// Balance, overlap, pre-trend tests and DD estimates before and after
/// weighting on one panel.
pub fn analyze_panel(panel: &Panel, cfg: &AnalysisConfig) -> Result<AnalysisReport, HarnessError> {
    let mut warnings = panel.warnings();
    let trends = estimate_trends(panel, cfg.trend.kind()).map_err(|e| match e {
        TrendError::InsufficientPrePeriods { .. } => HarnessError::Config(e.to_string()),
        other => numerical(other),
    })?;
    warnings.extend(trends.warnings.iter().cloned());
    let overlap = overlap_summary(panel, &trends, cfg.trend, cfg.histogram_bins);
    let (treated_t, comparison_t) = trends.split(panel);

    let cov_names: Vec<String> = match (&cfg.covariates, panel.covariates()) {
        (Some(list), Some(c)) => {
            for n in list {
                if !c.names.contains(n) {
                    return Err(HarnessError::Config(format!("unknown covariate `{n}`")));
                }
            }
            list.clone()
        }
        (Some(list), None) if !list.is_empty() => {
            return Err(HarnessError::Config("panel has no covariate columns".into()));
        }
        (None, Some(c)) => c.names.clone(),
        _ => Vec::new(),
    };

    let (weights, details) = match cfg.method {
        Method::Entropy => {
            let cov_matrices = panel.covariates().filter(|_| !cov_names.is_empty()).map(|c| {
                let cols: Vec<usize> = cov_names.iter().map(|n| c.names.iter().position(|m| m == n).unwrap()).collect();
                let pick = |rows: Vec<usize>| nalgebra::DMatrix::from_fn(rows.len(), cols.len(), |r, k| c.values[(rows[r], cols[k])]);
                (pick(panel.comparison_indices()), pick(panel.treated_indices()))
            });
            let block = cov_matrices.as_ref().map(|(comparison, treated)| CovariateBlock {
                names: &cov_names,
                comparison,
                treated,
            });
            let solved = build_constraints(&comparison_t, &treated_t, block, &cfg.moments)
                .and_then(|prob| {
                    warnings.extend(prob.warnings.iter().cloned());
                    solve_entropy_balance(&prob, &cfg.solver)
                });
            let bw = match solved {
                Ok(bw) => bw,
                Err(e @ (BalanceError::InfeasibleTargets(_) | BalanceError::NonConvergence { .. })) => {
                    let n_out = overlap.treated_outside_support.len();
                    return Err(HarnessError::Infeasible {
                        message: format!(
                            "entropy balancing failed ({e}); {n_out} treated unit(s) lie outside the comparison \
                             trend support, so the overlap assumption appears violated"
                        ),
                        overlap: Box::new(overlap),
                    });
                }
                Err(e) => return Err(numerical(e)),
            };
            let w = bw.unit_weights(panel)?;
            (w, serde_json::json!({ "dual": bw.dual, "columns": bw.column_labels.iter().map(|l| l.name()).collect::<Vec<_>>(), "diagnostics": bw.diagnostics }))
        }
        Method::Match => {
            let ms = match_nearest(&treated_t, &comparison_t, cfg.caliper).map_err(numerical)?;
            let w = match match_weights(&ms, panel) {
                Ok(w) => w,
                Err(MatchError::EmptyMatchSet) => {
                    return Err(HarnessError::Infeasible {
                        message: format!(
                            "no treated unit has a comparison match within {} SD; the overlap assumption appears violated",
                            cfg.caliper
                        ),
                        overlap: Box::new(overlap),
                    })
                }
                Err(e) => return Err(numerical(e)),
            };
            let details = serde_json::json!({
                "pairs": ms.pairs.len(),
                "unmatched_treated": ms.unmatched_treated,
                "failure_rate": ms.failure_rate(),
                "caliper_distance": ms.caliper_distance,
            });
            (w, details)
        }
        Method::None => return Err(HarnessError::Config("analysis method must be `entropy` or `match`".into())),
    };

    let mut columns: Vec<BalanceColumn> = cov_names.iter().cloned().map(BalanceColumn::Covariate).collect();
    columns.extend(panel.pre_times().iter().map(|&t| BalanceColumn::OutcomeAt(t)));
    let table = balance_table(panel, Some(&weights), &columns)?;

    let pre_test = |w: Option<&UnitWeights>| match pretrend_test(panel, w) {
        Ok(t) => Ok(Some(t)),
        Err(DidError::InsufficientPrePeriods(_)) => Ok(None),
        Err(e) => Err(numerical(e)),
    };
    let pretrend = PretrendSection { before: pre_test(None)?, after: pre_test(Some(&weights))? };
    let before = fit_did(panel, None, cfg.time_spec).map_err(numerical)?;
    let after = fit_did(panel, Some(&weights), cfg.time_spec).map_err(numerical)?;
    warnings.extend(after.notes.iter().cloned());
    let table_cells = BTreeMap::from([
        ("before".to_string(), before.table_cell(2)),
        ("after".to_string(), after.table_cell(2)),
    ]);
    Ok(AnalysisReport {
        balance: BalanceSection { method: cfg.method, table, details },
        overlap,
        pretrend,
        estimates: EstimateSection { before, after, table: table_cells },
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Csv,
    Json,
    Plotdata,
}

impl FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            "plotdata" => Ok(OutputFormat::Plotdata),
            other => Err(format!("unknown format `{other}` (expected csv, json or plotdata)")),
        }
    }
}

/// Something [`emit_report`] can write.
pub trait Report: Serialize {
    /// Base name for output files.
    fn stem(&self) -> &'static str;
    fn write_csv_files(&self, dir: &Path) -> Result<Vec<PathBuf>, HarnessError>;
    fn write_plotdata(&self, dir: &Path) -> Result<Vec<PathBuf>, HarnessError>;
}

fn write_histogram(path: &Path, bins: &[HistogramBin]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["label", "group", "bin", "low", "high", "count"])?;
    for b in bins {
        w.write_record([b.label.clone(), b.group.clone(), b.bin.to_string(), num(b.low), num(b.high), b.count.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

impl Report for BiasReport {
    fn stem(&self) -> &'static str {
        "bias_report"
    }

    fn write_csv_files(&self, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
        let path = dir.join("bias_report.csv");
        self.write_csv(fs::File::create(&path)?)?;
        Ok(vec![path])
    }

    fn write_plotdata(&self, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
        let pbr = dir.join("plot_pbr.csv");
        let mut w = csv::Writer::from_path(&pbr)?;
        w.write_record(["arm", "time_spec", "rho", "sigma2", "reliability", "pbr"])?;
        for r in &self.rows {
            w.write_record([r.arm.clone(), r.time_spec.to_string(), num(r.rho), num(r.sigma2), opt(r.reliability), opt(r.pbr)])?;
        }
        w.flush()?;
        let hist = dir.join("plot_trend_histogram.csv");
        write_histogram(&hist, &self.histograms)?;
        Ok(vec![pbr, hist])
    }
}

impl Report for AnalysisReport {
    fn stem(&self) -> &'static str {
        "analysis"
    }

    fn write_csv_files(&self, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
        let balance = dir.join("analysis_balance.csv");
        let mut w = csv::Writer::from_path(&balance)?;
        w.write_record(["column", "treated_mean", "comparison_mean", "comparison_weighted_mean"])?;
        for r in &self.balance.table.rows {
            w.write_record([r.column.clone(), num(r.treated_mean), num(r.comparison_mean), opt(r.comparison_weighted_mean)])?;
        }
        w.flush()?;
        let estimates = dir.join("analysis_estimates.csv");
        let mut w = csv::Writer::from_path(&estimates)?;
        w.write_record(["weights", "time_spec", "tau_hat", "std_error", "ci_low", "ci_high", "pretrend_stat", "pretrend_p"])?;
        for (name, fit, pre) in [
            ("before", &self.estimates.before, &self.pretrend.before),
            ("after", &self.estimates.after, &self.pretrend.after),
        ] {
            w.write_record([
                name.to_string(),
                fit.time_spec.to_string(),
                num(fit.tau_hat),
                num(fit.standard_error),
                num(fit.ci_low),
                num(fit.ci_high),
                opt(pre.as_ref().map(|p| p.statistic)),
                opt(pre.as_ref().map(|p| p.p_value)),
            ])?;
        }
        w.flush()?;
        Ok(vec![balance, estimates])
    }

    fn write_plotdata(&self, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
        let hist = dir.join("plot_overlap_histogram.csv");
        write_histogram(&hist, &self.overlap.histogram)?;
        Ok(vec![hist])
    }
}

/// Writes the report in each requested format under `dir` (created if
/// missing) and returns the files written.
pub fn emit_report<R: Report>(report: &R, dir: &Path, formats: &[OutputFormat]) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for f in formats.iter().collect::<BTreeSet<_>>() {
        match f {
            OutputFormat::Csv => written.extend(report.write_csv_files(dir)?),
            OutputFormat::Json => {
                let path = dir.join(format!("{}.json", report.stem()));
                let mut file = fs::File::create(&path)?;
                serde_json::to_writer_pretty(&mut file, report)?;
                writeln!(file)?;
                written.push(path);
            }
            OutputFormat::Plotdata => written.extend(report.write_plotdata(dir)?),
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::generate_panel;

    fn small(scenario: ScenarioId, arms: &str, reps: usize) -> ExperimentConfig {
        ExperimentConfig::from_json(&format!(
            r#"{{"scenario": "{scenario}", "overrides": {{"n0": 120, "n1": 60}},
                "rho_grid": [0.0, 0.9], "replications": {reps}, "seed": 9, "arms": {arms}}}"#
        ))
        .unwrap()
    }

    const ARMS: &str = r#"[
        {"method": "none", "time_spec": "poly1"},
        {"method": "none", "time_spec": "nonparametric"},
        {"method": "entropy", "trend": "linear", "time_spec": "poly1"},
        {"method": "match", "trend": "linear", "time_spec": "nonparametric"}
    ]"#;

    #[test]
    fn config_validation() {
        let no_none = r#"{"scenario": "scenario1", "arms": [{"method": "entropy", "time_spec": "poly1"}]}"#;
        assert!(matches!(ExperimentConfig::from_json(no_none), Err(HarnessError::Config(_))));
        let zero = r#"{"scenario": "scenario1", "replications": 0, "arms": [{"method": "none", "time_spec": "np"}]}"#;
        assert!(ExperimentConfig::from_json(zero).is_err());
        let typo = r#"{"scenario": "scenario1", "arm": []}"#;
        assert!(ExperimentConfig::from_json(typo).is_err());
        let ok = ExperimentConfig::from_json(r#"{"scenario": "null_parallel", "arms": [{"method": "none", "time_spec": "np"}]}"#)
            .unwrap();
        assert_eq!(ok.rho_grid, DEFAULT_RHO_GRID.to_vec());
        assert_eq!(ok.replications, 500);
        assert_eq!(ok.moments, BTreeSet::from([1]));
    }

    #[test]
    fn report_shape_and_baseline_pbr() {
        let rep = run_experiment(&small(ScenarioId::Scenario1, ARMS, 8), 2).unwrap();
        assert_eq!(rep.rows.len(), 8);
        for r in &rep.rows {
            if r.method == Method::None {
                assert_eq!(r.pbr, Some(0.0));
            }
            assert!(r.mc_se.is_finite() && r.mc_se > 0.0);
        }
        let m = rep.row("match-linear", TimeSpec::Nonparametric, 0.0).unwrap();
        assert!(m.match_failure_rate.is_some());
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("arm,time_spec,rho,mean_bias,mc_se,pbr,reliability,fail_rate\n"));
    }

    #[test]
    fn single_replication_flags_undefined_se() {
        let rep = run_experiment(&small(ScenarioId::Scenario1, ARMS, 1), 1).unwrap();
        assert!(rep.rows.iter().all(|r| r.mc_se.is_nan()));
        assert!(rep.warnings.iter().any(|w| w.contains("SE undefined")));
    }

    #[test]
    fn scenario2_matching_fails_without_noise() {
        let mut cfg = small(ScenarioId::Scenario2, ARMS, 3);
        cfg.overrides.sigma2 = Some(1e-4);
        let rep = run_experiment(&cfg, 0).unwrap();
        let m = rep.row("match-linear", TimeSpec::Nonparametric, 0.9).unwrap();
        assert!(m.fail_rate > 0.95, "{m:?}");
        assert_eq!(m.pbr, None);
    }

    #[test]
    fn thread_count_does_not_change_output() {
        let cfg = small(ScenarioId::Scenario1, ARMS, 6);
        let csv = |threads| {
            let mut buf = Vec::new();
            run_experiment(&cfg, threads).unwrap().write_csv(&mut buf).unwrap();
            buf
        };
        assert_eq!(csv(1), csv(3));
    }

    #[test]
    fn histogram_counts_every_value() {
        let bins = histogram("x", &[("a", vec![0.0, 0.5, 1.0]), ("b", vec![1.0])], 4);
        assert_eq!(bins.len(), 8);
        assert_eq!(bins.iter().filter(|b| b.group == "a").map(|b| b.count).sum::<usize>(), 3);
        assert_eq!(bins[3].count, 1);
        assert_eq!(bins[7].count, 1);
    }

    #[test]
    fn analysis_on_exchangeable_groups() {
        let spec = scenario_spec(
            ScenarioId::NullParallel,
            &Overrides { tau: Some(0.5), n0: Some(400), n1: Some(200), ..Default::default() },
        )
        .unwrap();
        let panel = generate_panel(&spec, 4).unwrap();
        let report = analyze_panel(&panel, &AnalysisConfig::new(5.0)).unwrap();
        let (b, a) = (&report.estimates.before, &report.estimates.after);
        assert!((b.tau_hat - a.tau_hat).abs() < 2.0 * b.standard_error.max(a.standard_error));
        let after = report.pretrend.after.unwrap();
        assert!(after.interactions.iter().all(|i| i.estimate.abs() < 1e-6));
        assert_eq!(report.balance.table.rows.len(), 4);
    }

    #[test]
    fn unit_outside_support_is_diagnosed() {
        let spec = scenario_spec(ScenarioId::NullParallel, &Overrides { n0: Some(50), n1: Some(10), ..Default::default() })
            .unwrap();
        let panel = generate_panel(&spec, 8).unwrap();
        let mut y = panel.outcomes().clone();
        let far = panel.n_units() - 1;
        for k in 0..y.ncols() {
            y[(far, k)] += 100.0 * k as f64;
        }
        let panel = Panel::new(
            panel.unit_ids().to_vec(),
            panel.treated_flags().to_vec(),
            panel.times().to_vec(),
            panel.intervention_time(),
            y,
            None,
        )
        .unwrap();
        match analyze_panel(&panel, &AnalysisConfig::new(5.0)) {
            Err(HarnessError::Infeasible { message, overlap }) => {
                assert!(message.contains("overlap assumption"));
                assert!(overlap.treated_outside_support.contains(&panel.unit_ids()[far]));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn emits_requested_formats() {
        let dir = tempfile::tempdir().unwrap();
        let rep = run_experiment(&small(ScenarioId::Scenario1, ARMS, 2), 1).unwrap();
        let files = emit_report(&rep, dir.path(), &[OutputFormat::Plotdata, OutputFormat::Csv, OutputFormat::Json]).unwrap();
        let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert_eq!(names, ["bias_report.csv", "bias_report.json", "plot_pbr.csv", "plot_trend_histogram.csv"]);
        let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&files[1]).unwrap()).unwrap();
        assert_eq!(json["rows"].as_array().unwrap().len(), 8);
    }
}
