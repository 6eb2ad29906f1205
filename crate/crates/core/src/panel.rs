//! Balanced long-format panels.
//!
//! A [`Panel`] holds one outcome per unit and time, a time-invariant binary
//! group indicator, and optional time-invariant covariates. Panels are
//! validated once, at construction, and are immutable afterwards.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balance::effective_sample_size;

/// Opaque unit identifier.
///
/// Ordering is "natural": identifiers that parse as integers sort numerically
/// and before all other identifiers, which sort lexicographically. This keeps
/// `"2" < "10"` for simulated data while still giving a total order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnitId(String);

impl UnitId {
    pub fn new(id: impl Into<String>) -> Self {
        UnitId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    fn numeric(&self) -> Option<i128> {
        self.0.parse::<i128>().ok()
    }
}

impl Ord for UnitId {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self.numeric(), other.numeric()) {
            (Some(a), Some(b)) => a.cmp(&b).then_with(|| self.0.cmp(&other.0)),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => self.0.cmp(&other.0),
        }
    }
}

impl PartialOrd for UnitId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for UnitId {
    fn from(s: &str) -> Self {
        UnitId::new(s)
    }
}

impl From<usize> for UnitId {
    fn from(i: usize) -> Self {
        UnitId(i.to_string())
    }
}

/// Named time-invariant covariates, one row per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    pub names: Vec<String>,
    /// N × p, rows aligned to the panel's units.
    pub values: DMatrix<f64>,
}

/// A single problem found while validating a panel.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValidationIssue {
    MissingColumn { column: String },
    MissingCell { unit: String, time: f64 },
    DuplicateRow { unit: String, time: f64 },
    NonBinaryGroup { unit: String, value: String },
    GroupFlip { unit: String },
    NonNumeric { line: u64, column: String, value: String },
    NonFinite { unit: String, column: String },
    CovariateNotConstant { unit: String, column: String },
    InterventionTimeOutOfRange { intervention_time: f64, first: f64, last: f64 },
    EmptyGroup { group: u8 },
    DuplicateUnit { unit: String },
    Shape { detail: String },
    Empty,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use ValidationIssue::*;
        match self {
            MissingColumn { column } => write!(f, "missing column `{column}`"),
            MissingCell { unit, time } => write!(f, "unit {unit} has no observation at time {time}"),
            DuplicateRow { unit, time } => write!(f, "unit {unit} has duplicate rows at time {time}"),
            NonBinaryGroup { unit, value } => {
                write!(f, "unit {unit} has non-binary group value `{value}`")
            }
            GroupFlip { unit } => write!(f, "unit {unit} changes group over time"),
            NonNumeric { line, column, value } => {
                write!(f, "line {line}: column `{column}` is not numeric (`{value}`)")
            }
            NonFinite { unit, column } => write!(f, "unit {unit}: non-finite value in `{column}`"),
            CovariateNotConstant { unit, column } => {
                write!(f, "unit {unit}: covariate `{column}` varies over time")
            }
            InterventionTimeOutOfRange { intervention_time, first, last } => write!(
                f,
                "intervention time {intervention_time} must lie in ({first}, {last}]"
            ),
            EmptyGroup { group } => write!(f, "group {group} has no units"),
            DuplicateUnit { unit } => write!(f, "unit {unit} appears more than once"),
            Shape { detail } => f.write_str(detail),
            Empty => f.write_str("panel has no rows"),
        }
    }
}

/// Group sizes and period counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PanelCounts {
    pub n_comparison: usize,
    pub n_treated: usize,
    pub k_pre: usize,
    pub k_post: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub errors: Vec<ValidationIssue>,
    pub warnings: Vec<String>,
    pub counts: PanelCounts,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} validation error(s)", self.errors.len())?;
        for e in &self.errors {
            write!(f, "; {e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("invalid panel: {0}")]
    Invalid(Box<ValidationReport>),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("weights: {0}")]
    Weights(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
}

fn invalid(errors: Vec<ValidationIssue>) -> PanelError {
    PanelError::Invalid(Box::new(ValidationReport { errors, ..Default::default() }))
}

/// Balanced panel of N units observed at the same K times.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    unit_ids: Vec<UnitId>,
    treated: Vec<bool>,
    times: Vec<f64>,
    intervention_time: f64,
    outcomes: DMatrix<f64>,
    covariates: Option<Covariates>,
}

impl Panel {
    /// Builds a validated panel. Units are re-sorted by identifier.
    pub fn new(
        unit_ids: Vec<UnitId>,
        treated: Vec<bool>,
        times: Vec<f64>,
        intervention_time: f64,
        outcomes: DMatrix<f64>,
        covariates: Option<Covariates>,
    ) -> Result<Panel, PanelError> {
        let n = unit_ids.len();
        let mut errors = Vec::new();
        if n == 0 || times.is_empty() {
            return Err(invalid(vec![ValidationIssue::Empty]));
        }
        if treated.len() != n || outcomes.nrows() != n || outcomes.ncols() != times.len() {
            return Err(invalid(vec![ValidationIssue::Shape {
                detail: format!(
                    "expected {n} units × {} times, got outcomes {}×{} and {} group flags",
                    times.len(),
                    outcomes.nrows(),
                    outcomes.ncols(),
                    treated.len()
                ),
            }]));
        }
        if let Some(c) = &covariates {
            if c.values.nrows() != n || c.values.ncols() != c.names.len() {
                return Err(invalid(vec![ValidationIssue::Shape {
                    detail: "covariate matrix does not match unit count or names".into(),
                }]));
            }
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) || times.iter().any(|t| !t.is_finite()) {
            errors.push(ValidationIssue::Shape {
                detail: "times must be finite and strictly increasing".into(),
            });
        }
        let (first, last) = (times[0], times[times.len() - 1]);
        if !(intervention_time > first && intervention_time <= last) {
            errors.push(ValidationIssue::InterventionTimeOutOfRange {
                intervention_time,
                first,
                last,
            });
        }
        for g in [0u8, 1] {
            if !treated.iter().any(|&a| a == (g == 1)) {
                errors.push(ValidationIssue::EmptyGroup { group: g });
            }
        }
        for i in 0..n {
            if outcomes.row(i).iter().any(|y| !y.is_finite()) {
                errors.push(ValidationIssue::NonFinite {
                    unit: unit_ids[i].to_string(),
                    column: "outcome".into(),
                });
            }
            if let Some(c) = &covariates {
                for (j, name) in c.names.iter().enumerate() {
                    if !c.values[(i, j)].is_finite() {
                        errors.push(ValidationIssue::NonFinite {
                            unit: unit_ids[i].to_string(),
                            column: name.clone(),
                        });
                    }
                }
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| unit_ids[a].cmp(&unit_ids[b]));
        for w in order.windows(2) {
            if unit_ids[w[0]] == unit_ids[w[1]] {
                errors.push(ValidationIssue::DuplicateUnit { unit: unit_ids[w[0]].to_string() });
            }
        }
        if !errors.is_empty() {
            return Err(invalid(errors));
        }

        let k = times.len();
        let outcomes = DMatrix::from_fn(n, k, |i, t| outcomes[(order[i], t)]);
        let covariates = covariates.map(|c| Covariates {
            values: DMatrix::from_fn(n, c.names.len(), |i, j| c.values[(order[i], j)]),
            names: c.names,
        });
        Ok(Panel {
            unit_ids: order.iter().map(|&i| unit_ids[i].clone()).collect(),
            treated: order.iter().map(|&i| treated[i]).collect(),
            times,
            intervention_time,
            outcomes,
            covariates,
        })
    }

    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn unit_ids(&self) -> &[UnitId] {
        &self.unit_ids
    }

    pub fn is_treated(&self, unit: usize) -> bool {
        self.treated[unit]
    }

    pub fn treated_flags(&self) -> &[bool] {
        &self.treated
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn intervention_time(&self) -> f64 {
        self.intervention_time
    }

    /// N × K outcome matrix.
    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }

    pub fn covariates(&self) -> Option<&Covariates> {
        self.covariates.as_ref()
    }

    /// `E_t`: whether time column `k` is at or after the intervention.
    pub fn is_post(&self, k: usize) -> bool {
        self.times[k] >= self.intervention_time
    }

    pub fn pre_times(&self) -> &[f64] {
        &self.times[..self.n_pre()]
    }

    pub fn n_pre(&self) -> usize {
        self.times.iter().take_while(|&&t| t < self.intervention_time).count()
    }

    pub fn n_post(&self) -> usize {
        self.n_times() - self.n_pre()
    }

    pub fn treated_indices(&self) -> Vec<usize> {
        (0..self.n_units()).filter(|&i| self.treated[i]).collect()
    }

    pub fn comparison_indices(&self) -> Vec<usize> {
        (0..self.n_units()).filter(|&i| !self.treated[i]).collect()
    }

    pub fn counts(&self) -> PanelCounts {
        let n_treated = self.treated.iter().filter(|&&a| a).count();
        PanelCounts {
            n_comparison: self.n_units() - n_treated,
            n_treated,
            k_pre: self.n_pre(),
            k_post: self.n_post(),
        }
    }

    /// Warnings that do not prevent construction but restrict what the panel
    /// can be used for.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        let k_pre = self.n_pre();
        if k_pre < 2 {
            w.push(format!(
                "fewer than 2 pre-periods ({k_pre}): trend estimation and pre-trend tests are unavailable"
            ));
        } else if k_pre < 3 {
            w.push(format!(
                "only {k_pre} pre-periods: polynomial trends are limited to order {}",
                k_pre - 1
            ));
        }
        w
    }

    /// Copy restricted to times before the intervention. The intervention
    /// time is kept as metadata, so the result has no post-period.
    pub fn pre_panel(&self) -> Panel {
        let k_pre = self.n_pre();
        Panel {
            unit_ids: self.unit_ids.clone(),
            treated: self.treated.clone(),
            times: self.times[..k_pre].to_vec(),
            intervention_time: self.intervention_time,
            outcomes: self.outcomes.columns(0, k_pre).into_owned(),
            covariates: self.covariates.clone(),
        }
    }

    /// Copy keeping only the listed units (in the given order, which must be
    /// ascending to preserve the sorted-unit invariant).
    pub fn select_units(&self, units: &[usize]) -> Result<Panel, PanelError> {
        Panel::new(
            units.iter().map(|&i| self.unit_ids[i].clone()).collect(),
            units.iter().map(|&i| self.treated[i]).collect(),
            self.times.clone(),
            self.intervention_time,
            self.outcomes.select_rows(units),
            self.covariates.as_ref().map(|c| Covariates {
                names: c.names.clone(),
                values: c.values.select_rows(units),
            }),
        )
    }

    /// Writes the panel in long format: `unit,time,group,outcome[,covariate…]`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), PanelError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["unit".to_string(), "time".into(), "group".into(), "outcome".into()];
        if let Some(c) = &self.covariates {
            header.extend(c.names.iter().cloned());
        }
        w.write_record(&header)?;
        for i in 0..self.n_units() {
            for (k, t) in self.times.iter().enumerate() {
                let mut rec = vec![
                    self.unit_ids[i].to_string(),
                    t.to_string(),
                    if self.treated[i] { "1" } else { "0" }.to_string(),
                    self.outcomes[(i, k)].to_string(),
                ];
                if let Some(c) = &self.covariates {
                    rec.extend(c.values.row(i).iter().map(|v| v.to_string()));
                }
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-unit non-negative weights aligned to a panel's unit order.
///
/// Zero weight excludes a unit from weighted estimation. Estimators normalize
/// weights within each group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnitWeights {
    pub label: String,
    pub values: Vec<f64>,
}

impl UnitWeights {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Self {
        UnitWeights { label: label.into(), values }
    }

    pub fn check(&self, panel: &Panel) -> Result<(), PanelError> {
        if self.values.len() != panel.n_units() {
            return Err(PanelError::Weights(format!(
                "{} weights for {} units",
                self.values.len(),
                panel.n_units()
            )));
        }
        if let Some(i) = self.values.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(PanelError::Weights(format!(
                "weight for unit {} is negative or non-finite",
                panel.unit_ids()[i]
            )));
        }
        for (g, name) in [(true, "treated"), (false, "comparison")] {
            let total: f64 = (0..panel.n_units())
                .filter(|&i| panel.is_treated(i) == g)
                .map(|i| self.values[i])
                .sum();
            if !(total > 0.0) {
                return Err(PanelError::Weights(format!("{name} weights sum to zero")));
            }
        }
        Ok(())
    }

    /// Comparison-unit weights, normalized to sum to one.
    pub fn comparison(&self, panel: &Panel) -> Vec<f64> {
        normalized(panel.comparison_indices().iter().map(|&i| self.values[i]).collect())
    }
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

struct RawRow {
    unit: UnitId,
    time: f64,
    group: String,
    outcome: f64,
    covariates: Vec<f64>,
}

/// Reads a long-format CSV panel.
///
/// On success returns the panel with a report carrying counts and
/// warnings. Every structural problem found is collected into the
/// [`PanelError::Invalid`] report rather than stopping at the first.
pub fn load_panel<R: Read>(
    reader: R,
    intervention_time: f64,
) -> Result<(Panel, ValidationReport), PanelError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut errors = Vec::new();
    let required = ["unit", "time", "group", "outcome"];
    for (pos, name) in required.iter().enumerate() {
        if headers.get(pos) != Some(name) {
            errors.push(ValidationIssue::MissingColumn { column: name.to_string() });
        }
    }
    if !errors.is_empty() {
        return Err(invalid(errors));
    }
    let cov_names: Vec<String> = headers.iter().skip(4).map(str::to_string).collect();

    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).unwrap_or("");
        let mut num = |i: usize, name: &str| -> Option<f64> {
            match field(i).parse::<f64>() {
                Ok(v) => Some(v),
                Err(_) => {
                    errors.push(ValidationIssue::NonNumeric {
                        line,
                        column: name.to_string(),
                        value: field(i).to_string(),
                    });
                    None
                }
            }
        };
        let time = num(1, "time");
        let outcome = num(3, "outcome");
        let covs: Vec<Option<f64>> =
            cov_names.iter().enumerate().map(|(j, n)| num(4 + j, n)).collect();
        if let (Some(time), Some(outcome)) = (time, outcome) {
            if covs.iter().all(Option::is_some) {
                rows.push(RawRow {
                    unit: UnitId::new(field(0)),
                    time,
                    group: field(2).to_string(),
                    outcome,
                    covariates: covs.into_iter().flatten().collect(),
                });
            }
        }
    }
    if rows.is_empty() && errors.is_empty() {
        errors.push(ValidationIssue::Empty);
    }
    if rows.is_empty() {
        return Err(invalid(errors));
    }

    let mut times: Vec<f64> = rows.iter().map(|r| r.time).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let k = times.len();
    let time_index = |t: f64| times.binary_search_by(|x| x.total_cmp(&t)).expect("collected");

    struct UnitAcc {
        group: Option<bool>,
        outcomes: Vec<Option<f64>>,
        covariates: Option<Vec<f64>>,
    }
    let mut units: BTreeMap<UnitId, UnitAcc> = BTreeMap::new();
    for row in &rows {
        let acc = units.entry(row.unit.clone()).or_insert_with(|| UnitAcc {
            group: None,
            outcomes: vec![None; k],
            covariates: None,
        });
        let group = match row.group.parse::<f64>() {
            Ok(g) if g == 0.0 => Some(false),
            Ok(g) if g == 1.0 => Some(true),
            _ => {
                errors.push(ValidationIssue::NonBinaryGroup {
                    unit: row.unit.to_string(),
                    value: row.group.clone(),
                });
                None
            }
        };
        if let Some(g) = group {
            match acc.group {
                None => acc.group = Some(g),
                Some(prev) if prev != g => {
                    let issue = ValidationIssue::GroupFlip { unit: row.unit.to_string() };
                    if !errors.contains(&issue) {
                        errors.push(issue);
                    }
                }
                _ => {}
            }
        }
        let ti = time_index(row.time);
        if acc.outcomes[ti].is_some() {
            errors.push(ValidationIssue::DuplicateRow { unit: row.unit.to_string(), time: row.time });
        } else {
            acc.outcomes[ti] = Some(row.outcome);
        }
        match &acc.covariates {
            None => acc.covariates = Some(row.covariates.clone()),
            Some(prev) => {
                for (j, (a, b)) in prev.iter().zip(&row.covariates).enumerate() {
                    if a.to_bits() != b.to_bits() {
                        let issue = ValidationIssue::CovariateNotConstant {
                            unit: row.unit.to_string(),
                            column: cov_names[j].clone(),
                        };
                        if !errors.contains(&issue) {
                            errors.push(issue);
                        }
                    }
                }
            }
        }
    }
    for (id, acc) in &units {
        for (ti, cell) in acc.outcomes.iter().enumerate() {
            if cell.is_none() {
                errors.push(ValidationIssue::MissingCell { unit: id.to_string(), time: times[ti] });
            }
        }
    }
    if !errors.is_empty() {
        return Err(invalid(errors));
    }

    let n = units.len();
    let p = cov_names.len();
    let mut ids = Vec::with_capacity(n);
    let mut treated = Vec::with_capacity(n);
    let mut y = DMatrix::zeros(n, k);
    let mut z = DMatrix::zeros(n, p);
    for (i, (id, acc)) in units.into_iter().enumerate() {
        ids.push(id);
        treated.push(acc.group.unwrap_or(false));
        for (t, cell) in acc.outcomes.iter().enumerate() {
            y[(i, t)] = cell.expect("checked above");
        }
        for (j, v) in acc.covariates.unwrap_or_default().into_iter().enumerate() {
            z[(i, j)] = v;
        }
    }
    let covariates = (p > 0).then(|| Covariates { names: cov_names, values: z });
    let panel = Panel::new(ids, treated, times, intervention_time, y, covariates)?;
    let report = ValidationReport { errors: Vec::new(), warnings: panel.warnings(), counts: panel.counts() };
    Ok((panel, report))
}

/// A column summarized by [`balance_table`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceColumn {
    Covariate(String),
    /// Outcome level at a given observation time.
    OutcomeAt(f64),
}

impl BalanceColumn {
    fn label(&self) -> String {
        match self {
            BalanceColumn::Covariate(name) => name.clone(),
            BalanceColumn::OutcomeAt(t) => format!("outcome@{t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceRow {
    pub column: String,
    pub treated_mean: f64,
    pub comparison_mean: f64,
    pub comparison_weighted_mean: Option<f64>,
}

/// Group means before and after weighting, with effective sample sizes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceTable {
    pub rows: Vec<BalanceRow>,
    pub n_treated: usize,
    pub n_comparison: usize,
    pub ess_comparison: Option<f64>,
}

/// Treated means, unweighted and weighted comparison means per column.
pub fn balance_table(
    panel: &Panel,
    weights: Option<&UnitWeights>,
    columns: &[BalanceColumn],
) -> Result<BalanceTable, PanelError> {
    let treated = panel.treated_indices();
    let comparison = panel.comparison_indices();
    let w = match weights {
        Some(w) => {
            w.check(panel)?;
            Some(w.comparison(panel))
        }
        None => None,
    };
    let mut rows = Vec::with_capacity(columns.len());
    for col in columns {
        let values: Vec<f64> = match col {
            BalanceColumn::Covariate(name) => {
                let cov = panel
                    .covariates()
                    .ok_or_else(|| PanelError::UnknownColumn(name.clone()))?;
                let j = cov
                    .names
                    .iter()
                    .position(|n| n == name)
                    .ok_or_else(|| PanelError::UnknownColumn(name.clone()))?;
                cov.values.column(j).iter().copied().collect()
            }
            BalanceColumn::OutcomeAt(t) => {
                let k = panel
                    .times()
                    .iter()
                    .position(|x| x == t)
                    .ok_or_else(|| PanelError::UnknownColumn(col.label()))?;
                panel.outcomes().column(k).iter().copied().collect()
            }
        };
        let mean = |idx: &[usize]| idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64;
        rows.push(BalanceRow {
            column: col.label(),
            treated_mean: mean(&treated),
            comparison_mean: mean(&comparison),
            comparison_weighted_mean: w
                .as_ref()
                .map(|w| comparison.iter().zip(w).map(|(&i, wi)| wi * values[i]).sum()),
        });
    }
    Ok(BalanceTable {
        rows,
        n_treated: treated.len(),
        n_comparison: comparison.len(),
        ess_comparison: w.as_deref().map(effective_sample_size),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_panel(text: &str, te: f64) -> Result<(Panel, ValidationReport), PanelError> {
        load_panel(text.as_bytes(), te)
    }

    fn errors_of(r: Result<(Panel, ValidationReport), PanelError>) -> Vec<ValidationIssue> {
        match r {
            Err(PanelError::Invalid(rep)) => rep.errors,
            other => panic!("expected validation failure, got {other:?}"),
        }
    }

    #[test]
    fn minimal_two_by_two() {
        let (p, rep) =
            csv_panel("unit,time,group,outcome\n1,1,0,1.0\n1,2,0,2.0\n2,1,1,3.0\n2,2,1,5.0\n", 2.0)
                .unwrap();
        assert_eq!(p.n_units(), 2);
        assert_eq!(p.n_times(), 2);
        assert_eq!(rep.counts, PanelCounts { n_comparison: 1, n_treated: 1, k_pre: 1, k_post: 1 });
        assert!(rep.warnings.iter().any(|w| w.contains("fewer than 2 pre-periods")));
    }

    #[test]
    fn missing_cell_names_unit_and_time() {
        let mut text = String::from("unit,time,group,outcome\n");
        for u in 1..=8 {
            for t in 1..=4 {
                if u == 7 && t == 3 {
                    continue;
                }
                text.push_str(&format!("{u},{t},{},{}\n", u % 2, u * t));
            }
        }
        let errs = errors_of(csv_panel(&text, 3.0));
        assert_eq!(errs, vec![ValidationIssue::MissingCell { unit: "7".into(), time: 3.0 }]);
    }

    #[test]
    fn rejects_group_flip_nonbinary_and_duplicates() {
        let errs = errors_of(csv_panel(
            "unit,time,group,outcome\n1,1,0,1\n1,2,1,1\n2,1,2,1\n2,2,2,1\n3,1,1,1\n3,1,1,1\n3,2,1,1\n",
            2.0,
        ));
        assert!(errs.contains(&ValidationIssue::GroupFlip { unit: "1".into() }));
        assert!(errs.iter().any(|e| matches!(e, ValidationIssue::NonBinaryGroup { unit, .. } if unit == "2")));
        assert!(errs.contains(&ValidationIssue::DuplicateRow { unit: "3".into(), time: 1.0 }));
    }

    #[test]
    fn rejects_non_numeric_outcome() {
        let errs = errors_of(csv_panel("unit,time,group,outcome\n1,1,0,abc\n1,2,0,1\n", 2.0));
        assert!(matches!(&errs[0], ValidationIssue::NonNumeric { column, .. } if column == "outcome"));
    }

    #[test]
    fn rejects_intervention_time_outside_range() {
        let text = "unit,time,group,outcome\n1,1,0,1\n1,2,0,1\n2,1,1,1\n2,2,1,1\n";
        for te in [1.0, 0.5, 2.5] {
            let errs = errors_of(csv_panel(text, te));
            assert!(matches!(errs[0], ValidationIssue::InterventionTimeOutOfRange { .. }), "{te}");
        }
    }

    #[test]
    fn rejects_empty_group() {
        let errs = errors_of(csv_panel("unit,time,group,outcome\n1,1,0,1\n1,2,0,1\n", 2.0));
        assert_eq!(errs, vec![ValidationIssue::EmptyGroup { group: 1 }]);
    }

    #[test]
    fn units_sorted_naturally() {
        let (p, _) = csv_panel(
            "unit,time,group,outcome\n10,1,0,1\n10,2,0,1\n2,1,1,1\n2,2,1,1\nb,1,0,1\nb,2,0,1\na,1,1,1\na,2,1,1\n",
            2.0,
        )
        .unwrap();
        let ids: Vec<&str> = p.unit_ids().iter().map(UnitId::as_str).collect();
        assert_eq!(ids, ["2", "10", "a", "b"]);
    }

    #[test]
    fn covariates_must_be_time_invariant() {
        let errs = errors_of(csv_panel(
            "unit,time,group,outcome,age\n1,1,0,1,70\n1,2,0,1,71\n2,1,1,1,60\n2,2,1,1,60\n",
            2.0,
        ));
        assert_eq!(
            errs,
            vec![ValidationIssue::CovariateNotConstant { unit: "1".into(), column: "age".into() }]
        );
    }

    fn five_period_panel() -> Panel {
        let y = DMatrix::from_fn(4, 5, |i, t| (i * 10 + t) as f64);
        Panel::new(
            (0..4).map(UnitId::from).collect(),
            vec![false, true, false, true],
            vec![1.0, 2.0, 3.0, 4.0, 5.0],
            5.0,
            y,
            Some(Covariates { names: vec!["age".into()], values: DMatrix::from_vec(4, 1, vec![70.0, 80.0, 72.0, 78.0]) }),
        )
        .unwrap()
    }

    #[test]
    fn pre_panel_keeps_units_and_is_idempotent() {
        let p = five_period_panel();
        let pre = p.pre_panel();
        assert_eq!(pre.times(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pre.unit_ids(), p.unit_ids());
        assert_eq!(pre.treated_flags(), p.treated_flags());
        assert_eq!(pre.intervention_time(), 5.0);
        assert_eq!(pre.pre_panel(), pre);
    }

    #[test]
    fn pre_panel_of_single_pre_period() {
        let y = DMatrix::from_fn(2, 2, |i, t| (i + t) as f64);
        let p = Panel::new(vec!["a".into(), "b".into()], vec![false, true], vec![1.0, 2.0], 2.0, y, None)
            .unwrap();
        assert_eq!(p.pre_panel().n_times(), 1);
    }

    #[test]
    fn balance_table_unweighted_and_uniform() {
        let p = five_period_panel();
        let cols = [BalanceColumn::Covariate("age".into()), BalanceColumn::OutcomeAt(1.0)];
        let t = balance_table(&p, None, &cols).unwrap();
        assert_eq!(t.rows[0].treated_mean, 79.0);
        assert_eq!(t.rows[0].comparison_mean, 71.0);
        assert_eq!(t.rows[1].comparison_mean, 10.0);
        assert_eq!(t.ess_comparison, None);

        let uniform = UnitWeights::new("uniform", vec![1.0; 4]);
        let t = balance_table(&p, Some(&uniform), &cols).unwrap();
        for r in &t.rows {
            assert!((r.comparison_weighted_mean.unwrap() - r.comparison_mean).abs() < 1e-12);
        }
        assert!((t.ess_comparison.unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn balance_table_rejects_mismatched_weights() {
        let p = five_period_panel();
        let w = UnitWeights::new("bad", vec![1.0; 3]);
        assert!(matches!(balance_table(&p, Some(&w), &[]), Err(PanelError::Weights(_))));
        assert!(matches!(
            balance_table(&p, None, &[BalanceColumn::Covariate("bmi".into())]),
            Err(PanelError::UnknownColumn(_))
        ));
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let mut p = five_period_panel();
        p.outcomes[(0, 0)] = 0.1 + 0.2;
        p.outcomes[(1, 3)] = -1.0 / 3.0;
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let (q, _) = load_panel(buf.as_slice(), 5.0).unwrap();
        assert_eq!(p, q);
    }
}
