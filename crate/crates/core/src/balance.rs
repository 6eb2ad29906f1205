//! Entropy balancing.
//!
//! Finds comparison-unit weights `w` minimizing `Σ w_i log(w_i / q_i)` subject
//! to `Σ w_i C_i = target` and `Σ w_i = 1`. The minimizer has the form
//! `w_i ∝ q_i exp(-λᵀ C_i)`; `λ` is found by Newton's method on the convex dual
//! `f(λ) = log Σ q_i exp(-λᵀ (C_i - target))`, whose gradient is the negated
//! constraint residual and whose Hessian is the weighted covariance of the
//! constraint columns.

use std::collections::BTreeSet;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{Panel, PanelError, UnitId, UnitWeights};
use crate::trends::TrendMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum BalanceError {
    #[error("no convergence after {iterations} iterations (max violation {max_violation:.3e}); treated units may lack comparison support")]
    NonConvergence { iterations: usize, max_violation: f64 },
    #[error("targets lie outside the convex hull of the comparison units ({0}); balancing needs overlap between groups")]
    InfeasibleTargets(String),
    #[error("degenerate constraints: {0}")]
    DegenerateConstraints(String),
    #[error("invalid balance problem: {0}")]
    Invalid(String),
}

/// Which raw moment of a variable is constrained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintLabel {
    pub source: String,
    pub moment: u8,
}

impl ConstraintLabel {
    pub fn name(&self) -> String {
        match self.moment {
            1 => self.source.clone(),
            m => format!("{}^{}", self.source, m),
        }
    }
}

/// Moment constraints for one comparison group.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceProblem {
    pub comparison_units: Vec<UnitId>,
    /// N0 × J.
    pub constraint_matrix: DMatrix<f64>,
    pub targets: DVector<f64>,
    pub base_weights: DVector<f64>,
    pub column_labels: Vec<ConstraintLabel>,
    pub n_treated: usize,
    pub warnings: Vec<String>,
}

impl BalanceProblem {
    /// Validates the problem and screens constant columns: a constant column
    /// whose target equals the constant is dropped with a warning, otherwise
    /// the targets are infeasible.
    pub fn new(
        comparison_units: Vec<UnitId>,
        constraint_matrix: DMatrix<f64>,
        targets: DVector<f64>,
        column_labels: Vec<ConstraintLabel>,
        n_treated: usize,
    ) -> Result<BalanceProblem, BalanceError> {
        let (n0, j) = constraint_matrix.shape();
        if n0 == 0 {
            return Err(BalanceError::Invalid("no comparison units".into()));
        }
        if j == 0 {
            return Err(BalanceError::Invalid("no constraints".into()));
        }
        if comparison_units.len() != n0 || targets.len() != j || column_labels.len() != j {
            return Err(BalanceError::Invalid(format!(
                "{n0}×{j} constraints with {} units, {} targets, {} labels",
                comparison_units.len(),
                targets.len(),
                column_labels.len()
            )));
        }
        if constraint_matrix.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(BalanceError::Invalid("non-finite constraint value or target".into()));
        }

        let mut keep = Vec::with_capacity(j);
        let mut warnings = Vec::new();
        for c in 0..j {
            let col = constraint_matrix.column(c);
            let (lo, hi) = (col.min(), col.max());
            let tol = 1e-12 * lo.abs().max(hi.abs()).max(1.0);
            if hi - lo > tol {
                keep.push(c);
                continue;
            }
            let name = column_labels[c].name();
            if (targets[c] - lo).abs() <= 1e-9 * lo.abs().max(1.0) {
                warnings.push(format!("dropped constant constraint `{name}` (already balanced)"));
            } else {
                return Err(BalanceError::InfeasibleTargets(format!(
                    "`{name}` is constant {lo} among comparison units but the target is {}",
                    targets[c]
                )));
            }
        }
        if keep.is_empty() {
            return Err(BalanceError::DegenerateConstraints("every constraint column is constant".into()));
        }
        Ok(BalanceProblem {
            comparison_units,
            constraint_matrix: constraint_matrix.select_columns(&keep),
            targets: DVector::from_iterator(keep.len(), keep.iter().map(|&c| targets[c])),
            base_weights: DVector::from_element(n0, 1.0 / n0 as f64),
            column_labels: keep.iter().map(|&c| column_labels[c].clone()).collect(),
            n_treated,
            warnings,
        })
    }

    /// Problem from plain rows, with generated unit ids and column labels.
    pub fn from_rows(rows: &[Vec<f64>], targets: &[f64]) -> Result<BalanceProblem, BalanceError> {
        let j = targets.len();
        if rows.iter().any(|r| r.len() != j) {
            return Err(BalanceError::Invalid("ragged constraint rows".into()));
        }
        let c = DMatrix::from_fn(rows.len(), j, |i, k| rows[i][k]);
        let labels = (0..j).map(|k| ConstraintLabel { source: format!("c{}", k + 1), moment: 1 }).collect();
        BalanceProblem::new(
            (0..rows.len()).map(UnitId::from).collect(),
            c,
            DVector::from_column_slice(targets),
            labels,
            1,
        )
    }

    pub fn n_comparison(&self) -> usize {
        self.constraint_matrix.nrows()
    }

    pub fn n_constraints(&self) -> usize {
        self.constraint_matrix.ncols()
    }

    pub fn without_column(&self, c: usize) -> Result<BalanceProblem, BalanceError> {
        let keep: Vec<usize> = (0..self.n_constraints()).filter(|&k| k != c).collect();
        BalanceProblem::new(
            self.comparison_units.clone(),
            self.constraint_matrix.select_columns(&keep),
            DVector::from_iterator(keep.len(), keep.iter().map(|&k| self.targets[k])),
            keep.iter().map(|&k| self.column_labels[k].clone()).collect(),
            self.n_treated,
        )
    }
}

/// Covariates for both groups; rows aligned to the matching trend matrices.
#[derive(Debug, Clone, Copy)]
pub struct CovariateBlock<'a> {
    pub names: &'a [String],
    pub comparison: &'a DMatrix<f64>,
    pub treated: &'a DMatrix<f64>,
}

/// One constraint per (trend feature, moment) and per (covariate, moment),
/// ordered by moment then variable. Targets are treated-group means of the
/// same raw moments.
pub fn build_constraints(
    trends_comparison: &TrendMatrix,
    trends_treated: &TrendMatrix,
    covariates: Option<CovariateBlock<'_>>,
    moment_orders: &BTreeSet<u8>,
) -> Result<BalanceProblem, BalanceError> {
    if trends_comparison.kind != trends_treated.kind
        || trends_comparison.n_features() != trends_treated.n_features()
    {
        return Err(BalanceError::Invalid(format!(
            "trend kinds differ: {} vs {}",
            trends_comparison.kind, trends_treated.kind
        )));
    }
    if moment_orders.is_empty() || moment_orders.iter().any(|m| !(1..=2).contains(m)) {
        return Err(BalanceError::Invalid("moment orders must be a non-empty subset of {1, 2}".into()));
    }
    if trends_treated.n_units() == 0 {
        return Err(BalanceError::Invalid("no treated units".into()));
    }
    let feature_names = trends_comparison.feature_names();
    let mut sources: Vec<(String, &DMatrix<f64>, &DMatrix<f64>, usize)> = feature_names
        .into_iter()
        .enumerate()
        .map(|(m, name)| (name, &trends_comparison.features, &trends_treated.features, m))
        .collect();
    if let Some(cov) = covariates {
        let n0 = trends_comparison.n_units();
        let n1 = trends_treated.n_units();
        if cov.comparison.nrows() != n0 || cov.treated.nrows() != n1 {
            return Err(BalanceError::Invalid("covariate rows do not match trend rows".into()));
        }
        if cov.comparison.ncols() != cov.names.len() || cov.treated.ncols() != cov.names.len() {
            return Err(BalanceError::Invalid("covariate columns do not match names".into()));
        }
        for (k, name) in cov.names.iter().enumerate() {
            sources.push((name.clone(), cov.comparison, cov.treated, k));
        }
    }

    let n0 = trends_comparison.n_units();
    let mut columns: Vec<DVector<f64>> = Vec::new();
    let mut targets = Vec::new();
    let mut labels = Vec::new();
    for &moment in moment_orders {
        for (name, comp, treat, col) in &sources {
            let pow = |v: f64| if moment == 1 { v } else { v * v };
            columns.push(DVector::from_iterator(n0, comp.column(*col).iter().map(|&v| pow(v))));
            targets.push(treat.column(*col).iter().map(|&v| pow(v)).sum::<f64>() / treat.nrows() as f64);
            labels.push(ConstraintLabel { source: name.clone(), moment });
        }
    }
    BalanceProblem::new(
        trends_comparison.unit_ids.clone(),
        DMatrix::from_columns(&columns),
        DVector::from_vec(targets),
        labels,
        trends_treated.n_units(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    /// Maximum absolute violation of any standardized constraint.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Dual norm beyond which the targets are declared infeasible.
    pub max_dual_norm: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings { tolerance: 1e-8, max_iterations: 200, max_dual_norm: 1e6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    /// Max violation on the standardized constraint scale.
    pub max_violation: f64,
    /// Max violation on the original constraint scale.
    pub max_violation_raw: f64,
    pub gradient_norm: f64,
    /// Attained KL divergence from the base weights.
    pub objective: f64,
    pub residuals: Vec<f64>,
    pub gradient_steps: usize,
}

/// Solved comparison weights. Treated units keep weight `1 / N1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceWeights {
    pub comparison_units: Vec<UnitId>,
    pub comparison_weights: Vec<f64>,
    pub treated_weight: f64,
    /// Dual vector on the original constraint scale.
    pub dual: Vec<f64>,
    pub column_labels: Vec<ConstraintLabel>,
    pub diagnostics: SolverDiagnostics,
}

impl BalanceWeights {
    /// Panel-aligned weights: `1 / N1` on treated units and the solved
    /// weights on comparison units.
    pub fn unit_weights(&self, panel: &Panel) -> Result<UnitWeights, PanelError> {
        let comparison = panel.comparison_indices();
        if comparison.len() != self.comparison_weights.len()
            || comparison.iter().zip(&self.comparison_units).any(|(&i, id)| &panel.unit_ids()[i] != id)
        {
            return Err(PanelError::Weights("balance weights do not match the panel's comparison units".into()));
        }
        let mut values = vec![self.treated_weight; panel.n_units()];
        for (&i, &w) in comparison.iter().zip(&self.comparison_weights) {
            values[i] = w;
        }
        Ok(UnitWeights::new("entropy", values))
    }

    /// `unit,weight`
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["unit", "weight"])?;
        for (id, wt) in self.comparison_units.iter().zip(&self.comparison_weights) {
            w.write_record([id.to_string(), wt.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct DualState {
    weights: DVector<f64>,
    /// Dual objective f(λ).
    value: f64,
    residual: DVector<f64>,
}

fn dual_state(x: &DMatrix<f64>, log_q: &DVector<f64>, lambda: &DVector<f64>) -> DualState {
    let s = log_q - x * lambda;
    let m = s.max();
    let e = s.map(|v| (v - m).exp());
    let z = e.sum();
    let weights = e / z;
    let residual = x.tr_mul(&weights);
    DualState { weights, value: m + z.ln(), residual }
}

/// Solves the entropy-balancing problem.
///
/// Columns are standardized to target 0 and comparison SD 1 before solving.
/// Since the KL divergence of any feasible weight vector is at most
/// `max_i log(1 / q_i)` and `-f(λ)` lower-bounds the optimal divergence,
/// `-f(λ)` exceeding that bound certifies infeasibility.
pub fn solve_entropy_balance(
    prob: &BalanceProblem,
    cfg: &SolverSettings,
) -> Result<BalanceWeights, BalanceError> {
    let (n0, j) = prob.constraint_matrix.shape();
    let q = &prob.base_weights;
    let mut sd = DVector::zeros(j);
    for c in 0..j {
        let col = prob.constraint_matrix.column(c);
        let mean = col.dot(q);
        let var = col.iter().zip(q.iter()).map(|(v, w)| w * (v - mean).powi(2)).sum::<f64>();
        sd[c] = var.sqrt();
        if !(sd[c] > 0.0) {
            return Err(BalanceError::DegenerateConstraints(format!(
                "`{}` has no variation",
                prob.column_labels[c].name()
            )));
        }
    }
    let x = DMatrix::from_fn(n0, j, |i, c| (prob.constraint_matrix[(i, c)] - prob.targets[c]) / sd[c]);

    // Collinearity of the standardized columns under the base weights.
    let xq = DMatrix::from_fn(n0, j, |i, c| x[(i, c)] * q[i].sqrt());
    let mean = x.tr_mul(q);
    let cov = xq.tr_mul(&xq) - &mean * mean.transpose();
    let eig = cov.symmetric_eigen().eigenvalues;
    if eig.min() <= 1e-10 * eig.max().max(1.0) {
        return Err(BalanceError::DegenerateConstraints(
            "constraint columns are collinear among comparison units".into(),
        ));
    }

    let log_q = q.map(f64::ln);
    let kl_bound = log_q.iter().map(|v| -v).fold(f64::MIN, f64::max);
    let mut lambda = DVector::zeros(j);
    let mut state = dual_state(&x, &log_q, &lambda);
    let mut gradient_steps = 0;
    let mut iterations = 0;
    loop {
        let max_violation = state.residual.amax();
        if max_violation <= cfg.tolerance {
            break;
        }
        if -state.value > kl_bound + 1e-9 {
            return Err(BalanceError::InfeasibleTargets(
                "dual objective is unbounded".into(),
            ));
        }
        if iterations >= cfg.max_iterations {
            return Err(BalanceError::NonConvergence { iterations, max_violation });
        }
        iterations += 1;

        let wx = DMatrix::from_fn(n0, j, |i, c| x[(i, c)] * state.weights[i].sqrt());
        let hessian = wx.tr_mul(&wx) - &state.residual * state.residual.transpose();
        // Newton direction H⁻¹ r (the gradient of f is -r).
        let direction = match hessian.cholesky() {
            Some(ch) => ch.solve(&state.residual),
            None => {
                gradient_steps += 1;
                state.residual.clone()
            }
        };
        let slope = -state.residual.dot(&direction);
        let mut step = 1.0;
        let accepted = loop {
            let candidate = &lambda + step * &direction;
            let next = dual_state(&x, &log_q, &candidate);
            let armijo = next.value <= state.value + 1e-4 * step * slope;
            // Near the optimum the decrease in f drops below its rounding
            // error; a smaller residual is then the usable signal.
            let flat = (next.value - state.value).abs() <= 1e-13 * state.value.abs().max(1.0)
                && next.residual.norm() < state.residual.norm();
            if next.value.is_finite() && (armijo || flat) {
                break Some((candidate, next));
            }
            step *= 0.5;
            if step < 1e-14 {
                break None;
            }
        };
        match accepted {
            Some((candidate, next)) => {
                lambda = candidate;
                state = next;
            }
            None => {
                return Err(BalanceError::NonConvergence { iterations, max_violation });
            }
        }
        if lambda.norm() > cfg.max_dual_norm {
            return Err(BalanceError::InfeasibleTargets(format!(
                "dual norm exceeded {:e}",
                cfg.max_dual_norm
            )));
        }
    }

    let weights = state.weights;
    let raw_residual = prob.constraint_matrix.tr_mul(&weights) - &prob.targets;
    let objective = weights
        .iter()
        .zip(q.iter())
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, qi)| w * (w / qi).ln())
        .sum();
    if weights.iter().any(|&w| !(w > 0.0)) {
        return Err(BalanceError::NonConvergence { iterations, max_violation: state.residual.amax() });
    }
    Ok(BalanceWeights {
        comparison_units: prob.comparison_units.clone(),
        comparison_weights: weights.iter().copied().collect(),
        treated_weight: 1.0 / prob.n_treated.max(1) as f64,
        dual: lambda.iter().zip(sd.iter()).map(|(l, s)| l / s).collect(),
        column_labels: prob.column_labels.clone(),
        diagnostics: SolverDiagnostics {
            iterations,
            max_violation: state.residual.amax(),
            max_violation_raw: raw_residual.amax(),
            gradient_norm: state.residual.norm(),
            objective,
            residuals: raw_residual.iter().copied().collect(),
            gradient_steps,
        },
    })
}

/// `residual_j = Σ_i w_i C_ij - target_j`
pub fn check_balance(weights: &[f64], prob: &BalanceProblem) -> Result<Vec<f64>, BalanceError> {
    if weights.len() != prob.n_comparison() {
        return Err(BalanceError::Invalid(format!(
            "{} weights for {} comparison units",
            weights.len(),
            prob.n_comparison()
        )));
    }
    let w = DVector::from_column_slice(weights);
    Ok((prob.constraint_matrix.tr_mul(&w) - &prob.targets).iter().copied().collect())
}

/// Kish effective sample size `(Σw)² / Σw²`.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    s * s / s2
}

/// KL divergence of `w` from uniform base weights.
pub fn kl_from_uniform(weights: &[f64]) -> f64 {
    let n = weights.len() as f64;
    weights.iter().filter(|&&w| w > 0.0).map(|w| w * (w * n).ln()).sum()
}
