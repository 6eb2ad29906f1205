//! Per-unit pre-intervention trend features.
//!
//! Two estimators are provided: slopes between consecutive pre-period
//! observations, and the non-intercept coefficients of a per-unit polynomial
//! regression on time. Only observations strictly before the intervention
//! time are used, so either a full panel or its pre-period restriction may be
//! passed in.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{Panel, UnitId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendKind {
    FirstDifference,
    Polynomial { order: usize },
}

impl TrendKind {
    pub const LINEAR: TrendKind = TrendKind::Polynomial { order: 1 };
    pub const QUADRATIC: TrendKind = TrendKind::Polynomial { order: 2 };
}

impl fmt::Display for TrendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrendKind::FirstDifference => f.write_str("first_differences"),
            TrendKind::Polynomial { order: 1 } => f.write_str("linear"),
            TrendKind::Polynomial { order: 2 } => f.write_str("quadratic"),
            TrendKind::Polynomial { order } => write!(f, "poly{order}"),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TrendError {
    #[error("{kind} trends need at least {required} pre-periods, panel has {available}")]
    InsufficientPrePeriods { kind: TrendKind, required: usize, available: usize },
    #[error("polynomial order must be at least 1")]
    ZeroOrder,
    #[error("pre-period time basis is rank deficient for order {0}")]
    RankDeficient(usize),
    #[error("non-finite trend feature for unit {0}")]
    NonFinite(UnitId),
}

/// N × M matrix of trend features, rows aligned to the source panel's units.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendMatrix {
    pub unit_ids: Vec<UnitId>,
    pub features: DMatrix<f64>,
    pub kind: TrendKind,
    /// Pre-intervention times the features were estimated from.
    pub time_basis: Vec<f64>,
    pub warnings: Vec<String>,
}

impl TrendMatrix {
    pub fn n_units(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn feature_names(&self) -> Vec<String> {
        let prefix = match self.kind {
            TrendKind::FirstDifference => "diff",
            TrendKind::Polynomial { .. } => "slope",
        };
        (1..=self.n_features()).map(|m| format!("{prefix}_{m}")).collect()
    }

    /// Rows for the given unit indices.
    pub fn subset(&self, rows: &[usize]) -> TrendMatrix {
        TrendMatrix {
            unit_ids: rows.iter().map(|&i| self.unit_ids[i].clone()).collect(),
            features: self.features.select_rows(rows),
            kind: self.kind,
            time_basis: self.time_basis.clone(),
            warnings: self.warnings.clone(),
        }
    }

    /// Splits into (treated, comparison) using the panel the trends came from.
    pub fn split(&self, panel: &Panel) -> (TrendMatrix, TrendMatrix) {
        (self.subset(&panel.treated_indices()), self.subset(&panel.comparison_indices()))
    }

    /// `unit,feature_1..feature_M`
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["unit".to_string()];
        header.extend((1..=self.n_features()).map(|m| format!("feature_{m}")));
        w.write_record(&header)?;
        for (i, id) in self.unit_ids.iter().enumerate() {
            let mut rec = vec![id.to_string()];
            rec.extend(self.features.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn estimate_trends(panel: &Panel, kind: TrendKind) -> Result<TrendMatrix, TrendError> {
    match kind {
        TrendKind::FirstDifference => first_difference_trends(panel),
        TrendKind::Polynomial { order } => polynomial_trends(panel, order),
    }
}

/// Slopes between consecutive pre-period observations:
/// `(y(t_m) - y(t_{m-1})) / (t_m - t_{m-1})`.
pub fn first_difference_trends(panel: &Panel) -> Result<TrendMatrix, TrendError> {
    let k_pre = panel.n_pre();
    if k_pre < 2 {
        return Err(TrendError::InsufficientPrePeriods {
            kind: TrendKind::FirstDifference,
            required: 2,
            available: k_pre,
        });
    }
    let t = panel.pre_times();
    let y = panel.outcomes();
    let features = DMatrix::from_fn(panel.n_units(), k_pre - 1, |i, m| {
        (y[(i, m + 1)] - y[(i, m)]) / (t[m + 1] - t[m])
    });
    finish(panel, features, TrendKind::FirstDifference, Vec::new())
}

/// Non-intercept coefficients of a per-unit OLS fit of pre-period outcomes
/// on `1, t, …, t^order`.
pub fn polynomial_trends(panel: &Panel, order: usize) -> Result<TrendMatrix, TrendError> {
    if order == 0 {
        return Err(TrendError::ZeroOrder);
    }
    let kind = TrendKind::Polynomial { order };
    let k_pre = panel.n_pre();
    if k_pre < order + 1 {
        return Err(TrendError::InsufficientPrePeriods { kind, required: order + 1, available: k_pre });
    }
    let map = polynomial_coefficient_map(panel.pre_times(), order)?;
    let y_pre = panel.outcomes().columns(0, k_pre);
    let features = y_pre * map.transpose();
    let mut warnings = Vec::new();
    if k_pre == order + 1 {
        warnings.push(format!(
            "order-{order} trends from {k_pre} pre-periods interpolate exactly; estimates carry all of the noise"
        ));
    }
    finish(panel, features, kind, warnings)
}

fn finish(
    panel: &Panel,
    features: DMatrix<f64>,
    kind: TrendKind,
    warnings: Vec<String>,
) -> Result<TrendMatrix, TrendError> {
    if let Some(i) = (0..features.nrows()).find(|&i| features.row(i).iter().any(|v| !v.is_finite())) {
        return Err(TrendError::NonFinite(panel.unit_ids()[i].clone()));
    }
    Ok(TrendMatrix {
        unit_ids: panel.unit_ids().to_vec(),
        features,
        kind,
        time_basis: panel.pre_times().to_vec(),
        warnings,
    })
}

/// Linear map from a unit's outcomes at `times` to its fitted raw-basis
/// polynomial coefficients `β_1..β_order` (an `order × times.len()` matrix).
///
/// The fit is done on the centered and scaled basis `s = (t - c) / h` and the
/// coefficients are expanded back into powers of `t`.
pub fn polynomial_coefficient_map(times: &[f64], order: usize) -> Result<DMatrix<f64>, TrendError> {
    let k = times.len();
    if order == 0 {
        return Err(TrendError::ZeroOrder);
    }
    if k < order + 1 {
        return Err(TrendError::InsufficientPrePeriods {
            kind: TrendKind::Polynomial { order },
            required: order + 1,
            available: k,
        });
    }
    let center = times.iter().sum::<f64>() / k as f64;
    let scale = times.iter().map(|t| (t - center).abs()).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return Err(TrendError::RankDeficient(order));
    }
    let vander = DMatrix::from_fn(k, order + 1, |r, c| ((times[r] - center) / scale).powi(c as i32));
    let qr = vander.qr();
    let r = qr.r();
    let diag_max = r.diagonal().iter().map(|d| d.abs()).fold(0.0, f64::max);
    if r.diagonal().iter().any(|d| d.abs() <= 1e-10 * diag_max) {
        return Err(TrendError::RankDeficient(order));
    }
    // Scaled-basis coefficients gamma = R^{-1} Q^T y.
    let scaled = r
        .solve_upper_triangular(&qr.q().transpose())
        .ok_or(TrendError::RankDeficient(order))?;

    // beta_j = sum_{m >= j} gamma_m h^-m C(m, j) (-c)^(m - j)
    let mut to_raw = DMatrix::zeros(order + 1, order + 1);
    for m in 0..=order {
        let hm = scale.powi(-(m as i32));
        for j in 0..=m {
            to_raw[(j, m)] = hm * binomial(m, j) * (-center).powi((m - j) as i32);
        }
    }
    let full = to_raw * scaled;
    Ok(full.rows(1, order).into_owned())
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// OLS slope functional `a` with `slope = aᵀ y` for a linear fit on `times`.
pub fn linear_slope_weights(times: &[f64]) -> Result<DVector<f64>, TrendError> {
    let map = polynomial_coefficient_map(times, 1)?;
    Ok(map.row(0).transpose())
}
