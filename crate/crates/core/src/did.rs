//! Weighted microlevel difference-in-differences.
//!
//! The DD regression is fit by weighted least squares on the stacked
//! unit-time rows. Every row of a unit carries that unit's weight, weights are
//! normalized to sum to one within each group, and the variance is the
//! unit-clustered sandwich. Without weights every row has weight one (plain
//! OLS).

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::balance::effective_sample_size;
use crate::panel::{Panel, PanelError, UnitWeights};

/// z quantile for two-sided 95% normal intervals.
pub const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Error, PartialEq)]
pub enum DidError {
    #[error("design matrix is rank deficient ({0})")]
    RankDeficient(String),
    #[error("pre-trend test needs at least 2 pre-periods, panel has {0}")]
    InsufficientPrePeriods(usize),
    #[error("invalid time specification: {0}")]
    InvalidTimeSpec(String),
    #[error("{0}")]
    Weights(String),
}

impl From<PanelError> for DidError {
    fn from(e: PanelError) -> Self {
        DidError::Weights(e.to_string())
    }
}

/// How common time effects enter the DD model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TimeSpec {
    /// `α + Σ_p β_p t^p`
    Polynomial { order: usize },
    /// One fixed effect per observation time.
    Nonparametric,
}

impl TimeSpec {
    pub const LINEAR: TimeSpec = TimeSpec::Polynomial { order: 1 };
    pub const QUADRATIC: TimeSpec = TimeSpec::Polynomial { order: 2 };
}

impl fmt::Display for TimeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeSpec::Polynomial { order } => write!(f, "poly{order}"),
            TimeSpec::Nonparametric => f.write_str("nonparametric"),
        }
    }
}

impl FromStr for TimeSpec {
    type Err = DidError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nonparametric" | "np" => Ok(TimeSpec::Nonparametric),
            "linear" => Ok(TimeSpec::LINEAR),
            "quadratic" => Ok(TimeSpec::QUADRATIC),
            _ => match s.strip_prefix("poly").and_then(|p| p.parse::<usize>().ok()) {
                Some(order) if order >= 1 => Ok(TimeSpec::Polynomial { order }),
                _ => Err(DidError::InvalidTimeSpec(s.to_string())),
            },
        }
    }
}

impl TryFrom<String> for TimeSpec {
    type Error = DidError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<TimeSpec> for String {
    fn from(t: TimeSpec) -> String {
        t.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DidFit {
    pub tau_hat: f64,
    pub standard_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Polynomial time terms are reported on the centered, scaled time
    /// `(t - mean(t)) / max|t - mean(t)|`.
    pub coefficients: Vec<Coefficient>,
    pub weights_used: String,
    pub n_treated: usize,
    pub n_comparison: usize,
    pub ess_comparison: f64,
    pub time_spec: TimeSpec,
    pub notes: Vec<String>,
}

impl DidFit {
    /// `estimate (low--high)`
    pub fn table_cell(&self, digits: usize) -> String {
        format!("{:.d$} ({:.d$}--{:.d$})", self.tau_hat, self.ci_low, self.ci_high, d = digits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrendInteraction {
    pub time: f64,
    pub estimate: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrendTest {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    /// Group × time interactions relative to the first pre-period.
    pub interactions: Vec<PretrendInteraction>,
}

struct WlsFit {
    beta: DVector<f64>,
    vcov: DMatrix<f64>,
}

/// Weighted LS with unit-clustered sandwich variance, for designs where a
/// row's regressors depend only on (group, time column).
fn fit_cells(
    panel: &Panel,
    n_times: usize,
    unit_weight: &[f64],
    regressors: &dyn Fn(bool, usize) -> DVector<f64>,
    names: &[String],
) -> Result<WlsFit, DidError> {
    let p = names.len();
    let y = panel.outcomes();
    let x: [Vec<DVector<f64>>; 2] =
        [false, true].map(|a| (0..n_times).map(|k| regressors(a, k)).collect::<Vec<_>>());
    let gram: [DMatrix<f64>; 2] = [0, 1].map(|a| {
        x[a].iter().fold(DMatrix::zeros(p, p), |acc, r| acc + r * r.transpose())
    });

    let mut xtwx = DMatrix::zeros(p, p);
    let mut xtwy = DVector::zeros(p);
    let mut mass = [0.0; 2];
    let units: Vec<usize> = (0..panel.n_units()).filter(|&i| unit_weight[i] > 0.0).collect();
    for &i in &units {
        let a = panel.is_treated(i) as usize;
        mass[a] += unit_weight[i];
        for k in 0..n_times {
            xtwy.axpy(unit_weight[i] * y[(i, k)], &x[a][k], 1.0);
        }
    }
    for a in 0..2 {
        xtwx += mass[a] * &gram[a];
    }

    let d = xtwx.diagonal().map(|v| if v > 0.0 { 1.0 / v.sqrt() } else { 0.0 });
    let scaled = DMatrix::from_fn(p, p, |r, c| xtwx[(r, c)] * d[r] * d[c]);
    let eig = scaled.symmetric_eigen().eigenvalues;
    if d.iter().any(|&v| v == 0.0) || eig.min() <= 1e-12 * eig.max() {
        let zero = (0..p).find(|&c| d[c] == 0.0).map(|c| format!("column `{}` is all zero", names[c]));
        return Err(DidError::RankDeficient(zero.unwrap_or_else(|| "collinear columns".into())));
    }
    let bread = xtwx
        .clone()
        .cholesky()
        .ok_or_else(|| DidError::RankDeficient("X'WX is not positive definite".into()))?
        .inverse();
    let beta = &bread * xtwy;

    let mut meat = DMatrix::zeros(p, p);
    for &i in &units {
        let a = panel.is_treated(i) as usize;
        let mut score = DVector::zeros(p);
        for k in 0..n_times {
            let e = y[(i, k)] - x[a][k].dot(&beta);
            score.axpy(unit_weight[i] * e, &x[a][k], 1.0);
        }
        meat += &score * score.transpose();
    }
    let g = units.len() as f64;
    let n = g * n_times as f64;
    let mut correction = g / (g - 1.0);
    if n > p as f64 {
        correction *= (n - 1.0) / (n - p as f64);
    }
    let vcov = correction * &bread * meat * &bread;
    Ok(WlsFit { beta, vcov })
}

/// Row weights per unit: one each when unweighted, otherwise the supplied
/// weights normalized within group.
fn row_weights(panel: &Panel, weights: Option<&UnitWeights>) -> Result<(Vec<f64>, String), DidError> {
    match weights {
        None => Ok((vec![1.0; panel.n_units()], "none".into())),
        Some(w) => {
            w.check(panel)?;
            let mut total = [0.0; 2];
            for i in 0..panel.n_units() {
                total[panel.is_treated(i) as usize] += w.values[i];
            }
            let v = (0..panel.n_units())
                .map(|i| w.values[i] / total[panel.is_treated(i) as usize])
                .collect();
            Ok((v, w.label.clone()))
        }
    }
}

/// Fits the DD regression and returns the coefficient on `A_i · E_t`.
pub fn fit_did(panel: &Panel, weights: Option<&UnitWeights>, spec: TimeSpec) -> Result<DidFit, DidError> {
    let (w, label) = row_weights(panel, weights)?;
    let times = panel.times();
    let k = times.len();
    let post: Vec<f64> = (0..k).map(|t| if panel.is_post(t) { 1.0 } else { 0.0 }).collect();

    let mut names: Vec<String> = Vec::new();
    let regressors: Box<dyn Fn(bool, usize) -> DVector<f64>> = match spec {
        TimeSpec::Polynomial { order } => {
            if order == 0 {
                return Err(DidError::InvalidTimeSpec("polynomial order must be at least 1".into()));
            }
            let center = times.iter().sum::<f64>() / k as f64;
            let scale = times.iter().map(|t| (t - center).abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
            names.push("intercept".into());
            names.extend((1..=order).map(|p| format!("time^{p}")));
            let s: Vec<f64> = times.iter().map(|t| (t - center) / scale).collect();
            let post = post.clone();
            Box::new(move |a, t| {
                let a = a as u8 as f64;
                let mut v = Vec::with_capacity(order + 3);
                v.extend((0..=order).map(|p| s[t].powi(p as i32)));
                v.push(a);
                v.push(a * post[t]);
                DVector::from_vec(v)
            })
        }
        TimeSpec::Nonparametric => {
            if k < 2 {
                return Err(DidError::InvalidTimeSpec("nonparametric time needs at least 2 times".into()));
            }
            names.extend(times.iter().map(|t| format!("time[{t}]")));
            let post = post.clone();
            Box::new(move |a, t| {
                let a = a as u8 as f64;
                let mut v = vec![0.0; k + 2];
                v[t] = 1.0;
                v[k] = a;
                v[k + 1] = a * post[t];
                DVector::from_vec(v)
            })
        }
    };
    names.push("group".into());
    names.push("group:post".into());

    let fit = fit_cells(panel, k, &w, regressors.as_ref(), &names)?;
    let p = names.len();
    let se: Vec<f64> = (0..p).map(|c| fit.vcov[(c, c)].max(0.0).sqrt()).collect();
    let tau_hat = fit.beta[p - 1];
    let standard_error = se[p - 1];

    let comparison: Vec<f64> =
        panel.comparison_indices().iter().map(|&i| w[i]).filter(|&v| v > 0.0).collect();
    let n_treated = panel.treated_indices().iter().filter(|&&i| w[i] > 0.0).count();
    let mut notes = Vec::new();
    if n_treated < panel.counts().n_treated {
        notes.push(format!(
            "{} of {} treated units carry zero weight; the estimand is a local ATT",
            panel.counts().n_treated - n_treated,
            panel.counts().n_treated
        ));
    }
    Ok(DidFit {
        tau_hat,
        standard_error,
        ci_low: tau_hat - Z_95 * standard_error,
        ci_high: tau_hat + Z_95 * standard_error,
        coefficients: names
            .into_iter()
            .zip(fit.beta.iter())
            .zip(&se)
            .map(|((name, &estimate), &std_error)| Coefficient { name, estimate, std_error })
            .collect(),
        weights_used: label,
        n_treated,
        n_comparison: comparison.len(),
        ess_comparison: effective_sample_size(&comparison),
        time_spec: spec,
        notes,
    })
}

/// Joint Wald test that all pre-period group × time interactions are zero,
/// in a regression on pre-period rows with time fixed effects, a group main
/// effect and interactions for every pre-period after the first.
pub fn pretrend_test(panel: &Panel, weights: Option<&UnitWeights>) -> Result<PretrendTest, DidError> {
    let k_pre = panel.n_pre();
    if k_pre < 2 {
        return Err(DidError::InsufficientPrePeriods(k_pre));
    }
    let (w, _) = row_weights(panel, weights)?;
    let times = panel.pre_times();
    let mut names: Vec<String> = times.iter().map(|t| format!("time[{t}]")).collect();
    names.push("group".into());
    names.extend(times[1..].iter().map(|t| format!("group:time[{t}]")));
    let p = names.len();
    let regressors = |a: bool, t: usize| {
        let mut v = DVector::zeros(p);
        v[t] = 1.0;
        if a {
            v[k_pre] = 1.0;
            if t > 0 {
                v[k_pre + t] = 1.0;
            }
        }
        v
    };
    let fit = fit_cells(panel, k_pre, &w, &regressors, &names)?;

    let df = k_pre - 1;
    let gamma = fit.beta.rows(k_pre + 1, df).into_owned();
    let v = fit.vcov.view((k_pre + 1, k_pre + 1), (df, df)).into_owned();
    let statistic = wald(&gamma, &v);
    let p_value = if statistic.is_finite() {
        ChiSquared::new(df as f64).expect("df >= 1").sf(statistic).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Ok(PretrendTest {
        statistic,
        df,
        p_value,
        interactions: (0..df)
            .map(|j| PretrendInteraction {
                time: times[j + 1],
                estimate: gamma[j],
                std_error: v[(j, j)].max(0.0).sqrt(),
            })
            .collect(),
    })
}

/// `γᵀ V⁺ γ` with a pseudo-inverse, so a degenerate covariance (noiseless
/// data) gives 0 for a zero estimate instead of failing.
fn wald(gamma: &DVector<f64>, v: &DMatrix<f64>) -> f64 {
    let eig = v.clone().symmetric_eigen();
    let max = eig.eigenvalues.amax();
    let mut stat = 0.0;
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let proj = eig.eigenvectors.column(j).dot(gamma);
        if lambda > 1e-12 * max && lambda > 0.0 {
            stat += proj * proj / lambda;
        } else if proj.abs() > 1e-12 {
            return f64::INFINITY;
        }
    }
    stat
}

/// `100 · (1 - bias_weighted / bias_unweighted)`; `None` when the unweighted
/// bias is zero.
pub fn percent_bias_reduction(bias_weighted: f64, bias_unweighted: f64) -> Option<f64> {
    if bias_unweighted == 0.0 || !bias_unweighted.is_finite() || !bias_weighted.is_finite() {
        return None;
    }
    Some(100.0 * (1.0 - bias_weighted / bias_unweighted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::UnitId;
    use proptest::prelude::*;

    fn panel(times: &[f64], te: f64, treated: &[bool], rows: &[Vec<f64>]) -> Panel {
        let y = DMatrix::from_fn(rows.len(), times.len(), |i, t| rows[i][t]);
        Panel::new((0..rows.len()).map(UnitId::from).collect(), treated.to_vec(), times.to_vec(), te, y, None)
            .unwrap()
    }

    /// Direct group-mean DD with one post period: post minus mean of pre.
    fn group_mean_dd(p: &Panel, w: Option<&[f64]>) -> f64 {
        let k_pre = p.n_pre();
        let w = w.map(<[f64]>::to_vec).unwrap_or_else(|| vec![1.0; p.n_units()]);
        let gap = |a: bool| {
            let idx: Vec<usize> = (0..p.n_units()).filter(|&i| p.is_treated(i) == a).collect();
            let tot: f64 = idx.iter().map(|&i| w[i]).sum();
            let mean_at = |k: usize| idx.iter().map(|&i| w[i] * p.outcomes()[(i, k)]).sum::<f64>() / tot;
            mean_at(k_pre) - (0..k_pre).map(mean_at).sum::<f64>() / k_pre as f64
        };
        gap(true) - gap(false)
    }

    #[test]
    fn canonical_two_by_two() {
        let p = panel(
            &[1.0, 2.0],
            2.0,
            &[false, false, true, true],
            &[vec![1.0, 2.0], vec![3.0, 5.0], vec![2.0, 7.0], vec![4.0, 4.0]],
        );
        let fit = fit_did(&p, None, TimeSpec::Nonparametric).unwrap();
        let expected = ((7.0 + 4.0) / 2.0 - (2.0 + 4.0) / 2.0) - ((2.0 + 5.0) / 2.0 - (1.0 + 3.0) / 2.0);
        assert!((fit.tau_hat - expected).abs() < 1e-12);
        assert!(fit.ci_low <= fit.tau_hat && fit.tau_hat <= fit.ci_high);
        assert_eq!(fit.weights_used, "none");
    }

    #[test]
    fn time_spec_parsing() {
        assert_eq!("poly2".parse::<TimeSpec>().unwrap(), TimeSpec::QUADRATIC);
        assert_eq!("nonparametric".parse::<TimeSpec>().unwrap(), TimeSpec::Nonparametric);
        assert!("poly0".parse::<TimeSpec>().is_err());
        assert_eq!(serde_json::to_string(&TimeSpec::LINEAR).unwrap(), "\"poly1\"");
    }

    #[test]
    fn diverging_slopes_bias_and_balancing_weights_remove_it() {
        // Comparison slopes (0, -0.4, 0.2) average to -0.0667 against a treated
        // slope of 0; weights (0.5, 0.25, 0.5) make the comparison slope 0.
        let times = [1.0, 2.0, 3.0, 4.0, 5.0];
        let line = |b0: f64, b1: f64| times.iter().map(|t| b0 + b1 * t).collect::<Vec<_>>();
        let rows = vec![line(0.0, 0.0), line(0.5, -0.4), line(-1.0, 0.2), line(1.0, 0.0), line(1.5, 0.0)];
        let treated = [false, false, false, true, true];
        let p = panel(&times, 5.0, &treated, &rows);
        let unweighted = fit_did(&p, None, TimeSpec::Nonparametric).unwrap();
        assert!((unweighted.tau_hat - group_mean_dd(&p, None)).abs() < 1e-12);
        assert!(unweighted.tau_hat.abs() > 0.1);
        let w = [0.5, 0.25, 0.5, 1.0, 1.0];
        let uw = UnitWeights::new("balanced", w.to_vec());
        for spec in [TimeSpec::Nonparametric, TimeSpec::LINEAR, TimeSpec::QUADRATIC] {
            let fit = fit_did(&p, Some(&uw), spec).unwrap();
            assert!(fit.tau_hat.abs() < 1e-10, "{spec}: {}", fit.tau_hat);
        }
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let p = panel(&[1.0, 2.0], 2.0, &[false, true], &[vec![0.0, 1.0], vec![1.0, 3.0]]);
        assert!(fit_did(&p, None, TimeSpec::Polynomial { order: 2 }).is_err());
        assert!(fit_did(&p, None, TimeSpec::Polynomial { order: 1 }).is_ok());
    }

    #[test]
    fn negative_weights_rejected() {
        let p = panel(&[1.0, 2.0], 2.0, &[false, true], &[vec![0.0, 1.0], vec![1.0, 3.0]]);
        let w = UnitWeights::new("neg", vec![-1.0, 1.0]);
        assert!(matches!(fit_did(&p, Some(&w), TimeSpec::Nonparametric), Err(DidError::Weights(_))));
    }

    #[test]
    fn pretrend_requires_two_pre_periods() {
        let p = panel(&[1.0, 2.0], 2.0, &[false, true], &[vec![0.0, 1.0], vec![1.0, 3.0]]);
        assert_eq!(pretrend_test(&p, None), Err(DidError::InsufficientPrePeriods(1)));
    }

    #[test]
    fn pretrend_detects_and_clears_divergence() {
        let times = [1.0, 2.0, 3.0, 4.0];
        let mut rows = Vec::new();
        let mut treated = Vec::new();
        for i in 0..40 {
            let noise = |t: usize| (((i * 7 + t * 13) % 11) as f64 - 5.0) * 0.01;
            let slope = if i < 20 { 0.0 } else { 0.5 };
            rows.push((0..4).map(|t| slope * times[t] + noise(t)).collect::<Vec<_>>());
            treated.push(i >= 20);
        }
        let p = panel(&times, 4.0, &treated, &rows);
        let t = pretrend_test(&p, None).unwrap();
        assert_eq!(t.df, 2);
        assert!(t.p_value < 1e-6, "{}", t.p_value);
        assert!((t.interactions[0].estimate - 0.5).abs() < 0.05);
    }

    #[test]
    fn percent_bias_reduction_examples() {
        assert_eq!(percent_bias_reduction(0.0, 0.3), Some(100.0));
        assert_eq!(percent_bias_reduction(0.3, 0.3), Some(0.0));
        assert!((percent_bias_reduction(-0.1, 0.2).unwrap() - 150.0).abs() < 1e-12);
        assert_eq!(percent_bias_reduction(0.1, 0.0), None);
    }

    #[test]
    fn table_cell_format() {
        let fit = DidFit {
            tau_hat: 0.16,
            standard_error: 0.025,
            ci_low: 0.11,
            ci_high: 0.21,
            coefficients: vec![],
            weights_used: "entropy".into(),
            n_treated: 1,
            n_comparison: 1,
            ess_comparison: 1.0,
            time_spec: TimeSpec::Nonparametric,
            notes: vec![],
        };
        assert_eq!(fit.table_cell(2), "0.16 (0.11--0.21)");
    }

    fn random_panel() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<bool>, Vec<f64>)> {
        (4usize..12).prop_flat_map(|n| {
            (
                prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), n),
                prop::collection::vec(any::<bool>(), n),
                prop::collection::vec(0.1f64..3.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn weighted_nonparametric_matches_group_means((rows, mut treated, w) in random_panel(), c in -100.0f64..100.0, scale in 0.01f64..100.0) {
            treated[0] = false;
            treated[1] = true;
            let times = [1.0, 2.0, 3.0, 4.0];
            let p = panel(&times, 4.0, &treated, &rows);
            let uw = UnitWeights::new("w", w.clone());
            let fit = fit_did(&p, Some(&uw), TimeSpec::Nonparametric).unwrap();
            let oracle = group_mean_dd(&p, Some(&w));
            prop_assert!((fit.tau_hat - oracle).abs() < 1e-10);

            // Scaling comparison weights leaves every spec's estimate unchanged.
            let scaled: Vec<f64> = (0..w.len()).map(|i| if treated[i] { w[i] } else { w[i] * scale }).collect();
            for spec in [TimeSpec::Nonparametric, TimeSpec::LINEAR] {
                let a = fit_did(&p, Some(&uw), spec).unwrap().tau_hat;
                let b = fit_did(&p, Some(&UnitWeights::new("s", scaled.clone())), spec).unwrap().tau_hat;
                prop_assert!((a - b).abs() < 1e-10);
            }

            // Level shift moves only time effects.
            let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + c).collect()).collect();
            let q = panel(&times, 4.0, &treated, &shifted);
            for spec in [TimeSpec::Nonparametric, TimeSpec::LINEAR, TimeSpec::QUADRATIC] {
                let a = fit_did(&p, Some(&uw), spec).unwrap();
                let b = fit_did(&q, Some(&uw), spec).unwrap();
                prop_assert!((a.tau_hat - b.tau_hat).abs() < 1e-9);
                prop_assert!(a.standard_error >= 0.0);
            }
        }

        #[test]
        fn pretrend_statistic_invariant_to_reference(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 8)) {
            // Reversing time order changes which pre-period is the reference.
            let treated = [false, true, false, true, false, true, false, true];
            let p = panel(&[1.0, 2.0, 3.0], 3.0, &treated, &rows.iter().map(|r| vec![r[0], r[1], r[2]]).collect::<Vec<_>>());
            let swapped: Vec<Vec<f64>> = rows.iter().map(|r| vec![r[1], r[0], r[2]]).collect();
            let q = panel(&[1.0, 2.0, 3.0], 3.0, &treated, &swapped);
            let a = pretrend_test(&p, None).unwrap();
            let b = pretrend_test(&q, None).unwrap();
            prop_assert!((a.statistic - b.statistic).abs() < 1e-8 * (1.0 + a.statistic));
            prop_assert!((0.0..=1.0).contains(&a.p_value));
        }
    }
}
