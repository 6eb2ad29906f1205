//! Random-slope panel simulation.
//!
//! Unit `i` in group `a` draws `(β0, β1, β2) ~ N(ν_a, Γ_a)` and an AR(1)
//! error vector, and `y_it = β0 + β1 t + β2 t² + τ A_i 1{t > K_pre} + e_it` at
//! integer times `1..K`, so the intervention time is `K_pre + 1`.

use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::did::TimeSpec;
use crate::panel::{Panel, UnitId};
use crate::trends::{linear_slope_weights, TrendKind};

#[derive(Debug, Error, PartialEq)]
pub enum SimulateError {
    #[error("invalid simulation spec: {0}")]
    InvalidSpec(String),
    #[error("{0}")]
    Unsupported(String),
}

/// Full parameterization of one data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub n0: usize,
    pub n1: usize,
    pub k_pre: usize,
    pub k_post: usize,
    pub tau: f64,
    /// Mean of (β0, β1, β2) in the comparison group.
    pub nu0: [f64; 3],
    pub nu1: [f64; 3],
    pub gamma0: [[f64; 3]; 3],
    pub gamma1: [[f64; 3]; 3],
    pub rho: f64,
    pub sigma2: f64,
}

fn diag3(d: [f64; 3]) -> [[f64; 3]; 3] {
    [[d[0], 0.0, 0.0], [0.0, d[1], 0.0], [0.0, 0.0, d[2]]]
}

impl DgpSpec {
    pub fn n_times(&self) -> usize {
        self.k_pre + self.k_post
    }

    pub fn times(&self) -> Vec<f64> {
        (1..=self.n_times()).map(|t| t as f64).collect()
    }

    pub fn intervention_time(&self) -> f64 {
        (self.k_pre + 1) as f64
    }

    pub fn validate(&self) -> Result<(), SimulateError> {
        let bad = |m: String| Err(SimulateError::InvalidSpec(m));
        if self.n0 == 0 || self.n1 == 0 {
            return bad("both groups need at least one unit".into());
        }
        if self.k_pre < 2 || self.k_post < 1 {
            return bad(format!("need k_pre >= 2 and k_post >= 1, got {} and {}", self.k_pre, self.k_post));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return bad(format!("sigma2 must be positive, got {}", self.sigma2));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1), got {}", self.rho));
        }
        if !self.tau.is_finite() || self.nu0.iter().chain(&self.nu1).any(|v| !v.is_finite()) {
            return bad("non-finite tau or nu".into());
        }
        for (name, g) in [("gamma0", &self.gamma0), ("gamma1", &self.gamma1)] {
            let m = Matrix3::from_fn(|r, c| g[r][c]);
            if m.iter().any(|v| !v.is_finite()) {
                return bad(format!("{name} has non-finite entries"));
            }
            if (m - m.transpose()).amax() > 1e-12 {
                return bad(format!("{name} is not symmetric"));
            }
            let eig = m.symmetric_eigen().eigenvalues;
            if eig.min() < -1e-12 * eig.amax().max(1.0) {
                return bad(format!("{name} is not positive semidefinite"));
            }
        }
        Ok(())
    }

    fn mean_series(&self, nu: &[f64; 3], treated: bool) -> Vec<f64> {
        (1..=self.n_times())
            .map(|t| {
                let t_f = t as f64;
                let effect = if treated && t > self.k_pre { self.tau } else { 0.0 };
                nu[0] + nu[1] * t_f + nu[2] * t_f * t_f + effect
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioId {
    /// Different mean slopes with overlapping individual slopes.
    Scenario1,
    /// Different mean slopes without overlap.
    Scenario2,
    /// Quadratic individual trends.
    Scenario3,
    /// Equal counterfactual trend distributions in both groups.
    NullParallel,
    /// Scenario 1 at ρ = 0.5; vary σ² to move trend reliability.
    VarianceSweep,
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit enum");
        f.write_str(s.as_str().expect("string"))
    }
}

/// Field-wise replacements applied on top of a scenario preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Overrides {
    pub n0: Option<usize>,
    pub n1: Option<usize>,
    pub k_pre: Option<usize>,
    pub k_post: Option<usize>,
    pub tau: Option<f64>,
    pub nu0: Option<[f64; 3]>,
    pub nu1: Option<[f64; 3]>,
    pub gamma0: Option<[[f64; 3]; 3]>,
    pub gamma1: Option<[[f64; 3]; 3]>,
    pub rho: Option<f64>,
    pub sigma2: Option<f64>,
}

/// Scenario preset with overrides applied. Defaults: `N0 = 1000`,
/// `N1 = 500`, `K_pre = 4`, `K_post = 1`, `τ = 0`, `σ² = 1`, `ρ = 0`.
pub fn scenario_spec(id: ScenarioId, overrides: &Overrides) -> Result<DgpSpec, SimulateError> {
    let mut spec = DgpSpec {
        n0: 1000,
        n1: 500,
        k_pre: 4,
        k_post: 1,
        tau: 0.0,
        nu0: [0.0; 3],
        nu1: [1.0, -0.2, 0.0],
        gamma0: diag3([0.0, 0.2 * 0.2, 0.0]),
        gamma1: diag3([0.0, 0.1 * 0.1, 0.0]),
        rho: 0.0,
        sigma2: 1.0,
    };
    match id {
        ScenarioId::Scenario1 => {}
        ScenarioId::VarianceSweep => spec.rho = 0.5,
        ScenarioId::Scenario2 => {
            spec.nu0 = [0.0, -0.2, 0.0];
            spec.nu1 = [1.0, 0.0, 0.0];
            spec.gamma0 = [[0.0; 3]; 3];
            spec.gamma1 = [[0.0; 3]; 3];
        }
        ScenarioId::Scenario3 => {
            spec.nu1 = [1.0, -0.2, 0.05];
            spec.gamma0 = [[1.0, 0.1, -0.04], [0.1, 0.04, -0.0075], [-0.04, -0.0075, 0.0025]];
            spec.gamma1 = [[1.0, 0.05, -0.02], [0.05, 0.01, -0.001875], [-0.02, -0.001875, 0.000625]];
        }
        ScenarioId::NullParallel => {
            spec.nu0 = [0.0, -0.2, 0.0];
            spec.gamma1 = spec.gamma0;
        }
    }
    let o = overrides;
    macro_rules! apply {
        ($($f:ident),*) => { $( if let Some(v) = o.$f { spec.$f = v; } )* };
    }
    apply!(n0, n1, k_pre, k_post, tau, nu0, nu1, gamma0, gamma1, rho, sigma2);
    spec.validate()?;
    Ok(spec)
}

/// `Σ_st = σ² ρ^|s - t|`
pub fn ar1_covariance(k: usize, rho: f64, sigma2: f64) -> DMatrix<f64> {
    DMatrix::from_fn(k, k, |s, t| sigma2 * rho.powi(s.abs_diff(t) as i32))
}

/// A factor `L` with `L Lᵀ = Γ` for a PSD `Γ`, via Cholesky when it is
/// definite and a clipped eigen-decomposition otherwise.
fn psd_factor(g: &[[f64; 3]; 3]) -> Matrix3<f64> {
    let m = Matrix3::from_fn(|r, c| g[r][c]);
    if let Some(ch) = m.cholesky() {
        return ch.l();
    }
    let eig = m.symmetric_eigen();
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    eig.eigenvectors * Matrix3::from_diagonal(&root)
}

/// Generates a panel from substream 0 of `seed`.
pub fn generate_panel(spec: &DgpSpec, seed: u64) -> Result<Panel, SimulateError> {
    generate_panel_stream(spec, seed, 0)
}

/// Generates a panel from an independent substream of `seed`.
///
/// Comparison units get ids `1..=n0`, treated units `n0+1..=n0+n1`. Draws are
/// consumed unit by unit (three random-effect normals, then `K` error
/// normals), so the same seed and stream give the same draws whatever `τ` is.
pub fn generate_panel_stream(spec: &DgpSpec, seed: u64, stream: u64) -> Result<Panel, SimulateError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let k = spec.n_times();
    let n = spec.n0 + spec.n1;
    let error_factor = ar1_covariance(k, spec.rho, spec.sigma2)
        .cholesky()
        .ok_or_else(|| SimulateError::InvalidSpec("AR(1) covariance is not positive definite".into()))?
        .l();
    let factors = [psd_factor(&spec.gamma0), psd_factor(&spec.gamma1)];
    let nus = [spec.nu0, spec.nu1];
    let times = spec.times();

    let mut y = DMatrix::zeros(n, k);
    let mut z = DVector::zeros(k);
    for i in 0..n {
        let a = usize::from(i >= spec.n0);
        let draw = nalgebra::Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
        let beta = nalgebra::Vector3::from(nus[a]) + factors[a] * draw;
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let e = &error_factor * &z;
        for (t, &time) in times.iter().enumerate() {
            let base = beta[0] + beta[1] * time + beta[2] * time * time + e[t];
            y[(i, t)] = if a == 1 && t >= spec.k_pre { base + spec.tau } else { base };
        }
    }
    Panel::new(
        (1..=n).map(UnitId::from).collect(),
        (0..n).map(|i| i >= spec.n0).collect(),
        times,
        spec.intervention_time(),
        y,
        None,
    )
    .map_err(|e| SimulateError::InvalidSpec(e.to_string()))
}

/// Comparison weighting assumed by [`expected_did`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleWeights {
    /// Plain OLS over all units.
    None,
    /// Comparison trends (β1, β2) exactly balanced to the treated group's,
    /// levels untouched; groups carry equal total weight.
    Balanced,
}

/// Expected DD estimate under the DGP: the WLS normal equations evaluated on
/// the exact group mean series. Linear in the outcomes, so this is the mean
/// of the unweighted estimator; bias is `expected_did - τ`.
pub fn expected_did(spec: &DgpSpec, time_spec: TimeSpec, weights: OracleWeights) -> Result<f64, SimulateError> {
    spec.validate()?;
    let k = spec.n_times();
    let treated_mean = spec.mean_series(&spec.nu1, true);
    let (comparison_mean, mass) = match weights {
        OracleWeights::None => (spec.mean_series(&spec.nu0, false), [spec.n0 as f64, spec.n1 as f64]),
        OracleWeights::Balanced => {
            let nu = [spec.nu0[0], spec.nu1[1], spec.nu1[2]];
            (spec.mean_series(&nu, false), [1.0, 1.0])
        }
    };
    let columns = match time_spec {
        TimeSpec::Polynomial { order } => order + 3,
        TimeSpec::Nonparametric => k + 2,
    };
    let row = |a: usize, t: usize| -> DVector<f64> {
        let time = (t + 1) as f64;
        let post = if t >= spec.k_pre { 1.0 } else { 0.0 };
        let mut x = DVector::zeros(columns);
        match time_spec {
            TimeSpec::Polynomial { order } => {
                for p in 0..=order {
                    x[p] = time.powi(p as i32);
                }
            }
            TimeSpec::Nonparametric => x[t] = 1.0,
        }
        x[columns - 2] = a as f64;
        x[columns - 1] = a as f64 * post;
        x
    };
    let mut xtwx = DMatrix::zeros(columns, columns);
    let mut xtwy = DVector::zeros(columns);
    for (a, means) in [(0, &comparison_mean), (1, &treated_mean)] {
        for (t, &m) in means.iter().enumerate() {
            let x = row(a, t);
            xtwx += mass[a] * &x * x.transpose();
            xtwy += mass[a] * m * &x;
        }
    }
    let beta = xtwx
        .lu()
        .solve(&xtwy)
        .ok_or_else(|| SimulateError::Unsupported(format!("{time_spec} design is singular")))?;
    Ok(beta[columns - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reliability {
    pub value: f64,
    /// Variance of the slope functional applied to the true comparison trends.
    pub between: f64,
    /// Sampling variance of the OLS slope under the AR(1) errors.
    pub within: f64,
    pub warning: Option<String>,
}

/// Reliability of the estimated linear pre-period slope in the comparison
/// group: `between / (between + within)`.
pub fn trend_reliability(spec: &DgpSpec, trend_kind: TrendKind) -> Result<Reliability, SimulateError> {
    if trend_kind != TrendKind::LINEAR {
        return Err(SimulateError::Unsupported(format!(
            "reliability is defined for linear trends, not {trend_kind}"
        )));
    }
    spec.validate()?;
    let pre: Vec<f64> = (1..=spec.k_pre).map(|t| t as f64).collect();
    let a = linear_slope_weights(&pre).map_err(|e| SimulateError::InvalidSpec(e.to_string()))?;
    let sigma = ar1_covariance(spec.k_pre, spec.rho, spec.sigma2);
    let within = a.dot(&(&sigma * &a));
    // The slope functional maps (β0, β1, β2) to β1 + β2 Σ a_t t².
    let g = nalgebra::Vector3::new(
        a.sum(),
        a.iter().zip(&pre).map(|(w, t)| w * t).sum(),
        a.iter().zip(&pre).map(|(w, t)| w * t * t).sum(),
    );
    let gamma = Matrix3::from_fn(|r, c| spec.gamma0[r][c]);
    let between = g.dot(&(gamma * g)).max(0.0);
    if between == 0.0 {
        return Ok(Reliability {
            value: 0.0,
            between,
            within,
            warning: Some("no between-unit variation in comparison trends; reliability set to 0".into()),
        });
    }
    Ok(Reliability { value: between / (between + within), between, within, warning: None })
}
