//! Difference-in-differences with comparison-group weights balanced on
//! pre-intervention outcome trends.
//!
//! The pipeline: load a [`Panel`], estimate per-unit trends, solve
//! entropy-balancing weights or match on trends, then fit a weighted DD
//! regression with cluster-robust errors.

pub mod balance;
pub mod did;
pub mod harness;
pub mod matching;
pub mod panel;
pub mod simulate;
pub mod trends;

pub use balance::{
    build_constraints, effective_sample_size, solve_entropy_balance, BalanceError, BalanceProblem, BalanceWeights,
    SolverSettings,
};
pub use did::{fit_did, pretrend_test, DidError, DidFit, PretrendTest, TimeSpec};
pub use harness::{
    analyze_panel, emit_report, run_experiment, AnalysisConfig, AnalysisReport, BiasReport, ExperimentConfig, HarnessError,
    OutputFormat,
};
pub use matching::{match_nearest, match_weights, MatchError, MatchSet};
pub use panel::{load_panel, Panel, PanelError, UnitId, UnitWeights, ValidationReport};
pub use simulate::{generate_panel, scenario_spec, DgpSpec, Overrides, ScenarioId};
pub use trends::{estimate_trends, TrendKind, TrendMatrix};
