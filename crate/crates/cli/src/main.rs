//! `ebdid` command-line interface.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 numerical failure.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ebdid::balance::{build_constraints, solve_entropy_balance, BalanceError, CovariateBlock, SolverSettings};
use ebdid::harness::{
    analyze_panel, emit_report, run_experiment, AnalysisConfig, ExperimentConfig, HarnessError, OutputFormat,
    TrendFeature,
};
use ebdid::matching::match_nearest;
use ebdid::panel::{load_panel, Panel, PanelError};
use ebdid::simulate::{generate_panel, scenario_spec, Overrides, ScenarioId};
use ebdid::trends::{estimate_trends, TrendError, TrendMatrix};
use nalgebra::DMatrix;

#[derive(Parser)]
#[command(name = "ebdid", version, about = "Difference-in-differences with trend-balanced comparison groups")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// RNG seed; overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for Monte Carlo replications (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated output formats: csv, json, plotdata.
    #[arg(long, global = true, value_delimiter = ',')]
    format: Vec<OutputFormat>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo experiment from a JSON config and write a bias report.
    Simulate { config: PathBuf },
    /// Run the balance / overlap / pre-trend / estimate workflow on a panel.
    Analyze {
        config: PathBuf,
        /// Panel CSV; defaults to the `panel` entry of the config.
        panel: Option<PathBuf>,
    },
    /// Solve entropy-balancing weights and write `unit,weight`.
    Balance {
        panel: PathBuf,
        #[command(flatten)]
        opts: PanelOpts,
        /// Moment orders to balance.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        moments: Vec<u8>,
        /// Covariate columns to balance as well.
        #[arg(long, value_delimiter = ',')]
        covariates: Vec<String>,
    },
    /// Greedy 1:1 caliper matching on trends; writes the pair list.
    Match {
        panel: PathBuf,
        #[command(flatten)]
        opts: PanelOpts,
        /// Caliper in pooled standard deviations.
        #[arg(long, default_value_t = 0.2)]
        caliper: f64,
    },
    /// Generate one simulated panel as CSV.
    Generate {
        #[arg(long, default_value = "scenario1")]
        scenario: String,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
    },
}

#[derive(Args)]
struct PanelOpts {
    /// First post-intervention time.
    #[arg(long)]
    intervention_time: f64,
    /// Trend features: linear, first_differences or quadratic.
    #[arg(long, default_value = "linear")]
    trend: TrendFeature,
}

enum Failure {
    Config(String),
    Numerical(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Config(e.to_string())
        }
    }
}

impl From<PanelError> for Failure {
    fn from(e: PanelError) -> Self {
        match e {
            PanelError::Invalid(report) => {
                Failure::Config(serde_json::to_string_pretty(&report).unwrap_or_else(|_| "invalid panel".into()))
            }
            other => Failure::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

fn read_panel(path: &Path, intervention_time: f64) -> Result<Panel, Failure> {
    let file = File::open(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let (panel, report) = load_panel(file, intervention_time)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(panel)
}

fn trends(panel: &Panel, feature: TrendFeature) -> Result<(TrendMatrix, TrendMatrix), Failure> {
    let t = estimate_trends(panel, feature.kind()).map_err(|e| match e {
        TrendError::InsufficientPrePeriods { .. } | TrendError::ZeroOrder => Failure::Config(e.to_string()),
        other => Failure::Numerical(other.to_string()),
    })?;
    for w in &t.warnings {
        eprintln!("warning: {w}");
    }
    Ok(t.split(panel))
}

fn out_dir(common: &Common, fallback: Option<&Path>) -> PathBuf {
    common.out.clone().or_else(|| fallback.map(Path::to_path_buf)).unwrap_or_else(|| PathBuf::from("out"))
}

fn formats(common: &Common, default: &[OutputFormat]) -> Vec<OutputFormat> {
    if common.format.is_empty() {
        default.to_vec()
    } else {
        common.format.clone()
    }
}

fn print_written(files: &[PathBuf]) {
    for f in files {
        println!("{}", f.display());
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = &cli.common;
    match cli.command {
        Command::Simulate { config } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            let report = run_experiment(&cfg, common.threads)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            let dir = out_dir(common, cfg.output_dir.as_deref());
            print_written(&emit_report(&report, &dir, &formats(common, &[OutputFormat::Csv]))?);
        }
        Command::Analyze { config, panel } => {
            let cfg = AnalysisConfig::load(&config)?;
            let path = panel
                .or_else(|| cfg.panel.clone())
                .ok_or_else(|| Failure::Config("no panel file given on the command line or in the config".into()))?;
            let panel = read_panel(&path, cfg.intervention_time)?;
            let dir = out_dir(common, None);
            match analyze_panel(&panel, &cfg) {
                Ok(report) => {
                    for w in &report.warnings {
                        eprintln!("warning: {w}");
                    }
                    let fmts = formats(common, &[OutputFormat::Json, OutputFormat::Csv]);
                    print_written(&emit_report(&report, &dir, &fmts)?);
                }
                Err(HarnessError::Infeasible { message, overlap }) => {
                    fs::create_dir_all(&dir)?;
                    let path = dir.join("overlap.json");
                    let body = serde_json::json!({ "error": message, "overlap": overlap });
                    fs::write(&path, serde_json::to_string_pretty(&body).expect("serializable") + "\n")?;
                    println!("{}", path.display());
                    return Err(Failure::Numerical(message));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Command::Balance { panel, opts, moments, covariates } => {
            let panel = read_panel(&panel, opts.intervention_time)?;
            let (treated, comparison) = trends(&panel, opts.trend)?;
            let moments: BTreeSet<u8> = moments.into_iter().collect();
            let cov = if covariates.is_empty() {
                None
            } else {
                let c = panel.covariates().ok_or_else(|| Failure::Config("panel has no covariate columns".into()))?;
                let cols = covariates
                    .iter()
                    .map(|n| {
                        c.names.iter().position(|m| m == n).ok_or_else(|| Failure::Config(format!("unknown covariate `{n}`")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let pick = |rows: Vec<usize>| DMatrix::from_fn(rows.len(), cols.len(), |r, k| c.values[(rows[r], cols[k])]);
                Some((pick(panel.comparison_indices()), pick(panel.treated_indices())))
            };
            let block = cov.as_ref().map(|(comparison, treated)| CovariateBlock { names: &covariates, comparison, treated });
            let prob = build_constraints(&comparison, &treated, block, &moments).map_err(|e| match e {
                BalanceError::Invalid(m) => Failure::Config(m),
                other => Failure::Numerical(other.to_string()),
            })?;
            for w in &prob.warnings {
                eprintln!("warning: {w}");
            }
            let bw = solve_entropy_balance(&prob, &SolverSettings::default())
                .map_err(|e| Failure::Numerical(format!("entropy balancing failed: {e}")))?;
            let dir = out_dir(common, None);
            fs::create_dir_all(&dir)?;
            let path = dir.join("weights.csv");
            bw.write_csv(File::create(&path)?)?;
            println!("{}", path.display());
            if formats(common, &[OutputFormat::Csv]).contains(&OutputFormat::Json) {
                let path = dir.join("weights_diagnostics.json");
                let body = serde_json::json!({
                    "dual": bw.dual,
                    "columns": bw.column_labels.iter().map(|l| l.name()).collect::<Vec<_>>(),
                    "diagnostics": bw.diagnostics,
                });
                fs::write(&path, serde_json::to_string_pretty(&body).expect("serializable") + "\n")?;
                println!("{}", path.display());
            }
        }
        Command::Match { panel, opts, caliper } => {
            let panel = read_panel(&panel, opts.intervention_time)?;
            let (treated, comparison) = trends(&panel, opts.trend)?;
            let ms = match_nearest(&treated, &comparison, caliper).map_err(|e| Failure::Config(e.to_string()))?;
            if !ms.unmatched_treated.is_empty() {
                eprintln!("warning: {} of {} treated units unmatched", ms.unmatched_treated.len(), ms.n_treated());
            }
            let dir = out_dir(common, None);
            fs::create_dir_all(&dir)?;
            let path = dir.join("matches.csv");
            ms.write_csv(File::create(&path)?)?;
            println!("{}", path.display());
        }
        Command::Generate { scenario, rho, tau } => {
            let id: ScenarioId = serde_json::from_value(serde_json::Value::String(scenario.clone()))
                .map_err(|_| Failure::Config(format!("unknown scenario `{scenario}`")))?;
            let spec = scenario_spec(id, &Overrides { rho, tau, ..Default::default() })
                .map_err(|e| Failure::Config(e.to_string()))?;
            let panel = generate_panel(&spec, common.seed.unwrap_or(0)).map_err(|e| Failure::Config(e.to_string()))?;
            let dir = out_dir(common, None);
            fs::create_dir_all(&dir)?;
            let path = dir.join("panel.csv");
            panel.write_csv(File::create(&path)?)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
