//! Command-line front end: one config file runs one experiment and writes a
//! trajectory file plus a JSON report next to it.
//!
//! Exit statuses: 0 success, 1 I/O failure, 2 parse error, 3 validation error,
//! 4 numerical failure during the run.

pub mod config;
pub mod emit;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::flow_engine::{
    classify_asymptotics, closed_form_covariance, fit_convergence_rate, gaussian_flow, sigma_flow,
    simplex_flow, FittedRate, FlowState, Trajectory, MIN_FIT_SAMPLES,
};
use crate::gaussian_manifold::{expected_fitness, GaussianParams, QuadBilinearLandscape};
use crate::nes_engine::{natural_gradient_ascent, AscentMode};
use crate::oracle::integrate_grid;
use crate::simplex_games::{ess_candidate, lyapunov_series};
use crate::verify::{self, CheckOutcome};
use config::{Experiment, ExperimentConfig, ExperimentKind};
use emit::{emit_trajectory, to_json_string, write_file, OutputFormat, TrajectoryTable};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("I/O error: {0}")]
    Io(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(#[from] crate::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Io(_) => 1,
            Self::Parse(_) => 2,
            Self::Validation(_) => 3,
            Self::Numerical(_) => 4,
        }
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub output: Option<PathBuf>,
    pub format: Option<OutputFormat>,
    pub seed: Option<u64>,
    /// Include wall-clock duration in the report (breaks byte-reproducibility).
    pub timing: bool,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Diagnostics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_mean_fitness: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fitted_rate: Option<FittedRate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lyapunov: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ess_candidate: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converges_to_delta_at_zero: Option<bool>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub eigenvalues: Vec<[f64; 2]>,
    /// Deviations of the run from independent oracles, by name.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub oracle_deltas: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct FinalState {
    pub t: f64,
    pub columns: Vec<String>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub experiment: String,
    pub config: ExperimentConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_state: Option<FinalState>,
    pub diagnostics: Diagnostics,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub checks: Vec<CheckOutcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub all_passed: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_seconds: Option<f64>,
}

impl RunReport {
    fn all_finite(&self) -> bool {
        let d = &self.diagnostics;
        let state_ok = self
            .final_state
            .as_ref()
            .is_none_or(|s| s.t.is_finite() && s.values.iter().all(|v| v.is_finite()));
        let rate_ok = d
            .fitted_rate
            .is_none_or(|r| r.rate.is_finite() && r.r_squared.is_finite() && r.sse.iter().all(|v| v.is_finite()));
        state_ok
            && rate_ok
            && d.final_mean_fitness.is_none_or(f64::is_finite)
            && d.eigenvalues.iter().flatten().all(|v| v.is_finite())
            && d.oracle_deltas.values().all(|v| v.is_finite())
    }
}

/// Files written by a run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub trajectory: Option<PathBuf>,
    pub report: PathBuf,
    pub report_data: RunReport,
}

/// `traj.csv` -> `traj.report.json`.
pub fn report_path(output: &Path) -> PathBuf {
    output.with_extension("report.json")
}

struct Outcome {
    table: Option<TrajectoryTable>,
    final_state: Option<FinalState>,
    diagnostics: Diagnostics,
    checks: Vec<CheckOutcome>,
}

fn final_state<S: FlowState>(traj: &Trajectory<S>) -> Option<FinalState> {
    traj.last().map(|(t, s)| FinalState {
        t,
        columns: s.column_names(),
        values: s.coords(),
    })
}

fn rate_if_fittable(traj: &Trajectory<GaussianParams>) -> Option<FittedRate> {
    if traj.len() >= MIN_FIT_SAMPLES {
        fit_convergence_rate(traj).ok()
    } else {
        None
    }
}

fn gaussian_summary(
    traj: &Trajectory<GaussianParams>,
    landscape: &QuadBilinearLandscape,
) -> Result<Diagnostics, crate::Error> {
    let report = classify_asymptotics(landscape)?;
    let final_j = match traj.last() {
        Some((_, g)) => Some(expected_fitness(g, landscape)?),
        None => None,
    };
    Ok(Diagnostics {
        final_mean_fitness: final_j,
        fitted_rate: rate_if_fittable(traj),
        converges_to_delta_at_zero: Some(report.converges_to_delta_at_zero),
        eigenvalues: report.eigenvalues.iter().map(|z| [z.re, z.im]).collect(),
        ..Diagnostics::default()
    })
}

fn monotonicity_verdict(series: &[f64]) -> String {
    let spread = series.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - series.iter().copied().fold(f64::INFINITY, f64::min);
    if series.windows(2).all(|w| w[1] < w[0]) {
        "strictly decreasing".into()
    } else if spread <= 1e-6 {
        "constant".into()
    } else if series.windows(2).all(|w| w[1] <= w[0]) {
        "non-increasing".into()
    } else {
        "not monotone".into()
    }
}

fn execute(experiment: &Experiment) -> Result<Outcome, crate::Error> {
    match experiment {
        Experiment::SimplexFlow {
            landscape,
            p0,
            target,
            flow,
        } => {
            let traj = simplex_flow(landscape, p0, target.as_ref(), flow)?;
            let mut diagnostics = Diagnostics {
                final_mean_fitness: traj.diagnostic("meanFitness").and_then(|v| v.last().copied()),
                ..Diagnostics::default()
            };
            if let Some(target) = target {
                diagnostics.lyapunov = Some(monotonicity_verdict(&lyapunov_series(target, &traj)?));
                diagnostics.ess_candidate = Some(ess_candidate(target, landscape)?.candidate);
                if let Some((_, last)) = traj.last() {
                    let gap = last
                        .as_slice()
                        .iter()
                        .zip(target.as_slice())
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    diagnostics.oracle_deltas.insert("final_distance_to_target".into(), gap);
                }
            }
            Ok(Outcome {
                table: Some(TrajectoryTable::from_trajectory(&traj)),
                final_state: final_state(&traj),
                diagnostics,
                checks: Vec::new(),
            })
        }
        Experiment::GaussianFlow {
            landscape,
            g0,
            flow,
            sigma_normalized,
        } => {
            let traj = if *sigma_normalized {
                sigma_flow(landscape, g0, flow)?
            } else {
                gaussian_flow(landscape, g0, flow)?
            };
            let mut diagnostics = gaussian_summary(&traj, landscape)?;
            if !sigma_normalized {
                let mut worst: f64 = 0.0;
                for (t, g) in traj.times().iter().zip(traj.states()) {
                    let exact = closed_form_covariance(g0.cov(), landscape.q(), *t)?;
                    worst = worst.max((g.cov() - &exact).norm() / exact.norm());
                }
                diagnostics
                    .oracle_deltas
                    .insert("covariance_vs_closed_form".into(), worst);
            }
            Ok(Outcome {
                table: Some(TrajectoryTable::from_trajectory(&traj)),
                final_state: final_state(&traj),
                diagnostics,
                checks: Vec::new(),
            })
        }
        Experiment::NesRun {
            landscape,
            g0,
            step,
            iters,
            mode,
        } => {
            let traj = natural_gradient_ascent(g0, landscape, *step, *iters, mode)?;
            let mut diagnostics = gaussian_summary(&traj, landscape)?;
            if matches!(mode, AscentMode::Sampled { .. }) {
                let reference = natural_gradient_ascent(g0, landscape, *step, *iters, &AscentMode::Analytic)?;
                if let (Some((_, s)), Some((_, a))) = (traj.last(), reference.last()) {
                    let js = expected_fitness(s, landscape)?;
                    let ja = expected_fitness(a, landscape)?;
                    diagnostics
                        .oracle_deltas
                        .insert("final_J_vs_analytic".into(), (js - ja).abs() / ja.abs().max(1e-300));
                }
            }
            Ok(Outcome {
                table: Some(TrajectoryTable::from_trajectory(&traj)),
                final_state: final_state(&traj),
                diagnostics,
                checks: Vec::new(),
            })
        }
        Experiment::GridOracle {
            density,
            q,
            b,
            mean0,
            var0,
            flow,
        } => {
            let run = integrate_grid(density, *q, *b, flow.dt, flow.t_end, flow.record_every)?;
            // 1-D closed forms: C(t) = C0 / (1 + 2 q C0 t), a(t) = a0 (1 + 2 q C0 t)^((b - 2q) / 2q).
            let closed = |t: f64| {
                let growth = 1.0 + 2.0 * q * var0 * t;
                (mean0 * growth.powf((b - 2.0 * q) / (2.0 * q)), var0 / growth)
            };
            let mut table = TrajectoryTable {
                times: run.times.clone(),
                state_columns: vec![
                    "mean".into(),
                    "variance".into(),
                    "skewness".into(),
                    "excessKurtosis".into(),
                ],
                states: Vec::new(),
                diagnostic_names: vec!["meanClosedForm".into(), "varianceClosedForm".into()],
                diagnostics: Vec::new(),
            };
            let mut mean_err: f64 = 0.0;
            let mut var_err: f64 = 0.0;
            let mut shape_err: f64 = 0.0;
            for (t, m) in run.times.iter().zip(&run.moments) {
                let (mean_cf, var_cf) = closed(*t);
                let skew = m.skewness.ok_or_else(|| crate::Error::Degenerate("grid variance vanished".into()))?;
                let kurt = m.excess_kurtosis.unwrap_or(f64::NAN);
                table.states.push(vec![m.mean, m.variance, skew, kurt]);
                table.diagnostics.push(vec![mean_cf, var_cf]);
                mean_err = mean_err.max((m.mean - mean_cf).abs());
                var_err = var_err.max((m.variance - var_cf).abs());
                shape_err = shape_err.max(skew.abs()).max(kurt.abs());
            }
            let mut diagnostics = Diagnostics::default();
            diagnostics.oracle_deltas.insert("mean_vs_closed_form".into(), mean_err);
            diagnostics.oracle_deltas.insert("variance_vs_closed_form".into(), var_err);
            diagnostics.oracle_deltas.insert("max_abs_skew_or_excess_kurtosis".into(), shape_err);
            diagnostics.oracle_deltas.insert("max_mass_drift".into(), run.max_mass_drift);
            let final_state = table.times.last().map(|&t| FinalState {
                t,
                columns: table.state_columns.clone(),
                values: table.states.last().cloned().unwrap_or_default(),
            });
            Ok(Outcome {
                table: Some(table),
                final_state,
                diagnostics,
                checks: Vec::new(),
            })
        }
        Experiment::Verify => Ok(Outcome {
            table: None,
            final_state: None,
            diagnostics: Diagnostics::default(),
            checks: verify::run_all(),
        }),
    }
}

fn default_output(kind: ExperimentKind, format: OutputFormat) -> PathBuf {
    match kind {
        ExperimentKind::Verify => PathBuf::from("verify.report.json"),
        _ => PathBuf::from(format!("{}.{}", kind.tag(), format.extension())),
    }
}

/// Runs an already parsed config.
pub fn run_config(mut config: ExperimentConfig, opts: &RunOptions) -> Result<RunOutput, CliError> {
    if let Some(seed) = opts.seed {
        config.seed = seed;
    }
    if let Some(output) = &opts.output {
        config.output = Some(output.clone());
    }
    if let Some(format) = opts.format {
        config.format = Some(format);
    }
    let experiment = config.validate()?;

    let started = Instant::now();
    let outcome = execute(&experiment)?;
    let elapsed = started.elapsed().as_secs_f64();

    let format = config.format.unwrap_or_default();
    let output = config
        .output
        .clone()
        .unwrap_or_else(|| default_output(config.experiment, format));
    let all_passed = (!outcome.checks.is_empty()).then(|| outcome.checks.iter().all(|c| c.passed));
    let report = RunReport {
        experiment: config.experiment.tag().to_string(),
        config: config.clone(),
        final_state: outcome.final_state,
        diagnostics: outcome.diagnostics,
        checks: outcome.checks,
        all_passed,
        wall_clock_seconds: opts.timing.then_some(elapsed),
    };
    if !report.all_finite() {
        return Err(CliError::Numerical(crate::Error::NonFinite("run report".into())));
    }

    let (trajectory, report_file) = match &outcome.table {
        Some(table) => {
            emit_trajectory(table, format, &output)?;
            (Some(output.clone()), report_path(&output))
        }
        None => (None, output.clone()),
    };
    write_file(&report_file, &to_json_string(&report)?)?;
    Ok(RunOutput {
        trajectory,
        report: report_file,
        report_data: report,
    })
}

/// `repflow run <config>`.
pub fn run(config_path: &Path, opts: &RunOptions) -> Result<RunOutput, CliError> {
    run_config(ExperimentConfig::load(config_path)?, opts)
}

/// `repflow verify`.
pub fn run_verify(opts: &RunOptions) -> Result<RunOutput, CliError> {
    let config = ExperimentConfig::from_toml_str("experiment = \"verify\"\n")?;
    run_config(config, opts)
}
