//! Experiment configuration files.
//!
//! A config is a flat TOML document; matrices are either arrays of rows or
//! flat row-major arrays of a square length.
//!
//! ```toml
//! experiment = "gaussian-flow"
//! q = [[0.5]]
//! b = [[0.0]]
//! mean0 = [0.0]
//! cov0 = [[1.0]]
//! dt = 1e-3
//! t_end = 1.0
//! record_every = 100
//! output = "flow.csv"
//! ```

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::emit::OutputFormat;
use super::CliError;
use crate::flow_engine::FlowConfig;
use crate::gaussian_manifold::{GaussianParams, QuadBilinearLandscape};
use crate::nes_engine::{AscentMode, ShapingKind, ShapingSpec};
use crate::oracle::GridDensity;
use crate::simplex_games::{FiniteLandscape, SimplexPoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    SimplexFlow,
    GaussianFlow,
    SigmaFlow,
    NesRun,
    GridOracle,
    Verify,
}

impl ExperimentKind {
    pub fn tag(self) -> &'static str {
        match self {
            Self::SimplexFlow => "simplex-flow",
            Self::GaussianFlow => "gaussian-flow",
            Self::SigmaFlow => "sigma-flow",
            Self::NesRun => "nes-run",
            Self::GridOracle => "grid-oracle",
            Self::Verify => "verify",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Rows(Vec<Vec<f64>>),
    Flat(Vec<f64>),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AscentKind {
    #[default]
    Analytic,
    Sampled,
}

/// Raw experiment file contents. Which fields are required depends on
/// `experiment`; see [`ExperimentConfig::validate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,

    // landscapes
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payoff: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<MatrixSpec>,

    // initial state
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov0: Option<MatrixSpec>,

    // flow
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default = "default_boundary_eps")]
    pub boundary_eps: f64,

    // natural evolution strategies
    #[serde(default)]
    pub mode: AscentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_shaping")]
    pub shaping: ShapingKind,
    #[serde(default = "default_truncation")]
    pub truncation: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iters: Option<usize>,

    // grid oracle
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub var0: Option<f64>,

    // output
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<OutputFormat>,
}

fn default_record_every() -> usize {
    1
}

fn default_boundary_eps() -> f64 {
    1e-12
}

fn default_shaping() -> ShapingKind {
    ShapingKind::None
}

fn default_truncation() -> f64 {
    0.5
}

/// Fully validated experiment, ready to run.
#[derive(Clone, Debug)]
pub enum Experiment {
    SimplexFlow {
        landscape: FiniteLandscape,
        p0: SimplexPoint,
        target: Option<SimplexPoint>,
        flow: FlowConfig,
    },
    GaussianFlow {
        landscape: QuadBilinearLandscape,
        g0: GaussianParams,
        flow: FlowConfig,
        sigma_normalized: bool,
    },
    NesRun {
        landscape: QuadBilinearLandscape,
        g0: GaussianParams,
        step: f64,
        iters: usize,
        mode: AscentMode,
    },
    GridOracle {
        density: GridDensity,
        q: f64,
        b: f64,
        mean0: f64,
        var0: f64,
        flow: FlowConfig,
    },
    Verify,
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("field `{field}`: {msg}"))
}

fn require<'a, T>(value: &'a Option<T>, field: &str, kind: ExperimentKind) -> Result<&'a T, CliError> {
    value
        .as_ref()
        .ok_or_else(|| invalid(field, format!("required for experiment \"{}\"", kind.tag())))
}

fn matrix(spec: &MatrixSpec, field: &str, n: Option<usize>) -> Result<DMatrix<f64>, CliError> {
    let m = match spec {
        MatrixSpec::Rows(rows) => {
            let nrows = rows.len();
            if nrows == 0 {
                return Err(invalid(field, "matrix is empty"));
            }
            if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != nrows) {
                return Err(invalid(
                    field,
                    format!("row {} has {} entries, expected {nrows} (square matrix)", i + 1, row.len()),
                ));
            }
            DMatrix::from_row_iterator(nrows, nrows, rows.iter().flatten().copied())
        }
        MatrixSpec::Flat(values) => {
            let side = (values.len() as f64).sqrt().round() as usize;
            if side == 0 || side * side != values.len() {
                return Err(invalid(
                    field,
                    format!("{} values do not form a square matrix", values.len()),
                ));
            }
            DMatrix::from_row_slice(side, side, values)
        }
    };
    if let Some(n) = n {
        if m.nrows() != n {
            return Err(invalid(field, format!("expected a {n}x{n} matrix, got {0}x{0}", m.nrows())));
        }
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(invalid(field, "contains a non-finite value"));
    }
    Ok(m)
}

fn vector(values: &[f64], field: &str, n: usize) -> Result<DVector<f64>, CliError> {
    if values.len() != n {
        return Err(invalid(field, format!("expected {n} entries, got {}", values.len())));
    }
    Ok(DVector::from_column_slice(values))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Parse(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    fn flow(&self) -> Result<FlowConfig, CliError> {
        let kind = self.experiment;
        let cfg = FlowConfig {
            dt: *require(&self.dt, "dt", kind)?,
            t_end: *require(&self.t_end, "t_end", kind)?,
            record_every: self.record_every,
            boundary_eps: self.boundary_eps,
        };
        cfg.validate().map_err(|e| invalid("dt/t_end/record_every/boundary_eps", e))?;
        Ok(cfg)
    }

    fn gaussian_inputs(&self) -> Result<(QuadBilinearLandscape, GaussianParams), CliError> {
        let kind = self.experiment;
        let q = matrix(require(&self.q, "q", kind)?, "q", None)?;
        let n = q.nrows();
        let b = matrix(require(&self.b, "b", kind)?, "b", Some(n))?;
        let landscape = QuadBilinearLandscape::new(q, b).map_err(|e| invalid("q", e))?;
        let mean = vector(require(&self.mean0, "mean0", kind)?, "mean0", n)?;
        let cov = matrix(require(&self.cov0, "cov0", kind)?, "cov0", Some(n))?;
        let g0 = GaussianParams::new(mean, cov).map_err(|e| invalid("cov0", e))?;
        Ok((landscape, g0))
    }

    /// Applies every validity check and builds the runnable experiment.
    pub fn validate(&self) -> Result<Experiment, CliError> {
        let kind = self.experiment;
        match kind {
            ExperimentKind::SimplexFlow => {
                let a = matrix(require(&self.payoff, "payoff", kind)?, "payoff", None)?;
                let n = a.nrows();
                let landscape = FiniteLandscape::matrix(a).map_err(|e| invalid("payoff", e))?;
                let p0 = require(&self.p0, "p0", kind)?;
                if p0.len() != n {
                    return Err(invalid("p0", format!("expected {n} entries, got {}", p0.len())));
                }
                let p0 = SimplexPoint::new(p0.clone()).map_err(|e| invalid("p0", e))?;
                let target = match &self.target {
                    Some(t) if t.len() != n => {
                        return Err(invalid("target", format!("expected {n} entries, got {}", t.len())))
                    }
                    Some(t) => Some(SimplexPoint::new(t.clone()).map_err(|e| invalid("target", e))?),
                    None => None,
                };
                Ok(Experiment::SimplexFlow {
                    landscape,
                    p0,
                    target,
                    flow: self.flow()?,
                })
            }
            ExperimentKind::GaussianFlow | ExperimentKind::SigmaFlow => {
                let (landscape, g0) = self.gaussian_inputs()?;
                Ok(Experiment::GaussianFlow {
                    landscape,
                    g0,
                    flow: self.flow()?,
                    sigma_normalized: kind == ExperimentKind::SigmaFlow,
                })
            }
            ExperimentKind::NesRun => {
                let (landscape, g0) = self.gaussian_inputs()?;
                let step = *require(&self.step, "step", kind)?;
                if !(step > 0.0 && step.is_finite()) {
                    return Err(invalid("step", format!("must be positive, got {step}")));
                }
                let iters = *require(&self.iters, "iters", kind)?;
                let mode = match self.mode {
                    AscentKind::Analytic => AscentMode::Analytic,
                    AscentKind::Sampled => {
                        let m = *require(&self.samples, "samples", kind)?;
                        if m < 2 {
                            return Err(invalid("samples", "need at least 2 samples"));
                        }
                        let shaping = ShapingSpec {
                            kind: self.shaping,
                            truncation: self.truncation,
                        };
                        shaping.validate().map_err(|e| invalid("truncation", e))?;
                        AscentMode::Sampled {
                            m,
                            seed: self.seed,
                            shaping,
                        }
                    }
                };
                Ok(Experiment::NesRun {
                    landscape,
                    g0,
                    step,
                    iters,
                    mode,
                })
            }
            ExperimentKind::GridOracle => {
                let q = matrix(require(&self.q, "q", kind)?, "q", Some(1))?[(0, 0)];
                let b = matrix(require(&self.b, "b", kind)?, "b", Some(1))?[(0, 0)];
                if !(q > 0.0) {
                    return Err(invalid("q", "must be positive"));
                }
                let mean0 = vector(require(&self.mean0, "mean0", kind)?, "mean0", 1)?[0];
                let var0 = self.var0.unwrap_or(1.0);
                let [lo, hi] = self.domain.unwrap_or([-8.0, 8.0]);
                let cells = self.cells.unwrap_or(2048);
                let density = GridDensity::gaussian(lo, hi, cells, mean0, var0)
                    .map_err(|e| invalid("domain/cells/var0", e))?;
                Ok(Experiment::GridOracle {
                    density,
                    q,
                    b,
                    mean0,
                    var0,
                    flow: self.flow()?,
                })
            }
            ExperimentKind::Verify => Ok(Experiment::Verify),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_rows_and_flat_matrices() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
experiment = "gaussian-flow"
q = [1.0, 0.0, 0.0, 2.0]
b = [[0.0, 1.0], [-1.0, 0.0]]
mean0 = [0.5, 0.5]
cov0 = [[1.0, 0.0], [0.0, 1.0]]
dt = 0.01
t_end = 1.0
"#,
        )
        .unwrap();
        match cfg.validate().unwrap() {
            Experiment::GaussianFlow { landscape, .. } => {
                assert_eq!(landscape.q()[(1, 1)], 2.0);
                assert_eq!(landscape.b()[(1, 0)], -1.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dimension_errors_name_the_field() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
experiment = "gaussian-flow"
q = [[1.0, 0.0], [0.0, 2.0]]
b = [[0.0, 1.0, 3.0], [-1.0, 0.0, 3.0], [1.0, 1.0, 1.0]]
mean0 = [0.5, 0.5]
cov0 = [[1.0, 0.0], [0.0, 1.0]]
dt = 0.01
t_end = 1.0
"#,
        )
        .unwrap();
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("`b`"), "{err}");

        let cfg = ExperimentConfig::from_toml_str(
            "experiment = \"simplex-flow\"\npayoff = [[0.0, 1.0], [1.0]]\np0 = [0.5, 0.5]\ndt = 0.1\nt_end = 1.0\n",
        )
        .unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("`payoff`"), "{err}");
    }

    #[test]
    fn syntax_and_unknown_fields_are_parse_errors() {
        assert_eq!(ExperimentConfig::from_toml_str("experiment = ").unwrap_err().exit_code(), 2);
        assert_eq!(
            ExperimentConfig::from_toml_str("experiment = \"verify\"\nbogus = 1\n")
                .unwrap_err()
                .exit_code(),
            2
        );
        assert_eq!(
            ExperimentConfig::from_toml_str("experiment = \"nope\"\n").unwrap_err().exit_code(),
            2
        );
    }

    #[test]
    fn missing_fields_are_validation_errors() {
        let cfg = ExperimentConfig::from_toml_str("experiment = \"sigma-flow\"\nq = [[1.0]]\n").unwrap();
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("`b`"));
    }
}
