//! Trajectory files.
//!
//! CSV: header `t,<state columns>,<diagnostic columns>`, one row per sample.
//! JSON: an object with `times`, `state_columns`, `states` (one array per
//! sample) and `diagnostics` (name to array). Every float is written with 17
//! significant digits, so files round-trip exactly.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::flow_engine::{FlowState, Trajectory};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Json => "json",
        }
    }
}

/// Flat, format-independent view of a trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryTable {
    pub times: Vec<f64>,
    pub state_columns: Vec<String>,
    pub states: Vec<Vec<f64>>,
    pub diagnostic_names: Vec<String>,
    /// Row `k` holds the diagnostics of sample `k`.
    pub diagnostics: Vec<Vec<f64>>,
}

impl TrajectoryTable {
    pub fn from_trajectory<S: FlowState>(traj: &Trajectory<S>) -> Self {
        let state_columns = traj
            .states()
            .first()
            .map(|s| s.column_names())
            .unwrap_or_default();
        Self {
            times: traj.times().to_vec(),
            state_columns,
            states: traj.states().iter().map(|s| s.coords()).collect(),
            diagnostic_names: traj.diagnostic_names().to_vec(),
            diagnostics: if traj.diagnostic_names().is_empty() {
                vec![Vec::new(); traj.len()]
            } else {
                traj.diagnostic_rows().to_vec()
            },
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn diagnostic(&self, name: &str) -> Option<Vec<f64>> {
        let col = self.diagnostic_names.iter().position(|n| n == name)?;
        Some(self.diagnostics.iter().map(|row| row[col]).collect())
    }
}

/// `x` with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn render_csv(table: &TrajectoryTable) -> String {
    let mut out = String::from("t");
    for name in table.state_columns.iter().chain(&table.diagnostic_names) {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for k in 0..table.len() {
        out.push_str(&fmt_f64(table.times[k]));
        for v in table.states[k].iter().chain(&table.diagnostics[k]) {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

/// JSON formatter that writes floats with 17 significant digits.
struct FullPrecision<F>(F);

impl<F: serde_json::ser::Formatter> serde_json::ser::Formatter for FullPrecision<F> {
    fn write_f64<W: ?Sized + std::io::Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        writer.write_all(fmt_f64(value).as_bytes())
    }

    fn begin_array<W: ?Sized + std::io::Write>(&mut self, writer: &mut W) -> std::io::Result<()> {
        self.0.begin_array(writer)
    }
    fn end_array<W: ?Sized + std::io::Write>(&mut self, writer: &mut W) -> std::io::Result<()> {
        self.0.end_array(writer)
    }
    fn begin_array_value<W: ?Sized + std::io::Write>(&mut self, writer: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_array_value(writer, first)
    }
    fn end_array_value<W: ?Sized + std::io::Write>(&mut self, writer: &mut W) -> std::io::Result<()> {
        self.0.end_array_value(writer)
    }
    fn begin_object<W: ?Sized + std::io::Write>(&mut self, writer: &mut W) -> std::io::Result<()> {
        self.0.begin_object(writer)
    }
    fn end_object<W: ?Sized + std::io::Write>(&mut self, writer: &mut W) -> std::io::Result<()> {
        self.0.end_object(writer)
    }
    fn begin_object_key<W: ?Sized + std::io::Write>(&mut self, writer: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_object_key(writer, first)
    }
    fn end_object_key<W: ?Sized + std::io::Write>(&mut self, writer: &mut W) -> std::io::Result<()> {
        self.0.end_object_key(writer)
    }
    fn begin_object_value<W: ?Sized + std::io::Write>(&mut self, writer: &mut W) -> std::io::Result<()> {
        self.0.begin_object_value(writer)
    }
    fn end_object_value<W: ?Sized + std::io::Write>(&mut self, writer: &mut W) -> std::io::Result<()> {
        self.0.end_object_value(writer)
    }
}

/// Serializes `value` as pretty JSON with full-precision floats.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut buf = Vec::new();
    let formatter = FullPrecision(serde_json::ser::PrettyFormatter::with_indent(b"  "));
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, formatter);
    value
        .serialize(&mut ser)
        .map_err(|e| CliError::Io(format!("JSON serialization failed: {e}")))?;
    buf.push(b'\n');
    String::from_utf8(buf).map_err(|e| CliError::Io(e.to_string()))
}

#[derive(Serialize, Deserialize)]
struct JsonTrajectory {
    times: Vec<f64>,
    state_columns: Vec<String>,
    states: Vec<Vec<f64>>,
    diagnostics: BTreeMap<String, Vec<f64>>,
}

pub fn render_json(table: &TrajectoryTable) -> Result<String, CliError> {
    let diagnostics = table
        .diagnostic_names
        .iter()
        .enumerate()
        .map(|(col, name)| (name.clone(), table.diagnostics.iter().map(|r| r[col]).collect()))
        .collect();
    to_json_string(&JsonTrajectory {
        times: table.times.clone(),
        state_columns: table.state_columns.clone(),
        states: table.states.clone(),
        diagnostics,
    })
}

/// Parses a trajectory written by [`render_json`]. Diagnostics come back in
/// name order.
pub fn parse_json(text: &str) -> Result<TrajectoryTable, CliError> {
    let raw: JsonTrajectory =
        serde_json::from_str(text).map_err(|e| CliError::Parse(format!("trajectory JSON: {e}")))?;
    let diagnostic_names: Vec<String> = raw.diagnostics.keys().cloned().collect();
    let diagnostics = (0..raw.times.len())
        .map(|k| raw.diagnostics.values().map(|col| col[k]).collect())
        .collect();
    Ok(TrajectoryTable {
        times: raw.times,
        state_columns: raw.state_columns,
        states: raw.states,
        diagnostic_names,
        diagnostics,
    })
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    let mut file = std::fs::File::create(path)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
    file.write_all(contents.as_bytes())
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

/// Writes `table` to `path` in the requested format.
pub fn emit_trajectory(table: &TrajectoryTable, format: OutputFormat, path: &Path) -> Result<(), CliError> {
    if table.is_empty() {
        return Err(CliError::Validation("cannot emit an empty trajectory".into()));
    }
    let text = match format {
        OutputFormat::Csv => render_csv(table),
        OutputFormat::Json => render_json(table)?,
    };
    write_file(path, &text)
}
