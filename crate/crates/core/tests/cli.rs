//! End-to-end runs of the `repflow` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use repflow::cli::emit::parse_json;

fn config_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn repflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_repflow"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("experiment.toml");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SCALAR_FLOW: &str = r#"
experiment = "gaussian-flow"
q = [[0.5]]
b = [[0.0]]
mean0 = [0.0]
cov0 = [[1.0]]
dt = 0.001
t_end = 1.0
record_every = 50
output = "flow.csv"
"#;

#[test]
fn scalar_gaussian_flow_ends_at_half() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SCALAR_FLOW);
    let out = repflow(dir.path(), &["run", &cfg]);
    assert!(out.status.success(), "{}", stderr(&out));

    let csv = std::fs::read_to_string(dir.path().join("flow.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,a_1,C_11,J,traceC");
    let last: Vec<f64> = lines.last().unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert_eq!(last[0], 1.0);
    assert!((last[2] - 0.5).abs() <= 1e-6);

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("flow.report.json")).unwrap()).unwrap();
    assert_eq!(report["experiment"], "gaussian-flow");
    assert!(report["diagnostics"]["oracle_deltas"]["covariance_vs_closed_form"].as_f64().unwrap() < 1e-9);
    assert!(report.get("wall_clock_seconds").is_none());
}

#[test]
fn verify_lists_every_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = repflow(dir.path(), &["verify", "--output", "checks.json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("[PASS]")).count(), 12);

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("checks.json")).unwrap()).unwrap();
    let checks = report["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 12);
    assert!(checks.iter().all(|c| c["passed"] == true));
    assert_eq!(report["all_passed"], true);
}

#[test]
fn exit_statuses_follow_error_categories() {
    let dir = tempfile::tempdir().unwrap();

    let syntax = write_config(dir.path(), "experiment = \"gaussian-flow\"\nq = [[0.5]\n");
    let out = repflow(dir.path(), &["run", &syntax]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    let bad_dim = write_config(dir.path(), &SCALAR_FLOW.replace("b = [[0.0]]", "b = [[0.0, 1.0], [1.0, 0.0]]"));
    let out = repflow(dir.path(), &["run", &bad_dim]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("`b`"), "{}", stderr(&out));

    let blow_up = write_config(
        dir.path(),
        r#"
experiment = "nes-run"
q = [[1.0]]
b = [[0.0]]
mean0 = [1.0]
cov0 = [[1.0]]
step = 2.0
iters = 5
"#,
    );
    let out = repflow(dir.path(), &["run", &blow_up]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));

    let ok = write_config(dir.path(), SCALAR_FLOW);
    let out = repflow(dir.path(), &["run", &ok, "--output", "missing/dir/flow.csv"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));

    let out = repflow(dir.path(), &["run", "no-such-config.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

fn run_twice(config: &Path, extra: &[&str]) -> Vec<(String, Vec<u8>)> {
    let runs: Vec<Vec<(String, Vec<u8>)>> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let out = repflow(dir.path(), &[&["run", config.to_str().unwrap()], extra].concat());
            assert!(out.status.success(), "{}: {}", config.display(), stderr(&out));
            let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir.path())
                .unwrap()
                .map(|e| {
                    let e = e.unwrap();
                    (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
                })
                .collect();
            files.sort();
            files
        })
        .collect();
    assert_eq!(runs[0], runs[1], "{} is not reproducible", config.display());
    runs.into_iter().next().unwrap()
}

#[test]
fn shipped_configs_rerun_byte_identically() {
    for name in ["hawk_dove", "gaussian_1d", "sigma_3d", "nes_sampled", "grid_1d"] {
        let files = run_twice(&config_dir().join(format!("{name}.toml")), &[]);
        assert_eq!(files.len(), 2, "{name}: trajectory and report");
    }
}

#[test]
fn command_line_overrides() {
    let config = config_dir().join("nes_sampled.toml");
    let base = run_twice(&config, &["--output", "t.json"]);
    let reseeded = run_twice(&config, &["--output", "t.json", "--seed", "7"]);
    assert_ne!(base, reseeded);

    let table = parse_json(std::str::from_utf8(&base.iter().find(|(n, _)| n == "t.json").unwrap().1).unwrap()).unwrap();
    assert_eq!(table.len(), 101);
    assert_eq!(table.state_columns, ["a_1", "a_2", "C_11", "C_12", "C_21", "C_22"]);

    let as_csv = run_twice(&config, &["--output", "t.csv", "--format", "csv"]);
    assert!(std::str::from_utf8(&as_csv[0].1).unwrap().starts_with("t,a_1,a_2,"));

    let dir = tempfile::tempdir().unwrap();
    let out = repflow(dir.path(), &["run", config.to_str().unwrap(), "--timing"]);
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("nes_sampled.report.json")).unwrap()).unwrap();
    assert!(report["wall_clock_seconds"].as_f64().unwrap() >= 0.0);
}
