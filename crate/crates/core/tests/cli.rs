use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cocycle_lab::cli::config::{ExperimentConfig, NumericConfig, OutputConfig};
use cocycle_lab::cli::{RunReport, SCHEMA};

const BIN: &str = env!("CARGO_BIN_EXE_cocycle-lab");

fn lab(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    lab(&args)
}

const DIAG: &str = r#"
[base]
kind = "golden-rotation"

[operator]
kind = "constant"
matrix = [[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.5]]

[task]
kind = "spectrum"

[numeric]
n_steps = 1000
"#;

const TOWER: &str = r#"
seed = 4

[base]
kind = "golden-rotation"

[operator]
kind = "iid-family"
dim = 3
pieces = 3
scale = 0.02
seed = 2

[task]
kind = "tower"
height = 5
epsilon = 0.3
boundary = [0.0, 1.0, 1.0]
"#;

#[test]
fn spectrum_of_diagonal_writes_three_exponents() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "diag.toml", DIAG);
    let out = dir.path().join("out");
    let o = run(&cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let csv = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(!csv.contains('\r'));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "index,qr,qr_stderr,exterior,exterior_stderr,singular,singular_stderr"
    );
    assert_eq!(lines.len(), 4);
    let expected = [2f64.ln(), 0.0, 0.5f64.ln()];
    for (line, want) in lines[1..].iter().zip(expected) {
        let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        for got in [cells[1], cells[3], cells[5]] {
            assert!((got - want).abs() < 1e-9, "{line}");
        }
    }
    let resolved = fs::read_to_string(out.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("count = 3"));
    assert!(resolved.contains("n_steps = 1000"));
    assert!(resolved.contains("frame_horizon = 300"));
}

#[test]
fn millionshchikov_epsilon_outside_range_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "m.toml",
        r#"
[base]
kind = "golden-rotation"
[operator]
kind = "iid-family"
dim = 3
pieces = 2
[task]
kind = "millionshchikov"
epsilon = 0.2
"#,
    );
    let o = run(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("task.epsilon"), "{}", stderr(&o));
}

#[test]
fn unknown_keys_and_syntax_errors_exit_two_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let extra = DIAG.replace("n_steps = 1000", "n_steps = 1000\nsteps = 3");
    let cfg = write_config(dir.path(), "unknown.toml", &extra);
    let o = run(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(
        msg.contains("unknown field") && msg.contains("line"),
        "{msg}"
    );

    let cfg = write_config(dir.path(), "syntax.toml", "[base\nkind = 1\n");
    let o = run(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));

    let o = run(
        &dir.path().join("absent.toml"),
        &dir.path().join("out"),
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn a3_pipeline_on_nilpotent_seed_passes_with_probes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "a3.toml",
        r#"
seed = 5
[base]
kind = "golden-rotation"
[operator]
kind = "constant"
matrix = [[0.0, 0.9, 0.0], [0.0, 0.0, 0.9], [0.0, 0.0, 0.0]]
[task]
kind = "a3"
eta = 0.5
[numeric]
n_steps = 1000
trajectories = 2
"#,
    );
    let out = dir.path().join("out");
    let o = run(&cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report =
        RunReport::from_json(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report.pass);
    let probes = report
        .ledger
        .iter()
        .find(|e| e.name == "probes_above_floor")
        .unwrap();
    assert_eq!((probes.value, probes.bound), (20.0, 20.0));
    let csv = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 21);

    let o = lab(&["verify", out.join("report.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn verify_round_trip_tamper_and_schema_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tower.toml", TOWER);
    let out = dir.path().join("out");
    let o = run(&cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let path = out.join("report.json");
    let o = lab(&["verify", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    // push every collinearity scalar below eps/3 = 0.1
    let text = fs::read_to_string(&path).unwrap();
    let mut report = RunReport::from_json(&text).unwrap();
    let mut doc = report.document().unwrap().unwrap();
    doc.scalars = doc.scalars.map(|s| s.map_values(|b| b * 0.1));
    let body = format!(r#"{{"document":{}}}"#, serde_json::to_string(&doc).unwrap());
    report.result = serde_json::value::RawValue::from_string(body).unwrap();
    let tampered = dir.path().join("tampered.json");
    fs::write(&tampered, report.to_json()).unwrap();
    let o = lab(&["verify", tampered.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("scalar_floor"), "{}", stderr(&o));

    let missing = dir.path().join("missing.json");
    let line = "  \"task\": \"tower\",\n";
    assert!(text.contains(line));
    fs::write(&missing, text.replacen(line, "", 1)).unwrap();
    let o = lab(&["verify", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("missing field `task`"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn tampered_ledger_margin_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "diag.toml", DIAG);
    let out = dir.path().join("out");
    assert_eq!(run(&cfg, &out, &[]).status.code(), Some(0));
    let path = out.join("report.json");
    let o = lab(&["verify", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let mut doc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let m = doc["ledger"][0]["margin"].as_f64().unwrap();
    doc["ledger"][0]["margin"] = serde_json::json!(m + 1e-6);
    fs::write(&path, serde_json::to_string(&doc).unwrap()).unwrap();
    let o = lab(&["verify", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("agree_qr_exterior_1"), "{}", stderr(&o));
}

#[test]
fn reports_are_deterministic_and_resolved_config_replays() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tower.toml", TOWER);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(&cfg, &a, &["--threads", "2"]).status.code(), Some(0));
    assert_eq!(run(&cfg, &b, &[]).status.code(), Some(0));
    let ra = fs::read(a.join("report.json")).unwrap();
    assert_eq!(ra, fs::read(b.join("report.json")).unwrap());
    assert_eq!(
        fs::read(a.join("summary.csv")).unwrap(),
        fs::read(b.join("summary.csv")).unwrap()
    );

    let c = dir.path().join("c");
    let o = run(&a.join("config.resolved.toml"), &c, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(ra, fs::read(c.join("report.json")).unwrap());
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tower.toml", TOWER);
    let out = dir.path().join("out");
    assert_eq!(run(&cfg, &out, &["--seed", "99"]).status.code(), Some(0));
    let resolved = fs::read_to_string(out.join("config.resolved.toml")).unwrap();
    assert!(resolved.starts_with("seed = 99"), "{resolved}");
}

#[test]
fn failing_certificates_exit_one_with_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cone.toml",
        r#"
[base]
kind = "golden-rotation"
[operator]
kind = "constant"
matrix = [[2.0, 0.0], [0.0, 0.5]]
[task]
kind = "cone-check"
shape = "halfspace"
radius = 1.0
samples = 200
"#,
    );
    let out = dir.path().join("out");
    let o = run(&cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("FAIL ball_inclusion"), "{}", stderr(&o));
    let report =
        RunReport::from_json(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(!report.pass);

    let cfg = write_config(
        dir.path(),
        "dom.toml",
        r#"
[base]
kind = "golden-rotation"
[operator]
kind = "constant"
matrix = [[1.0, 0.0], [0.0, 1.0]]
[task]
kind = "dominated"
rank = 1
top = [[1.0, 0.0]]
"#,
    );
    let o = run(&cfg, &dir.path().join("dom"), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("FAIL"), "{}", stderr(&o));
}

#[test]
fn cone_check_at_analytic_radius_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cone.toml",
        r#"
[base]
kind = "golden-rotation"
[operator]
kind = "constant"
matrix = [[2.0, 0.0], [0.0, 0.5]]
[task]
kind = "cone-check"
shape = "graph"
slope = 0.6
horizon = 3
"#,
    );
    let out = dir.path().join("out");
    let o = run(&cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let resolved = fs::read_to_string(out.join("config.resolved.toml")).unwrap();
    let want = (1.0f64 - 0.36).sqrt() / 3.0;
    let cfg = ExperimentConfig::from_toml_str(&resolved).unwrap();
    match cfg.task {
        cocycle_lab::cli::config::TaskConfig::ConeCheck { radius, .. } => {
            assert!((radius.unwrap() - want).abs() < 1e-12)
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn list_tasks_and_schema() {
    let o = lab(&["list-tasks"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    for name in [
        "spectrum",
        "exterior-check",
        "cone-check",
        "boost",
        "tower",
        "millionshchikov",
        "a3",
        "finite-rank",
        "tail",
        "dominated",
        "intsep",
        "theorem-b",
    ] {
        assert!(text.lines().any(|l| l.starts_with(name)), "{name}");
    }

    let o = lab(&["schema"]);
    assert_eq!(o.status.code(), Some(0));
    let printed = String::from_utf8(o.stdout).unwrap();
    assert_eq!(printed, SCHEMA);
    let cfg = ExperimentConfig::from_toml_str(&printed).unwrap();
    assert_eq!(cfg.numeric, NumericConfig::default());
    assert_eq!(cfg.output, OutputConfig::default());
    assert_eq!(cfg.seed, 0);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(lab(&["run"]).status.code(), Some(2));
    assert_eq!(lab(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(lab(&["--help"]).status.code(), Some(0));
}
