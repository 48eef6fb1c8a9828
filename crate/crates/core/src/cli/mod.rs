//! Command-line driver: `run`, `verify`, `list-tasks` and `schema`.
//!
//! Exit codes: 0 when every ledger entry holds, 1 when a guarantee or
//! certificate fails (the ledger goes to stderr), 2 for configuration and
//! schema errors.

pub mod config;
pub mod tasks;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::perturb::{PerturbationDocument, PerturbationResult};

pub use config::{ConfigError, ExperimentConfig, SCHEMA};
pub use tasks::{Json, LedgerEntry, Table, TaskError, TaskOutcome, TASKS};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Largest disagreement tolerated between a stored and a recomputed margin.
pub const REPLAY_TOL: f64 = 1e-9;

pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const RESOLVED_FILE: &str = "config.resolved.toml";

/// The JSON report written by `run` and read by `verify`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub task: String,
    pub pass: bool,
    /// Set when the task stopped before producing a result.
    pub error: Option<String>,
    pub ledger: Vec<LedgerEntry>,
    /// The resolved configuration; enough to replay the run.
    pub config: ExperimentConfig,
    /// Task output; `null` when the task stopped early.
    pub result: Json,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialise");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// The perturbation document carried by perturbation tasks.
    pub fn document(&self) -> Option<Result<PerturbationDocument, serde_json::Error>> {
        #[derive(Deserialize)]
        struct Carrier<'a> {
            #[serde(borrow)]
            document: Option<&'a RawValue>,
        }
        let carrier: Carrier = serde_json::from_str(self.result.get()).ok()?;
        carrier.document.map(|d| serde_json::from_str(d.get()))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "cocycle-lab",
    version,
    about = "Lyapunov spectra of random operator cocycles"
)]
pub struct Cli {
    /// Worker threads for parallel sections; all cores when omitted.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the task named in a configuration file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the configuration seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recompute every guarantee of a stored report.
    Verify {
        /// Report to check.
        report: PathBuf,
    },
    /// List task kinds.
    ListTasks,
    /// Print the documented default configuration.
    Schema,
}

/// Parses arguments and runs the command, returning the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_CONFIG
            } else {
                EXIT_PASS
            };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return EXIT_CONFIG;
        }
        // fails only when a pool already exists, which keeps its size
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    match cli.command {
        Command::Run { config, out, seed } => run(&config, out.as_deref(), seed),
        Command::Verify { report } => verify(&report),
        Command::ListTasks => {
            for (name, about) in TASKS {
                println!("{name:<16} {about}");
            }
            EXIT_PASS
        }
        Command::Schema => {
            print!("{SCHEMA}");
            EXIT_PASS
        }
    }
}

fn config_error(path: &Path, e: &ConfigError) -> i32 {
    eprintln!("config error: {}: {e}", path.display());
    EXIT_CONFIG
}

fn task_name(cfg: &ExperimentConfig) -> String {
    #[derive(Deserialize)]
    struct Kind {
        kind: String,
    }
    serde_json::to_string(&cfg.task)
        .ok()
        .and_then(|s| serde_json::from_str::<Kind>(&s).ok())
        .map_or_else(|| "unknown".into(), |k| k.kind)
}

fn print_failures(ledger: &[LedgerEntry]) {
    for e in ledger.iter().filter(|e| !e.holds) {
        eprintln!(
            "FAIL {}: value {:e}, bound {:e}, margin {:e}",
            e.name, e.value, e.bound, e.margin
        );
    }
}

/// Writes a table as CSV with a header row and LF line endings.
pub fn write_csv(path: &Path, table: &Table) -> std::io::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    w.write_record(&table.header)?;
    for row in &table.rows {
        w.write_record(row)?;
    }
    w.flush()
}

fn ledger_table(ledger: &[LedgerEntry]) -> Table {
    Table {
        header: ["name", "value", "bound", "margin", "holds"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        rows: ledger
            .iter()
            .map(|e| {
                vec![
                    e.name.clone(),
                    tasks::num(e.value),
                    tasks::num(e.bound),
                    tasks::num(e.margin),
                    e.holds.to_string(),
                ]
            })
            .collect(),
    }
}

fn write_outputs(dir: &Path, report: &RunReport, table: &Table) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RESOLVED_FILE), report.config.to_toml_string())?;
    if report.config.output.json {
        fs::write(dir.join(REPORT_FILE), report.to_json())?;
    }
    if report.config.output.csv {
        write_csv(&dir.join(SUMMARY_FILE), table)?;
    }
    Ok(())
}

/// Resolves and runs a configuration, with an optional seed override.
/// The output directory is not part of the experiment, so `--out` is
/// applied by the caller and never recorded.
pub fn run_config(
    mut cfg: ExperimentConfig,
    seed: Option<u64>,
) -> Result<(RunReport, Table), ConfigError> {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (resolved, built) = cfg.resolve()?;
    let task = task_name(&resolved);
    match tasks::execute(&resolved, &built) {
        Ok(outcome) => Ok((
            RunReport {
                task,
                pass: outcome.ledger.iter().all(|e| e.holds),
                error: None,
                ledger: outcome.ledger,
                config: resolved,
                result: outcome.result,
            },
            outcome.table,
        )),
        Err(TaskError::Config(e)) => Err(e),
        Err(TaskError::Failure { message, ledger }) => {
            let table = ledger_table(&ledger);
            Ok((
                RunReport {
                    task,
                    pass: false,
                    error: Some(message),
                    ledger,
                    config: resolved,
                    result: tasks::raw(&()),
                },
                table,
            ))
        }
    }
}

pub fn run(path: &Path, out: Option<&Path>, seed: Option<u64>) -> i32 {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => return config_error(path, &ConfigError::new("", e.to_string())),
    };
    let cfg = match ExperimentConfig::from_toml_str(&text) {
        Ok(c) => c,
        Err(e) => return config_error(path, &e),
    };
    let (report, table) = match run_config(cfg, seed) {
        Ok(r) => r,
        Err(e) => return config_error(path, &e),
    };
    let dir = out.map_or_else(
        || PathBuf::from(&report.config.output.dir),
        Path::to_path_buf,
    );
    if let Err(e) = write_outputs(&dir, &report, &table) {
        eprintln!("error: writing {}: {e}", dir.display());
        return EXIT_FAIL;
    }
    if report.pass {
        println!(
            "{}: {} checks hold; report in {}",
            report.task,
            report.ledger.len(),
            dir.display()
        );
        EXIT_PASS
    } else {
        if let Some(m) = &report.error {
            eprintln!("{}: {m}", report.task);
        }
        print_failures(&report.ledger);
        EXIT_FAIL
    }
}

/// Why a stored report did not verify.
#[derive(Clone, Debug, PartialEq)]
pub enum VerifyError {
    /// The report does not decode or its configuration is invalid.
    Schema(String),
    /// The named guarantees fail or do not reproduce.
    Failed(Vec<String>),
}

/// Compares a stored ledger with a recomputed one, naming mismatches in stored order.
fn compare_ledgers(stored: &[LedgerEntry], fresh: &[LedgerEntry]) -> Vec<String> {
    let mut failed = Vec::new();
    for s in stored {
        match fresh.iter().find(|f| f.name == s.name) {
            None => failed.push(format!("{} (not recomputed)", s.name)),
            Some(f) if !f.holds => {
                failed.push(format!("{} (fails: margin {:e})", s.name, f.margin))
            }
            Some(f) if !(f.margin - s.margin).abs().le(&REPLAY_TOL) || f.holds != s.holds => failed
                .push(format!(
                    "{} (stored margin {:e}, recomputed {:e})",
                    s.name, s.margin, f.margin
                )),
            Some(_) => {}
        }
    }
    for f in fresh
        .iter()
        .filter(|f| !stored.iter().any(|s| s.name == f.name))
    {
        failed.push(format!("{} (missing from the report)", f.name));
    }
    failed
}

/// Re-checks a decoded report.
pub fn verify_report(report: &RunReport) -> Result<usize, VerifyError> {
    let fresh: Vec<LedgerEntry> = match report.document() {
        Some(doc) => {
            let doc = doc.map_err(|e| VerifyError::Schema(format!("result.document: {e}")))?;
            let result = PerturbationResult::from_document(doc)
                .map_err(|e| VerifyError::Failed(vec![format!("document ({e})")]))?;
            let v = result
                .reverify()
                .map_err(|e| VerifyError::Failed(vec![format!("document ({e})")]))?;
            let mut failed: Vec<String> = v
                .guarantees
                .iter()
                .zip(&result.guarantees)
                .filter(|(g, s)| !g.holds || !(g.margin - s.margin).abs().le(&REPLAY_TOL))
                .map(|(g, s)| {
                    format!(
                        "{} (recomputed margin {:e}, stored {:e})",
                        g.check.name(),
                        g.margin,
                        s.margin
                    )
                })
                .collect();
            if !(v.distance - result.distance).abs().le(&REPLAY_TOL) {
                failed.push(format!(
                    "stored distance {:e} differs from recomputed {:e}",
                    result.distance, v.distance
                ));
            }
            if !failed.is_empty() {
                return Err(VerifyError::Failed(failed));
            }
            // guarantees reproduce; the ledger must agree with them
            let mut fresh: Vec<LedgerEntry> = report
                .ledger
                .iter()
                .filter(|e| v.guarantees.iter().all(|g| g.check.name() != e.name))
                .cloned()
                .collect();
            fresh.extend(v.guarantees.iter().map(|g| LedgerEntry {
                name: g.check.name().to_string(),
                value: g.value,
                bound: g.check.bound(),
                margin: g.margin,
                holds: g.holds,
            }));
            fresh
        }
        None => {
            let (replayed, _) = run_config(report.config.clone(), None)
                .map_err(|e| VerifyError::Schema(format!("config: {e}")))?;
            if replayed.result.get() != report.result.get() {
                let mut failed = compare_ledgers(&report.ledger, &replayed.ledger);
                failed.push("result (replay differs from the stored result)".into());
                return Err(VerifyError::Failed(failed));
            }
            replayed.ledger
        }
    };
    let mut failed = compare_ledgers(&report.ledger, &fresh);
    let pass = fresh.iter().all(|e| e.holds);
    if failed.is_empty() && report.pass != pass {
        failed.push(format!(
            "pass flag (stored {}, recomputed {pass})",
            report.pass
        ));
    }
    if failed.is_empty() && !report.pass {
        failed.extend(
            report
                .ledger
                .iter()
                .filter(|e| !e.holds)
                .map(|e| e.name.clone()),
        );
        if failed.is_empty() {
            failed.push(report.error.clone().unwrap_or_else(|| "report".into()));
        }
    }
    if failed.is_empty() {
        Ok(report.ledger.len())
    } else {
        Err(VerifyError::Failed(failed))
    }
}

pub fn verify(path: &Path) -> i32 {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("schema error: {}: {e}", path.display());
            return EXIT_CONFIG;
        }
    };
    let report = match RunReport::from_json(&text) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("schema error: {}: {e}", path.display());
            return EXIT_CONFIG;
        }
    };
    match verify_report(&report) {
        Ok(n) => {
            println!("{}: {n} checks reproduced", report.task);
            EXIT_PASS
        }
        Err(VerifyError::Schema(m)) => {
            eprintln!("schema error: {}: {m}", path.display());
            EXIT_CONFIG
        }
        Err(VerifyError::Failed(names)) => {
            eprintln!("verification failed: first failing guarantee {}", names[0]);
            for n in &names[1..] {
                eprintln!("  also: {n}");
            }
            EXIT_FAIL
        }
    }
}
