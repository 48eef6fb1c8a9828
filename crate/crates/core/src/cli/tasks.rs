//! Task dispatch: each task turns a resolved configuration into a ledger of
//! checked inequalities, a JSON result and a table.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use serde_json::value::RawValue;

use crate::base::{rokhlin_tower, BaseError, BaseSystem, PartitionMap};
use crate::cones::{check_condition_c, invariance_certificate, ConeError, ConeFamily};
use crate::exterior::{spectrum_via_exterior, ExteriorError};
use crate::linalg::{self, Matrix, Vector};
use crate::opcore::{OpError, RandomOperator, RandomVector};
use crate::perturb::{
    boost_direction, finite_rank_with_direction, millionshchikov, theorem_a3_pipeline,
    tower_rotate, FiniteRankOptions, MillionshchikovOptions, PerturbError, PerturbationResult,
    PipelineOptions,
};
use crate::spectrum::{
    gap_tolerance, lyapunov_spectrum_qr, singular_value_spectrum, SpectrumError, SpectrumReport,
};
use crate::splitting::{
    dominated_check, infinite_tail_construction, integral_separation_check, theorem_b_pipeline,
    SplittingError, SplittingOptions, SplittingWitness,
};

use super::config::{
    Built, ConeShape, ConfigError, ExperimentConfig, SpectrumMethodName, TaskConfig,
};

/// Relative tolerance on each cubic fit of the probe curves.
pub const FIT_TOL: f64 = 1e-4;
/// Absolute fit tolerance used when a probe curve is flat.
const FLAT_FIT_TOL: f64 = 1e-12;

/// Task names in the order `list-tasks` prints them.
pub const TASKS: &[(&str, &str)] = &[
    (
        "spectrum",
        "Lyapunov spectrum by QR, exterior powers and singular values",
    ),
    (
        "exterior-check",
        "partial sums against top exponents of exterior powers",
    ),
    (
        "cone-check",
        "ball-inclusion condition and optional invariance of a cone family",
    ),
    ("boost", "scale an invariant direction by e^alpha"),
    (
        "tower",
        "rotate a direction into a prescribed one along a Rokhlin tower",
    ),
    (
        "millionshchikov",
        "block perturbation with a growing invariant direction",
    ),
    ("a3", "nowhere-density pipeline on a norm-decaying operator"),
    (
        "finite-rank",
        "invariant direction with a finite exponent for a low-rank operator",
    ),
    (
        "tail",
        "install a geometric exponent ladder on a weak block",
    ),
    ("dominated", "certify a dominated splitting"),
    ("intsep", "certify integral separation of a frame"),
    (
        "theorem-b",
        "robust simple top exponents with probes in the returned ball",
    ),
];

/// One checked inequality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerEntry {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    /// Signed slack, negative when the inequality fails.
    pub margin: f64,
    pub holds: bool,
}

fn finite(x: f64) -> f64 {
    if x.is_nan() {
        f64::MAX
    } else {
        x.clamp(f64::MIN, f64::MAX)
    }
}

impl LedgerEntry {
    pub fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        let margin = bound - value;
        LedgerEntry {
            name: name.into(),
            value: finite(value),
            bound: finite(bound),
            margin: finite(margin),
            holds: margin >= 0.0,
        }
    }

    pub fn at_least(name: impl Into<String>, value: f64, bound: f64) -> Self {
        let margin = value - bound;
        LedgerEntry {
            name: name.into(),
            value: finite(value),
            bound: finite(bound),
            margin: finite(margin),
            holds: margin >= 0.0,
        }
    }

    pub fn flag(name: impl Into<String>, holds: bool) -> Self {
        let v = if holds { 1.0 } else { 0.0 };
        LedgerEntry::at_least(name, v, 1.0)
    }
}

/// A header row and data rows, already formatted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

/// Shortest round-trip representation, with exponents for extreme magnitudes.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

pub struct TaskOutcome {
    pub ledger: Vec<LedgerEntry>,
    pub result: Json,
    pub table: Table,
}

#[derive(Debug)]
pub enum TaskError {
    /// Invalid input: exit code 2.
    Config(ConfigError),
    /// The computation ran and a guarantee or certificate failed: exit code 1.
    Failure {
        message: String,
        ledger: Vec<LedgerEntry>,
    },
}

impl From<ConfigError> for TaskError {
    fn from(e: ConfigError) -> Self {
        TaskError::Config(e)
    }
}

fn failure(message: impl Into<String>) -> TaskError {
    TaskError::Failure {
        message: message.into(),
        ledger: Vec::new(),
    }
}

fn config(field: &str, message: impl std::fmt::Display) -> TaskError {
    TaskError::Config(ConfigError::new(field, message.to_string()))
}

fn from_base(e: BaseError) -> TaskError {
    match e {
        BaseError::InvalidAngle { .. } | BaseError::InvalidWeights(_) => config("base", e),
        _ => failure(e.to_string()),
    }
}

fn from_op(e: OpError) -> TaskError {
    match e {
        OpError::Base(b) => from_base(b),
        OpError::Dimension { .. } | OpError::NonFinite { .. } | OpError::NotUnit { .. } => {
            config("operator", e)
        }
        OpError::InvalidEpsilon(_) => config("task.epsilon", e),
        _ => failure(e.to_string()),
    }
}

fn from_spectrum(e: SpectrumError) -> TaskError {
    match e {
        SpectrumError::TooFewSteps(_) => config("numeric.n_steps", e),
        SpectrumError::NoTrajectories => config("numeric.trajectories", e),
        SpectrumError::FrameSize { .. } => config("task", e),
        SpectrumError::EmptyHorizon => config("numeric.horizon", e),
        _ => failure(e.to_string()),
    }
}

fn from_exterior(e: ExteriorError) -> TaskError {
    match e {
        ExteriorError::Spectrum(s) => from_spectrum(s),
        _ => config("task", e),
    }
}

fn from_cone(e: ConeError) -> TaskError {
    match e {
        ConeError::Base(b) => from_base(b),
        ConeError::Op(o) => from_op(o),
        ConeError::InvalidEta(_) => config("task.slope", e),
        ConeError::AxisNotUnit | ConeError::Dimension(..) => config("task.axis", e),
        ConeError::ZeroHorizon => config("task.horizon", e),
        ConeError::NoSamples => config("task.samples", e),
        _ => failure(e.to_string()),
    }
}

fn from_perturb(e: PerturbError) -> TaskError {
    match e {
        PerturbError::InvalidParameter { name, .. } => config(&format!("task.{name}"), e),
        PerturbError::Dimension { .. } => config("task", e),
        PerturbError::GuaranteeFailed {
            name, value, bound, ..
        } => {
            let entry = if name == "distance" || name == "collinearity" {
                LedgerEntry::at_most(name, value, bound)
            } else {
                LedgerEntry::at_least(name, value, bound)
            };
            TaskError::Failure {
                message: e.to_string(),
                ledger: vec![entry],
            }
        }
        PerturbError::Op(o) => from_op(o),
        PerturbError::Base(b) => from_base(b),
        PerturbError::Cone(c) => from_cone(c),
        PerturbError::Spectrum(s) => from_spectrum(s),
        _ => failure(e.to_string()),
    }
}

fn from_splitting(e: SplittingError) -> TaskError {
    match e {
        SplittingError::InvalidParameter { name, .. } => config(&format!("task.{name}"), e),
        SplittingError::Rank { .. } => config("task.rank", e),
        SplittingError::FrameShape { .. }
        | SplittingError::FrameCount { .. }
        | SplittingError::DegenerateFrame(_) => config("task.frames", e),
        SplittingError::Base(b) => from_base(b),
        SplittingError::Op(o) => from_op(o),
        SplittingError::Cone(c) => from_cone(c),
        SplittingError::Spectrum(s) => from_spectrum(s),
        SplittingError::Exterior(x) => from_exterior(x),
        _ => failure(e.to_string()),
    }
}

/// Serialised JSON; goes through text because arc endpoints exceed `u64`.
pub type Json = Box<RawValue>;

pub fn raw<T: Serialize + ?Sized>(v: &T) -> Json {
    RawValue::from_string(serde_json::to_string(v).expect("reports serialise"))
        .expect("serde_json emits valid JSON")
}

/// A JSON object from already serialised fields.
fn object(fields: Vec<(&str, Json)>) -> Json {
    raw(&fields.into_iter().collect::<BTreeMap<&str, Json>>())
}

fn unit_vector(field: &str, v: &[f64]) -> Result<Vector, TaskError> {
    let v = Vector::from_column_slice(v);
    if v.iter().any(|x| !x.is_finite()) {
        return Err(config(field, "entries must be finite"));
    }
    linalg::normalized(&v).ok_or_else(|| config(field, "vector must be nonzero"))
}

fn constant_field(sys: &BaseSystem, field: &str, v: &[f64]) -> Result<RandomVector, TaskError> {
    Ok(RandomVector::constant(sys.clone(), unit_vector(field, v)?))
}

/// The cone family named by a `cone-check` task.
pub(crate) fn cone_family(
    sys: &BaseSystem,
    shape: ConeShape,
    axis: &[f64],
    slope: f64,
) -> Result<ConeFamily, TaskError> {
    let e = unit_vector("task.axis", axis)?;
    match shape {
        ConeShape::Halfspace => {
            if slope != 0.0 {
                return Err(config("task.slope", "applies to graph cones only"));
            }
            ConeFamily::halfspace(&RandomVector::constant(sys.clone(), e)).map_err(from_cone)
        }
        ConeShape::Graph => ConeFamily::graph_with_slope(sys, &e, slope).map_err(from_cone),
    }
}

fn splitting_options(cfg: &ExperimentConfig) -> SplittingOptions {
    let n = &cfg.numeric;
    SplittingOptions {
        horizon: n.horizon,
        samples: n.samples,
        frame_horizon: n.frame_horizon,
        cone_samples: n.cone_samples,
        attempts: n.attempts,
        spectrum: cfg.spectrum_options(),
        seed: cfg.seed,
    }
}

fn frame_fields(sys: &BaseSystem, frames: &[Vec<f64>]) -> Result<Vec<RandomVector>, TaskError> {
    frames
        .iter()
        .map(|v| constant_field(sys, "task.frames", v))
        .collect()
}

fn perturbation_ledger(r: &PerturbationResult) -> Vec<LedgerEntry> {
    r.guarantees
        .iter()
        .map(|g| LedgerEntry {
            name: g.check.name().to_string(),
            value: finite(g.value),
            bound: finite(g.check.bound()),
            margin: finite(g.margin),
            holds: g.holds,
        })
        .collect()
}

fn guarantee_table(r: &PerturbationResult) -> Table {
    let mut table = Table::new(&["guarantee", "value", "bound", "margin", "holds"]);
    for g in &r.guarantees {
        table.push(vec![
            g.check.name().to_string(),
            num(g.value),
            num(g.check.bound()),
            num(g.margin),
            g.holds.to_string(),
        ]);
    }
    table.push(vec![
        "measured_distance".into(),
        num(r.distance),
        String::new(),
        String::new(),
        String::new(),
    ]);
    table
}

fn perturbation_outcome(r: &PerturbationResult, mut extra: Vec<(&str, Json)>) -> TaskOutcome {
    extra.push(("document", raw(&r.to_document())));
    let result = object(extra);
    TaskOutcome {
        ledger: perturbation_ledger(r),
        result,
        table: guarantee_table(r),
    }
}

fn spectrum_task(
    cfg: &ExperimentConfig,
    t: &RandomOperator,
    count: usize,
    methods: &[SpectrumMethodName],
) -> Result<TaskOutcome, TaskError> {
    let opts = cfg.spectrum_options();
    let mut reports: Vec<(SpectrumMethodName, SpectrumReport)> = Vec::new();
    for &m in methods {
        let rep = match m {
            SpectrumMethodName::Qr => {
                lyapunov_spectrum_qr(t, count, &opts).map_err(from_spectrum)?
            }
            SpectrumMethodName::Exterior => {
                spectrum_via_exterior(t, count, &opts)
                    .map_err(from_exterior)?
                    .report
            }
            SpectrumMethodName::Singular => {
                singular_value_spectrum(t, &opts).map_err(from_spectrum)?
            }
        };
        reports.push((m, rep));
    }
    let name = |m: SpectrumMethodName| match m {
        SpectrumMethodName::Qr => "qr",
        SpectrumMethodName::Exterior => "exterior",
        SpectrumMethodName::Singular => "singular",
    };
    let clamp = |r: &SpectrumReport, i: usize| r.raw[i].max(r.floor);

    let mut header = vec!["index".to_string()];
    for (m, _) in &reports {
        header.push(name(*m).to_string());
        header.push(format!("{}_stderr", name(*m)));
    }
    let mut table = Table {
        header,
        rows: Vec::new(),
    };
    for i in 0..count {
        let mut row = vec![(i + 1).to_string()];
        for (_, r) in &reports {
            row.push(num(clamp(r, i)));
            row.push(num(r.raw_stderr[i]));
        }
        table.push(row);
    }

    let mut ledger = Vec::new();
    let (first, reference) = &reports[0];
    for (m, r) in &reports[1..] {
        for i in 0..count {
            ledger.push(LedgerEntry::at_most(
                format!("agree_{}_{}_{}", name(*first), name(*m), i + 1),
                (clamp(reference, i) - clamp(r, i)).abs(),
                gap_tolerance(reference.raw_stderr[i], r.raw_stderr[i]),
            ));
        }
    }
    let result = object(reports.iter().map(|(m, r)| (name(*m), raw(r))).collect());
    Ok(TaskOutcome {
        ledger,
        result,
        table,
    })
}

fn exterior_task(
    cfg: &ExperimentConfig,
    t: &RandomOperator,
    q_max: usize,
) -> Result<TaskOutcome, TaskError> {
    let opts = cfg.spectrum_options();
    let ext = spectrum_via_exterior(t, q_max, &opts).map_err(from_exterior)?;
    let qr = lyapunov_spectrum_qr(t, q_max, &opts).map_err(from_spectrum)?;
    let mut table = Table::new(&[
        "q",
        "exterior",
        "exterior_stderr",
        "qr_sum",
        "qr_stderr",
        "difference",
        "tolerance",
    ]);
    let mut ledger = Vec::new();
    for q in 1..=q_max {
        let floor = q as f64 * opts.floor;
        let ell = ext.partial_sums[q - 1].max(floor);
        let sum = qr.partial_sums[q - 1].max(floor);
        let sum_se = qr.raw_stderr[..q].iter().map(|s| s * s).sum::<f64>().sqrt();
        let tol = gap_tolerance(ext.partial_stderr[q - 1], sum_se);
        let diff = (ell - sum).abs();
        ledger.push(LedgerEntry::at_most(format!("partial_sum_{q}"), diff, tol));
        table.push(vec![
            q.to_string(),
            num(ell),
            num(ext.partial_stderr[q - 1]),
            num(sum),
            num(sum_se),
            num(diff),
            num(tol),
        ]);
    }
    Ok(TaskOutcome {
        ledger,
        result: object(vec![
            ("exterior", raw(&ext.report)),
            ("partial_sums", raw(&ext.partial_sums)),
            ("partial_stderr", raw(&ext.partial_stderr)),
            ("qr", raw(&qr)),
        ]),
        table,
    })
}

#[allow(clippy::too_many_arguments)]
fn cone_task(
    cfg: &ExperimentConfig,
    t: &RandomOperator,
    shape: ConeShape,
    axis: &[f64],
    slope: f64,
    radius: f64,
    samples: usize,
    horizon: usize,
) -> Result<TaskOutcome, TaskError> {
    let family = cone_family(t.base(), shape, axis, slope)?;
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(config("task.radius", "must be positive"));
    }
    let family = family.with_radius(radius);
    let condition = check_condition_c(&family, samples, cfg.seed).map_err(from_cone)?;
    let mut ledger = vec![
        LedgerEntry::at_least("ball_inclusion", condition.worst_margin, 0.0),
        LedgerEntry::at_least("dual_ball_inclusion", condition.worst_dual_margin, 0.0),
    ];
    // the checker's verdict also covers edge probes the margins summarise
    if !condition.pass && ledger.iter().all(|e| e.holds) {
        ledger.push(LedgerEntry::flag("condition", false));
    }
    let mut header = vec![
        "shape",
        "radius",
        "analytic_radius",
        "worst_margin",
        "worst_dual_margin",
        "condition_pass",
    ];
    let shape_name = match shape {
        ConeShape::Halfspace => "halfspace",
        ConeShape::Graph => "graph",
    };
    let mut row = vec![
        shape_name.to_string(),
        num(radius),
        num(condition.analytic_radius),
        num(condition.worst_margin),
        num(condition.worst_dual_margin),
        condition.pass.to_string(),
    ];
    let mut result = vec![("condition", raw(&condition))];
    if horizon > 0 {
        let inv =
            invariance_certificate(t, &family, horizon, samples, cfg.seed).map_err(from_cone)?;
        ledger.push(LedgerEntry::at_least("invariance", inv.margin, 0.0));
        if !inv.ok && ledger.last().is_some_and(|e| e.holds) {
            ledger.push(LedgerEntry::flag("invariance_certificate", false));
        }
        header.extend(["horizon", "invariance_pass", "log_beta_sup"]);
        row.extend([
            horizon.to_string(),
            inv.ok.to_string(),
            num(inv.log_beta_sup),
        ]);
        result.push(("invariance", raw(&inv)));
    }
    let mut table = Table::new(&header);
    table.push(row);
    Ok(TaskOutcome {
        ledger,
        result: object(result),
        table,
    })
}

fn constant_columns(
    sys: &BaseSystem,
    field: &str,
    cols: &[Vec<f64>],
) -> Result<PartitionMap<Matrix>, TaskError> {
    let d = cols[0].len();
    if cols.iter().flatten().any(|x| !x.is_finite()) {
        return Err(config(field, "entries must be finite"));
    }
    let m = Matrix::from_fn(d, cols.len(), |i, j| cols[j][i]);
    Ok(PartitionMap::constant(sys, m))
}

/// Runs the task of a resolved configuration.
pub fn execute(cfg: &ExperimentConfig, built: &Built) -> Result<TaskOutcome, TaskError> {
    let t = &built.operator;
    let sys = t.base();
    let n = &cfg.numeric;
    match &cfg.task {
        TaskConfig::Spectrum { count, methods } => {
            spectrum_task(cfg, t, count.unwrap_or(t.dim()), methods)
        }
        TaskConfig::ExteriorCheck { q_max } => exterior_task(cfg, t, q_max.unwrap_or(1)),
        TaskConfig::ConeCheck {
            shape,
            axis,
            slope,
            radius,
            samples,
            horizon,
        } => {
            let axis = axis.clone().unwrap_or_default();
            let radius = match radius {
                Some(r) => *r,
                None => cone_family(sys, *shape, &axis, *slope)?.analytic_radius(),
            };
            cone_task(cfg, t, *shape, &axis, *slope, radius, *samples, *horizon)
        }
        TaskConfig::Boost { direction, alpha } => {
            let e = constant_field(sys, "task.direction", direction.as_deref().unwrap_or(&[]))?;
            let r = boost_direction(t, &e, *alpha).map_err(from_perturb)?;
            Ok(perturbation_outcome(&r, vec![]))
        }
        TaskConfig::Tower {
            height,
            epsilon,
            boundary,
        } => {
            let e = constant_field(sys, "task.boundary", boundary.as_deref().unwrap_or(&[]))?;
            let v = rokhlin_tower(sys, &sys.whole(), *height).map_err(from_base)?;
            let r = tower_rotate(t, &v, *height, &e, *epsilon).map_err(from_perturb)?;
            Ok(perturbation_outcome(&r, vec![]))
        }
        TaskConfig::Millionshchikov {
            epsilon,
            block_length,
            repetitions,
        } => {
            let v = rokhlin_tower(sys, &sys.whole(), *block_length).map_err(from_base)?;
            let opts = MillionshchikovOptions {
                k_max: n.k_max,
                min_coverage: n.min_coverage,
            };
            let r = millionshchikov(t, &v, *block_length, *epsilon, *repetitions, &opts)
                .map_err(from_perturb)?;
            Ok(perturbation_outcome(&r, vec![]))
        }
        TaskConfig::A3 { eta } => {
            let opts = PipelineOptions {
                k_max: n.k_max,
                min_coverage: n.min_coverage,
                max_horizon: n.max_horizon,
                max_k_retries: n.max_k_retries,
                cone_samples: n.cone_samples,
                probes: n.probes,
                spectrum: cfg.spectrum_options(),
                seed: cfg.seed,
            };
            let out = theorem_a3_pipeline(t, *eta, &opts).map_err(from_perturb)?;
            let report = &out.report;
            let mut outcome = perturbation_outcome(&out.result, vec![("report", raw(report))]);
            let passing = report.probes.iter().filter(|p| p.passes).count();
            outcome.ledger.push(LedgerEntry::at_least(
                "probes_above_floor",
                passing as f64,
                report.probes.len() as f64,
            ));
            let mut table =
                Table::new(&["probe", "scale", "distance", "kappa", "stderr", "passes"]);
            for (i, p) in report.probes.iter().enumerate() {
                table.push(vec![
                    (i + 1).to_string(),
                    num(p.scale),
                    num(p.distance),
                    num(p.kappa),
                    num(p.stderr),
                    p.passes.to_string(),
                ]);
            }
            outcome.table = table;
            Ok(outcome)
        }
        TaskConfig::FiniteRank { epsilon } => {
            let opts = FiniteRankOptions {
                k_max: n.k_max,
                min_coverage: n.min_coverage,
                max_horizon: n.max_horizon,
                spectrum: cfg.spectrum_options(),
            };
            let out = finite_rank_with_direction(t, *epsilon, &opts).map_err(from_perturb)?;
            let mut outcome = perturbation_outcome(
                &out.result,
                vec![
                    ("horizon", raw(&out.horizon)),
                    ("rank", raw(&out.rank)),
                    ("kappa", raw(&out.kappa)),
                    ("kappa_bound", raw(&out.kappa_bound)),
                ],
            );
            outcome.ledger.push(LedgerEntry::at_least(
                "kappa_floor",
                out.kappa.kappa,
                out.kappa_bound,
            ));
            Ok(outcome)
        }
        TaskConfig::Tail { epsilon } => {
            let out = infinite_tail_construction(t, *epsilon, &splitting_options(cfg))
                .map_err(from_splitting)?;
            let r = &out.report;
            let mut ledger = vec![LedgerEntry::at_most("distance", r.distance, *epsilon)];
            let mut table =
                Table::new(&["index", "expected", "recovered", "exterior", "tolerance"]);
            for i in 0..r.resolvable {
                ledger.push(LedgerEntry::at_most(
                    format!("ladder_{}", i + 1),
                    (r.recovered[i] - r.expected[i]).abs(),
                    r.tolerances[i],
                ));
                table.push(vec![
                    (i + 1).to_string(),
                    num(r.expected[i]),
                    num(r.recovered[i]),
                    num(r.exterior[i]),
                    num(r.tolerances[i]),
                ]);
            }
            Ok(TaskOutcome {
                ledger,
                result: object(vec![
                    ("report", raw(r)),
                    ("operator", raw(&out.operator.to_document())),
                ]),
                table,
            })
        }
        TaskConfig::Dominated {
            rank,
            top,
            complement,
        } => {
            let witness = if top.is_empty() {
                SplittingWitness::estimated(*rank, n.frame_horizon)
            } else {
                let e = constant_columns(sys, "task.top", top)?;
                let f = if complement.is_empty() {
                    None
                } else {
                    Some(constant_columns(sys, "task.complement", complement)?)
                };
                SplittingWitness::explicit(e, f).map_err(from_splitting)?
            };
            let cert = dominated_check(t, &witness, n.horizon, n.samples, cfg.seed)
                .map_err(from_splitting)?;
            let ledger = vec![
                LedgerEntry::at_least("lower_bound", cert.delta, 0.0),
                LedgerEntry::at_least("rate", cert.fit.certified_alpha(), 0.0),
                LedgerEntry::flag("dominated", cert.pass),
            ];
            let mut table = Table::new(&["n", "worst_log_ratio", "mean_log_ratio"]);
            for (i, (w, m)) in cert
                .fit
                .worst_log_ratio
                .iter()
                .zip(&cert.fit.mean_log_ratio)
                .enumerate()
            {
                table.push(vec![(i + 1).to_string(), num(*w), num(*m)]);
            }
            Ok(TaskOutcome {
                ledger,
                result: raw(&cert),
                table,
            })
        }
        TaskConfig::Intsep { frames } => {
            let frames = frame_fields(sys, frames.as_deref().unwrap_or(&[]))?;
            let cert = integral_separation_check(t, &frames, n.horizon, n.samples, cfg.seed)
                .map_err(from_splitting)?;
            let mut ledger = Vec::new();
            let mut table = Table::new(&["route", "split", "slow", "alpha", "prefactor", "pass"]);
            for (route, fits) in [("direct", &cert.direct), ("inductive", &cert.inductive)] {
                for f in fits {
                    ledger.push(LedgerEntry {
                        holds: f.pass,
                        ..LedgerEntry::at_least(format!("{route}_{}", f.split), f.alpha, 0.0)
                    });
                    table.push(vec![
                        route.to_string(),
                        f.split.to_string(),
                        f.slow.to_string(),
                        num(f.alpha),
                        num(f.prefactor),
                        f.pass.to_string(),
                    ]);
                }
            }
            ledger.push(LedgerEntry::flag("routes_agree", cert.routes_agree));
            ledger.push(LedgerEntry::flag("separated", cert.pass));
            Ok(TaskOutcome {
                ledger,
                result: raw(&cert),
                table,
            })
        }
        TaskConfig::TheoremB { rank, frames } => {
            let frames = frame_fields(sys, frames.as_deref().unwrap_or(&[]))?;
            let report = theorem_b_pipeline(t, *rank, &frames, &splitting_options(cfg))
                .map_err(from_splitting)?;
            let mut ledger = vec![LedgerEntry::at_least(
                "epsilon",
                report.epsilon,
                f64::MIN_POSITIVE,
            )];
            let persistence = report
                .probes
                .iter()
                .flat_map(|p| p.gaps.iter().zip(&p.tolerances).map(|(g, t)| g - t))
                .fold(f64::INFINITY, f64::min);
            if persistence.is_finite() {
                ledger.push(LedgerEntry::at_least("gap_persistence", persistence, 0.0));
            }
            for (i, &res) in report.fit_residuals.iter().enumerate() {
                let values: Vec<f64> = report.probes.iter().map(|p| p.partial_sums[i]).collect();
                let range = values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    - values.iter().copied().fold(f64::INFINITY, f64::min);
                ledger.push(LedgerEntry::at_most(
                    format!("cubic_fit_{}", i + 1),
                    res,
                    (FIT_TOL * range).max(FLAT_FIT_TOL),
                ));
            }
            ledger.push(LedgerEntry::flag(
                "unperturbed_reproduced",
                report.unperturbed_reproduced,
            ));
            let mut table = Table::new(&[
                "instance",
                "k",
                "delta",
                "K",
                "alpha",
                "eta",
                "N",
                "log_R",
                "epsilon",
                "min_gap",
                "fit_residual",
            ]);
            for row in report.summary_rows() {
                table.push(vec![
                    cfg.output.instance.clone(),
                    row.degree.to_string(),
                    num(row.delta),
                    num(row.prefactor),
                    num(row.alpha),
                    num(row.eta),
                    row.period.to_string(),
                    num(row.log_beta_bound),
                    num(row.epsilon),
                    row.min_gap.map(num).unwrap_or_default(),
                    num(row.fit_residual),
                ]);
            }
            Ok(TaskOutcome {
                ledger,
                result: raw(&report),
                table,
            })
        }
    }
}
