//! Experiment configuration: a TOML tree with one block per concern.
//!
//! Every key has a default, and [`ExperimentConfig::resolve`] fills the few
//! keys whose defaults depend on the operator (dimension-sized axes and
//! frames), so the echoed configuration replays the run on its own.

use serde::{Deserialize, Serialize};

use crate::base::BaseSystem;
use crate::linalg::{self, Matrix, Vector};
use crate::opcore::{gaussian_matrix, RandomOperator};
use crate::rng;
use crate::spectrum::{SpectrumOptions, DEFAULT_FLOOR};

/// The documented default configuration, printed by `schema`.
pub const SCHEMA: &str = include_str!("schema.toml");

/// Largest `dim` and `pieces` an `iid-family` operator may ask for.
pub const MAX_DIM: usize = 64;
pub const MAX_PIECES: usize = 4096;

/// A configuration problem, reported with the offending key.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.field.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.field, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub base: BaseConfig,
    pub operator: OperatorConfig,
    pub task: TaskConfig,
    #[serde(default)]
    pub numeric: NumericConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BaseConfig {
    GoldenRotation,
    Rotation { numerator: u64, denominator: u64 },
    Bernoulli { weights: Vec<f64> },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Law {
    /// Independent standard normal entries times `scale`.
    #[default]
    Gaussian,
    /// Normal entries strictly above the diagonal; every product of `dim` steps vanishes.
    StrictlyUpper,
    /// Normal entries on and above the diagonal, so `e_1` is invariant.
    UpperTriangular,
    /// `P D P^-1` with a fixed `P = I + scale G` and diagonal `D` whose
    /// `i`-th entry is `exp(-i spacing)` times a per-piece factor in `[0.8, 1.25]`.
    ConjugatedDiagonal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OperatorConfig {
    /// One matrix, given as rows.
    Constant { matrix: Vec<Vec<f64>> },
    /// One matrix per piece: equal arcs on a rotation, symbols on a shift.
    Piecewise { matrices: Vec<Vec<Vec<f64>>> },
    /// Matrices drawn from `law`, one per piece.
    IidFamily {
        dim: usize,
        pieces: usize,
        #[serde(default)]
        law: Law,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default = "one")]
        spacing: f64,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectrumMethodName {
    Qr,
    Exterior,
    Singular,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConeShape {
    Halfspace,
    Graph,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskConfig {
    Spectrum {
        /// Number of exponents; the dimension when omitted.
        count: Option<usize>,
        #[serde(default = "all_methods")]
        methods: Vec<SpectrumMethodName>,
    },
    ExteriorCheck {
        /// Largest exterior degree; `min(dim, 3)` when omitted.
        q_max: Option<usize>,
    },
    ConeCheck {
        #[serde(default = "halfspace")]
        shape: ConeShape,
        /// Constant cone axis; `e_1` when omitted.
        axis: Option<Vec<f64>>,
        /// Graph slope bound in `[0, 1)`.
        #[serde(default)]
        slope: f64,
        /// Ball radius to test; the analytic radius when omitted.
        radius: Option<f64>,
        #[serde(default = "thousand")]
        samples: usize,
        /// Steps for the invariance certificate; `0` skips it.
        #[serde(default)]
        horizon: usize,
    },
    Boost {
        /// Constant invariant direction; `e_1` when omitted.
        direction: Option<Vec<f64>>,
        #[serde(default = "tenth")]
        alpha: f64,
    },
    Tower {
        #[serde(default = "three")]
        height: usize,
        #[serde(default = "tenth")]
        epsilon: f64,
        /// Constant target direction on the tower top; `e_1` when omitted.
        boundary: Option<Vec<f64>>,
    },
    Millionshchikov {
        #[serde(default = "tenth")]
        epsilon: f64,
        #[serde(default = "three")]
        block_length: usize,
        #[serde(default = "two")]
        repetitions: usize,
    },
    A3 {
        #[serde(default = "half")]
        eta: f64,
    },
    FiniteRank {
        #[serde(default = "half")]
        epsilon: f64,
    },
    Tail {
        #[serde(default = "half")]
        epsilon: f64,
    },
    Dominated {
        #[serde(default = "one_usize")]
        rank: usize,
        /// Constant columns spanning the top block; estimated from the cocycle when empty.
        #[serde(default)]
        top: Vec<Vec<f64>>,
        /// Constant columns spanning the complement; the orthogonal complement when empty.
        #[serde(default)]
        complement: Vec<Vec<f64>>,
    },
    Intsep {
        /// Constant frame directions; the operator's natural frame when omitted.
        frames: Option<Vec<Vec<f64>>>,
    },
    TheoremB {
        #[serde(default = "one_usize")]
        rank: usize,
        frames: Option<Vec<Vec<f64>>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericConfig {
    pub n_steps: usize,
    pub trajectories: usize,
    pub floor: f64,
    /// Steps over which growth ratios are fitted.
    pub horizon: usize,
    /// Base points sampled by the splitting checks.
    pub samples: usize,
    /// Steps used to estimate Oseledets frames.
    pub frame_horizon: usize,
    pub cone_samples: usize,
    pub attempts: usize,
    pub k_max: usize,
    pub min_coverage: f64,
    pub max_horizon: usize,
    pub max_k_retries: usize,
    pub probes: usize,
}

impl Default for NumericConfig {
    fn default() -> Self {
        NumericConfig {
            n_steps: 4000,
            trajectories: 4,
            floor: DEFAULT_FLOOR,
            horizon: 24,
            samples: 32,
            frame_horizon: 300,
            cone_samples: 200,
            attempts: 8,
            k_max: 1000,
            min_coverage: 0.99,
            max_horizon: 64,
            max_k_retries: 8,
            probes: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
    /// Label written in the `instance` column of tabular summaries.
    pub instance: String,
    pub json: bool,
    pub csv: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: "out".into(),
            instance: "run".into(),
            json: true,
            csv: true,
        }
    }
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn tenth() -> f64 {
    0.1
}
fn one_usize() -> usize {
    1
}
fn two() -> usize {
    2
}
fn three() -> usize {
    3
}
fn thousand() -> usize {
    1000
}
fn halfspace() -> ConeShape {
    ConeShape::Halfspace
}
fn all_methods() -> Vec<SpectrumMethodName> {
    vec![
        SpectrumMethodName::Qr,
        SpectrumMethodName::Exterior,
        SpectrumMethodName::Singular,
    ]
}

/// The built objects a task runs on.
#[derive(Clone, Debug)]
pub struct Built {
    pub operator: RandomOperator,
    /// Directions the operator is diagonal in, when the law provides them.
    pub natural_frame: Option<Vec<Vector>>,
}

/// Line of a TOML parse error, when the parser reports a span.
fn locate(text: &str, err: &toml::de::Error) -> String {
    match err.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            format!("line {line}")
        }
        None => String::new(),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::new(locate(text, &e), e.message()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configurations serialise")
    }

    pub fn spectrum_options(&self) -> SpectrumOptions {
        SpectrumOptions {
            n_steps: self.numeric.n_steps,
            trajectories: self.numeric.trajectories,
            seed: self.seed,
            floor: self.numeric.floor,
        }
    }

    pub fn base_system(&self) -> Result<BaseSystem, ConfigError> {
        let sys = match &self.base {
            BaseConfig::GoldenRotation => Ok(BaseSystem::golden_rotation(self.seed)),
            BaseConfig::Rotation {
                numerator,
                denominator,
            } => BaseSystem::rotation(*numerator, *denominator, self.seed),
            BaseConfig::Bernoulli { weights } => BaseSystem::bernoulli(weights.clone(), self.seed),
        };
        sys.map_err(|e| ConfigError::new("base", e.to_string()))
    }

    fn check_numeric(&self) -> Result<(), ConfigError> {
        let n = &self.numeric;
        let positive = [
            ("trajectories", n.trajectories),
            ("horizon", n.horizon),
            ("samples", n.samples),
            ("frame_horizon", n.frame_horizon),
            ("cone_samples", n.cone_samples),
            ("attempts", n.attempts),
            ("k_max", n.k_max),
            ("max_horizon", n.max_horizon),
            ("probes", n.probes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError::new(
                format!("numeric.{name}"),
                "must be at least 1",
            ));
        }
        if n.n_steps < 100 {
            return Err(ConfigError::new("numeric.n_steps", "must be at least 100"));
        }
        if n.horizon < 2 {
            return Err(ConfigError::new("numeric.horizon", "must be at least 2"));
        }
        if !(n.floor.is_finite() && n.floor < 0.0) {
            return Err(ConfigError::new(
                "numeric.floor",
                "must be finite and negative",
            ));
        }
        if !(n.min_coverage > 0.0 && n.min_coverage <= 1.0) {
            return Err(ConfigError::new(
                "numeric.min_coverage",
                "must lie in (0, 1]",
            ));
        }
        Ok(())
    }

    /// Builds the operator and fills every omitted key, returning a config
    /// that replays the same run with no defaults left implicit.
    pub fn resolve(&self) -> Result<(ExperimentConfig, Built), ConfigError> {
        self.check_numeric()?;
        let sys = self.base_system()?;
        let built = build_operator(&sys, &self.operator)?;
        let d = built.operator.dim();
        let e1 = {
            let mut v = vec![0.0; d];
            v[0] = 1.0;
            v
        };
        let natural: Vec<Vec<f64>> = match &built.natural_frame {
            Some(f) => f.iter().map(|v| v.iter().copied().collect()).collect(),
            None => (0..d)
                .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
        };
        let check_len = |field: &str, v: &[f64]| {
            if v.len() != d {
                Err(ConfigError::new(
                    field,
                    format!("expected {d} entries, found {}", v.len()),
                ))
            } else {
                Ok(())
            }
        };
        let mut out = self.clone();
        match &mut out.task {
            TaskConfig::Spectrum { count, methods } => {
                let c = *count.get_or_insert(d);
                if c == 0 || c > d {
                    return Err(ConfigError::new(
                        "task.count",
                        format!("must lie in 1..={d}"),
                    ));
                }
                if methods.is_empty() {
                    return Err(ConfigError::new(
                        "task.methods",
                        "must name at least one method",
                    ));
                }
            }
            TaskConfig::ExteriorCheck { q_max } => {
                let q = *q_max.get_or_insert(d.min(3));
                if q == 0 || q > d {
                    return Err(ConfigError::new(
                        "task.q_max",
                        format!("must lie in 1..={d}"),
                    ));
                }
            }
            TaskConfig::ConeCheck {
                shape,
                axis,
                slope,
                radius,
                samples,
                ..
            } => {
                let axis = axis.get_or_insert_with(|| e1.clone());
                check_len("task.axis", axis)?;
                if radius.is_none() {
                    let family = super::tasks::cone_family(&sys, *shape, axis, *slope).map_err(
                        |e| match e {
                            super::tasks::TaskError::Config(c) => c,
                            super::tasks::TaskError::Failure { message, .. } => {
                                ConfigError::new("task", message)
                            }
                        },
                    )?;
                    *radius = Some(family.analytic_radius());
                }
                if *samples == 0 {
                    return Err(ConfigError::new("task.samples", "must be at least 1"));
                }
            }
            TaskConfig::Boost { direction, .. } => {
                check_len(
                    "task.direction",
                    direction.get_or_insert_with(|| e1.clone()),
                )?;
            }
            TaskConfig::Tower {
                boundary, height, ..
            } => {
                check_len("task.boundary", boundary.get_or_insert_with(|| e1.clone()))?;
                if *height == 0 {
                    return Err(ConfigError::new("task.height", "must be at least 1"));
                }
            }
            TaskConfig::Millionshchikov {
                block_length,
                repetitions,
                ..
            } => {
                if *block_length == 0 {
                    return Err(ConfigError::new("task.block_length", "must be at least 1"));
                }
                if *repetitions == 0 {
                    return Err(ConfigError::new("task.repetitions", "must be at least 1"));
                }
            }
            TaskConfig::A3 { .. } | TaskConfig::FiniteRank { .. } | TaskConfig::Tail { .. } => {}
            TaskConfig::Dominated {
                rank,
                top,
                complement,
            } => {
                if *rank == 0 || *rank > d {
                    return Err(ConfigError::new(
                        "task.rank",
                        format!("must lie in 1..={d}"),
                    ));
                }
                if !top.is_empty() && top.len() != *rank {
                    return Err(ConfigError::new(
                        "task.top",
                        format!("expected {rank} columns, found {}", top.len()),
                    ));
                }
                if top.is_empty() && !complement.is_empty() {
                    return Err(ConfigError::new(
                        "task.complement",
                        "needs explicit top columns",
                    ));
                }
                for v in top.iter().chain(complement.iter()) {
                    check_len("task.top", v)?;
                }
            }
            TaskConfig::Intsep { frames } => {
                let f = frames.get_or_insert_with(|| natural.clone());
                check_frames(f, d)?;
            }
            TaskConfig::TheoremB { rank, frames } => {
                if *rank == 0 || *rank > d {
                    return Err(ConfigError::new(
                        "task.rank",
                        format!("must lie in 1..={d}"),
                    ));
                }
                let f = frames.get_or_insert_with(|| natural.clone());
                check_frames(f, d)?;
            }
        }
        Ok((out, built))
    }
}

fn check_frames(frames: &[Vec<f64>], d: usize) -> Result<(), ConfigError> {
    if frames.len() != d {
        return Err(ConfigError::new(
            "task.frames",
            format!("expected {d} directions, found {}", frames.len()),
        ));
    }
    if let Some(v) = frames.iter().find(|v| v.len() != d) {
        return Err(ConfigError::new(
            "task.frames",
            format!("expected {d} entries per direction, found {}", v.len()),
        ));
    }
    Ok(())
}

fn rows_to_matrix(field: &str, rows: &[Vec<f64>]) -> Result<Matrix, ConfigError> {
    let d = rows.len();
    if d == 0 {
        return Err(ConfigError::new(field, "matrix has no rows"));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != d) {
        return Err(ConfigError::new(
            field,
            format!(
                "matrix must be square: {d} rows, a row of length {}",
                r.len()
            ),
        ));
    }
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err(ConfigError::new(field, "entries must be finite"));
    }
    Ok(Matrix::from_fn(d, d, |i, j| rows[i][j]))
}

fn draw(
    law: Law,
    d: usize,
    scale: f64,
    spacing: f64,
    frame: &Matrix,
    frame_inv: &Matrix,
    r: &mut rand_chacha::ChaCha8Rng,
) -> Matrix {
    use rand::Rng;
    match law {
        Law::Gaussian => gaussian_matrix(d, scale, r),
        Law::StrictlyUpper | Law::UpperTriangular => {
            let g = gaussian_matrix(d, scale, r);
            let strict = law == Law::StrictlyUpper;
            Matrix::from_fn(d, d, |i, j| {
                if j > i || (!strict && i == j) {
                    g[(i, j)]
                } else {
                    0.0
                }
            })
        }
        Law::ConjugatedDiagonal => {
            let diag = Vector::from_fn(d, |i, _| {
                (-(i as f64) * spacing).exp() * 1.25f64.powf(r.random_range(-1.0..=1.0))
            });
            frame * Matrix::from_diagonal(&diag) * frame_inv
        }
    }
}

fn build_operator(sys: &BaseSystem, op: &OperatorConfig) -> Result<Built, ConfigError> {
    let wrap = |e: crate::opcore::OpError| ConfigError::new("operator", e.to_string());
    match op {
        OperatorConfig::Constant { matrix } => {
            let m = rows_to_matrix("operator.matrix", matrix)?;
            Ok(Built {
                operator: RandomOperator::constant(sys.clone(), m),
                natural_frame: None,
            })
        }
        OperatorConfig::Piecewise { matrices } => {
            if matrices.is_empty() {
                return Err(ConfigError::new(
                    "operator.matrices",
                    "needs at least one matrix",
                ));
            }
            let mats = matrices
                .iter()
                .map(|m| rows_to_matrix("operator.matrices", m))
                .collect::<Result<Vec<_>, _>>()?;
            if mats.iter().any(|m| m.nrows() != mats[0].nrows()) {
                return Err(ConfigError::new(
                    "operator.matrices",
                    "matrices must share one dimension",
                ));
            }
            Ok(Built {
                operator: RandomOperator::piecewise(sys.clone(), mats).map_err(wrap)?,
                natural_frame: None,
            })
        }
        &OperatorConfig::IidFamily {
            dim,
            pieces,
            law,
            scale,
            spacing,
            seed,
        } => {
            if dim == 0 || dim > MAX_DIM {
                return Err(ConfigError::new(
                    "operator.dim",
                    format!("must lie in 1..={MAX_DIM}"),
                ));
            }
            if pieces == 0 || pieces > MAX_PIECES {
                return Err(ConfigError::new(
                    "operator.pieces",
                    format!("must lie in 1..={MAX_PIECES}"),
                ));
            }
            if !(scale.is_finite() && scale >= 0.0) {
                return Err(ConfigError::new(
                    "operator.scale",
                    "must be finite and nonnegative",
                ));
            }
            if !(spacing.is_finite() && spacing >= 0.0) {
                return Err(ConfigError::new(
                    "operator.spacing",
                    "must be finite and nonnegative",
                ));
            }
            let (frame, frame_inv) = if law == Law::ConjugatedDiagonal {
                let mut r = rng::stream(seed, u64::MAX);
                let p = Matrix::identity(dim, dim) + gaussian_matrix(dim, scale, &mut r);
                let cols = Matrix::from_columns(
                    &(0..dim)
                        .map(|j| p.column(j).normalize())
                        .collect::<Vec<_>>(),
                );
                let inv = cols.clone().try_inverse().ok_or_else(|| {
                    ConfigError::new("operator.scale", "conjugating frame is singular")
                })?;
                if linalg::spectral_norm(&inv) > 1e8 {
                    return Err(ConfigError::new(
                        "operator.scale",
                        "conjugating frame is nearly singular",
                    ));
                }
                (cols, inv)
            } else {
                (Matrix::identity(dim, dim), Matrix::identity(dim, dim))
            };
            let mats: Vec<Matrix> = (0..pieces)
                .map(|j| {
                    let mut r = rng::stream(seed, j as u64);
                    draw(law, dim, scale, spacing, &frame, &frame_inv, &mut r)
                })
                .collect();
            let natural_frame = (law == Law::ConjugatedDiagonal)
                .then(|| (0..dim).map(|j| frame.column(j).into_owned()).collect());
            Ok(Built {
                operator: RandomOperator::piecewise(sys.clone(), mats).map_err(wrap)?,
                natural_frame,
            })
        }
    }
}
