//! Constructive perturbations of random operators.
//!
//! Each construction returns a [`PerturbationResult`]: the perturbed operator,
//! the invariant direction and collinearity scalars when one is built, and a
//! list of [`Guarantee`]s. Guarantees are always computed from the stored
//! `(T, S, e, beta)` by [`evaluate`], so re-running verification on a decoded
//! result reproduces them bit for bit.
//!
//! Tower constructions work column by column: a tower bottom is split into
//! pieces on which `T` is constant along every floor, so each column is a
//! finite list of matrices.

mod blocks;
mod boost;
mod pipeline;
mod tower;

pub use blocks::{millionshchikov, short_block_perturb, MillionshchikovOptions};
pub use boost::{boost_direction, choose_shear_epsilon, shear_conjugation, ShearConjugation};
pub use pipeline::{
    literal_constants, pipeline_epsilon_alpha, theorem_a3_pipeline, LiteralConstants,
    NowhereDenseOutcome, NowhereDenseReport, PipelineOptions, Probe,
};
pub use tower::{
    bijective_budget, finite_rank_with_direction, global_invariant_direction, lift_scalar,
    tower_rotate, FiniteRankOptions, FiniteRankResult,
};

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::base::{itinerary, BaseError, BaseSet, BaseSystem, PartitionMap, SetIndex};
use crate::cones::ConeError;
use crate::linalg::{self, Matrix, Vector};
use crate::opcore::{OpError, OperatorDocument, RandomOperator, RandomVector, VectorDocument};
use crate::spectrum::SpectrumError;

/// Slack allowed on every distance budget.
pub const DISTANCE_SLACK: f64 = 1e-10;
/// Largest collinearity residual accepted wherever a direction is claimed invariant.
pub const COLLINEARITY_TOL: f64 = 1e-9;
/// Collinearity accepted for a direction supplied by the caller.
pub const INPUT_COLLINEARITY_TOL: f64 = 1e-8;
/// Relative rounding slack on lower bounds.
const FLOOR_SLACK: f64 = 1e-12;
/// Relative measure slack when comparing covered mass.
const MEASURE_SLACK: f64 = 1e-12;
/// Cap on the number of pieces of an iterated operator.
const PIECE_CAP: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("invalid parameter {name} = {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("dimension mismatch: operator {operator}, vector {vector}")]
    Dimension { operator: usize, vector: usize },
    #[error("direction is not invariant: worst collinearity residual {residual:e}")]
    NotInvariant { residual: f64 },
    #[error("floors 0..={height} over the tower base are not pairwise disjoint")]
    TowerNotDisjoint { height: usize },
    #[error("column {piece}: floor {floor} is not invertible")]
    Singular { piece: usize, floor: usize },
    #[error("column {piece}: no floor maps the carried direction below {threshold:e}")]
    NoContractingStep { piece: usize, threshold: f64 },
    #[error("covered measure {covered:.6} below the required {required:.6}")]
    Coverage { covered: f64, required: f64 },
    #[error("|T e| drops to {rho:e}; a positive floor is required")]
    RhoFloor { rho: f64 },
    #[error("no shear parameter in (0,1) meets the {horizon}-step bound")]
    NoShear { horizon: usize },
    #[error("shear conjugation residual {residual:e} exceeds {tol:e}")]
    Conjugation { residual: f64, tol: f64 },
    #[error("guarantee {name} fails on piece {piece:?}: value {value:e} against bound {bound:e}")]
    GuaranteeFailed {
        name: &'static str,
        piece: Option<usize>,
        value: f64,
        bound: f64,
    },
    #[error("check {0} needs a direction or scalars that the result does not carry")]
    MissingField(&'static str),
    #[error("|T^n| does not fall below rate^n = {rate:e}^n for any n <= {max_horizon}")]
    NotDecaying { rate: f64, max_horizon: usize },
    #[error("iterating the operator produced more than {0} pieces")]
    TooManyPieces(usize),
    #[error("cone invariance could not be certified at horizon {horizon}")]
    NotCertified { horizon: usize },
    #[error("growth ratio {ratio:e} stays below the target {target:e} up to k = {k}")]
    Growth { ratio: f64, target: f64, k: usize },
    #[error(transparent)]
    Op(#[from] OpError),
    #[error(transparent)]
    Base(#[from] BaseError),
    #[error(transparent)]
    Cone(#[from] ConeError),
    #[error(transparent)]
    Spectrum(#[from] SpectrumError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// A verified inequality about a perturbation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Check {
    /// `ess sup |S - T| <= bound`.
    Distance { bound: f64 },
    /// `S e = beta (e o theta)` on the domain of `beta`, up to `tol`.
    Collinearity { tol: f64 },
    /// `|beta| >= bound`.
    ScalarFloor { bound: f64 },
    /// `|S e| >= bound` on the domain of `beta`.
    StepGrowth { bound: f64 },
    /// `|S^horizon e| >= ratio |S^horizon|` on the domain of `e`.
    BlockGrowth { horizon: usize, ratio: f64 },
    /// `|S^horizon| >= bound` on the domain of `e`.
    BlockNorm { horizon: usize, bound: f64 },
    /// The domain of `beta` has measure at least `min`.
    Coverage { min: f64 },
}

impl Check {
    pub fn name(&self) -> &'static str {
        match self {
            Check::Distance { .. } => "distance",
            Check::Collinearity { .. } => "collinearity",
            Check::ScalarFloor { .. } => "scalar_floor",
            Check::StepGrowth { .. } => "step_growth",
            Check::BlockGrowth { .. } => "block_growth",
            Check::BlockNorm { .. } => "block_norm",
            Check::Coverage { .. } => "coverage",
        }
    }

    pub fn bound(&self) -> f64 {
        match *self {
            Check::Distance { bound }
            | Check::ScalarFloor { bound }
            | Check::StepGrowth { bound }
            | Check::BlockNorm { bound, .. } => bound,
            Check::Collinearity { tol } => tol,
            Check::BlockGrowth { ratio, .. } => ratio,
            Check::Coverage { min } => min,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Guarantee {
    pub check: Check,
    /// Worst value of the checked quantity over all pieces.
    pub value: f64,
    /// Signed slack, negative when the inequality fails.
    pub margin: f64,
    pub holds: bool,
    /// Position, in evaluation order, of the piece attaining `value`.
    pub worst_piece: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct PerturbationResult {
    pub original: RandomOperator,
    pub operator: RandomOperator,
    pub direction: Option<RandomVector>,
    pub scalars: Option<PartitionMap<f64>>,
    pub distance: f64,
    pub guarantees: Vec<Guarantee>,
    pub diagnostics: BTreeMap<String, f64>,
}

/// Serialised [`PerturbationResult`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationDocument {
    pub original: OperatorDocument,
    pub operator: OperatorDocument,
    pub direction: Option<VectorDocument>,
    pub scalars: Option<PartitionMap<f64>>,
    pub distance: f64,
    pub guarantees: Vec<Guarantee>,
    #[serde(default)]
    pub diagnostics: BTreeMap<String, f64>,
}

/// Outcome of re-verifying a stored result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub distance: f64,
    pub guarantees: Vec<Guarantee>,
    /// Every recomputed guarantee and the distance equal the stored ones exactly.
    pub reproduced: bool,
    pub all_hold: bool,
}

impl PerturbationResult {
    /// Evaluates `checks` and fails on the first one that does not hold.
    pub(crate) fn certify(
        original: RandomOperator,
        operator: RandomOperator,
        direction: Option<RandomVector>,
        scalars: Option<PartitionMap<f64>>,
        checks: Vec<Check>,
        diagnostics: BTreeMap<String, f64>,
    ) -> Result<Self, PerturbError> {
        let mut result = PerturbationResult {
            distance: original.distance(&operator),
            original,
            operator,
            direction,
            scalars,
            guarantees: Vec::new(),
            diagnostics,
        };
        result.guarantees = checks
            .iter()
            .map(|c| evaluate(c, &result))
            .collect::<Result<_, _>>()?;
        if let Some(g) = result.guarantees.iter().find(|g| !g.holds) {
            return Err(PerturbError::GuaranteeFailed {
                name: g.check.name(),
                piece: g.worst_piece,
                value: g.value,
                bound: g.check.bound(),
            });
        }
        Ok(result)
    }

    pub fn all_hold(&self) -> bool {
        self.guarantees.iter().all(|g| g.holds)
    }

    pub fn guarantee(&self, name: &str) -> Option<&Guarantee> {
        self.guarantees.iter().find(|g| g.check.name() == name)
    }

    pub fn to_document(&self) -> PerturbationDocument {
        PerturbationDocument {
            original: self.original.to_document(),
            operator: self.operator.to_document(),
            direction: self.direction.as_ref().map(|d| d.to_document()),
            scalars: self.scalars.clone(),
            distance: self.distance,
            guarantees: self.guarantees.clone(),
            diagnostics: self.diagnostics.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("perturbation documents serialise")
    }

    pub fn from_document(doc: PerturbationDocument) -> Result<Self, PerturbError> {
        let original = RandomOperator::from_document(doc.original)?;
        let operator = RandomOperator::from_document(doc.operator)?;
        if original.base() != operator.base() || original.dim() != operator.dim() {
            return Err(PerturbError::Dimension {
                operator: original.dim(),
                vector: operator.dim(),
            });
        }
        let direction = doc.direction.map(RandomVector::from_document).transpose()?;
        if let Some(d) = &direction {
            if d.base() != operator.base() || d.dim() != operator.dim() {
                return Err(PerturbError::Dimension {
                    operator: operator.dim(),
                    vector: d.dim(),
                });
            }
        }
        if let Some(s) = &doc.scalars {
            s.validate_partial(operator.base())?;
            if s.pieces().iter().any(|(_, b)| !b.is_finite()) {
                return Err(PerturbError::InvalidParameter {
                    name: "scalar",
                    value: f64::NAN,
                });
            }
        }
        Ok(PerturbationResult {
            original,
            operator,
            direction,
            scalars: doc.scalars,
            distance: doc.distance,
            guarantees: doc.guarantees,
            diagnostics: doc.diagnostics,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, PerturbError> {
        PerturbationResult::from_document(serde_json::from_str(text)?)
    }

    /// Recomputes the distance and every listed guarantee from the stored data.
    pub fn reverify(&self) -> Result<Verification, PerturbError> {
        let distance = self.original.distance(&self.operator);
        let guarantees: Vec<Guarantee> = self
            .guarantees
            .iter()
            .map(|g| evaluate(&g.check, self))
            .collect::<Result<_, _>>()?;
        let reproduced =
            distance.to_bits() == self.distance.to_bits() && guarantees == self.guarantees;
        let all_hold = guarantees.iter().all(|g| g.holds);
        Ok(Verification {
            distance,
            guarantees,
            reproduced,
            all_hold,
        })
    }
}

/// Decodes a stored result and re-verifies it.
pub fn verify_document(doc: PerturbationDocument) -> Result<Verification, PerturbError> {
    PerturbationResult::from_document(doc)?.reverify()
}

/// Worst value over pieces: the first index attaining the extreme.
fn worst(values: &[f64], larger_is_worse: bool) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        let replace = match best {
            None => true,
            Some((_, b)) => {
                if larger_is_worse {
                    v > b
                } else {
                    v < b
                }
            }
        };
        if replace {
            best = Some((i, v));
        }
    }
    best
}

fn require_direction<'a>(
    r: &'a PerturbationResult,
    check: &Check,
) -> Result<&'a RandomVector, PerturbError> {
    r.direction
        .as_ref()
        .ok_or(PerturbError::MissingField(check.name()))
}

fn require_scalars<'a>(
    r: &'a PerturbationResult,
    check: &Check,
) -> Result<&'a PartitionMap<f64>, PerturbError> {
    r.scalars
        .as_ref()
        .ok_or(PerturbError::MissingField(check.name()))
}

/// Recomputes one guarantee from the data of `r`.
pub fn evaluate(check: &Check, r: &PerturbationResult) -> Result<Guarantee, PerturbError> {
    let sys = r.operator.base();
    let whole = sys.whole();
    let op_sets = sets_of(r.operator.pieces());
    let ops = r.operator.pieces();
    let (value, worst_piece) = match *check {
        Check::Distance { .. } => (r.original.distance(&r.operator), None),
        Check::Collinearity { .. } => {
            let beta = require_scalars(r, check)?;
            let e = require_direction(r, check)?;
            let (beta_sets, e_sets) = (sets_of(beta.pieces()), sets_of(e.pieces()));
            let layers: Vec<(&[BaseSet], i64)> =
                vec![(&beta_sets, 0), (&e_sets, 0), (&op_sets, 0), (&e_sets, 1)];
            let pieces = itinerary(sys, &whole, &layers);
            let checked: f64 = pieces.iter().map(|(s, _)| sys.measure(s)).sum();
            let claimed: f64 = beta_sets.iter().map(|s| sys.measure(s)).sum();
            let values: Vec<f64> = pieces
                .par_iter()
                .map(|(_, l)| {
                    let b = beta.pieces()[l[0]].1;
                    let w = &ops[l[2]].1 * &e.pieces()[l[1]].1;
                    let nw = w.norm();
                    if nw == 0.0 {
                        b.abs()
                    } else {
                        (&w - &e.pieces()[l[3]].1 * b).norm() / nw
                    }
                })
                .collect();
            match worst(&values, true) {
                // a claim whose image point has no direction counts as the worst possible residual
                _ if checked < claimed * (1.0 - MEASURE_SLACK) => (2.0, None),
                Some((i, v)) => (v, Some(i)),
                None => (0.0, None),
            }
        }
        Check::ScalarFloor { bound } => {
            let beta = require_scalars(r, check)?;
            let values: Vec<f64> = beta.pieces().iter().map(|(_, b)| b.abs()).collect();
            match worst(&values, false) {
                Some((i, v)) => (v, Some(i)),
                None => (bound, None),
            }
        }
        Check::StepGrowth { bound } => {
            let beta = require_scalars(r, check)?;
            let e = require_direction(r, check)?;
            let (beta_sets, e_sets) = (sets_of(beta.pieces()), sets_of(e.pieces()));
            let layers: Vec<(&[BaseSet], i64)> = vec![(&beta_sets, 0), (&e_sets, 0), (&op_sets, 0)];
            let values: Vec<f64> = itinerary(sys, &whole, &layers)
                .par_iter()
                .map(|(_, l)| (&ops[l[2]].1 * &e.pieces()[l[1]].1).norm())
                .collect();
            match worst(&values, false) {
                Some((i, v)) => (v, Some(i)),
                None => (bound, None),
            }
        }
        Check::BlockGrowth { horizon, ratio } => {
            let e = require_direction(r, check)?;
            let values: Vec<f64> = block_products(&r.operator, e, horizon)
                .par_iter()
                .map(|(prod, _, v)| {
                    let n = linalg::spectral_norm(prod);
                    if n == 0.0 {
                        1.0
                    } else {
                        (prod * v).norm() / n
                    }
                })
                .collect();
            match worst(&values, false) {
                Some((i, v)) => (v, Some(i)),
                None => (ratio, None),
            }
        }
        Check::BlockNorm { horizon, bound } => {
            let e = require_direction(r, check)?;
            let values: Vec<f64> = block_products(&r.operator, e, horizon)
                .par_iter()
                .map(|(prod, log_scale, _)| linalg::spectral_norm(prod) * log_scale.exp())
                .collect();
            match worst(&values, false) {
                Some((i, v)) => (v, Some(i)),
                None => (bound, None),
            }
        }
        Check::Coverage { .. } => {
            let beta = require_scalars(r, check)?;
            (
                beta.pieces().iter().map(|(s, _)| sys.measure(s)).sum(),
                None,
            )
        }
    };
    let (margin, holds) = match *check {
        Check::Distance { bound } => (bound - value, value <= bound + DISTANCE_SLACK),
        Check::Collinearity { tol } => (tol - value, value < tol),
        Check::ScalarFloor { bound }
        | Check::StepGrowth { bound }
        | Check::BlockGrowth { ratio: bound, .. }
        | Check::BlockNorm { bound, .. } => (value - bound, value >= bound * (1.0 - FLOOR_SLACK)),
        Check::Coverage { min } => (value - min, value >= min * (1.0 - MEASURE_SLACK)),
    };
    Ok(Guarantee {
        check: check.clone(),
        value,
        margin,
        holds,
        worst_piece,
    })
}

/// `(S^horizon / c, ln c, e)` on pieces of the domain of `e` where both are
/// constant; the running product is renormalised so long horizons do not underflow.
fn block_products(
    s: &RandomOperator,
    e: &RandomVector,
    horizon: usize,
) -> Vec<(Matrix, f64, Vector)> {
    let sys = s.base();
    let e_sets = sets_of(e.pieces());
    let op_sets = sets_of(s.pieces());
    let mut layers: Vec<(&[BaseSet], i64)> = vec![(&e_sets, 0)];
    for i in 0..horizon {
        layers.push((&op_sets, i as i64));
    }
    itinerary(sys, &sys.whole(), &layers)
        .into_iter()
        .map(|(_, l)| {
            let mut prod = Matrix::identity(s.dim(), s.dim());
            let mut log_scale = 0.0;
            for &j in &l[1..] {
                prod = &s.pieces()[j].1 * prod;
                let c = prod.amax();
                if c == 0.0 {
                    break;
                }
                prod /= c;
                log_scale += c.ln();
            }
            (prod, log_scale, e.pieces()[l[0]].1.clone())
        })
        .collect()
}

pub(crate) fn sets_of<V>(pieces: &[(BaseSet, V)]) -> Vec<BaseSet> {
    pieces.iter().map(|(s, _)| s.clone()).collect()
}

pub(crate) fn measure_of<V>(sys: &BaseSystem, pieces: &[(BaseSet, V)]) -> f64 {
    pieces.iter().map(|(s, _)| sys.measure(s)).sum()
}

/// `M_{n-1} ... M_0`.
pub(crate) fn product(mats: &[Matrix], dim: usize) -> Matrix {
    mats.iter()
        .fold(Matrix::identity(dim, dim), |acc, m| m * acc)
}

/// Top right singular vector of `m`, or `None` when `m` vanishes.
pub(crate) fn top_right_vector(m: &Matrix) -> Option<Vector> {
    crate::opcore::maximizing_vector_of(m)
        .ok()
        .map(|mv| mv.vector)
}

/// A piece of a tower bottom on which `T` is constant on each floor.
pub(crate) struct Column {
    pub bottom: BaseSet,
    pub floors: Vec<Matrix>,
    /// Labels of the extra layers, in order.
    pub labels: Vec<usize>,
}

/// Splits `bottom` into columns of the given height; `extra` layers are
/// matched first, so points outside them are dropped.
pub(crate) fn columns(
    t: &RandomOperator,
    bottom: &BaseSet,
    height: usize,
    extra: &[(&[BaseSet], i64)],
) -> Vec<Column> {
    let op_sets = sets_of(t.pieces());
    let mut layers: Vec<(&[BaseSet], i64)> = extra.to_vec();
    for i in 0..height {
        layers.push((&op_sets, i as i64));
    }
    itinerary(t.base(), bottom, &layers)
        .into_iter()
        .map(|(set, labels)| Column {
            bottom: set,
            floors: labels[extra.len()..]
                .iter()
                .map(|&j| t.pieces()[j].1.clone())
                .collect(),
            labels: labels[..extra.len()].to_vec(),
        })
        .collect()
}

/// `ess sup |T^k|` for `k = 1..=max_k`, from products on pieces where they are constant.
pub fn sup_power_norms(t: &RandomOperator, max_k: usize) -> Result<Vec<f64>, PerturbError> {
    let sys = t.base();
    let sets = sets_of(t.pieces());
    let index = SetIndex::new(&sets);
    let mut current = vec![(sys.whole(), Matrix::identity(t.dim(), t.dim()))];
    let mut norms = Vec::with_capacity(max_k);
    for k in 0..max_k {
        let mut next = Vec::new();
        for (a, prod) in &current {
            let moved = sys.image(a, k as i64);
            for j in index.candidates(&moved) {
                let c = moved.intersect(&sets[j]);
                if !c.is_empty() {
                    next.push((sys.preimage(&c, k as i64), &t.pieces()[j].1 * prod));
                }
            }
        }
        if next.len() > PIECE_CAP {
            return Err(PerturbError::TooManyPieces(PIECE_CAP));
        }
        norms.push(
            next.iter()
                .map(|(_, p)| linalg::spectral_norm(p))
                .fold(0.0, f64::max),
        );
        current = next;
    }
    Ok(norms)
}

/// Extra steps over which the decay `|T^k| < rate^k` must persist.
const DECAY_WINDOW: usize = 4;

/// Smallest `n` with `ess sup |T^k| < rate^k` for `k = n, ..., n + 4`.
pub fn decay_horizon(
    t: &RandomOperator,
    rate: f64,
    max_horizon: usize,
) -> Result<usize, PerturbError> {
    if !(rate > 0.0) {
        return Err(PerturbError::InvalidParameter {
            name: "rate",
            value: rate,
        });
    }
    let norms = sup_power_norms(t, max_horizon + DECAY_WINDOW)?;
    let below = |k: usize| norms[k - 1] < rate.powi(k as i32);
    (1..=max_horizon)
        .find(|&n| (n..=n + DECAY_WINDOW).all(below))
        .ok_or(PerturbError::NotDecaying { rate, max_horizon })
}

pub(crate) fn check_dims(t: &RandomOperator, v: &RandomVector) -> Result<(), PerturbError> {
    if t.dim() != v.dim() {
        return Err(PerturbError::Dimension {
            operator: t.dim(),
            vector: v.dim(),
        });
    }
    Ok(())
}

/// `(piece, T, e, e o theta)` on pieces of the domain of `e` where all three are constant.
pub(crate) fn step_pieces(
    t: &RandomOperator,
    e: &RandomVector,
) -> Vec<(BaseSet, Matrix, Vector, Vector)> {
    let sys = t.base();
    let e_sets = sets_of(e.pieces());
    let op_sets = sets_of(t.pieces());
    let layers: Vec<(&[BaseSet], i64)> = vec![(&e_sets, 0), (&op_sets, 0), (&e_sets, 1)];
    itinerary(sys, &sys.whole(), &layers)
        .into_iter()
        .map(|(set, l)| {
            (
                set,
                t.pieces()[l[1]].1.clone(),
                e.pieces()[l[0]].1.clone(),
                e.pieces()[l[2]].1.clone(),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests;
