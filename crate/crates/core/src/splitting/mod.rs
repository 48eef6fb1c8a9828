//! Dominated splittings and integral separation.
//!
//! A splitting `R^d = E(omega) + F(omega)` is described by a [`SplittingWitness`]:
//! either explicit per-piece frames, or frames re-estimated at every sampled
//! point from long products. Checkers sample base points, push both blocks
//! forward and compare `min |T^n v| / |v|` on `E` with `max |T^n u| / |u|` on
//! `F`, which at each point is a ratio of extreme singular values.

mod construct;
mod pipeline;
mod separation;

pub use construct::{
    infinite_tail_construction, perturb_to_simple_block, SimpleBlock, SimpleBlockReport,
    TailConstruction, TailReport,
};
pub use pipeline::{
    cone_from_splitting, eta_constant, theorem_b_pipeline, ConeFromSplitting, ConeSplittingReport,
    LevelReport, ProbePoint, SummaryRow, TheoremBReport,
};
pub use separation::{
    exterior_domination_transfer, integral_separation_check, top_block_separation, wedge_witness,
    ExteriorTransferCertificate, IntegralSeparationCertificate, SeparationCounterexample, SplitFit,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::base::{itinerary, BaseError, BasePoint, BaseSet, PartitionMap};
use crate::cones::{ConeError, Counterexample};
use crate::exterior::ExteriorError;
use crate::linalg::{self, GradedRows, Matrix, Vector};
use crate::opcore::{gaussian_matrix, gaussian_vector, OpError, RandomOperator};
use crate::rng;
use crate::spectrum::{SpectrumError, SpectrumOptions, DEFAULT_FLOOR};

/// Smallest certified rate accepted as exponential separation.
pub const ALPHA_TOL: f64 = 1e-9;
/// Largest relative subspace residual accepted for explicit frames.
pub const INVARIANCE_TOL: f64 = 1e-8;
/// Absolute slack on log-ratio comparisons against claimed constants.
const CLAIM_TOL: f64 = 1e-9;
/// Smallest ratio of extreme singular values for a frame to count as a basis.
const DEGENERATE_TOL: f64 = 1e-10;
/// Stream used for the generic starting frame of estimated splittings.
const FRAME_STREAM: u64 = 0x5EED_F4A3;

#[derive(Debug, Error)]
pub enum SplittingError {
    #[error("rank {rank} outside 1..={dim}")]
    Rank { rank: usize, dim: usize },
    #[error("frame on piece {piece} is {rows}x{cols}, expected {dim}x{expected}")]
    FrameShape {
        piece: usize,
        rows: usize,
        cols: usize,
        dim: usize,
        expected: usize,
    },
    #[error("frame on piece {0} does not span its block")]
    DegenerateFrame(usize),
    #[error("expected {expected} frame directions, got {got}")]
    FrameCount { expected: usize, got: usize },
    #[error("frames are not invariant: worst subspace residual {residual:e}")]
    NotInvariant { residual: f64 },
    #[error("this operation needs explicit per-piece frames")]
    EstimatedFrames,
    #[error("witness carries no domination constants")]
    MissingConstants,
    #[error("invalid parameter {name} = {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("K e^(alpha N) = {value} is below 2 at N = {period}")]
    PeriodTooShort { period: usize, value: f64 },
    #[error("splitting is not dominated")]
    NotDominated(Box<DominatedCertificate>),
    #[error("frames are not integrally separated at split {split}")]
    NotSeparated { split: usize },
    #[error("cone family is not invariant at horizon {horizon}")]
    ConeNotInvariant {
        horizon: usize,
        counterexample: Option<Counterexample>,
    },
    #[error("top block of dimension {rank} not resolved: gap {gap:e} below {tol:e}")]
    NoTopBlock { rank: usize, gap: f64, tol: f64 },
    #[error("top block moves across the base (projector distance {distance:e})")]
    VaryingSplitting { distance: f64 },
    #[error("top exponents still not separated after {attempts} draws: gap {gap:e}, need {tol:e}")]
    GapUnresolved { attempts: usize, gap: f64, tol: f64 },
    #[error("no direction with |T v| <= eps/3 |v| on every piece")]
    NoAdmissibleSubblock,
    #[error("ladder exponent {index} (expected {expected}) not found in the spectrum")]
    LadderNotRecovered { index: usize, expected: f64 },
    #[error("simplicity lost at t = {t}: gap {gap:e} after exponent {index}, need {tol:e}")]
    SimplicityLost {
        t: f64,
        index: usize,
        gap: f64,
        tol: f64,
    },
    #[error(transparent)]
    Base(#[from] BaseError),
    #[error(transparent)]
    Op(#[from] OpError),
    #[error(transparent)]
    Cone(#[from] ConeError),
    #[error(transparent)]
    Spectrum(#[from] SpectrumError),
    #[error(transparent)]
    Exterior(#[from] ExteriorError),
}

/// Domination constants in either of their two equivalent forms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum DominationConstants {
    /// `|T v| >= delta |v|` on `E`, and the ratio at `n` steps is at least `prefactor * e^{alpha n}`.
    Exponential {
        delta: f64,
        prefactor: f64,
        alpha: f64,
    },
    /// `|T v| >= delta |v|` on `E`, and the ratio at `period` steps is at least `rho > 1`.
    Periodic { delta: f64, period: usize, rho: f64 },
}

impl DominationConstants {
    pub fn delta(&self) -> f64 {
        match *self {
            DominationConstants::Exponential { delta, .. }
            | DominationConstants::Periodic { delta, .. } => delta,
        }
    }
}

/// Where the blocks of a splitting come from.
#[derive(Clone, Debug)]
pub enum Frames {
    /// Columns spanning `E` on each piece, and columns spanning `F`; the
    /// orthogonal complement of `E` when `complement` is absent.
    Explicit {
        top: PartitionMap<Matrix>,
        complement: Option<PartitionMap<Matrix>>,
    },
    /// `E` is the image of a generic frame under a product of `horizon` steps
    /// ending at the point; `F` is the orthogonal complement of the top right
    /// singular space of the `horizon`-step product starting there.
    Estimated { horizon: usize },
}

#[derive(Clone, Debug)]
pub struct SplittingWitness {
    /// Dimension of `E`.
    pub rank: usize,
    pub frames: Frames,
    pub constants: Option<DominationConstants>,
}

impl SplittingWitness {
    pub fn explicit(
        top: PartitionMap<Matrix>,
        complement: Option<PartitionMap<Matrix>>,
    ) -> Result<Self, SplittingError> {
        let rank = top.pieces().first().map_or(0, |(_, m)| m.ncols());
        Ok(SplittingWitness {
            rank,
            frames: Frames::Explicit { top, complement },
            constants: None,
        })
    }

    pub fn estimated(rank: usize, horizon: usize) -> Self {
        SplittingWitness {
            rank,
            frames: Frames::Estimated { horizon },
            constants: None,
        }
    }

    pub fn with_constants(mut self, c: DominationConstants) -> Self {
        self.constants = Some(c);
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplittingOptions {
    /// Largest number of steps compared.
    pub horizon: usize,
    /// Base points sampled by each checker.
    pub samples: usize,
    /// Product length used when frames are estimated.
    pub frame_horizon: usize,
    pub cone_samples: usize,
    /// Random draws tried when separating a degenerate top block.
    pub attempts: usize,
    pub spectrum: SpectrumOptions,
    pub seed: u64,
}

impl Default for SplittingOptions {
    fn default() -> Self {
        SplittingOptions {
            horizon: 24,
            samples: 32,
            frame_horizon: 300,
            cone_samples: 200,
            attempts: 8,
            spectrum: SpectrumOptions::new(2000, 4, 0),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// `|T v| >= delta |v|` on the top block.
    Lower,
    /// The `n`-step ratio against the claimed constants.
    Growth,
    /// No positive rate fits the sampled ratios.
    Rate,
    /// Angle between the blocks.
    Angle,
    /// Component norms of a unit vector split along the blocks.
    Decomposition,
}

/// A sampled configuration breaking a splitting certificate. Sample `i` is the
/// point drawn from stream `i` of the certificate seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplittingCounterexample {
    pub condition: Condition,
    pub sample: usize,
    pub point: BasePoint,
    pub step: usize,
    pub v: Vec<f64>,
    pub u: Vec<f64>,
    /// Observed log ratio (or rate, or angle gap) and the value it had to reach.
    pub value: f64,
    pub required: f64,
}

/// Least-squares growth rate of the log ratio against the step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthFit {
    /// Mean over samples of the per-sample slope.
    pub alpha: f64,
    pub alpha_stderr: f64,
    /// Mean over samples of the per-sample intercept.
    pub log_prefactor: f64,
    /// `worst_log_ratio[n-1]` is the smallest log ratio at `n` steps over samples.
    pub worst_log_ratio: Vec<f64>,
    pub mean_log_ratio: Vec<f64>,
}

impl GrowthFit {
    fn empty() -> Self {
        GrowthFit {
            alpha: 0.0,
            alpha_stderr: 0.0,
            log_prefactor: 0.0,
            worst_log_ratio: Vec::new(),
            mean_log_ratio: Vec::new(),
        }
    }

    /// `alpha - 3 stderr`.
    pub fn certified_alpha(&self) -> f64 {
        self.alpha - 3.0 * self.alpha_stderr
    }

    /// Largest `K` with `worst(n) >= log K + alpha n` for every tested `n`.
    pub fn prefactor_for(&self, alpha: f64) -> f64 {
        self.worst_log_ratio
            .iter()
            .enumerate()
            .map(|(i, y)| y - alpha * (i + 1) as f64)
            .fold(f64::INFINITY, f64::min)
            .exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DominatedCertificate {
    pub pass: bool,
    pub rank: usize,
    pub complement_dim: usize,
    pub horizon: usize,
    pub samples: usize,
    pub seed: u64,
    /// Smallest `|T v| / |v|` over the top block at the sampled points.
    pub delta: f64,
    pub fit: GrowthFit,
    pub claimed: Option<DominationConstants>,
    /// The claimed constants when they hold; fitted exponential constants otherwise.
    pub certified: Option<DominationConstants>,
    /// Worst relative distance of `T E(omega)` from `E(theta omega)`, and likewise for `F`.
    pub invariance_residual: f64,
    pub estimated_frames: bool,
    /// `F` is trivial, so the growth condition holds vacuously.
    pub vacuous: bool,
    pub counterexample: Option<SplittingCounterexample>,
}

/// Orthonormal basis of the column span, or `None` when the columns are dependent.
pub(crate) fn orthonormal(m: &Matrix) -> Option<Matrix> {
    if m.ncols() == 0 {
        return Some(m.clone());
    }
    let s = linalg::svd(m);
    let top = s.sigma.first().copied().unwrap_or(0.0);
    let low = s.sigma.last().copied().unwrap_or(0.0);
    if !(top > 0.0 && low > DEGENERATE_TOL * top) || s.sigma.len() < m.ncols() {
        return None;
    }
    Some(s.u.columns(0, m.ncols()).into_owned())
}

/// Orthonormal basis of the orthogonal complement of an orthonormal `q`.
pub(crate) fn complement_of(q: &Matrix) -> Matrix {
    let d = q.nrows();
    let k = q.ncols();
    if k >= d {
        return Matrix::zeros(d, 0);
    }
    let p = Matrix::identity(d, d) - q * q.transpose();
    linalg::svd(&p).u.columns(0, d - k).into_owned()
}

fn generic_frame(d: usize, k: usize) -> Matrix {
    let mut r = rng::stream(FRAME_STREAM, k as u64);
    gaussian_matrix(d, 1.0, &mut r)
        .columns(0, k)
        .into_owned()
        .qr()
        .q()
}

/// Image of a generic `k`-frame under the `horizon` steps ending at `p`.
pub(crate) fn fast_space(t: &RandomOperator, p: &BasePoint, k: usize, horizon: usize) -> Matrix {
    let sys = t.base();
    let mut q = generic_frame(t.dim(), k);
    let mut pt = sys.orbit(p, -(horizon as i64));
    for _ in 0..horizon {
        q = (t.matrix_at(&pt) * q).qr().q();
        pt = sys.orbit(&pt, 1);
    }
    q
}

/// Orthogonal complement of the top `k` right singular directions of `T^horizon_p`.
pub(crate) fn slow_space(t: &RandomOperator, p: &BasePoint, k: usize, horizon: usize) -> Matrix {
    let sys = t.base();
    let mut pts = Vec::with_capacity(horizon);
    let mut pt = p.clone();
    for _ in 0..horizon {
        pts.push(pt.clone());
        pt = sys.orbit(&pt, 1);
    }
    let mut q = generic_frame(t.dim(), k);
    for pt in pts.iter().rev() {
        q = (t.matrix_at(pt).transpose() * q).qr().q();
    }
    complement_of(&q)
}

/// Orthonormal bases of `E` and `F` per piece of an explicit witness.
fn explicit_blocks(
    d: usize,
    rank: usize,
    top: &PartitionMap<Matrix>,
    complement: &Option<PartitionMap<Matrix>>,
) -> Result<PartitionMap<(Matrix, Matrix)>, SplittingError> {
    let check = |piece: usize, m: &Matrix, cols: usize| {
        if m.nrows() != d || m.ncols() != cols {
            return Err(SplittingError::FrameShape {
                piece,
                rows: m.nrows(),
                cols: m.ncols(),
                dim: d,
                expected: cols,
            });
        }
        orthonormal(m).ok_or(SplittingError::DegenerateFrame(piece))
    };
    let mut tops = Vec::with_capacity(top.len());
    for (i, (set, m)) in top.pieces().iter().enumerate() {
        tops.push((set.clone(), check(i, m, rank)?));
    }
    let tops = PartitionMap::from_pieces_unchecked(tops);
    match complement {
        None => Ok(tops.map_values(|q| (q.clone(), complement_of(q)))),
        Some(c) => {
            let mut comps = Vec::with_capacity(c.len());
            for (i, (set, m)) in c.pieces().iter().enumerate() {
                comps.push((set.clone(), check(i, m, d - rank)?));
            }
            let joined = tops.refine(&PartitionMap::from_pieces_unchecked(comps));
            let mut out = Vec::with_capacity(joined.len());
            for (i, (set, (e, f))) in joined.into_pieces().into_iter().enumerate() {
                let both = Matrix::from_fn(d, d, |r, c| {
                    if c < rank {
                        e[(r, c)]
                    } else {
                        f[(r, c - rank)]
                    }
                });
                if orthonormal(&both).is_none() {
                    return Err(SplittingError::DegenerateFrame(i));
                }
                out.push((set, (e, f)));
            }
            Ok(PartitionMap::from_pieces_unchecked(out))
        }
    }
}

/// `|(I - Q' Q'^T) T Q| / |T Q|`, zero when `T Q` vanishes.
fn subspace_residual(m: &Matrix, q: &Matrix, next: &Matrix) -> f64 {
    if q.ncols() == 0 {
        return 0.0;
    }
    let img = m * q;
    let scale = linalg::spectral_norm(&img);
    if scale == 0.0 {
        return 0.0;
    }
    linalg::spectral_norm(&(&img - next * (next.transpose() * &img))) / scale
}

/// Worst invariance residual of both blocks over the pieces of `(blocks, T, blocks o theta)`.
fn explicit_invariance(t: &RandomOperator, blocks: &PartitionMap<(Matrix, Matrix)>) -> f64 {
    let sys = t.base();
    let block_sets: Vec<BaseSet> = blocks.pieces().iter().map(|(s, _)| s.clone()).collect();
    let op_sets: Vec<BaseSet> = t.pieces().iter().map(|(s, _)| s.clone()).collect();
    let layers: Vec<(&[BaseSet], i64)> = vec![(&block_sets, 0), (&op_sets, 0), (&block_sets, 1)];
    itinerary(sys, &sys.whole(), &layers)
        .into_iter()
        .map(|(_, l)| {
            let (e, f) = &blocks.pieces()[l[0]].1;
            let (e1, f1) = &blocks.pieces()[l[2]].1;
            let m = &t.pieces()[l[1]].1;
            subspace_residual(m, e, e1).max(subspace_residual(m, f, f1))
        })
        .fold(0.0, f64::max)
}

/// Evaluates the witness blocks at sampled points.
pub(crate) struct BlockSource {
    explicit: Option<PartitionMap<(Matrix, Matrix)>>,
    rank: usize,
    horizon: usize,
    pub invariance_residual: f64,
}

impl BlockSource {
    pub(crate) fn new(t: &RandomOperator, w: &SplittingWitness) -> Result<Self, SplittingError> {
        let d = t.dim();
        if w.rank == 0 || w.rank > d {
            return Err(SplittingError::Rank {
                rank: w.rank,
                dim: d,
            });
        }
        match &w.frames {
            Frames::Explicit { top, complement } => {
                let blocks = explicit_blocks(d, w.rank, top, complement)?;
                let residual = explicit_invariance(t, &blocks);
                if residual > INVARIANCE_TOL {
                    return Err(SplittingError::NotInvariant { residual });
                }
                Ok(BlockSource {
                    explicit: Some(blocks),
                    rank: w.rank,
                    horizon: 0,
                    invariance_residual: residual,
                })
            }
            Frames::Estimated { horizon } => {
                if *horizon == 0 {
                    return Err(SplittingError::InvalidParameter {
                        name: "frame_horizon",
                        value: 0.0,
                    });
                }
                Ok(BlockSource {
                    explicit: None,
                    rank: w.rank,
                    horizon: *horizon,
                    invariance_residual: 0.0,
                })
            }
        }
    }

    pub(crate) fn at(&self, t: &RandomOperator, p: &BasePoint) -> (Matrix, Matrix) {
        match &self.explicit {
            Some(b) => b.value_at(t.base(), p).clone(),
            None => (
                fast_space(t, p, self.rank, self.horizon),
                slow_space(t, p, self.rank, self.horizon),
            ),
        }
    }

    pub(crate) fn slow_at(&self, t: &RandomOperator, p: &BasePoint) -> Matrix {
        match &self.explicit {
            Some(b) => b.value_at(t.base(), p).1.clone(),
            None => slow_space(t, p, self.rank, self.horizon),
        }
    }
}

fn renormalize(x: &mut Matrix, log_scale: &mut f64) {
    let c = x.amax();
    if c > 0.0 {
        *x /= c;
        *log_scale += c.ln();
    }
}

/// `log sigma_min(T^n E) - log sigma_max(T^n F)` for `n = 1..=n_max`, each
/// side floored at `n * DEFAULT_FLOOR` so collapsing blocks stay finite. The
/// top block is tracked as an orthonormal frame times a graded triangular
/// factor, since its smallest singular value falls far below its largest.
/// The complement is projected back onto `slow_at(theta^n p)` after every
/// step; otherwise rounding leaks into the fast directions and takes over.
pub(crate) fn ratio_path(
    t: &RandomOperator,
    p: &BasePoint,
    e: &Matrix,
    f: &Matrix,
    n_max: usize,
    slow_at: &dyn Fn(&BasePoint) -> Matrix,
) -> Vec<f64> {
    let sys = t.base();
    let mut q = e.clone();
    let mut graded = GradedRows::identity(e.ncols());
    let mut xf = f.clone();
    let mut sf = 0.0;
    let mut pt = p.clone();
    let mut out = Vec::with_capacity(n_max);
    for n in 1..=n_max {
        let m = t.matrix_at(&pt);
        let qr = (m * &q).qr();
        graded.left_multiply(&qr.r());
        q = qr.q();
        xf = m * &xf;
        pt = sys.orbit(&pt, 1);
        let qf = slow_at(&pt);
        xf = &qf * (qf.transpose() * &xf);
        renormalize(&mut xf, &mut sf);
        let floor = n as f64 * DEFAULT_FLOOR;
        let low = graded
            .log_singular_values()
            .last()
            .copied()
            .unwrap_or(f64::NEG_INFINITY);
        let high = linalg::spectral_norm(&xf).ln() + sf;
        out.push(low.max(floor) - high.max(floor));
    }
    out
}

/// Unit `v` in `E` and `u` in `F` attaining the extremes at `n` steps.
pub(crate) fn extremal_pair(
    t: &RandomOperator,
    p: &BasePoint,
    e: &Matrix,
    f: &Matrix,
    n: usize,
) -> (Vector, Vector) {
    let prod = t.cocycle_product(p, n);
    let pick = |basis: &Matrix, last: bool| {
        if basis.ncols() == 0 {
            return Vector::zeros(basis.nrows());
        }
        let s = linalg::svd(&(&prod * basis));
        let j = if last { s.sigma.len() - 1 } else { 0 };
        basis * s.v.column(j)
    };
    (pick(e, true), pick(f, false))
}

fn least_squares_line(ys: &[f64]) -> (f64, f64) {
    let n = ys.len() as f64;
    let xbar = (n + 1.0) / 2.0;
    let ybar = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = (i + 1) as f64 - xbar;
        sxy += dx * (y - ybar);
        sxx += dx * dx;
    }
    let slope = sxy / sxx;
    (slope, ybar - slope * xbar)
}

pub(crate) fn fit_paths(paths: &[Vec<f64>]) -> GrowthFit {
    let m = paths.len();
    let width = paths[0].len();
    let lines: Vec<(f64, f64)> = paths.iter().map(|p| least_squares_line(p)).collect();
    let alpha = lines.iter().map(|l| l.0).sum::<f64>() / m as f64;
    let alpha_stderr = if m > 1 {
        let var = lines.iter().map(|l| (l.0 - alpha).powi(2)).sum::<f64>() / (m - 1) as f64;
        (var / m as f64).sqrt()
    } else {
        0.0
    };
    GrowthFit {
        alpha,
        alpha_stderr,
        log_prefactor: lines.iter().map(|l| l.1).sum::<f64>() / m as f64,
        worst_log_ratio: (0..width)
            .map(|n| paths.iter().map(|p| p[n]).fold(f64::INFINITY, f64::min))
            .collect(),
        mean_log_ratio: (0..width)
            .map(|n| paths.iter().map(|p| p[n]).sum::<f64>() / m as f64)
            .collect(),
    }
}

pub(crate) fn sample_points(t: &RandomOperator, samples: usize, seed: u64) -> Vec<BasePoint> {
    (0..samples)
        .map(|i| t.base().sample_point(&mut rng::stream(seed, i as u64)))
        .collect()
}

fn check_counts(n_max: usize, samples: usize) -> Result<(), SplittingError> {
    if n_max < 2 {
        return Err(SplittingError::InvalidParameter {
            name: "n_max",
            value: n_max as f64,
        });
    }
    if samples == 0 {
        return Err(SplittingError::InvalidParameter {
            name: "samples",
            value: 0.0,
        });
    }
    Ok(())
}

fn argmin(xs: impl Iterator<Item = f64>) -> usize {
    xs.enumerate()
        .fold(
            (0, f64::INFINITY),
            |best, (i, x)| if x < best.1 { (i, x) } else { best },
        )
        .0
}

/// Samples base points and checks `|T v| >= delta |v|` on `E` and the
/// `n`-step growth ratio of `E` over `F` for `n <= n_max`, against the
/// witness constants when present and against a fitted positive rate otherwise.
pub fn dominated_check(
    t: &RandomOperator,
    witness: &SplittingWitness,
    n_max: usize,
    samples: usize,
    seed: u64,
) -> Result<DominatedCertificate, SplittingError> {
    check_counts(n_max, samples)?;
    let source = BlockSource::new(t, witness)?;
    let points = sample_points(t, samples, seed);
    let d = t.dim();
    let rank = witness.rank;
    // per sample: blocks, d1 value, ratio path, estimated invariance residual
    let per: Vec<(Matrix, Matrix, f64, Vec<f64>, f64)> = points
        .par_iter()
        .map(|p| {
            let (e, f) = source.at(t, p);
            let m = t.matrix_at(p);
            let low = linalg::singular_values(&(m * &e))
                .last()
                .copied()
                .unwrap_or(0.0);
            let path = if f.ncols() == 0 {
                Vec::new()
            } else {
                ratio_path(t, p, &e, &f, n_max, &|q| source.slow_at(t, q))
            };
            let residual = if source.explicit.is_none() {
                let (e1, f1) = source.at(t, &t.base().orbit(p, 1));
                subspace_residual(m, &e, &e1).max(subspace_residual(m, &f, &f1))
            } else {
                0.0
            };
            (e, f, low, path, residual)
        })
        .collect();
    let delta = per.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
    let invariance_residual = per
        .iter()
        .map(|r| r.4)
        .fold(source.invariance_residual, f64::max);
    let vacuous = rank == d;
    let fit = if vacuous {
        GrowthFit::empty()
    } else {
        let paths: Vec<Vec<f64>> = per.iter().map(|r| r.3.clone()).collect();
        fit_paths(&paths)
    };
    let witness_at = |i: usize, condition: Condition, step: usize, value: f64, required: f64| {
        let (e, f) = (&per[i].0, &per[i].1);
        let (v, u) = extremal_pair(t, &points[i], e, f, step.max(1));
        SplittingCounterexample {
            condition,
            sample: i,
            point: points[i].clone(),
            step,
            v: v.iter().copied().collect(),
            u: u.iter().copied().collect(),
            value,
            required,
        }
    };

    let mut counterexample = None;
    let mut certified = None;
    let claimed_delta = witness.constants.map(|c| c.delta());
    if let Some(cd) = claimed_delta {
        if delta < cd * (1.0 - 1e-12) {
            let i = argmin(per.iter().map(|r| r.2));
            counterexample = Some(witness_at(i, Condition::Lower, 1, delta, cd));
        }
    } else if !(delta > 0.0) {
        let i = argmin(per.iter().map(|r| r.2));
        counterexample = Some(witness_at(i, Condition::Lower, 1, delta, 0.0));
    }
    if counterexample.is_none() && !vacuous {
        // (sample, step, value, required) of the worst shortfall, if any
        let shortfall = |required: &dyn Fn(usize) -> f64, steps: &[usize]| {
            let mut worst: Option<(usize, usize, f64, f64)> = None;
            for &n in steps {
                let req = required(n);
                for (i, r) in per.iter().enumerate() {
                    let gap = r.3[n - 1] - req;
                    if gap < -CLAIM_TOL * req.abs().max(1.0)
                        && worst.is_none_or(|w| gap < w.2 - w.3)
                    {
                        worst = Some((i, n, r.3[n - 1], req));
                    }
                }
            }
            worst
        };
        match witness.constants {
            Some(DominationConstants::Exponential {
                prefactor, alpha, ..
            }) => {
                let steps: Vec<usize> = (1..=n_max).collect();
                match shortfall(&|n| prefactor.ln() + alpha * n as f64, &steps) {
                    Some((i, n, v, r)) => {
                        counterexample = Some(witness_at(i, Condition::Growth, n, v, r))
                    }
                    None => certified = witness.constants,
                }
            }
            Some(DominationConstants::Periodic { period, rho, .. }) => {
                if period == 0 || period > n_max {
                    return Err(SplittingError::InvalidParameter {
                        name: "period",
                        value: period as f64,
                    });
                }
                match shortfall(&|_| rho.ln(), &[period]) {
                    Some((i, n, v, r)) => {
                        counterexample = Some(witness_at(i, Condition::Growth, n, v, r))
                    }
                    None => certified = witness.constants,
                }
            }
            None => {
                let alpha = fit.certified_alpha();
                if alpha > ALPHA_TOL {
                    certified = Some(DominationConstants::Exponential {
                        delta,
                        prefactor: fit.prefactor_for(alpha),
                        alpha,
                    });
                } else {
                    let slopes = per.iter().map(|r| least_squares_line(&r.3).0);
                    let i = argmin(slopes);
                    counterexample = Some(witness_at(i, Condition::Rate, n_max, alpha, ALPHA_TOL));
                }
            }
        }
    } else if counterexample.is_none() {
        certified = witness.constants;
    }
    Ok(DominatedCertificate {
        pass: counterexample.is_none(),
        rank,
        complement_dim: d - rank,
        horizon: n_max,
        samples,
        seed,
        delta,
        fit,
        claimed: witness.constants,
        certified,
        invariance_residual,
        estimated_frames: source.explicit.is_none(),
        vacuous,
        counterexample,
    })
}

/// `(K, alpha)` to `(N, rho)` with `N = max(1, ceil((1 - log K) / alpha))` and
/// `rho = K e^{alpha N}`, so `rho >= e`.
pub fn to_periodic(c: DominationConstants) -> Result<DominationConstants, SplittingError> {
    match c {
        DominationConstants::Periodic { .. } => Ok(c),
        DominationConstants::Exponential {
            delta,
            prefactor,
            alpha,
        } => {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(SplittingError::InvalidParameter {
                    name: "alpha",
                    value: alpha,
                });
            }
            if !(prefactor > 0.0 && prefactor.is_finite()) {
                return Err(SplittingError::InvalidParameter {
                    name: "prefactor",
                    value: prefactor,
                });
            }
            let period = ((1.0 - prefactor.ln()) / alpha).ceil().max(1.0) as usize;
            Ok(DominationConstants::Periodic {
                delta,
                period,
                rho: prefactor * (alpha * period as f64).exp(),
            })
        }
    }
}

/// `(N, rho)` to `(K, alpha)` with `alpha = log rho / N` and
/// `K = min_{0 <= r < N} delta^r / (rho |T|^r)`.
pub fn to_exponential(
    c: DominationConstants,
    norm: f64,
) -> Result<DominationConstants, SplittingError> {
    match c {
        DominationConstants::Exponential { .. } => Ok(c),
        DominationConstants::Periodic { delta, period, rho } => {
            if period == 0 {
                return Err(SplittingError::InvalidParameter {
                    name: "period",
                    value: 0.0,
                });
            }
            if !(rho > 1.0 && rho.is_finite()) {
                return Err(SplittingError::InvalidParameter {
                    name: "rho",
                    value: rho,
                });
            }
            if !(delta > 0.0 && norm >= delta) {
                return Err(SplittingError::InvalidParameter {
                    name: "delta",
                    value: delta,
                });
            }
            let shrink = (delta / norm).powi(period as i32 - 1);
            Ok(DominationConstants::Exponential {
                delta,
                prefactor: shrink.min(1.0) / rho,
                alpha: rho.ln() / period as f64,
            })
        }
    }
}

/// Converts the witness constants to the other form.
pub fn n_step_equivalence(
    t: &RandomOperator,
    witness: &SplittingWitness,
) -> Result<DominationConstants, SplittingError> {
    match witness.constants.ok_or(SplittingError::MissingConstants)? {
        c @ DominationConstants::Exponential { .. } => to_periodic(c),
        c @ DominationConstants::Periodic { .. } => to_exponential(c, t.ess_sup_norm()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AngleCertificate {
    pub pass: bool,
    pub eta: f64,
    pub period: usize,
    pub delta: f64,
    pub prefactor: f64,
    pub alpha: f64,
    pub norm: f64,
    /// Largest `|<v, u>|` over unit `v` in `E` and `u` in `F` at the sampled points.
    pub max_cosine: f64,
    /// Smallest `|1 - <v, u>|` over sampled unit pairs, with both signs of `u`.
    pub min_sampled_gap: f64,
    /// `1 / sqrt(1 - max_cosine^2)`, the largest component of a unit vector.
    pub projection_norm: f64,
    /// Largest `max(|v|, |u|)` over sampled unit `xi = v + u`.
    pub max_component: f64,
    pub samples: usize,
    pub seed: u64,
    pub counterexample: Option<SplittingCounterexample>,
}

/// Checks that the blocks stay `eta` apart, with `eta` computed from the
/// witness constants at period `N`, and that unit vectors split into
/// components of norm at most `1 / eta`.
pub fn angle_separation(
    t: &RandomOperator,
    witness: &SplittingWitness,
    period: usize,
    samples: usize,
    seed: u64,
) -> Result<AngleCertificate, SplittingError> {
    if samples == 0 {
        return Err(SplittingError::InvalidParameter {
            name: "samples",
            value: 0.0,
        });
    }
    let norm = t.ess_sup_norm();
    let c = to_exponential(
        witness.constants.ok_or(SplittingError::MissingConstants)?,
        norm,
    )?;
    let DominationConstants::Exponential {
        delta,
        prefactor,
        alpha,
    } = c
    else {
        unreachable!("converted above")
    };
    let growth = prefactor * (alpha * period as f64).exp();
    if period == 0 || !(growth >= 2.0) {
        return Err(SplittingError::PeriodTooShort {
            period,
            value: growth,
        });
    }
    let eta = eta_constant(delta, prefactor, alpha, period, norm);
    let source = BlockSource::new(t, witness)?;
    let points = sample_points(t, samples, seed);
    struct PointResult {
        cosine: f64,
        gap: f64,
        gap_pair: (Vector, Vector),
        component: f64,
        component_pair: (Vector, Vector),
    }
    let per: Vec<PointResult> = points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let (e, f) = source.at(t, p);
            let d = e.nrows();
            let cosine = if f.ncols() == 0 {
                0.0
            } else {
                linalg::spectral_norm(&(e.transpose() * &f))
            };
            let mut r = rng::stream(seed, (samples + i) as u64);
            let mut gap = f64::INFINITY;
            let mut gap_pair = (Vector::zeros(d), Vector::zeros(d));
            let mut component = 0.0f64;
            let mut component_pair = gap_pair.clone();
            if f.ncols() > 0 {
                let both = Matrix::from_fn(d, d, |r, c| {
                    if c < e.ncols() {
                        e[(r, c)]
                    } else {
                        f[(r, c - e.ncols())]
                    }
                });
                let lu = both.lu();
                for _ in 0..PAIRS_PER_POINT {
                    let v = (&e * gaussian_vector(e.ncols(), &mut r)).normalize();
                    let u = (&f * gaussian_vector(f.ncols(), &mut r)).normalize();
                    let cos = v.dot(&u);
                    let g = (1.0 - cos).abs().min((1.0 + cos).abs());
                    if g < gap {
                        gap = g;
                        gap_pair = (v.clone(), u.clone());
                    }
                    let xi = (gaussian_vector(d, &mut r)).normalize();
                    let coef = lu.solve(&xi).unwrap_or_else(|| Vector::zeros(d));
                    let cv = &e * coef.rows(0, e.ncols());
                    let cu = &f * coef.rows(e.ncols(), f.ncols());
                    let m = cv.norm().max(cu.norm());
                    if m > component {
                        component = m;
                        component_pair = (cv, cu);
                    }
                }
            }
            PointResult {
                cosine,
                gap,
                gap_pair,
                component,
                component_pair,
            }
        })
        .collect();
    let max_cosine = per.iter().map(|r| r.cosine).fold(0.0, f64::max);
    let min_sampled_gap = per.iter().map(|r| r.gap).fold(f64::INFINITY, f64::min);
    let max_component = per.iter().map(|r| r.component).fold(0.0, f64::max);
    let projection_norm = 1.0 / (1.0 - max_cosine * max_cosine).max(0.0).sqrt();
    let to_vec = |v: &Vector| v.iter().copied().collect::<Vec<f64>>();
    let mut counterexample = None;
    if 1.0 - max_cosine < eta || min_sampled_gap < eta {
        let i = argmin(per.iter().map(|r| r.gap.min(1.0 - r.cosine)));
        let r = &per[i];
        counterexample = Some(SplittingCounterexample {
            condition: Condition::Angle,
            sample: i,
            point: points[i].clone(),
            step: 0,
            v: to_vec(&r.gap_pair.0),
            u: to_vec(&r.gap_pair.1),
            value: r.gap.min(1.0 - r.cosine),
            required: eta,
        });
    } else if projection_norm > 1.0 / eta || max_component > 1.0 / eta {
        let i = argmin(per.iter().map(|r| -r.component));
        let r = &per[i];
        counterexample = Some(SplittingCounterexample {
            condition: Condition::Decomposition,
            sample: i,
            point: points[i].clone(),
            step: 0,
            v: to_vec(&r.component_pair.0),
            u: to_vec(&r.component_pair.1),
            value: r.component.max(projection_norm),
            required: 1.0 / eta,
        });
    }
    Ok(AngleCertificate {
        pass: counterexample.is_none(),
        eta,
        period,
        delta,
        prefactor,
        alpha,
        norm,
        max_cosine,
        min_sampled_gap,
        projection_norm,
        max_component,
        samples,
        seed,
        counterexample,
    })
}

/// Random pairs tried at each sampled point.
const PAIRS_PER_POINT: usize = 16;
