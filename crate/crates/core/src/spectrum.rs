//! Lyapunov exponents of a random operator cocycle.
//!
//! Every estimator runs `trajectories` independent orbits, each seeded from
//! `(seed, trajectory index)`, and splits the horizon into eight consecutive
//! batches. The reported standard error is the batch-means error of the
//! pooled per-batch growth rates.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::base::BasePoint;
use crate::linalg::{self, GradedRows, Matrix, Vector};
use crate::opcore::{gaussian_matrix, RandomOperator};
use crate::rng;

pub const BATCHES: usize = 8;
const RENORM_EVERY: usize = 10;
/// Default per-step log floor: contraction beyond machine precision every step.
pub const DEFAULT_FLOOR: f64 = -36.0;
const MIN_GAP_TOL: f64 = 5e-3;

#[derive(Debug, Error, PartialEq)]
pub enum SpectrumError {
    #[error("n_steps must be at least 100, got {0}")]
    TooFewSteps(usize),
    #[error("need at least one trajectory")]
    NoTrajectories,
    #[error("frame size {p} outside 1..={d}")]
    FrameSize { p: usize, d: usize },
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("top exponent is not simple: estimated gap {gap:.3e} below {tol:.1e}")]
    NonSimpleTop { gap: f64, tol: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumOptions {
    pub n_steps: usize,
    pub trajectories: usize,
    pub seed: u64,
    pub floor: f64,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        SpectrumOptions {
            n_steps: 10_000,
            trajectories: 16,
            seed: 0,
            floor: DEFAULT_FLOOR,
        }
    }
}

impl SpectrumOptions {
    pub fn new(n_steps: usize, trajectories: usize, seed: u64) -> Self {
        SpectrumOptions {
            n_steps,
            trajectories,
            seed,
            ..Default::default()
        }
    }

    fn check(&self) -> Result<(), SpectrumError> {
        if self.n_steps < 100 {
            return Err(SpectrumError::TooFewSteps(self.n_steps));
        }
        if self.trajectories == 0 {
            return Err(SpectrumError::NoTrajectories);
        }
        Ok(())
    }

    fn batch_bounds(&self) -> Vec<usize> {
        let len = self.n_steps / BATCHES;
        (0..=BATCHES)
            .map(|b| if b == BATCHES { self.n_steps } else { b * len })
            .collect()
    }
}

/// Estimate of the top exponent `kappa = lim (1/n) log |T^n|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopExponent {
    /// `-inf` when some trajectory collapsed to the zero matrix.
    pub kappa: f64,
    pub stderr: f64,
    pub floor_hit: bool,
}

impl TopExponent {
    pub fn clamped(&self, floor: f64) -> f64 {
        self.kappa.max(floor)
    }
}

/// Per-batch log growth, pooled into a mean rate and its batch-means error.
fn pool(increments: &[Vec<Vec<f64>>], bounds: &[usize]) -> (Vec<f64>, Vec<f64>) {
    // increments[trajectory][batch][index]
    let width = increments[0][0].len();
    let trajs = increments.len() as f64;
    let mut means = vec![0.0; width];
    let mut errs = vec![0.0; width];
    for i in 0..width {
        let rates: Vec<f64> = (0..BATCHES)
            .map(|b| {
                let total: f64 = increments.iter().map(|t| t[b][i]).sum();
                total / (trajs * (bounds[b + 1] - bounds[b]) as f64)
            })
            .collect();
        let total: f64 = increments.iter().flat_map(|t| t.iter().map(|b| b[i])).sum();
        means[i] = total / (trajs * bounds[BATCHES] as f64);
        if means[i].is_finite() {
            let m = rates.iter().sum::<f64>() / BATCHES as f64;
            let var = rates.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (BATCHES - 1) as f64;
            errs[i] = (var / BATCHES as f64).sqrt();
        }
    }
    (means, errs)
}

fn start_point(
    t: &RandomOperator,
    opts: &SpectrumOptions,
    j: usize,
) -> (BasePoint, rand_chacha::ChaCha8Rng) {
    let mut r = rng::stream(opts.seed, j as u64);
    let p = t.base().sample_point(&mut r);
    (p, r)
}

pub fn top_exponent(
    t: &RandomOperator,
    opts: &SpectrumOptions,
) -> Result<TopExponent, SpectrumError> {
    opts.check()?;
    let bounds = opts.batch_bounds();
    let d = t.dim();
    let incs: Vec<Vec<Vec<f64>>> = (0..opts.trajectories)
        .into_par_iter()
        .map(|j| {
            let (mut p, _) = start_point(t, opts, j);
            let mut m = Matrix::identity(d, d);
            let mut buf = Matrix::zeros(d, d);
            let mut out = vec![vec![0.0]; BATCHES];
            for b in 0..BATCHES {
                let mut acc = 0.0;
                for step in bounds[b]..bounds[b + 1] {
                    buf.gemm(1.0, t.matrix_at(&p), &m, 0.0);
                    std::mem::swap(&mut m, &mut buf);
                    p = t.base().orbit(&p, 1);
                    let last = step + 1 == bounds[b + 1];
                    if (step + 1) % RENORM_EVERY == 0 || last {
                        let n = m.norm();
                        if n == 0.0 || !n.is_finite() {
                            acc = f64::NEG_INFINITY;
                            break;
                        }
                        acc += n.ln();
                        m /= n;
                    }
                }
                if b + 1 == BATCHES && acc.is_finite() {
                    acc += linalg::spectral_norm(&m).ln();
                }
                out[b][0] = acc;
                if !acc.is_finite() {
                    for rest in out.iter_mut().skip(b + 1) {
                        rest[0] = f64::NEG_INFINITY;
                    }
                    break;
                }
            }
            out
        })
        .collect();
    let (mean, err) = pool(&incs, &bounds);
    let kappa = mean[0];
    Ok(TopExponent {
        kappa,
        stderr: err[0],
        floor_hit: !(kappa > opts.floor),
    })
}

/// Which estimator produced a spectrum report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumMethod {
    Qr,
    Exterior,
    Singular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub method: SpectrumMethod,
    /// Distinct exponents, decreasing, clamped at `floor`.
    pub exponents: Vec<f64>,
    pub multiplicities: Vec<usize>,
    /// Standard error of each grouped exponent.
    pub stderr: Vec<f64>,
    /// One estimate per index before grouping.
    pub raw: Vec<f64>,
    pub raw_stderr: Vec<f64>,
    /// `partial_sums[q-1] = raw[0] + ... + raw[q-1]`.
    pub partial_sums: Vec<f64>,
    pub floor: f64,
    /// Number of raw exponents strictly above the floor.
    pub above_floor: usize,
    pub n_steps: usize,
    pub trajectories: usize,
    /// Indices `i` where `raw[i]` and `raw[i+1]` differ by less than three combined standard errors.
    pub unresolved_gaps: Vec<usize>,
}

impl SpectrumReport {
    pub(crate) fn from_raw(
        method: SpectrumMethod,
        raw: Vec<f64>,
        raw_stderr: Vec<f64>,
        opts: &SpectrumOptions,
    ) -> SpectrumReport {
        let raw: Vec<f64> = raw.into_iter().map(|x| x.max(opts.floor)).collect();
        let mut partial_sums = Vec::with_capacity(raw.len());
        let mut acc = 0.0;
        for x in &raw {
            acc += x;
            partial_sums.push(acc);
        }
        let (exponents, multiplicities, stderr, unresolved_gaps) = group(&raw, &raw_stderr);
        SpectrumReport {
            method,
            above_floor: raw.iter().filter(|&&x| x > opts.floor).count(),
            exponents,
            multiplicities,
            stderr,
            raw,
            raw_stderr,
            partial_sums,
            floor: opts.floor,
            n_steps: opts.n_steps,
            trajectories: opts.trajectories,
            unresolved_gaps,
        }
    }

    /// Smallest gap between consecutive raw exponents among the first `k`.
    pub fn min_gap(&self, k: usize) -> f64 {
        self.raw
            .windows(2)
            .take(k.saturating_sub(1))
            .map(|w| w[0] - w[1])
            .fold(f64::INFINITY, f64::min)
    }
}

/// Threshold below which adjacent estimates are treated as one exponent.
pub fn gap_tolerance(se_a: f64, se_b: f64) -> f64 {
    MIN_GAP_TOL.max(3.0 * se_a.hypot(se_b))
}

type Grouped = (Vec<f64>, Vec<usize>, Vec<f64>, Vec<usize>);

/// Groups a decreasing sequence of estimates into distinct values with multiplicities.
pub fn group(raw: &[f64], se: &[f64]) -> Grouped {
    let mut values = Vec::new();
    let mut mult = Vec::new();
    let mut errs = Vec::new();
    let mut unresolved = Vec::new();
    let mut i = 0;
    while i < raw.len() {
        let mut j = i + 1;
        while j < raw.len() && (raw[j - 1] - raw[j]).abs() < gap_tolerance(se[j - 1], se[j]) {
            j += 1;
        }
        let n = (j - i) as f64;
        values.push(raw[i..j].iter().sum::<f64>() / n);
        errs.push((se[i..j].iter().map(|s| s * s).sum::<f64>()).sqrt() / n);
        mult.push(j - i);
        i = j;
    }
    for k in 0..raw.len().saturating_sub(1) {
        let comb = se[k].hypot(se[k + 1]);
        if comb > 0.0 && (raw[k] - raw[k + 1]).abs() < 3.0 * comb {
            unresolved.push(k);
        }
    }
    (values, mult, errs, unresolved)
}

/// First `p` exponents by propagating a `p`-frame with QR reorthonormalisation.
pub fn lyapunov_spectrum_qr(
    t: &RandomOperator,
    p: usize,
    opts: &SpectrumOptions,
) -> Result<SpectrumReport, SpectrumError> {
    opts.check()?;
    let d = t.dim();
    if p == 0 || p > d {
        return Err(SpectrumError::FrameSize { p, d });
    }
    let bounds = opts.batch_bounds();
    let incs: Vec<Vec<Vec<f64>>> = (0..opts.trajectories)
        .into_par_iter()
        .map(|j| {
            let (mut pt, mut r) = start_point(t, opts, j);
            let mut q = gaussian_matrix(d, 1.0, &mut r)
                .qr()
                .q()
                .columns(0, p)
                .into_owned();
            let mut y = DMatrix::zeros(d, p);
            // let the random frame align with the fast directions before accumulating
            for _ in 0..opts.n_steps / 10 {
                y.gemm(1.0, t.matrix_at(&pt), &q, 0.0);
                pt = t.base().orbit(&pt, 1);
                q = y.clone().qr().q();
            }
            let mut out = vec![vec![0.0; p]; BATCHES];
            for b in 0..BATCHES {
                for _ in bounds[b]..bounds[b + 1] {
                    y.gemm(1.0, t.matrix_at(&pt), &q, 0.0);
                    pt = t.base().orbit(&pt, 1);
                    let qr = y.clone().qr();
                    let rr = qr.r();
                    for i in 0..p {
                        out[b][i] += rr[(i, i)].abs().ln();
                    }
                    q = qr.q();
                }
            }
            out
        })
        .collect();
    let (mean, err) = pool(&incs, &bounds);
    Ok(SpectrumReport::from_raw(
        SpectrumMethod::Qr,
        mean,
        err,
        opts,
    ))
}

/// `(1/n) log sigma_i(T^n_omega)` for every `i`, descending, clamped at `floor`.
pub fn met_limit_singular(
    t: &RandomOperator,
    p: &BasePoint,
    n: usize,
    floor: f64,
) -> Result<Vec<f64>, SpectrumError> {
    if n == 0 {
        return Err(SpectrumError::EmptyHorizon);
    }
    let d = t.dim();
    let mut q = Matrix::identity(d, d);
    let mut graded = GradedRows::identity(d);
    let mut pt = p.clone();
    for _ in 0..n {
        let qr = (t.matrix_at(&pt) * &q).qr();
        graded.left_multiply(&qr.r());
        q = qr.q();
        pt = t.base().orbit(&pt, 1);
    }
    Ok(graded
        .log_singular_values()
        .into_iter()
        .map(|x| (x / n as f64).max(floor))
        .collect())
}

/// Spectrum report built from `met_limit_singular` over independent orbits.
pub fn singular_value_spectrum(
    t: &RandomOperator,
    opts: &SpectrumOptions,
) -> Result<SpectrumReport, SpectrumError> {
    opts.check()?;
    let per: Vec<Vec<f64>> = (0..opts.trajectories)
        .into_par_iter()
        .map(|j| {
            let (p, _) = start_point(t, opts, j);
            met_limit_singular(t, &p, opts.n_steps, f64::NEG_INFINITY).expect("positive horizon")
        })
        .collect();
    let d = t.dim();
    let k = per.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|i| per.iter().map(|v| v[i]).sum::<f64>() / k)
        .collect();
    let err: Vec<f64> = (0..d)
        .map(|i| {
            if per.len() < 2 || !mean[i].is_finite() {
                return 0.0;
            }
            let var = per.iter().map(|v| (v[i] - mean[i]).powi(2)).sum::<f64>() / (k - 1.0);
            (var / k).sqrt()
        })
        .collect();
    Ok(SpectrumReport::from_raw(
        SpectrumMethod::Singular,
        mean,
        err,
        opts,
    ))
}

/// Estimated top Oseledets direction with its equivariance check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OseledetsTop {
    pub vector: Vec<f64>,
    /// `min over signs of |normalise(T(omega) v(omega)) -/+ v(theta omega)|`.
    pub equivariance_residual: f64,
    /// `(1/n)(log sigma_1 - log sigma_2)` of the backward product.
    pub gap: f64,
}

fn backward_top_direction(t: &RandomOperator, p: &BasePoint, n_back: usize) -> (Vector, f64) {
    let start = t.base().orbit(p, -(n_back as i64));
    let d = t.dim();
    let mut m = Matrix::identity(d, d);
    let mut pt = start.clone();
    for step in 0..n_back {
        m = t.matrix_at(&pt) * m;
        pt = t.base().orbit(&pt, 1);
        if (step + 1) % RENORM_EVERY == 0 {
            let n = m.norm();
            if n > 0.0 {
                m /= n;
            }
        }
    }
    let s = linalg::svd(&m);
    let mut u = s.u.column(0).into_owned();
    let lead = u.iter().copied().find(|x| x.abs() > 1e-12).unwrap_or(1.0);
    if lead < 0.0 {
        u.neg_mut();
    }
    let gap = if d > 1 {
        let sv =
            met_limit_singular(t, &start, n_back, f64::NEG_INFINITY).expect("positive horizon");
        sv[0] - sv[1]
    } else {
        f64::INFINITY
    };
    (u, gap)
}

/// Push-forward of the top singular direction of `T^{n_back}` started at `theta^{-n_back} omega`.
pub fn oseledets_top_space(
    t: &RandomOperator,
    p: &BasePoint,
    n_back: usize,
) -> Result<OseledetsTop, SpectrumError> {
    if n_back == 0 {
        return Err(SpectrumError::EmptyHorizon);
    }
    let (v, gap) = backward_top_direction(t, p, n_back);
    if gap < MIN_GAP_TOL {
        return Err(SpectrumError::NonSimpleTop {
            gap,
            tol: MIN_GAP_TOL,
        });
    }
    let (w, _) = backward_top_direction(t, &t.base().orbit(p, 1), n_back);
    let pushed = t.matrix_at(p) * &v;
    Ok(OseledetsTop {
        equivariance_residual: linalg::direction_residual(&pushed, &w),
        vector: v.iter().copied().collect(),
        gap,
    })
}
