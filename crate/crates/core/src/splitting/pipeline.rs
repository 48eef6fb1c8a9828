//! Invariant cones built from a dominated rank-one splitting, and their use
//! on every exterior power up to `k` to bound how far the top `k` exponents
//! stay simple.

use serde::{Deserialize, Serialize};

use crate::cones::{
    invariance_certificate, is_prime, robustness_radius_log, ConeFamily, InvarianceCertificate,
    RobustnessRadius,
};
use crate::exterior::{compound_operator, partial_sum_exponent};
use crate::linalg::{self, Matrix, Vector};
use crate::opcore::{gaussian_matrix, RandomOperator, RandomVector};
use crate::rng;
use crate::spectrum::{gap_tolerance, oseledets_top_space};

use super::separation::{top_block_separation, wedge_witness, IntegralSeparationCertificate};
use super::{
    angle_separation, dominated_check, orthonormal, to_exponential, AngleCertificate,
    DominatedCertificate, DominationConstants, Frames, SplittingError, SplittingOptions,
    SplittingWitness,
};

/// Longest cone horizon attempted.
const MAX_CONE_PERIOD: usize = 64;
const DIRECTION_STREAM: u64 = 2_000_000;
const REFERENCE_STREAM: u64 = 3_000_000;
/// Probe points along the perturbation direction.
const PROBES: usize = 9;
/// Smallest overlap of probe directions with the unperturbed ones.
const OVERLAP_MIN: f64 = 0.9;

/// `eta = min(1, delta^{2N} / (2 K^2 e^{2 alpha N} |T|^{2N}))`, evaluated in logs.
pub fn eta_constant(delta: f64, prefactor: f64, alpha: f64, period: usize, norm: f64) -> f64 {
    let n = period as f64;
    let log_eta = 2.0 * n * delta.ln()
        - std::f64::consts::LN_2
        - 2.0 * prefactor.ln()
        - 2.0 * alpha * n
        - 2.0 * n * norm.ln();
    log_eta.exp().min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeSplittingReport {
    pub dominated: DominatedCertificate,
    /// Exponential form of the constants the cone is built from.
    pub constants: DominationConstants,
    /// Smallest `N` with `K e^{alpha N} >= 2`.
    pub period: usize,
    pub composite_period: bool,
    pub certificate: InvarianceCertificate,
    /// `log R`, the measured supremum of `beta` over the sampled cone.
    pub log_beta_bound: f64,
    /// `log(3 / delta^N)`.
    pub log_proof_bound: f64,
    pub within_proof_bound: bool,
}

#[derive(Clone, Debug)]
pub struct ConeFromSplitting {
    pub cone: ConeFamily,
    pub report: ConeSplittingReport,
}

fn exponential_parts(c: DominationConstants) -> (f64, f64, f64) {
    match c {
        DominationConstants::Exponential {
            delta,
            prefactor,
            alpha,
        } => (delta, prefactor, alpha),
        DominationConstants::Periodic { .. } => unreachable!("converted before use"),
    }
}

/// Builds the graph cone `{gamma e + u : u in F, |u| <= gamma / 2}` around the
/// top direction of a dominated rank-one splitting and certifies that `T^N`
/// maps it into itself.
pub fn cone_from_splitting(
    t: &RandomOperator,
    witness: &SplittingWitness,
    opts: &SplittingOptions,
) -> Result<ConeFromSplitting, SplittingError> {
    if witness.rank != 1 {
        return Err(SplittingError::Rank {
            rank: witness.rank,
            dim: 1,
        });
    }
    let Frames::Explicit { top, complement } = &witness.frames else {
        return Err(SplittingError::EstimatedFrames);
    };
    let dominated = dominated_check(t, witness, opts.horizon, opts.samples, opts.seed)?;
    if !dominated.pass {
        return Err(SplittingError::NotDominated(Box::new(dominated)));
    }
    let d = t.dim();
    let norm = t.ess_sup_norm();
    let constants = match dominated.certified {
        Some(c) => to_exponential(c, norm)?,
        // one-dimensional space: nothing to dominate, any cone around the axis is invariant
        None => DominationConstants::Exponential {
            delta: dominated.delta,
            prefactor: 2.0,
            alpha: 1.0,
        },
    };
    let (delta, prefactor, alpha) = exponential_parts(constants);
    let period = (((2.0f64).ln() - prefactor.ln()) / alpha).ceil().max(1.0);
    if !(period <= MAX_CONE_PERIOD as f64) {
        return Err(SplittingError::InvalidParameter {
            name: "period",
            value: period,
        });
    }
    let period = period as usize;

    let axis_pieces = top
        .pieces()
        .iter()
        .enumerate()
        .map(|(i, (set, m))| {
            let q = orthonormal(m).ok_or(SplittingError::DegenerateFrame(i))?;
            let mut e: Vector = q.column(0).into_owned();
            // keep the orientation of the supplied column
            if e.dot(&m.column(0)) < 0.0 {
                e.neg_mut();
            }
            Ok((set.clone(), e))
        })
        .collect::<Result<Vec<_>, SplittingError>>()?;
    let axis = RandomVector::new(t.base().clone(), d, axis_pieces, true)?;
    let cone = match complement {
        Some(frames) if d > 1 => ConeFamily::graph(&axis, frames)?,
        _ => ConeFamily::graph_orthogonal(&axis)?,
    };
    let certificate = invariance_certificate(t, &cone, period, opts.cone_samples, opts.seed)?;
    if !certificate.ok {
        return Err(SplittingError::ConeNotInvariant {
            horizon: period,
            counterexample: certificate.counterexample.clone(),
        });
    }
    let log_proof_bound = 3f64.ln() - period as f64 * delta.ln();
    let log_beta_bound = certificate.log_beta_sup;
    Ok(ConeFromSplitting {
        cone,
        report: ConeSplittingReport {
            dominated,
            constants,
            period,
            composite_period: !is_prime(period),
            certificate,
            log_beta_bound,
            log_proof_bound,
            within_proof_bound: log_beta_bound
                <= log_proof_bound + 1e-9 * log_proof_bound.abs().max(1.0),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub degree: usize,
    pub cone: ConeSplittingReport,
    pub angle: AngleCertificate,
    /// Radius for the compound cocycle.
    pub compound_robustness: RobustnessRadius,
    /// Radius for `T` itself: `i eps (|T| + eps)^(i-1)` stays within the compound radius.
    pub epsilon: f64,
    pub log_epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbePoint {
    pub t: f64,
    /// `kappa` of the `i`-th exterior power for `i = 1..=k` (and `k + 1` when it exists).
    pub partial_sums: Vec<f64>,
    pub partial_stderr: Vec<f64>,
    pub exponents: Vec<f64>,
    pub gaps: Vec<f64>,
    pub tolerances: Vec<f64>,
    /// `|<w_i(t), w_i(0)>|` for the top direction `w_i` of each exterior power.
    pub direction_overlap: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub degree: usize,
    pub delta: f64,
    pub prefactor: f64,
    pub alpha: f64,
    pub eta: f64,
    pub period: usize,
    pub log_beta_bound: f64,
    pub epsilon: f64,
    pub min_gap: Option<f64>,
    pub fit_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremBReport {
    pub rank: usize,
    pub separation: IntegralSeparationCertificate,
    pub levels: Vec<LevelReport>,
    pub epsilon: f64,
    pub log_epsilon: f64,
    /// Unit perturbation direction, row-major.
    pub direction: Vec<f64>,
    pub probes: Vec<ProbePoint>,
    /// Cubic least-squares coefficients of `kappa_i(t)` in the rescaled variable `2t / eps`.
    pub cubic_coefficients: Vec<[f64; 4]>,
    pub fit_residuals: Vec<f64>,
    pub min_gap: Option<f64>,
    pub min_direction_overlap: f64,
    pub directions_stable: bool,
    /// The probe at `t = 0` gives the unperturbed partial sums bit for bit.
    pub unperturbed_reproduced: bool,
}

impl TheoremBReport {
    pub fn summary_rows(&self) -> Vec<SummaryRow> {
        self.levels
            .iter()
            .zip(&self.fit_residuals)
            .map(|(l, &fit_residual)| {
                let (delta, prefactor, alpha) = exponential_parts(l.cone.constants);
                SummaryRow {
                    degree: l.degree,
                    delta,
                    prefactor,
                    alpha,
                    eta: l.angle.eta,
                    period: l.cone.period,
                    log_beta_bound: l.cone.log_beta_bound,
                    epsilon: l.epsilon,
                    min_gap: self.min_gap,
                    fit_residual,
                }
            })
            .collect()
    }
}

/// Largest `log eps` with `degree * eps * (norm + eps)^(degree-1) <= e^{log_target}`.
fn lift_radius(log_target: f64, norm: f64, degree: usize) -> f64 {
    if degree == 1 {
        return log_target;
    }
    let n = degree as f64;
    let f = |x: f64| x + n.ln() + (n - 1.0) * (norm + x.exp()).ln();
    let (mut lo, mut hi) = (log_target - 1.0, log_target);
    let mut step = 1.0;
    while f(lo) > log_target {
        lo -= step;
        step *= 2.0;
    }
    while f(hi) <= log_target {
        hi += 1.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) <= log_target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Least-squares cubic through `(x_j, y_j)`; coefficients by increasing degree
/// and the largest absolute residual.
fn cubic_fit(xs: &[f64], ys: &[f64]) -> ([f64; 4], f64) {
    let a = Matrix::from_fn(xs.len(), 4, |r, c| xs[r].powi(c as i32));
    let b = Vector::from_column_slice(ys);
    let coef = a
        .clone()
        .svd(true, true)
        .solve(&b, 1e-14)
        .unwrap_or_else(|_| Vector::zeros(4));
    let residual = (&a * &coef - &b).amax();
    ([coef[0], coef[1], coef[2], coef[3]], residual)
}

/// Certifies integral separation of the leading `k` frame directions, builds
/// an invariant cone on each exterior power `i <= k`, and combines the
/// robustness radii into `eps`. Then samples `T + tE` at nine points of
/// `[-eps/2, eps/2]` along a random unit direction `E`, checking that the top
/// exponents stay simple and their directions stay put.
pub fn theorem_b_pipeline(
    t: &RandomOperator,
    k: usize,
    frames: &[RandomVector],
    opts: &SplittingOptions,
) -> Result<TheoremBReport, SplittingError> {
    let d = t.dim();
    let separation = top_block_separation(t, frames, k, opts.horizon, opts.samples, opts.seed)?;
    if !separation.pass {
        return Err(SplittingError::NotSeparated {
            split: separation.counterexample.as_ref().map_or(0, |c| c.split),
        });
    }
    let norm = t.ess_sup_norm();
    let mut levels = Vec::with_capacity(k);
    for degree in 1..=k {
        let compound = compound_operator(t, degree)?;
        let witness = wedge_witness(t, frames, degree)?;
        let built = cone_from_splitting(&compound, &witness, opts)?;
        let compound_robustness = robustness_radius_log(
            &compound,
            &built.cone,
            built.report.period,
            built.report.certificate.log_beta_sup,
        )?;
        let angle = angle_separation(
            &compound,
            &witness.clone().with_constants(built.report.constants),
            built.report.period,
            opts.samples,
            opts.seed,
        )?;
        let log_epsilon = lift_radius(compound_robustness.log_epsilon, norm, degree);
        levels.push(LevelReport {
            degree,
            cone: built.report,
            angle,
            compound_robustness,
            epsilon: log_epsilon.exp(),
            log_epsilon,
        });
    }
    let log_epsilon = levels
        .iter()
        .map(|l| l.log_epsilon)
        .fold(f64::INFINITY, f64::min);
    let epsilon = log_epsilon.exp();

    let raw = gaussian_matrix(d, 1.0, &mut rng::stream(opts.seed, DIRECTION_STREAM));
    let direction = &raw / linalg::spectral_norm(&raw);
    let reference = t
        .base()
        .sample_point(&mut rng::stream(opts.seed, REFERENCE_STREAM));
    let depth = (k + 1).min(d);
    let unperturbed: Vec<f64> = (1..=depth)
        .map(|i| partial_sum_exponent(t, i, &opts.spectrum).map(|e| e.kappa))
        .collect::<Result<_, _>>()?;

    let mut probes = Vec::with_capacity(PROBES);
    for j in 0..PROBES {
        let shift = -0.5 * epsilon + j as f64 * epsilon / 8.0;
        let step = &direction * shift;
        let s = t.map_matrices(|m| m + &step);
        let mut partial_sums = Vec::with_capacity(depth);
        let mut partial_stderr = Vec::with_capacity(depth);
        for i in 1..=depth {
            let e = partial_sum_exponent(&s, i, &opts.spectrum)?;
            partial_sums.push(e.kappa);
            partial_stderr.push(e.stderr);
        }
        let exponents: Vec<f64> = (0..depth)
            .map(|i| partial_sums[i] - if i == 0 { 0.0 } else { partial_sums[i - 1] })
            .collect();
        let exp_stderr: Vec<f64> = (0..depth)
            .map(|i| partial_stderr[i].hypot(if i == 0 { 0.0 } else { partial_stderr[i - 1] }))
            .collect();
        let pairs = k.min(d - 1);
        let mut gaps = Vec::with_capacity(pairs);
        let mut tolerances = Vec::with_capacity(pairs);
        for i in 0..pairs {
            let gap = exponents[i] - exponents[i + 1];
            let tol = gap_tolerance(exp_stderr[i], exp_stderr[i + 1]);
            if !(gap > tol) {
                return Err(SplittingError::SimplicityLost {
                    t: shift,
                    index: i + 1,
                    gap,
                    tol,
                });
            }
            gaps.push(gap);
            tolerances.push(tol);
        }
        let mut directions = Vec::with_capacity(k);
        for i in 1..=k {
            let top =
                oseledets_top_space(&compound_operator(&s, i)?, &reference, opts.frame_horizon)?;
            directions.push(Vector::from_vec(top.vector));
        }
        probes.push((
            ProbePoint {
                t: shift,
                partial_sums,
                partial_stderr,
                exponents,
                gaps,
                tolerances,
                direction_overlap: Vec::new(),
            },
            directions,
        ));
    }
    let centre = PROBES / 2;
    let base_directions = probes[centre].1.clone();
    let probes: Vec<ProbePoint> = probes
        .into_iter()
        .map(|(mut p, dirs)| {
            p.direction_overlap = dirs
                .iter()
                .zip(&base_directions)
                .map(|(a, b)| a.dot(b).abs())
                .collect();
            p
        })
        .collect();
    let unperturbed_reproduced = probes[centre].t == 0.0
        && probes[centre]
            .partial_sums
            .iter()
            .zip(&unperturbed)
            .all(|(a, b)| a.to_bits() == b.to_bits());
    let min_direction_overlap = probes
        .iter()
        .flat_map(|p| p.direction_overlap.iter().copied())
        .fold(1.0, f64::min);
    let xs: Vec<f64> = (0..PROBES).map(|j| -1.0 + j as f64 / 4.0).collect();
    let (cubic_coefficients, fit_residuals): (Vec<[f64; 4]>, Vec<f64>) = (0..k)
        .map(|i| {
            let ys: Vec<f64> = probes
                .iter()
                .map(|p| p.partial_sums[i].max(opts.spectrum.floor * (i + 1) as f64))
                .collect();
            cubic_fit(&xs, &ys)
        })
        .unzip();
    let min_gap = probes
        .iter()
        .flat_map(|p| p.gaps.iter().copied())
        .reduce(f64::min);
    Ok(TheoremBReport {
        rank: k,
        separation,
        levels,
        epsilon,
        log_epsilon,
        direction: crate::opcore::row_major(&direction),
        probes,
        cubic_coefficients,
        fit_residuals,
        min_gap,
        min_direction_overlap,
        directions_stable: min_direction_overlap > OVERLAP_MIN,
        unperturbed_reproduced,
    })
}
