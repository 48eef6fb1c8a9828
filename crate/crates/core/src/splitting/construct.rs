//! Two spectrum-shaping perturbations: splitting a degenerate top block into
//! simple exponents, and installing a geometric ladder on a nearly null block.

use serde::{Deserialize, Serialize};

use crate::base::{itinerary, BaseSet};
use crate::exterior::spectrum_via_exterior;
use crate::linalg::{self, Matrix};
use crate::opcore::{gaussian_matrix, RandomOperator};
use crate::rng;
use crate::spectrum::{gap_tolerance, lyapunov_spectrum_qr, SpectrumReport};

use super::{fast_space, sample_points, slow_space, SplittingError, SplittingOptions};

/// Largest projector distance tolerated between block estimates at different points.
const CONSTANT_BLOCK_TOL: f64 = 1e-6;
/// Base points used to test whether the top block is constant.
const BLOCK_PROBES: usize = 8;
/// Stream offset for the perturbation draws.
const DRAW_STREAM: u64 = 4_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimpleBlockReport {
    pub rank: usize,
    pub epsilon: f64,
    /// The top exponents were already distinct.
    pub unchanged: bool,
    /// Norm of the projection onto the top block along its complement.
    pub projection_norm: f64,
    pub distance: f64,
    pub attempts: usize,
    pub before: SpectrumReport,
    pub after: SpectrumReport,
    /// Gaps between consecutive exponents up to the one after the block.
    pub gaps: Vec<f64>,
    pub tolerances: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SimpleBlock {
    pub operator: RandomOperator,
    pub report: SimpleBlockReport,
}

/// `(gaps, tolerances)` for indices `0..count` of the raw exponents.
fn gaps_of(rep: &SpectrumReport, count: usize) -> (Vec<f64>, Vec<f64>) {
    (0..count)
        .map(|i| {
            (
                rep.raw[i] - rep.raw[i + 1],
                gap_tolerance(rep.raw_stderr[i], rep.raw_stderr[i + 1]),
            )
        })
        .unzip()
}

fn projector_spread(frames: &[Matrix]) -> f64 {
    let projectors: Vec<Matrix> = frames.iter().map(|q| q * q.transpose()).collect();
    projectors
        .iter()
        .map(|p| linalg::spectral_norm(&(p - &projectors[0])))
        .fold(0.0, f64::max)
}

/// Separates the top `k` exponents of `T` by adding `(eps/M) Q_E G Pi` on
/// each piece, where `Pi` projects onto the top block `E` along its
/// complement, `M = |Pi|` and `G` is a random symmetric matrix of norm one.
/// The complement action is untouched and `|T~ - T| <= eps`. The top block
/// must be the same subspace at every point.
pub fn perturb_to_simple_block(
    t: &RandomOperator,
    k: usize,
    eps: f64,
    opts: &SplittingOptions,
) -> Result<SimpleBlock, SplittingError> {
    let d = t.dim();
    if k == 0 || k > d {
        return Err(SplittingError::Rank { rank: k, dim: d });
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(SplittingError::InvalidParameter {
            name: "epsilon",
            value: eps,
        });
    }
    let width = (k + 1).min(d);
    let before = lyapunov_spectrum_qr(t, width, &opts.spectrum)?;
    let (gaps, tolerances) = gaps_of(&before, width - 1);
    if k < d && gaps[k - 1] <= tolerances[k - 1] {
        return Err(SplittingError::NoTopBlock {
            rank: k,
            gap: gaps[k - 1],
            tol: tolerances[k - 1],
        });
    }
    let resolved = |g: &[f64], tol: &[f64]| g.iter().zip(tol).all(|(g, t)| g > t);
    if resolved(&gaps, &tolerances) {
        return Ok(SimpleBlock {
            operator: t.clone(),
            report: SimpleBlockReport {
                rank: k,
                epsilon: eps,
                unchanged: true,
                projection_norm: 1.0,
                distance: 0.0,
                attempts: 0,
                after: before.clone(),
                before,
                gaps,
                tolerances,
            },
        });
    }

    let points = sample_points(t, BLOCK_PROBES, opts.seed);
    let tops: Vec<Matrix> = points
        .iter()
        .map(|p| fast_space(t, p, k, opts.frame_horizon))
        .collect();
    let rests: Vec<Matrix> = points
        .iter()
        .map(|p| slow_space(t, p, k, opts.frame_horizon))
        .collect();
    let spread = projector_spread(&tops).max(if k < d { projector_spread(&rests) } else { 0.0 });
    if spread > CONSTANT_BLOCK_TOL {
        return Err(SplittingError::VaryingSplitting { distance: spread });
    }
    let (qe, qf) = (&tops[0], &rests[0]);
    let basis = Matrix::from_fn(d, d, |r, c| if c < k { qe[(r, c)] } else { qf[(r, c - k)] });
    let inverse = basis
        .try_inverse()
        .ok_or(SplittingError::DegenerateFrame(0))?;
    let coords = inverse.rows(0, k).into_owned();
    let projection_norm = linalg::spectral_norm(&(qe * &coords));
    let scale = eps / projection_norm;

    let mut last = (0.0, 0.0);
    for attempt in 0..opts.attempts {
        let patches: Vec<(BaseSet, Matrix)> = t
            .pieces()
            .iter()
            .enumerate()
            .map(|(j, (set, m))| {
                let mut r = rng::stream(
                    opts.seed,
                    DRAW_STREAM + (attempt * t.pieces().len() + j) as u64,
                );
                let raw = gaussian_matrix(k, 1.0, &mut r);
                let sym = (&raw + raw.transpose()) * 0.5;
                let g = &sym / linalg::spectral_norm(&sym);
                (set.clone(), m + qe * g * &coords * scale)
            })
            .collect();
        let candidate = t.patched(patches)?;
        let after = lyapunov_spectrum_qr(&candidate, width, &opts.spectrum)?;
        let (gaps, tolerances) = gaps_of(&after, width - 1);
        if resolved(&gaps, &tolerances) {
            let distance = t.distance(&candidate);
            return Ok(SimpleBlock {
                operator: candidate,
                report: SimpleBlockReport {
                    rank: k,
                    epsilon: eps,
                    unchanged: false,
                    projection_norm,
                    distance,
                    attempts: attempt + 1,
                    before,
                    after,
                    gaps,
                    tolerances,
                },
            });
        }
        let worst = gaps
            .iter()
            .zip(&tolerances)
            .min_by(|a, b| (a.0 - a.1).total_cmp(&(b.0 - b.1)))
            .map_or((0.0, 0.0), |(g, t)| (*g, *t));
        last = worst;
    }
    Err(SplittingError::GapUnresolved {
        attempts: opts.attempts,
        gap: last.0,
        tol: last.1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub epsilon: f64,
    /// Dimension of the block carrying the ladder.
    pub ladder_length: usize,
    pub distance: f64,
    /// `i log(eps/3)` for `i = 1..=ladder_length`.
    pub expected: Vec<f64>,
    /// Ladder values above the spectrum floor.
    pub resolvable: usize,
    /// Nearest QR exponent to each resolvable ladder value.
    pub recovered: Vec<f64>,
    /// Nearest exterior-power exponent to each resolvable ladder value.
    pub exterior: Vec<f64>,
    pub tolerances: Vec<f64>,
    pub methods_agree: bool,
    pub spectrum: SpectrumReport,
}

#[derive(Clone, Debug)]
pub struct TailConstruction {
    pub operator: RandomOperator,
    pub report: TailReport,
}

fn nearest(values: &[f64], stderr: &[f64], target: f64) -> (f64, f64) {
    values
        .iter()
        .zip(stderr)
        .min_by(|a, b| (a.0 - target).abs().total_cmp(&(b.0 - target).abs()))
        .map_or((f64::NAN, 0.0), |(v, s)| (*v, *s))
}

/// Replaces `T` on the block `F(omega)` of right singular directions with
/// singular value at most `eps/3` by the ladder `e_i(omega) -> (eps/3)^i
/// e_i(theta omega)` on an orthonormal frame of `F`, and checks that the
/// ladder exponents `i log(eps/3)` appear in the spectrum.
pub fn infinite_tail_construction(
    t: &RandomOperator,
    eps: f64,
    opts: &SplittingOptions,
) -> Result<TailConstruction, SplittingError> {
    if !(eps > 0.0 && eps < 3.0) {
        return Err(SplittingError::InvalidParameter {
            name: "epsilon",
            value: eps,
        });
    }
    let d = t.dim();
    let step = eps / 3.0;
    let svds: Vec<linalg::Svd> = t.pieces().iter().map(|(_, m)| linalg::svd(m)).collect();
    let length = svds
        .iter()
        .map(|s| s.sigma.iter().filter(|&&x| x <= step).count())
        .min()
        .unwrap_or(0);
    if length == 0 {
        return Err(SplittingError::NoAdmissibleSubblock);
    }
    // ladder frame per piece: the `length` weakest right singular directions
    let ladders: Vec<Matrix> = svds
        .iter()
        .map(|s| s.v.columns(d - length, length).into_owned())
        .collect();
    let sys = t.base();
    let sets: Vec<BaseSet> = t.pieces().iter().map(|(s, _)| s.clone()).collect();
    let layers: Vec<(&[BaseSet], i64)> = vec![(&sets, 0), (&sets, 1)];
    let weights = Matrix::from_diagonal(&crate::linalg::Vector::from_fn(length, |i, _| {
        step.powi(i as i32 + 1)
    }));
    let patches: Vec<(BaseSet, Matrix)> = itinerary(sys, &sys.whole(), &layers)
        .into_iter()
        .map(|(set, l)| {
            let m = &t.pieces()[l[0]].1;
            let (here, next) = (&ladders[l[0]], &ladders[l[1]]);
            let keep = m * (Matrix::identity(d, d) - here * here.transpose());
            (set, keep + next * &weights * here.transpose())
        })
        .collect();
    let operator = t.patched(patches)?;
    let distance = t.distance(&operator);

    let spectrum = lyapunov_spectrum_qr(&operator, d, &opts.spectrum)?;
    let exterior = spectrum_via_exterior(&operator, d, &opts.spectrum)?;
    let expected: Vec<f64> = (1..=length).map(|i| i as f64 * step.ln()).collect();
    let resolvable = expected
        .iter()
        .filter(|&&x| x > opts.spectrum.floor)
        .count();
    let mut recovered = Vec::with_capacity(resolvable);
    let mut from_exterior = Vec::with_capacity(resolvable);
    let mut tolerances = Vec::with_capacity(resolvable);
    let mut methods_agree = true;
    for (i, &target) in expected.iter().take(resolvable).enumerate() {
        let (qr, qr_se) = nearest(&spectrum.raw, &spectrum.raw_stderr, target);
        let tol = gap_tolerance(qr_se, 0.0);
        if !((qr - target).abs() <= tol) {
            return Err(SplittingError::LadderNotRecovered {
                index: i + 1,
                expected: target,
            });
        }
        let (ext, ext_se) = nearest(&exterior.report.raw, &exterior.report.raw_stderr, target);
        methods_agree &= (ext - target).abs() <= gap_tolerance(ext_se, 0.0);
        recovered.push(qr);
        from_exterior.push(ext);
        tolerances.push(tol);
    }
    Ok(TailConstruction {
        operator,
        report: TailReport {
            epsilon: eps,
            ladder_length: length,
            distance,
            expected,
            resolvable,
            recovered,
            exterior: from_exterior,
            tolerances,
            methods_agree,
            spectrum,
        },
    })
}
