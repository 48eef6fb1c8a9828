//! Integral separation of a full invariant frame, and domination of the
//! wedge of its leading directions on the exterior power.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base::{itinerary, BasePoint, BaseSet, PartitionMap};
use crate::exterior::{compound_operator, subsets, wedge_coordinates};
use crate::linalg::{self, Matrix, Vector};
use crate::opcore::{RandomOperator, RandomVector};

use super::{
    check_counts, dominated_check, fit_paths, orthonormal, ratio_path, sample_points,
    DominatedCertificate, GrowthFit, SplittingError, SplittingWitness, ALPHA_TOL, INVARIANCE_TOL,
};

/// Growth of the leading `split` directions over the block they are compared with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFit {
    pub split: usize,
    /// Number of directions on the slow side.
    pub slow: usize,
    pub fit: GrowthFit,
    /// `fit.alpha - 3 stderr`.
    pub alpha: f64,
    pub prefactor: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparationCounterexample {
    /// `split` leading directions against the next block.
    pub split: usize,
    pub step: usize,
    pub sample: usize,
    pub point: BasePoint,
    pub log_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegralSeparationCertificate {
    pub pass: bool,
    pub dim: usize,
    /// Leading directions covered; `dim` for the whole frame.
    pub top: usize,
    pub horizon: usize,
    pub samples: usize,
    pub seed: u64,
    /// Smallest singular value of `T` over the pieces.
    pub delta: f64,
    /// `e_1..e_i` against `e_{i+1}..e_d`.
    pub direct: Vec<SplitFit>,
    /// `e_1..e_{m-1}` against `e_m` alone.
    pub inductive: Vec<SplitFit>,
    pub direct_pass: bool,
    pub inductive_pass: bool,
    pub routes_agree: bool,
    /// Smallest certified rate and prefactor over the direct splits.
    pub alpha: f64,
    pub prefactor: f64,
    pub invariance_residual: f64,
    pub counterexample: Option<SeparationCounterexample>,
}

/// Per-piece `d x d` matrix whose columns are the frame directions in order.
fn frame_matrix(
    t: &RandomOperator,
    frames: &[RandomVector],
) -> Result<PartitionMap<Matrix>, SplittingError> {
    let d = t.dim();
    if frames.len() != d {
        return Err(SplittingError::FrameCount {
            expected: d,
            got: frames.len(),
        });
    }
    for f in frames {
        if f.dim() != d {
            return Err(SplittingError::FrameShape {
                piece: 0,
                rows: f.dim(),
                cols: 1,
                dim: d,
                expected: 1,
            });
        }
    }
    let mut acc: PartitionMap<Vec<Vector>> = frames[0].map().map_values(|v| vec![v.clone()]);
    for f in &frames[1..] {
        acc = acc.refine(f.map()).map_values(|(vs, v)| {
            let mut out = vs.clone();
            out.push(v.clone());
            out
        });
    }
    let mut pieces = Vec::with_capacity(acc.len());
    for (i, (set, vs)) in acc.into_pieces().into_iter().enumerate() {
        let m = Matrix::from_columns(&vs);
        if orthonormal(&m).is_none() {
            return Err(SplittingError::DegenerateFrame(i));
        }
        pieces.push((set, m));
    }
    Ok(PartitionMap::from_pieces_unchecked(pieces))
}

/// Worst direction residual of `T e_j(omega)` against `e_j(theta omega)`.
fn frame_invariance(t: &RandomOperator, frames: &PartitionMap<Matrix>) -> f64 {
    let sys = t.base();
    let fs: Vec<BaseSet> = frames.pieces().iter().map(|(s, _)| s.clone()).collect();
    let os: Vec<BaseSet> = t.pieces().iter().map(|(s, _)| s.clone()).collect();
    let layers: Vec<(&[BaseSet], i64)> = vec![(&fs, 0), (&os, 0), (&fs, 1)];
    itinerary(sys, &sys.whole(), &layers)
        .into_iter()
        .map(|(_, l)| {
            let b = &frames.pieces()[l[0]].1;
            let b1 = &frames.pieces()[l[2]].1;
            let m = &t.pieces()[l[1]].1;
            (0..b.ncols())
                .map(|j| {
                    let w = m * b.column(j);
                    if w.norm() == 0.0 {
                        0.0
                    } else {
                        linalg::direction_residual(&w, &b1.column(j).into_owned())
                    }
                })
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

fn columns(b: &Matrix, from: usize, to: usize) -> Matrix {
    let q = b.columns(from, to - from).into_owned();
    orthonormal(&q).expect("frame checked nondegenerate")
}

/// Integral separation of the leading `top` directions of an invariant frame:
/// every prefix `e_1..e_i` with `i <= top` dominates the rest (direct route),
/// and each `e_m` with `m <= top` is dominated by `e_1..e_{m-1}` (inductive route).
pub fn top_block_separation(
    t: &RandomOperator,
    frames: &[RandomVector],
    top: usize,
    n_max: usize,
    samples: usize,
    seed: u64,
) -> Result<IntegralSeparationCertificate, SplittingError> {
    check_counts(n_max, samples)?;
    let d = t.dim();
    if top == 0 || top > d {
        return Err(SplittingError::Rank { rank: top, dim: d });
    }
    let basis = frame_matrix(t, frames)?;
    let invariance_residual = frame_invariance(t, &basis);
    if invariance_residual > INVARIANCE_TOL {
        return Err(SplittingError::NotInvariant {
            residual: invariance_residual,
        });
    }
    let delta = t
        .pieces()
        .iter()
        .map(|(_, m)| linalg::singular_values(m).last().copied().unwrap_or(0.0))
        .fold(f64::INFINITY, f64::min);
    let last_split = top.min(d - 1);
    // (split, slow range) pairs
    let mut jobs: Vec<(usize, usize, usize)> = (1..=last_split).map(|i| (i, i, d)).collect();
    let direct_count = jobs.len();
    jobs.extend((2..=last_split).map(|m| (m - 1, m - 1, m)));
    if top < d {
        // the last inductive level pairs the whole top block with the rest
        jobs.push((top, top, d));
    } else if d >= 2 {
        jobs.push((d - 1, d - 1, d));
    }
    let points = sample_points(t, samples, seed);
    let paths: Vec<Vec<Vec<f64>>> = points
        .par_iter()
        .map(|p| {
            let b = basis.value_at(t.base(), p);
            jobs.iter()
                .map(|&(split, lo, hi)| {
                    let slow_at = |q: &BasePoint| columns(basis.value_at(t.base(), q), lo, hi);
                    ratio_path(
                        t,
                        p,
                        &columns(b, 0, split),
                        &columns(b, lo, hi),
                        n_max,
                        &slow_at,
                    )
                })
                .collect()
        })
        .collect();
    let fits: Vec<(SplitFit, Option<SeparationCounterexample>)> = jobs
        .iter()
        .enumerate()
        .map(|(j, &(split, lo, hi))| {
            let per: Vec<Vec<f64>> = paths.iter().map(|p| p[j].clone()).collect();
            let fit = fit_paths(&per);
            let alpha = fit.certified_alpha();
            let pass = alpha > ALPHA_TOL && delta > 0.0;
            let prefactor = fit.prefactor_for(alpha);
            let witness = (!pass).then(|| {
                let (sample, log_ratio) = per.iter().map(|p| p[n_max - 1]).enumerate().fold(
                    (0, f64::INFINITY),
                    |b, (i, x)| if x < b.1 { (i, x) } else { b },
                );
                SeparationCounterexample {
                    split,
                    step: n_max,
                    sample,
                    point: points[sample].clone(),
                    log_ratio,
                }
            });
            (
                SplitFit {
                    split,
                    slow: hi - lo,
                    fit,
                    alpha,
                    prefactor,
                    pass,
                },
                witness,
            )
        })
        .collect();
    let counterexample = fits.iter().find_map(|f| f.1.clone());
    let direct: Vec<SplitFit> = fits[..direct_count].iter().map(|f| f.0.clone()).collect();
    let inductive: Vec<SplitFit> = fits[direct_count..].iter().map(|f| f.0.clone()).collect();
    let direct_pass = delta > 0.0 && direct.iter().all(|f| f.pass);
    let inductive_pass = delta > 0.0 && inductive.iter().all(|f| f.pass);
    Ok(IntegralSeparationCertificate {
        pass: direct_pass && inductive_pass,
        dim: d,
        top,
        horizon: n_max,
        samples,
        seed,
        delta,
        alpha: direct.iter().map(|f| f.alpha).fold(f64::INFINITY, f64::min),
        prefactor: direct
            .iter()
            .map(|f| f.prefactor)
            .fold(f64::INFINITY, f64::min),
        routes_agree: direct_pass == inductive_pass,
        direct,
        inductive,
        direct_pass,
        inductive_pass,
        invariance_residual,
        counterexample,
    })
}

/// [`top_block_separation`] over the whole frame.
pub fn integral_separation_check(
    t: &RandomOperator,
    frames: &[RandomVector],
    n_max: usize,
    samples: usize,
    seed: u64,
) -> Result<IntegralSeparationCertificate, SplittingError> {
    top_block_separation(t, frames, t.dim(), n_max, samples, seed)
}

/// Witness on the `k`-th exterior power: `E` is spanned by `e_1 ^ ... ^ e_k`
/// and `F` by the wedges of every other `k`-subset of the frame.
pub fn wedge_witness(
    t: &RandomOperator,
    frames: &[RandomVector],
    k: usize,
) -> Result<SplittingWitness, SplittingError> {
    let d = t.dim();
    if k == 0 || k > d {
        return Err(SplittingError::Rank { rank: k, dim: d });
    }
    let basis = frame_matrix(t, frames)?;
    let sets = subsets(d, k);
    let mut tops = Vec::with_capacity(basis.len());
    let mut rests = Vec::with_capacity(basis.len());
    for (set, b) in basis.pieces() {
        let wedge = |idx: &[usize]| -> Result<Vector, SplittingError> {
            let vs: Vec<Vector> = idx.iter().map(|&j| b.column(j).into_owned()).collect();
            Ok(wedge_coordinates(&vs)?)
        };
        let lead = wedge(&sets[0])?;
        let lead = &lead / lead.norm();
        let others: Vec<Vector> = sets[1..]
            .iter()
            .map(|s| wedge(s))
            .collect::<Result<_, _>>()?;
        tops.push((set.clone(), Matrix::from_columns(&[lead])));
        rests.push((
            set.clone(),
            if others.is_empty() {
                Matrix::zeros(sets.len(), 0)
            } else {
                Matrix::from_columns(&others)
            },
        ));
    }
    SplittingWitness::explicit(
        PartitionMap::from_pieces_unchecked(tops),
        Some(PartitionMap::from_pieces_unchecked(rests)),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExteriorTransferCertificate {
    pub pass: bool,
    pub degree: usize,
    pub separation: IntegralSeparationCertificate,
    pub dominated: DominatedCertificate,
    /// The exterior power is one-dimensional, so the complement is trivial.
    pub vacuous: bool,
}

/// Checks that separation of the leading `k` frame directions makes the wedge
/// `e_1 ^ ... ^ e_k` dominate every other wedge of the frame under the
/// `k`-th compound cocycle.
pub fn exterior_domination_transfer(
    t: &RandomOperator,
    k: usize,
    frames: &[RandomVector],
    n_max: usize,
    samples: usize,
    seed: u64,
) -> Result<ExteriorTransferCertificate, SplittingError> {
    let separation = top_block_separation(t, frames, k, n_max, samples, seed)?;
    if !separation.pass {
        return Err(SplittingError::NotSeparated {
            split: separation.counterexample.as_ref().map_or(0, |c| c.split),
        });
    }
    let compound = compound_operator(t, k)?;
    let witness = wedge_witness(t, frames, k)?;
    let dominated = dominated_check(&compound, &witness, n_max, samples, seed)?;
    Ok(ExteriorTransferCertificate {
        pass: dominated.pass,
        degree: k,
        vacuous: dominated.vacuous,
        separation,
        dominated,
    })
}
