//! Boosting an invariant direction and the shear conjugation that compares
//! the boosted cocycle with one contracting that direction.

use std::collections::BTreeMap;

use crate::base::{itinerary, BaseSet, PartitionMap};
use crate::linalg::{self, Matrix, Vector};
use crate::opcore::{RandomOperator, RandomVector};

use super::{
    check_dims, product, sets_of, step_pieces, Check, PerturbError, PerturbationResult,
    INPUT_COLLINEARITY_TOL,
};

/// Worst direction residual between `T e` and `e o theta`; a vanishing image counts as collinear.
fn invariance_residual(pieces: &[(BaseSet, Matrix, Vector, Vector)]) -> f64 {
    pieces
        .iter()
        .map(|(_, t, e, next)| {
            let w = t * e;
            if w.norm() == 0.0 {
                0.0
            } else {
                linalg::direction_residual(&w, next)
            }
        })
        .fold(0.0, f64::max)
}

/// Multiplies the `e`-component of `T` by `e^{2 alpha}` and keeps `T` on `e^perp`.
pub fn boost_direction(
    t: &RandomOperator,
    e: &RandomVector,
    alpha: f64,
) -> Result<PerturbationResult, PerturbError> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(PerturbError::InvalidParameter {
            name: "alpha",
            value: alpha,
        });
    }
    check_dims(t, e)?;
    let steps = step_pieces(t, e);
    let residual = invariance_residual(&steps);
    if residual > INPUT_COLLINEARITY_TOL {
        return Err(PerturbError::NotInvariant { residual });
    }
    let gain = (2.0 * alpha).exp_m1();
    let sys = t.base();
    let e_sets = sets_of(e.pieces());
    let op_sets = sets_of(t.pieces());
    let layers: Vec<(&[BaseSet], i64)> = vec![(&e_sets, 0), (&op_sets, 0)];
    let patches: Vec<(BaseSet, Matrix)> = itinerary(sys, &sys.whole(), &layers)
        .into_iter()
        .map(|(set, l)| {
            let (m, v) = (&t.pieces()[l[1]].1, &e.pieces()[l[0]].1);
            (set, m + (m * v) * v.transpose() * gain)
        })
        .collect();
    let s = t.patched(patches)?;
    let scalars: Vec<(BaseSet, f64)> = steps
        .into_iter()
        .map(|(set, m, v, next)| (set, (1.0 + gain) * (&m * &v).dot(&next)))
        .collect();
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("alpha".into(), alpha);
    diagnostics.insert("input_collinearity".into(), residual);
    PerturbationResult::certify(
        t.clone(),
        s,
        Some(e.clone()),
        Some(PartitionMap::from_pieces_unchecked(scalars)),
        vec![
            Check::Distance {
                bound: gain * t.ess_sup_norm(),
            },
            Check::Collinearity {
                tol: INPUT_COLLINEARITY_TOL,
            },
        ],
        diagnostics,
    )
}

/// `S_eps` and the scalings relating it to `S`.
#[derive(Clone, Debug)]
pub struct ShearConjugation {
    pub epsilon: f64,
    pub operator: RandomOperator,
    /// `P_eps = I - (1 - eps) e e^T`, norm one.
    pub scaling: RandomOperator,
    /// `P_eps^{-1}`, norm `1/eps`.
    pub inverse_scaling: RandomOperator,
    /// Largest `|S_eps(w) P_eps(w) - P_eps(theta w) S(w)|` over pieces.
    pub residual: f64,
}

const CONJUGATION_TOL: f64 = 1e-12;

/// `S e e^T + (eps P' + I - P') S (I - e e^T)` with `P'` the projector on `e o theta`.
fn sheared(s: &Matrix, e: &Vector, next: &Vector, eps: f64) -> Matrix {
    let d = s.nrows();
    let p_next = linalg::line_projector(next);
    let p = linalg::line_projector(e);
    let id = Matrix::identity(d, d);
    s * &p + (&p_next * eps + (&id - &p_next)) * s * (&id - &p)
}

fn scaling(e: &Vector, factor: f64) -> Matrix {
    let d = e.len();
    Matrix::identity(d, d) - linalg::line_projector(e) * (1.0 - factor)
}

pub fn shear_conjugation(
    s: &RandomOperator,
    e: &RandomVector,
    eps: f64,
) -> Result<ShearConjugation, PerturbError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(PerturbError::InvalidParameter {
            name: "epsilon",
            value: eps,
        });
    }
    check_dims(s, e)?;
    let steps = step_pieces(s, e);
    let invariance = invariance_residual(&steps);
    if invariance > INPUT_COLLINEARITY_TOL {
        return Err(PerturbError::NotInvariant {
            residual: invariance,
        });
    }
    let mut residual = 0.0f64;
    // the identity is off by (1 - eps)(I - P')S e, so an inexact direction loosens it by that much
    let mut defect = 0.0f64;
    let mut patches = Vec::with_capacity(steps.len());
    for (set, m, v, next) in steps {
        let w = &m * &v;
        defect = defect.max((&w - &next * next.dot(&w)).norm());
        let se = sheared(&m, &v, &next, eps);
        // S_eps P = P' S, multiplied through so a small eps does not amplify rounding
        let gap = &se * scaling(&v, eps) - scaling(&next, eps) * &m;
        residual = residual.max(linalg::spectral_norm(&gap));
        patches.push((set, se));
    }
    let tol = CONJUGATION_TOL * s.ess_sup_norm().max(1.0) + defect;
    if residual > tol {
        return Err(PerturbError::Conjugation { residual, tol });
    }
    let id = RandomOperator::constant(s.base().clone(), Matrix::identity(s.dim(), s.dim()));
    let scale_pieces = |factor: f64| {
        e.pieces()
            .iter()
            .map(|(set, v)| (set.clone(), scaling(v, factor)))
            .collect()
    };
    Ok(ShearConjugation {
        epsilon: eps,
        operator: s.patched(patches)?,
        scaling: id.patched(scale_pieces(eps))?,
        inverse_scaling: id.patched(scale_pieces(1.0 / eps))?,
        residual,
    })
}

/// Bisection steps; `1 - 2^-52` is the largest value it can return.
const SHEAR_BISECTIONS: usize = 52;

/// Largest `eps` (to bisection accuracy) with
/// `|S_eps^n - S_0^n| <= eta |T^n|` on every piece, where `T` is the
/// operator before boosting.
pub fn choose_shear_epsilon(
    s: &RandomOperator,
    t: &RandomOperator,
    e: &RandomVector,
    horizon: usize,
    eta: f64,
) -> Result<f64, PerturbError> {
    if horizon == 0 {
        return Err(PerturbError::InvalidParameter {
            name: "horizon",
            value: 0.0,
        });
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(PerturbError::InvalidParameter {
            name: "eta",
            value: eta,
        });
    }
    check_dims(s, e)?;
    check_dims(t, e)?;
    let rho = step_pieces(t, e)
        .iter()
        .map(|(_, m, v, _)| (m * v).norm())
        .fold(f64::INFINITY, f64::min);
    if !(rho > 0.0) {
        return Err(PerturbError::RhoFloor { rho });
    }
    let steps = step_pieces(s, e);
    let step_sets: Vec<BaseSet> = steps.iter().map(|p| p.0.clone()).collect();
    let op_sets = sets_of(t.pieces());
    let mut layers: Vec<(&[BaseSet], i64)> = Vec::with_capacity(2 * horizon);
    for i in 0..horizon {
        layers.push((&step_sets, i as i64));
        layers.push((&op_sets, i as i64));
    }
    let sys = s.base();
    let sheared_product = |labels: &[usize], eps: f64| {
        let mats: Vec<Matrix> = labels
            .iter()
            .map(|&j| {
                let (_, m, v, next) = &steps[j];
                sheared(m, v, next, eps)
            })
            .collect();
        product(&mats, s.dim())
    };
    // per orbit: shear labels, |T^n|, S_0^n
    let orbits: Vec<(Vec<usize>, f64, Matrix)> = itinerary(sys, &sys.whole(), &layers)
        .into_iter()
        .map(|(_, l)| {
            let ts: Vec<Matrix> = l
                .iter()
                .skip(1)
                .step_by(2)
                .map(|&j| t.pieces()[j].1.clone())
                .collect();
            let shear_labels: Vec<usize> = l.iter().step_by(2).copied().collect();
            let base = sheared_product(&shear_labels, 0.0);
            (
                shear_labels,
                linalg::spectral_norm(&product(&ts, t.dim())),
                base,
            )
        })
        .collect();
    let holds = |eps: f64| {
        orbits.iter().all(|(labels, tn, base)| {
            linalg::spectral_norm(&(sheared_product(labels, eps) - base)) <= eta * tn
        })
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..SHEAR_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if holds(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo == 0.0 {
        return Err(PerturbError::NoShear { horizon });
    }
    Ok(lo)
}
