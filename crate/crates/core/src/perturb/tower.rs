//! Rotating a direction along a Rokhlin tower so it lands on a prescribed
//! direction at the top, the global version over a first-return
//! decomposition, and the finite-rank perturbation built on it.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::base::{
    first_return_decomposition, rokhlin_tower, tower_is_disjoint, BaseSet, PartitionMap,
};
use crate::linalg::{self, Matrix, Vector};
use crate::opcore::{
    bijective_floor, lift_singular_values, truncate_singular_values, RandomOperator, RandomVector,
};
use crate::spectrum::{top_exponent, SpectrumOptions, TopExponent};

use super::{
    check_dims, columns, decay_horizon, measure_of, sets_of, Check, PerturbError,
    PerturbationResult, COLLINEARITY_TOL,
};

/// Singular-value budget of the bijective completion run before a rotation.
pub fn bijective_budget(eps: f64) -> f64 {
    (eps / 10.0).min(1e-3)
}

/// `beta + sign(beta) eps/3` when `|beta| < eps/3`, with `sign(0) = +1`.
pub fn lift_scalar(beta: f64, eps: f64) -> f64 {
    let third = eps / 3.0;
    if beta.abs() >= third {
        beta
    } else if beta >= 0.0 {
        beta + third
    } else {
        beta - third
    }
}

pub(crate) struct RotatedColumn {
    pub floors: Vec<Matrix>,
    /// Directions on floors `0..=height`.
    pub dirs: Vec<Vector>,
    pub betas: Vec<f64>,
    pub rotated_at: usize,
    pub lifted: usize,
}

pub(crate) enum ColumnFailure {
    NoContractingStep,
    Singular(usize),
}

/// Rotates along one column: carries `start` forward until the first floor
/// mapping it below `eps/3`, sends it there to `eps/3` times the backward
/// image of `end`, and makes every other floor map the carried direction
/// exactly onto the next one.
pub(crate) fn rotate_column(
    floors: &[Matrix],
    start: &Vector,
    end: &Vector,
    eps: f64,
) -> Result<RotatedColumn, ColumnFailure> {
    let height = floors.len();
    let third = eps / 3.0;
    let floor = bijective_floor(start.len(), bijective_budget(eps));
    let lifted_floors: Vec<Matrix> = floors
        .iter()
        .map(|m| lift_singular_values(m, floor))
        .collect();
    let mut dirs = vec![start.clone()];
    let mut rotated_at = None;
    for (i, b) in lifted_floors.iter().enumerate() {
        let w = b * &dirs[i];
        if w.norm() <= third {
            rotated_at = Some(i);
            break;
        }
        dirs.push(linalg::normalized(&w).ok_or(ColumnFailure::Singular(i))?);
    }
    let j = rotated_at.ok_or(ColumnFailure::NoContractingStep)?;
    let mut back = vec![end.clone()];
    for i in (j + 1..height).rev() {
        let pre = lifted_floors[i]
            .clone()
            .lu()
            .solve(back.last().expect("nonempty"))
            .ok_or(ColumnFailure::Singular(i))?;
        back.push(linalg::normalized(&pre).ok_or(ColumnFailure::Singular(i))?);
    }
    back.reverse();
    dirs.extend(back);
    let mut out = Vec::with_capacity(height);
    let mut betas = Vec::with_capacity(height);
    let mut lifted = 0;
    for (i, b) in lifted_floors.iter().enumerate() {
        let beta = if i == j {
            third
        } else {
            let raw = (b * &dirs[i]).dot(&dirs[i + 1]);
            let l = lift_scalar(raw, eps);
            if l != raw {
                lifted += 1;
            }
            l
        };
        out.push(linalg::redefine_on_line(
            b,
            &dirs[i],
            &(&dirs[i + 1] * beta),
        ));
        betas.push(beta);
    }
    Ok(RotatedColumn {
        floors: out,
        dirs,
        betas,
        rotated_at: j,
        lifted,
    })
}

pub(crate) fn failure(piece: usize, eps: f64, f: ColumnFailure) -> PerturbError {
    match f {
        ColumnFailure::NoContractingStep => PerturbError::NoContractingStep {
            piece,
            threshold: eps / 3.0,
        },
        ColumnFailure::Singular(floor) => PerturbError::Singular { piece, floor },
    }
}

fn check_epsilon(eps: f64) -> Result<(), PerturbError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(PerturbError::InvalidParameter {
            name: "epsilon",
            value: eps,
        });
    }
    Ok(())
}

/// Perturbs `T` on `V, ..., theta^{N-1} V` so that the direction
/// `e_boundary` on `V` is carried to `e_boundary` on `theta^N V`.
pub fn tower_rotate(
    t: &RandomOperator,
    v: &BaseSet,
    n: usize,
    e_boundary: &RandomVector,
    eps: f64,
) -> Result<PerturbationResult, PerturbError> {
    check_epsilon(eps)?;
    check_dims(t, e_boundary)?;
    if n == 0 {
        return Err(PerturbError::InvalidParameter {
            name: "height",
            value: 0.0,
        });
    }
    let sys = t.base();
    if !tower_is_disjoint(sys, v, n) {
        return Err(PerturbError::TowerNotDisjoint { height: n });
    }
    let e_sets = sets_of(e_boundary.pieces());
    let cols = columns(t, v, n, &[(&e_sets, 0), (&e_sets, n as i64)]);
    let covered: f64 = cols.iter().map(|c| sys.measure(&c.bottom)).sum();
    let required = sys.measure(v);
    if covered < required * (1.0 - 1e-12) {
        return Err(PerturbError::Coverage { covered, required });
    }
    let rotated: Vec<RotatedColumn> = cols
        .par_iter()
        .enumerate()
        .map(|(k, c)| {
            let (start, end) = (
                &e_boundary.pieces()[c.labels[0]].1,
                &e_boundary.pieces()[c.labels[1]].1,
            );
            rotate_column(&c.floors, start, end, eps).map_err(|f| failure(k, eps, f))
        })
        .collect::<Result<_, _>>()?;
    let mut patches = Vec::new();
    let mut dirs = Vec::new();
    let mut scalars = Vec::new();
    let mut classes = vec![0.0; n];
    let mut lifted = 0usize;
    for (c, r) in cols.iter().zip(&rotated) {
        for i in 0..=n {
            let set = sys.image(&c.bottom, i as i64);
            if i < n {
                patches.push((set.clone(), r.floors[i].clone()));
                scalars.push((set.clone(), r.betas[i]));
            }
            dirs.push((set, r.dirs[i].clone()));
        }
        classes[r.rotated_at] += sys.measure(&c.bottom);
        lifted += r.lifted;
    }
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("bijective_budget".into(), bijective_budget(eps));
    diagnostics.insert("lifted_floors".into(), lifted as f64);
    for (j, m) in classes.iter().enumerate() {
        diagnostics.insert(format!("rotation_floor_{j:03}_measure"), *m);
    }
    PerturbationResult::certify(
        t.clone(),
        t.patched(patches)?,
        Some(RandomVector::partial(sys.clone(), t.dim(), dirs, true)),
        Some(PartitionMap::from_pieces_unchecked(scalars)),
        vec![
            Check::Distance { bound: eps },
            Check::Collinearity {
                tol: COLLINEARITY_TOL,
            },
            Check::ScalarFloor { bound: eps / 3.0 },
        ],
        diagnostics,
    )
}

/// Runs the tower rotation on every first-return block `W_k` of `V` with
/// `k <= k_max`, extending `h` from `V` to the covered part of the space.
pub fn global_invariant_direction(
    t: &RandomOperator,
    v: &BaseSet,
    h: &RandomVector,
    eps: f64,
    k_max: usize,
    min_coverage: f64,
) -> Result<PerturbationResult, PerturbError> {
    check_epsilon(eps)?;
    check_dims(t, h)?;
    let sys = t.base();
    let returns = first_return_decomposition(sys, v, k_max);
    let covered: f64 = returns
        .blocks
        .iter()
        .map(|(k, w)| *k as f64 * sys.measure(w))
        .sum();
    if covered < min_coverage {
        return Err(PerturbError::Coverage {
            covered,
            required: min_coverage,
        });
    }
    let h_sets = sets_of(h.pieces());
    let mut patches = Vec::new();
    let mut scalars = Vec::new();
    // the direction on V is h itself; columns add floors 1..k
    let mut dirs: Vec<(BaseSet, Vector)> = h
        .pieces()
        .iter()
        .filter_map(|(s, x)| {
            let c = s.intersect(v);
            (!c.is_empty()).then(|| (c, x.clone()))
        })
        .collect();
    let mut piece = 0usize;
    let mut lifted = 0usize;
    for (k, w) in &returns.blocks {
        let cols = columns(t, w, *k, &[(&h_sets, 0), (&h_sets, *k as i64)]);
        let rotated: Vec<RotatedColumn> = cols
            .par_iter()
            .enumerate()
            .map(|(i, c)| {
                let (start, end) = (&h.pieces()[c.labels[0]].1, &h.pieces()[c.labels[1]].1);
                rotate_column(&c.floors, start, end, eps).map_err(|f| failure(piece + i, eps, f))
            })
            .collect::<Result<_, _>>()?;
        piece += cols.len();
        for (c, r) in cols.iter().zip(&rotated) {
            for i in 0..*k {
                let set = sys.image(&c.bottom, i as i64);
                patches.push((set.clone(), r.floors[i].clone()));
                scalars.push((set.clone(), r.betas[i]));
                if i > 0 {
                    dirs.push((set, r.dirs[i].clone()));
                }
            }
            lifted += r.lifted;
        }
    }
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("bijective_budget".into(), bijective_budget(eps));
    diagnostics.insert("lifted_floors".into(), lifted as f64);
    diagnostics.insert("return_residual".into(), returns.residual);
    diagnostics.insert("return_blocks".into(), returns.blocks.len() as f64);
    diagnostics.insert("covered".into(), measure_of(sys, &scalars));
    PerturbationResult::certify(
        t.clone(),
        t.patched(patches)?,
        Some(RandomVector::partial(sys.clone(), t.dim(), dirs, true)),
        Some(PartitionMap::from_pieces_unchecked(scalars)),
        vec![
            Check::Distance { bound: eps },
            Check::Collinearity {
                tol: COLLINEARITY_TOL,
            },
            Check::ScalarFloor { bound: eps / 3.0 },
            Check::Coverage { min: min_coverage },
        ],
        diagnostics,
    )
}

#[derive(Clone, Debug)]
pub struct FiniteRankOptions {
    pub k_max: usize,
    pub min_coverage: f64,
    /// Largest `n` tried when looking for `|T^n| < (eps/9)^n`.
    pub max_horizon: usize,
    pub spectrum: SpectrumOptions,
}

impl Default for FiniteRankOptions {
    fn default() -> Self {
        FiniteRankOptions {
            k_max: 1000,
            min_coverage: 0.99,
            max_horizon: 64,
            spectrum: SpectrumOptions::new(2000, 4, 0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FiniteRankResult {
    pub result: PerturbationResult,
    /// Tower height used for the invariant direction.
    pub horizon: usize,
    /// Largest numerical rank over pieces.
    pub rank: usize,
    pub kappa: TopExponent,
    /// `log(eps/9)`: the rotation runs with budget `eps/3`, so `|gamma| >= eps/9`.
    pub kappa_bound: f64,
}

/// Invariant direction with budget `eps/3`, then singular values below
/// `eps/3` dropped on the complement of the direction.
pub fn finite_rank_with_direction(
    t: &RandomOperator,
    eps: f64,
    opts: &FiniteRankOptions,
) -> Result<FiniteRankResult, PerturbError> {
    if !(eps > 0.0 && eps < 3.0) {
        return Err(PerturbError::InvalidParameter {
            name: "epsilon",
            value: eps,
        });
    }
    let sys = t.base();
    let budget = eps / 3.0;
    let horizon = decay_horizon(t, budget / 3.0, opts.max_horizon)? + 1;
    let v = rokhlin_tower(sys, &sys.whole(), horizon)?;
    let mut axis = Vector::zeros(t.dim());
    axis[0] = 1.0;
    let h = RandomVector::constant(sys.clone(), axis);
    let tilted = global_invariant_direction(t, &v, &h, budget, opts.k_max, opts.min_coverage)?;
    let dir = tilted
        .direction
        .clone()
        .expect("global construction yields a direction");
    let tilted_op = &tilted.operator;
    let trimmed = |m: &Matrix, e: Option<&Vector>| -> Matrix {
        match e {
            Some(e) => {
                let p = linalg::line_projector(e);
                let id = Matrix::identity(t.dim(), t.dim());
                truncate_singular_values(&(m * (&id - &p)), budget) + m * p
            }
            None => truncate_singular_values(m, budget),
        }
    };
    let dir_sets = sets_of(dir.pieces());
    let op_sets = sets_of(tilted_op.pieces());
    let layers: Vec<(&[BaseSet], i64)> = vec![(&op_sets, 0), (&dir_sets, 0)];
    let mut patches: Vec<(BaseSet, Matrix)> = crate::base::itinerary(sys, &sys.whole(), &layers)
        .into_iter()
        .map(|(set, l)| {
            (
                set,
                trimmed(&tilted_op.pieces()[l[0]].1, Some(&dir.pieces()[l[1]].1)),
            )
        })
        .collect();
    let domain = sys.union_all(&dir_sets);
    for (set, m) in tilted_op.pieces() {
        let rest = set.difference(&domain);
        if !rest.is_empty() {
            patches.push((rest, trimmed(m, None)));
        }
    }
    let s = RandomOperator::new(sys.clone(), t.dim(), patches)?;
    let rank = s
        .pieces()
        .iter()
        .map(|(_, m)| {
            let sv = linalg::singular_values(m);
            let top = sv.first().copied().unwrap_or(0.0);
            sv.iter().filter(|&&x| x > 1e-12 * top.max(1e-300)).count()
        })
        .max()
        .unwrap_or(0);
    let kappa = top_exponent(&s, &opts.spectrum)?;
    let mut diagnostics = tilted.diagnostics.clone();
    diagnostics.insert("tower_height".into(), horizon as f64);
    diagnostics.insert("rank".into(), rank as f64);
    diagnostics.insert("kappa".into(), kappa.kappa);
    let result = PerturbationResult::certify(
        t.clone(),
        s,
        Some(dir),
        tilted.scalars.clone(),
        vec![
            Check::Distance {
                bound: 2.0 * eps / 3.0,
            },
            Check::Collinearity {
                tol: COLLINEARITY_TOL,
            },
            Check::ScalarFloor { bound: eps / 9.0 },
            Check::Coverage {
                min: opts.min_coverage,
            },
        ],
        diagnostics,
    )?;
    Ok(FiniteRankResult {
        result,
        horizon,
        rank,
        kappa,
        kappa_bound: (eps / 9.0).ln(),
    })
}
