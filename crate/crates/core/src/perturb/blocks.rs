//! Growth along short blocks, and the full construction of an invariant
//! direction with uniform one-step and block growth.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::base::{
    first_return_decomposition, rokhlin_tower, tower_is_disjoint, BaseSet, PartitionMap,
};
use crate::linalg::{self, Matrix, Vector};
use crate::opcore::{RandomOperator, RandomVector};

use super::tower::{failure, rotate_column, RotatedColumn};
use super::{
    check_dims, columns, product, sets_of, top_right_vector, Check, PerturbError,
    PerturbationResult, COLLINEARITY_TOL,
};

fn check_small_epsilon(eps: f64) -> Result<(), PerturbError> {
    if !(eps > 0.0 && eps < 1.0 / 6.0) {
        return Err(PerturbError::InvalidParameter {
            name: "epsilon",
            value: eps,
        });
    }
    Ok(())
}

struct ShortBlock {
    floors: Vec<Matrix>,
    /// `|<g, f>| < eps`, so the bottom floor was sheared towards `f`.
    sheared: bool,
    /// Floors whose step along the maximizing orbit was raised to `eps`.
    raised: usize,
}

/// One column of the short-block construction: raise every step along the
/// maximizing orbit of the block product to norm `eps`, then tilt the bottom
/// floor so that `g` picks up a share of the new maximizing vector.
fn short_block(floors: &[Matrix], g: &Vector, eps: f64) -> ShortBlock {
    let d = g.len();
    let mut u = top_right_vector(&product(floors, d)).unwrap_or_else(|| g.clone());
    let mut raised_floors = Vec::with_capacity(floors.len());
    let mut raised = 0;
    for m in floors {
        let w = m * &u;
        let n = w.norm();
        let r = if n >= eps {
            m.clone()
        } else {
            raised += 1;
            let dir = if n > 0.0 { &w / n } else { u.clone() };
            linalg::redefine_on_line(m, &u, &(dir * eps))
        };
        u = linalg::normalized(&(&r * &u)).expect("raised step has norm at least eps");
        raised_floors.push(r);
    }
    let f = top_right_vector(&product(&raised_floors, d)).expect("raised block product is nonzero");
    let alpha = g.dot(&f);
    let sheared = alpha.abs() < eps;
    if sheared {
        let bottom = &raised_floors[0];
        raised_floors[0] = bottom + (bottom * &f) * g.transpose() * (3.0 * eps);
    }
    ShortBlock {
        floors: raised_floors,
        sheared,
        raised,
    }
}

/// Perturbs `T` on `V, ..., theta^{N-1} V` so that `|S^N g| >= eps |S^N|` and
/// `|S^N| >= eps^{N+1}` on `V`.
pub fn short_block_perturb(
    t: &RandomOperator,
    v: &BaseSet,
    n: usize,
    g: &RandomVector,
    eps: f64,
) -> Result<PerturbationResult, PerturbError> {
    check_small_epsilon(eps)?;
    check_dims(t, g)?;
    if n == 0 {
        return Err(PerturbError::InvalidParameter {
            name: "block length",
            value: 0.0,
        });
    }
    let sys = t.base();
    if !tower_is_disjoint(sys, v, n - 1) {
        return Err(PerturbError::TowerNotDisjoint { height: n - 1 });
    }
    let g_sets = sets_of(g.pieces());
    let cols = columns(t, v, n, &[(&g_sets, 0)]);
    let covered: f64 = cols.iter().map(|c| sys.measure(&c.bottom)).sum();
    let required = sys.measure(v);
    if covered < required * (1.0 - 1e-12) {
        return Err(PerturbError::Coverage { covered, required });
    }
    let blocks: Vec<ShortBlock> = cols
        .par_iter()
        .map(|c| short_block(&c.floors, &g.pieces()[c.labels[0]].1, eps))
        .collect();
    let mut patches = Vec::new();
    let mut dirs = Vec::new();
    let (mut sheared, mut raised) = (0.0, 0usize);
    for (c, b) in cols.iter().zip(&blocks) {
        for (i, m) in b.floors.iter().enumerate() {
            patches.push((sys.image(&c.bottom, i as i64), m.clone()));
        }
        dirs.push((c.bottom.clone(), g.pieces()[c.labels[0]].1.clone()));
        if b.sheared {
            sheared += sys.measure(&c.bottom);
        }
        raised += b.raised;
    }
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("sheared_measure".into(), sheared);
    diagnostics.insert("raised_floors".into(), raised as f64);
    let norm = t.ess_sup_norm();
    PerturbationResult::certify(
        t.clone(),
        t.patched(patches)?,
        Some(RandomVector::partial(sys.clone(), t.dim(), dirs, true)),
        None,
        vec![
            Check::Distance {
                bound: 3.0 * eps + 3.0 * eps * norm,
            },
            Check::BlockGrowth {
                horizon: n,
                ratio: eps,
            },
            Check::BlockNorm {
                horizon: n,
                bound: eps.powi(n as i32 + 1),
            },
        ],
        diagnostics,
    )
}

#[derive(Clone, Debug)]
pub struct MillionshchikovOptions {
    /// Longest return time to the sub-tower base that is handled.
    pub k_max: usize,
    pub min_coverage: f64,
}

impl Default for MillionshchikovOptions {
    fn default() -> Self {
        MillionshchikovOptions {
            k_max: 1000,
            min_coverage: 0.99,
        }
    }
}

/// Direction carried along one return column, with its operator.
struct ReturnColumn {
    floors: Vec<Matrix>,
    /// Directions on floors `0..=height`.
    dirs: Vec<Vector>,
    betas: Vec<f64>,
    sheared: usize,
    raised: usize,
    remainder_shifts: usize,
}

fn return_column(floors: &[Matrix], n: usize, eps: f64) -> ReturnColumn {
    let d = floors[0].nrows();
    let mut e = top_right_vector(&product(&floors[..n], d)).unwrap_or_else(|| {
        let mut axis = Vector::zeros(d);
        axis[0] = 1.0;
        axis
    });
    let full = floors.len() / n;
    let mut out = Vec::with_capacity(floors.len());
    let mut dirs = vec![e.clone()];
    let mut betas = Vec::with_capacity(floors.len());
    let (mut sheared, mut raised, mut remainder_shifts) = (0, 0, 0);
    let mut push = |m: Matrix, e: &mut Vector, dirs: &mut Vec<Vector>, out: &mut Vec<Matrix>| {
        let w = &m * &*e;
        let b = w.norm();
        *e = &w / b;
        betas.push(b);
        dirs.push(e.clone());
        out.push(m);
    };
    for block in 0..full {
        let b = short_block(&floors[block * n..(block + 1) * n], &e, eps);
        sheared += b.sheared as usize;
        raised += b.raised;
        for m in b.floors {
            push(m, &mut e, &mut dirs, &mut out);
        }
    }
    for m in &floors[full * n..] {
        let m = if (m * &e).norm() >= eps {
            m.clone()
        } else {
            remainder_shifts += 1;
            m + &e * e.transpose() * (3.0 * eps)
        };
        push(m, &mut e, &mut dirs, &mut out);
    }
    ReturnColumn {
        floors: out,
        dirs,
        betas,
        sheared,
        raised,
        remainder_shifts,
    }
}

/// Builds `S` within `3 eps (1 + |T|)` of `T` with an invariant direction
/// `e` satisfying a uniform lower bound on `|S e|` and on the growth ratio
/// `|S^{kN} e| / |S^{kN}|`.
pub fn millionshchikov(
    t: &RandomOperator,
    v: &BaseSet,
    n: usize,
    eps: f64,
    k: usize,
    opts: &MillionshchikovOptions,
) -> Result<PerturbationResult, PerturbError> {
    check_small_epsilon(eps)?;
    if n == 0 {
        return Err(PerturbError::InvalidParameter {
            name: "block length",
            value: 0.0,
        });
    }
    if k == 0 {
        return Err(PerturbError::InvalidParameter {
            name: "k",
            value: 0.0,
        });
    }
    let sys = t.base();
    if !tower_is_disjoint(sys, v, n) {
        return Err(PerturbError::TowerNotDisjoint { height: n });
    }
    let sub = rokhlin_tower(sys, v, (k + 1) * n)?;
    let returns = first_return_decomposition(sys, &sub, opts.k_max);

    // Step 1: columns from theta^N U back to U, each at least kN + 1 high.
    let mut patches = Vec::new();
    let mut dirs: Vec<(BaseSet, Vector)> = Vec::new();
    let mut scalars: Vec<(BaseSet, f64)> = Vec::new();
    let mut tops: Vec<(BaseSet, Vector)> = Vec::new();
    let mut starts: Vec<(BaseSet, Vector)> = Vec::new();
    let (mut sheared, mut raised, mut shifts) = (0usize, 0usize, 0usize);
    for (m, w) in &returns.blocks {
        let height = m - n;
        let bottom = sys.image(w, n as i64);
        let cols = columns(t, &bottom, height, &[]);
        let built: Vec<ReturnColumn> = cols
            .par_iter()
            .map(|c| return_column(&c.floors, n, eps))
            .collect();
        for (c, r) in cols.iter().zip(built) {
            for i in 0..height {
                let set = sys.image(&c.bottom, i as i64);
                patches.push((set.clone(), r.floors[i].clone()));
                scalars.push((set.clone(), r.betas[i]));
                dirs.push((set, r.dirs[i].clone()));
            }
            starts.push((c.bottom.clone(), r.dirs[0].clone()));
            tops.push((sys.image(&c.bottom, height as i64), r.dirs[height].clone()));
            sheared += r.sheared;
            raised += r.raised;
            shifts += r.remainder_shifts;
        }
    }

    // Step 2: rotate across U, ..., theta^{N-1} U from the tops onto the starts.
    let top_sets = sets_of(&tops);
    let start_sets = sets_of(&starts);
    let cols = columns(t, &sub, n, &[(&top_sets, 0), (&start_sets, n as i64)]);
    let rotated: Vec<RotatedColumn> = cols
        .par_iter()
        .enumerate()
        .map(|(piece, c)| {
            rotate_column(
                &c.floors,
                &tops[c.labels[0]].1,
                &starts[c.labels[1]].1,
                3.0 * eps,
            )
            .map_err(|f| failure(piece, 3.0 * eps, f))
        })
        .collect::<Result<_, _>>()?;
    dirs.extend(tops.iter().cloned());
    for (c, r) in cols.iter().zip(&rotated) {
        for i in 0..n {
            let set = sys.image(&c.bottom, i as i64);
            patches.push((set.clone(), r.floors[i].clone()));
            scalars.push((set.clone(), r.betas[i]));
            if i > 0 {
                dirs.push((set, r.dirs[i].clone()));
            }
        }
    }

    let norm = t.ess_sup_norm();
    let growth = 1.0 + 2.0 * norm;
    let covered: f64 = scalars.iter().map(|(s, _)| sys.measure(s)).sum();
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("covered".into(), covered);
    diagnostics.insert("return_residual".into(), returns.residual);
    diagnostics.insert("return_blocks".into(), returns.blocks.len() as f64);
    diagnostics.insert("sub_tower_measure".into(), sys.measure(&sub));
    diagnostics.insert("sheared_blocks".into(), sheared as f64);
    diagnostics.insert("raised_floors".into(), raised as f64);
    diagnostics.insert("remainder_shifts".into(), shifts as f64);
    PerturbationResult::certify(
        t.clone(),
        t.patched(patches)?,
        Some(RandomVector::partial(sys.clone(), t.dim(), dirs, true)),
        Some(PartitionMap::from_pieces_unchecked(scalars)),
        vec![
            Check::Distance {
                bound: 3.0 * eps * (1.0 + norm),
            },
            Check::Collinearity {
                tol: COLLINEARITY_TOL,
            },
            Check::StepGrowth {
                bound: eps.powi(n as i32 + 1) / growth.powi(n as i32 - 1),
            },
            Check::BlockGrowth {
                horizon: k * n,
                ratio: eps.powi((k + 4 * n) as i32) / growth.powi(4 * n as i32),
            },
            Check::Coverage {
                min: opts.min_coverage,
            },
        ],
        diagnostics,
    )
}
