//! Rokhlin towers and first-return decompositions.

use serde::{Deserialize, Serialize};

use super::{BaseError, BaseSet, BaseSystem, Cylinder, CylinderSet};

const MAX_HALVINGS: u32 = 60;
/// Stop refining the not-yet-returned set once it needs this many pieces.
const RETURN_PIECE_BUDGET: usize = 4096;

/// True when `V, theta V, ..., theta^height V` are pairwise disjoint.
pub fn tower_is_disjoint(sys: &BaseSystem, v: &BaseSet, height: usize) -> bool {
    let levels: Vec<BaseSet> = (0..=height).map(|i| sys.image(v, i as i64)).collect();
    for i in 0..levels.len() {
        for j in i + 1..levels.len() {
            if !levels[i].is_disjoint(&levels[j]) {
                return false;
            }
        }
    }
    true
}

/// A positive-measure `V` inside `u` whose first `height` images are disjoint from it and each other.
pub fn rokhlin_tower(sys: &BaseSystem, u: &BaseSet, height: usize) -> Result<BaseSet, BaseError> {
    let mass = sys.measure(u);
    if mass <= 0.0 {
        return Err(BaseError::NullSet);
    }
    if height == 0 {
        return Ok(u.clone());
    }
    match u {
        BaseSet::Arcs(arcs) => {
            let &(lo, hi) = arcs
                .arcs()
                .iter()
                .max_by_key(|(a, b)| (b - a, std::cmp::Reverse(*a)))
                .expect("positive measure");
            for t in 0..=MAX_HALVINGS {
                let len = (hi - lo) >> t;
                if len == 0 {
                    break;
                }
                let v = BaseSet::Arcs(super::ArcSet::from_arcs(arcs.modulus, [(lo, lo + len)]));
                if tower_is_disjoint(sys, &v, height) {
                    return Ok(v);
                }
            }
        }
        BaseSet::Cylinders(cyls) => {
            // Refine the heaviest cylinder by the pattern 0 1^t just past its window;
            // that pattern cannot overlap its own shifts by 1..=t.
            let weights = match &sys.kind {
                super::BaseKind::Bernoulli { weights } => weights.clone(),
                _ => return Err(BaseError::KindMismatch),
            };
            let base = cyls
                .cylinders()
                .iter()
                .max_by(|a, b| a.measure(&weights).total_cmp(&b.measure(&weights)))
                .expect("positive measure");
            let start = base.constraints.last().map_or(0, |&(c, _)| c + 1);
            for t in 0..=MAX_HALVINGS {
                let mut word = vec![0u8];
                word.extend(std::iter::repeat_n(1u8, t as usize));
                let cand = base
                    .meet(&Cylinder::word(start, &word))
                    .expect("fresh coordinates");
                let v = BaseSet::Cylinders(CylinderSet::single(cyls.symbols, cand));
                if tower_is_disjoint(sys, &v, height) {
                    return Ok(v);
                }
            }
        }
    }
    Err(BaseError::TowerExhausted {
        height,
        halvings: MAX_HALVINGS,
        measure: mass,
    })
}

/// Sets `W_k` of points of `V` whose first return to `V` happens at step `k`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FirstReturn {
    pub blocks: Vec<(usize, BaseSet)>,
    /// Measure of the points of `V` not yet returned when the search stopped.
    pub residual: f64,
    /// Last return time examined.
    pub k_reached: usize,
}

impl FirstReturn {
    pub fn covered_measure(&self, sys: &BaseSystem) -> f64 {
        self.blocks.iter().map(|(_, w)| sys.measure(w)).sum()
    }
}

pub fn first_return_decomposition(sys: &BaseSystem, v: &BaseSet, k_max: usize) -> FirstReturn {
    let mut pending = v.clone();
    let mut blocks = Vec::new();
    let mut k_reached = 0;
    for k in 1..=k_max {
        k_reached = k;
        let back = sys.preimage(v, k as i64);
        let w = pending.intersect(&back);
        if !w.is_empty() {
            blocks.push((k, w));
        }
        pending = pending.difference(&back);
        if pending.is_empty() || pending.piece_count() > RETURN_PIECE_BUDGET {
            break;
        }
    }
    FirstReturn {
        residual: sys.measure(&pending),
        blocks,
        k_reached,
    }
}
