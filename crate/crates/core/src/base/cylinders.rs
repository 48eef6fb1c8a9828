//! Cylinder sets and points of the two-sided full shift.
//!
//! A point is a seed, an offset and a short list of pinned symbols. Symbols
//! outside the pinned list are drawn lazily from a hash of `(seed, coordinate)`,
//! so a point is a finite value that still describes a bi-infinite sequence.
//! The shift acts by `(shift w)_i = w_{i+1}`.

use serde::{Deserialize, Serialize};

/// `{w : w_c = s for every (c, s)}` with coordinates sorted and distinct.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cylinder {
    pub constraints: Vec<(i64, u8)>,
}

impl Cylinder {
    pub fn everything() -> Self {
        Cylinder {
            constraints: Vec::new(),
        }
    }

    /// Cylinder fixing `word` on the coordinates `start, start+1, ...`.
    pub fn word(start: i64, word: &[u8]) -> Self {
        Cylinder {
            constraints: word
                .iter()
                .enumerate()
                .map(|(i, &s)| (start + i as i64, s))
                .collect(),
        }
    }

    pub fn symbol_at(&self, coord: i64) -> Option<u8> {
        self.constraints
            .binary_search_by_key(&coord, |&(c, _)| c)
            .ok()
            .map(|i| self.constraints[i].1)
    }

    pub fn meet(&self, other: &Cylinder) -> Option<Cylinder> {
        let mut out = Vec::with_capacity(self.constraints.len() + other.constraints.len());
        let (mut i, mut j) = (0, 0);
        let (a, b) = (&self.constraints, &other.constraints);
        while i < a.len() || j < b.len() {
            if j == b.len() || (i < a.len() && a[i].0 < b[j].0) {
                out.push(a[i]);
                i += 1;
            } else if i == a.len() || b[j].0 < a[i].0 {
                out.push(b[j]);
                j += 1;
            } else {
                if a[i].1 != b[j].1 {
                    return None;
                }
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
        Some(Cylinder { constraints: out })
    }

    pub fn with(&self, coord: i64, symbol: u8) -> Option<Cylinder> {
        self.meet(&Cylinder {
            constraints: vec![(coord, symbol)],
        })
    }

    /// Image under the `n`-th power of the shift.
    pub fn shifted(&self, n: i64) -> Cylinder {
        Cylinder {
            constraints: self.constraints.iter().map(|&(c, s)| (c - n, s)).collect(),
        }
    }

    pub fn measure(&self, weights: &[f64]) -> f64 {
        self.constraints
            .iter()
            .map(|&(_, s)| weights[s as usize])
            .product()
    }

    /// `self \ other` as disjoint cylinders.
    pub fn minus(&self, other: &Cylinder, symbols: u8) -> Vec<Cylinder> {
        if self.meet(other).is_none() {
            return vec![self.clone()];
        }
        let mut out = Vec::new();
        let mut cur = self.clone();
        for &(c, s) in &other.constraints {
            if cur.symbol_at(c).is_some() {
                continue;
            }
            for t in (0..symbols).filter(|&t| t != s) {
                out.push(cur.with(c, t).expect("free coordinate"));
            }
            cur = cur.with(c, s).expect("free coordinate");
        }
        out
    }
}

/// Finite union of pairwise disjoint cylinders over an alphabet of `symbols`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CylinderSet {
    pub symbols: u8,
    cylinders: Vec<Cylinder>,
}

impl CylinderSet {
    pub fn empty(symbols: u8) -> Self {
        CylinderSet {
            symbols,
            cylinders: Vec::new(),
        }
    }

    pub fn full(symbols: u8) -> Self {
        CylinderSet {
            symbols,
            cylinders: vec![Cylinder::everything()],
        }
    }

    pub fn single(symbols: u8, c: Cylinder) -> Self {
        CylinderSet {
            symbols,
            cylinders: vec![c],
        }
    }

    /// Caller guarantees the cylinders are pairwise disjoint.
    pub fn from_disjoint(symbols: u8, cylinders: Vec<Cylinder>) -> Self {
        CylinderSet { symbols, cylinders }
    }

    pub fn cylinders(&self) -> &[Cylinder] {
        &self.cylinders
    }

    pub fn is_empty(&self) -> bool {
        self.cylinders.is_empty()
    }

    pub fn measure(&self, weights: &[f64]) -> f64 {
        self.cylinders.iter().map(|c| c.measure(weights)).sum()
    }

    pub fn shifted(&self, n: i64) -> Self {
        CylinderSet {
            symbols: self.symbols,
            cylinders: self.cylinders.iter().map(|c| c.shifted(n)).collect(),
        }
    }

    pub fn intersect(&self, other: &CylinderSet) -> Self {
        let mut out = Vec::new();
        for a in &self.cylinders {
            for b in &other.cylinders {
                if let Some(c) = a.meet(b) {
                    out.push(c);
                }
            }
        }
        CylinderSet {
            symbols: self.symbols,
            cylinders: out,
        }
    }

    pub fn difference(&self, other: &CylinderSet) -> Self {
        let mut current = self.cylinders.clone();
        for b in &other.cylinders {
            current = current
                .iter()
                .flat_map(|a| a.minus(b, self.symbols))
                .collect();
            if current.is_empty() {
                break;
            }
        }
        CylinderSet {
            symbols: self.symbols,
            cylinders: current,
        }
    }

    pub fn union(&self, other: &CylinderSet) -> Self {
        let mut out = self.cylinders.clone();
        out.extend(other.difference(self).cylinders);
        CylinderSet {
            symbols: self.symbols,
            cylinders: out,
        }
    }

    pub fn contains(&self, p: &ShiftPoint, weights: &[f64]) -> bool {
        self.cylinders.iter().any(|c| {
            c.constraints
                .iter()
                .all(|&(i, s)| p.symbol(i, weights) == s)
        })
    }
}

/// A point of the two-sided shift.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftPoint {
    pub seed: u64,
    pub offset: i64,
    /// Symbols fixed at absolute stream positions, sorted by position.
    pub pinned: Vec<(i64, u8)>,
}

impl ShiftPoint {
    pub fn new(seed: u64) -> Self {
        ShiftPoint {
            seed,
            offset: 0,
            pinned: Vec::new(),
        }
    }

    /// Symbol at coordinate `i` of this point.
    pub fn symbol(&self, i: i64, weights: &[f64]) -> u8 {
        let pos = i + self.offset;
        if let Ok(k) = self.pinned.binary_search_by_key(&pos, |&(c, _)| c) {
            return self.pinned[k].1;
        }
        let u = unit_from_hash(self.seed, pos);
        let mut acc = 0.0;
        for (s, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return s as u8;
            }
        }
        (weights.len() - 1) as u8
    }

    pub fn shifted(&self, n: i64) -> Self {
        ShiftPoint {
            offset: self.offset + n,
            ..self.clone()
        }
    }

    /// Pins this point into the cylinder `c` (coordinates relative to the point).
    pub fn pinned_to(&self, c: &Cylinder) -> Self {
        let mut pinned: Vec<(i64, u8)> = self
            .pinned
            .iter()
            .copied()
            .filter(|&(pos, _)| c.symbol_at(pos - self.offset).is_none())
            .collect();
        pinned.extend(c.constraints.iter().map(|&(i, s)| (i + self.offset, s)));
        pinned.sort_unstable();
        ShiftPoint {
            pinned,
            ..self.clone()
        }
    }
}

fn unit_from_hash(seed: u64, pos: i64) -> f64 {
    let mut z = seed ^ (pos as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minus_is_disjoint_complement() {
        let a = Cylinder::word(0, &[0]);
        let b = Cylinder::word(0, &[0, 1, 1]);
        let parts = a.minus(&b, 2);
        let w = [0.5, 0.5];
        let total: f64 = parts.iter().map(|c| c.measure(&w)).sum();
        assert!((total - (0.5 - 0.125)).abs() < 1e-15);
        for p in &parts {
            assert!(p.meet(&b).is_none());
        }
    }

    #[test]
    fn shift_round_trip_restores_point() {
        let p = ShiftPoint::new(42);
        let q = p.shifted(-1).shifted(1);
        let w = [0.3, 0.7];
        for i in -20..20 {
            assert_eq!(p.symbol(i, &w), q.symbol(i, &w));
        }
    }

    #[test]
    fn shifted_point_reads_next_symbol() {
        let p = ShiftPoint::new(7);
        let w = [0.5, 0.5];
        for i in -5..5 {
            assert_eq!(p.shifted(1).symbol(i, &w), p.symbol(i + 1, &w));
        }
    }
}
