//! Finite unions of half-open arcs on a circle discretised to `modulus` ticks.
//!
//! Endpoints are integers, so translation, intersection and difference are
//! exact. An arc is stored as `(start, end)` with `start < end <= modulus`;
//! arcs that cross zero are split in two.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArcSet {
    pub modulus: u128,
    arcs: Vec<(u128, u128)>,
}

impl ArcSet {
    pub fn empty(modulus: u128) -> Self {
        ArcSet {
            modulus,
            arcs: Vec::new(),
        }
    }

    pub fn full(modulus: u128) -> Self {
        ArcSet {
            modulus,
            arcs: vec![(0, modulus)],
        }
    }

    /// Builds a set from arbitrary arcs, merging overlaps. `end` may exceed
    /// `start` by at most `modulus`; endpoints are reduced modulo `modulus`.
    pub fn from_arcs(modulus: u128, raw: impl IntoIterator<Item = (u128, u128)>) -> Self {
        let mut pieces = Vec::new();
        for (a, b) in raw {
            if b <= a {
                continue;
            }
            let len = b - a;
            if len >= modulus {
                return ArcSet::full(modulus);
            }
            let a = a % modulus;
            let b = a + len;
            if b <= modulus {
                pieces.push((a, b));
            } else {
                pieces.push((a, modulus));
                pieces.push((0, b - modulus));
            }
        }
        ArcSet {
            modulus,
            arcs: normalize(pieces),
        }
    }

    pub fn arcs(&self) -> &[(u128, u128)] {
        &self.arcs
    }

    pub fn is_empty(&self) -> bool {
        self.arcs.is_empty()
    }

    pub fn total_length(&self) -> u128 {
        self.arcs.iter().map(|(a, b)| b - a).sum()
    }

    pub fn contains(&self, x: u128) -> bool {
        // arcs are sorted and disjoint
        let idx = self.arcs.partition_point(|&(a, _)| a <= x);
        idx > 0 && x < self.arcs[idx - 1].1
    }

    /// The set `{x + shift mod modulus : x in self}`.
    pub fn translate(&self, shift: u128) -> Self {
        let shift = shift % self.modulus;
        ArcSet::from_arcs(
            self.modulus,
            self.arcs.iter().map(|&(a, b)| (a + shift, b + shift)),
        )
    }

    pub fn intersect(&self, other: &ArcSet) -> Self {
        debug_assert_eq!(self.modulus, other.modulus);
        let mut out = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < self.arcs.len() && j < other.arcs.len() {
            let (a0, a1) = self.arcs[i];
            let (b0, b1) = other.arcs[j];
            let lo = a0.max(b0);
            let hi = a1.min(b1);
            if lo < hi {
                out.push((lo, hi));
            }
            if a1 < b1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        ArcSet {
            modulus: self.modulus,
            arcs: out,
        }
    }

    pub fn complement(&self) -> Self {
        let mut out = Vec::new();
        let mut cursor = 0;
        for &(a, b) in &self.arcs {
            if a > cursor {
                out.push((cursor, a));
            }
            cursor = b;
        }
        if cursor < self.modulus {
            out.push((cursor, self.modulus));
        }
        ArcSet {
            modulus: self.modulus,
            arcs: out,
        }
    }

    pub fn difference(&self, other: &ArcSet) -> Self {
        self.intersect(&other.complement())
    }

    pub fn union(&self, other: &ArcSet) -> Self {
        let mut all = self.arcs.clone();
        all.extend_from_slice(&other.arcs);
        ArcSet {
            modulus: self.modulus,
            arcs: normalize(all),
        }
    }
}

fn normalize(mut pieces: Vec<(u128, u128)>) -> Vec<(u128, u128)> {
    pieces.retain(|(a, b)| a < b);
    pieces.sort_unstable();
    let mut out: Vec<(u128, u128)> = Vec::with_capacity(pieces.len());
    for (a, b) in pieces {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wraparound_translation_splits() {
        let s = ArcSet::from_arcs(100, [(80, 95)]).translate(10);
        assert_eq!(s.arcs(), &[(0, 5), (90, 100)]);
    }

    #[test]
    fn complement_of_full_is_empty() {
        assert!(ArcSet::full(7).complement().is_empty());
    }

    proptest! {
        #[test]
        fn translation_preserves_length(a in 0u128..1000, len in 1u128..500, t in 0u128..5000) {
            let s = ArcSet::from_arcs(1000, [(a, a + len)]);
            prop_assert_eq!(s.translate(t).total_length(), len);
        }

        #[test]
        fn difference_and_intersection_partition(a in 0u128..1000, la in 1u128..700,
                                                  b in 0u128..1000, lb in 1u128..700) {
            let x = ArcSet::from_arcs(1000, [(a, a + la)]);
            let y = ArcSet::from_arcs(1000, [(b, b + lb)]);
            let inter = x.intersect(&y);
            let diff = x.difference(&y);
            prop_assert!(inter.intersect(&diff).is_empty());
            prop_assert_eq!(inter.total_length() + diff.total_length(), x.total_length());
            prop_assert_eq!(inter.union(&diff), x);
        }
    }
}
