//! Piecewise-constant maps over a finite partition of the base.

use serde::{Deserialize, Serialize};

use super::{BaseError, BasePoint, BaseSet, BaseSystem};

const COVER_TOL: f64 = 1e-12;

/// A map that is constant on each piece of a finite measurable partition.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "Pieces<V>", into = "Pieces<V>")]
#[serde(bound(
    serialize = "V: Serialize + Clone",
    deserialize = "V: Deserialize<'de>"
))]
pub struct PartitionMap<V> {
    pieces: Vec<(BaseSet, V)>,
    /// For circle partitions: `(start, end, piece)` sorted by start.
    arc_index: Vec<(u128, u128, usize)>,
}

#[derive(Serialize, Deserialize)]
struct Pieces<V> {
    pieces: Vec<(BaseSet, V)>,
}

impl<V> From<Pieces<V>> for PartitionMap<V> {
    fn from(p: Pieces<V>) -> Self {
        PartitionMap::from_pieces_unchecked(p.pieces)
    }
}

impl<V: Clone> From<PartitionMap<V>> for Pieces<V> {
    fn from(p: PartitionMap<V>) -> Self {
        Pieces { pieces: p.pieces }
    }
}

impl<V: PartialEq> PartialEq for PartitionMap<V> {
    fn eq(&self, other: &Self) -> bool {
        self.pieces == other.pieces
    }
}

impl<V> PartitionMap<V> {
    /// Checks pairwise disjointness and full measure.
    pub fn new(sys: &BaseSystem, pieces: Vec<(BaseSet, V)>) -> Result<Self, BaseError> {
        let map = PartitionMap::from_pieces_unchecked(pieces);
        map.validate(sys)?;
        Ok(map)
    }

    pub fn constant(sys: &BaseSystem, value: V) -> Self {
        PartitionMap::from_pieces_unchecked(vec![(sys.whole(), value)])
    }

    pub(crate) fn from_pieces_unchecked(pieces: Vec<(BaseSet, V)>) -> Self {
        let mut arc_index = Vec::new();
        for (k, (set, _)) in pieces.iter().enumerate() {
            if let BaseSet::Arcs(a) = set {
                arc_index.extend(a.arcs().iter().map(|&(lo, hi)| (lo, hi, k)));
            }
        }
        arc_index.sort_unstable();
        PartitionMap { pieces, arc_index }
    }

    pub fn validate(&self, sys: &BaseSystem) -> Result<(), BaseError> {
        if self.pieces.is_empty() {
            return Err(BaseError::Partition("no pieces".into()));
        }
        let total = self.validate_partial(sys)?;
        if (total - 1.0).abs() > COVER_TOL {
            return Err(BaseError::Partition(format!(
                "pieces cover measure {total}, not 1"
            )));
        }
        Ok(())
    }

    /// Checks every set and pairwise disjointness, but not coverage. Returns
    /// the covered measure.
    pub fn validate_partial(&self, sys: &BaseSystem) -> Result<f64, BaseError> {
        for (set, _) in &self.pieces {
            sys.check_set(set)?;
        }
        if sys.is_rotation() {
            for w in self.arc_index.windows(2) {
                if w[1].0 < w[0].1 {
                    return Err(BaseError::Partition(format!(
                        "pieces {} and {} overlap",
                        w[0].2, w[1].2
                    )));
                }
            }
        } else {
            for i in 0..self.pieces.len() {
                for j in i + 1..self.pieces.len() {
                    if !self.pieces[i].0.is_disjoint(&self.pieces[j].0) {
                        return Err(BaseError::Partition(format!("pieces {i} and {j} overlap")));
                    }
                }
            }
        }
        Ok(self.pieces.iter().map(|(s, _)| sys.measure(s)).sum())
    }

    pub fn pieces(&self) -> &[(BaseSet, V)] {
        &self.pieces
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn into_pieces(self) -> Vec<(BaseSet, V)> {
        self.pieces
    }

    /// Index of the piece containing `p`.
    pub fn piece_index(&self, sys: &BaseSystem, p: &BasePoint) -> Option<usize> {
        match p {
            BasePoint::Circle(x) => {
                let i = self.arc_index.partition_point(|&(lo, _, _)| lo <= *x);
                (i > 0 && *x < self.arc_index[i - 1].1).then(|| self.arc_index[i - 1].2)
            }
            BasePoint::Shift(_) => self.pieces.iter().position(|(s, _)| sys.contains(s, p)),
        }
    }

    /// Value at `p`. Panics if the partition does not cover `p`, which a
    /// validated partition never allows.
    pub fn value_at(&self, sys: &BaseSystem, p: &BasePoint) -> &V {
        let k = self
            .piece_index(sys, p)
            .unwrap_or_else(|| panic!("partition does not cover point {p:?}"));
        &self.pieces[k].1
    }

    pub fn map_values<W>(&self, mut f: impl FnMut(&V) -> W) -> PartitionMap<W> {
        PartitionMap::from_pieces_unchecked(
            self.pieces.iter().map(|(s, v)| (s.clone(), f(v))).collect(),
        )
    }

    /// The map `omega -> f(theta^n omega)`.
    pub fn pullback(&self, sys: &BaseSystem, n: i64) -> PartitionMap<V>
    where
        V: Clone,
    {
        if n == 0 {
            return self.clone();
        }
        PartitionMap::from_pieces_unchecked(
            self.pieces
                .iter()
                .map(|(s, v)| (sys.preimage(s, n), v.clone()))
                .collect(),
        )
    }

    /// Common refinement, pairing the values of both maps.
    pub fn refine<W: Clone>(&self, other: &PartitionMap<W>) -> PartitionMap<(V, W)>
    where
        V: Clone,
    {
        let sets: Vec<BaseSet> = other.pieces.iter().map(|(s, _)| s.clone()).collect();
        let index = SetIndex::new(&sets);
        let mut out = Vec::new();
        for (a, v) in &self.pieces {
            for j in index.candidates(a) {
                let c = a.intersect(&sets[j]);
                if !c.is_empty() {
                    out.push((c, (v.clone(), other.pieces[j].1.clone())));
                }
            }
        }
        PartitionMap::from_pieces_unchecked(out)
    }

    /// Essential supremum of `f(value)`: maximum over pieces of positive measure.
    pub fn ess_sup(&self, sys: &BaseSystem, mut f: impl FnMut(&V) -> f64) -> f64 {
        self.pieces
            .iter()
            .filter(|(s, _)| sys.measure(s) > 0.0)
            .map(|(_, v)| f(v))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Disjoint sets with an interval index, for finding which of them meet a query set.
pub struct SetIndex<'a> {
    sets: &'a [BaseSet],
    arc_index: Vec<(u128, u128, usize)>,
}

impl<'a> SetIndex<'a> {
    pub fn new(sets: &'a [BaseSet]) -> Self {
        let mut arc_index = Vec::new();
        for (k, set) in sets.iter().enumerate() {
            if let BaseSet::Arcs(a) = set {
                arc_index.extend(a.arcs().iter().map(|&(lo, hi)| (lo, hi, k)));
            }
        }
        arc_index.sort_unstable();
        SetIndex { sets, arc_index }
    }

    /// Indices of sets that may meet `query`, sorted and without repeats.
    pub fn candidates(&self, query: &BaseSet) -> Vec<usize> {
        match query {
            BaseSet::Arcs(q) => {
                let mut out = Vec::new();
                for &(lo, hi) in q.arcs() {
                    let mut i = self
                        .arc_index
                        .partition_point(|&(s, _, _)| s < lo)
                        .saturating_sub(1);
                    while i < self.arc_index.len() && self.arc_index[i].0 < hi {
                        if self.arc_index[i].1 > lo {
                            out.push(self.arc_index[i].2);
                        }
                        i += 1;
                    }
                }
                out.sort_unstable();
                out.dedup();
                out
            }
            BaseSet::Cylinders(_) => (0..self.sets.len()).collect(),
        }
    }
}

/// Splits `start` into pieces on which every layer is constant along the orbit.
///
/// Layer `k` is a list of disjoint sets together with an offset `n_k`; a
/// returned piece `A` with labels `[j_0, j_1, ...]` satisfies
/// `theta^{n_k} A  inside  layers[k].0[j_k]`. Points whose orbit misses a layer
/// are dropped, so the pieces cover `start` only when every layer is a partition.
pub fn itinerary(
    sys: &BaseSystem,
    start: &BaseSet,
    layers: &[(&[BaseSet], i64)],
) -> Vec<(BaseSet, Vec<usize>)> {
    let mut current = vec![(start.clone(), Vec::new())];
    for (sets, offset) in layers {
        let index = SetIndex::new(sets);
        let mut next = Vec::new();
        for (a, labels) in &current {
            let moved = sys.image(a, *offset);
            for j in index.candidates(&moved) {
                let c = moved.intersect(&sets[j]);
                if !c.is_empty() {
                    let mut l: Vec<usize> = labels.clone();
                    l.push(j);
                    next.push((sys.preimage(&c, *offset), l));
                }
            }
        }
        current = next;
    }
    current
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_piece(sys: &BaseSystem) -> PartitionMap<u32> {
        PartitionMap::new(
            sys,
            vec![
                (sys.arc(0.0, 0.1).unwrap(), 1),
                (sys.arc(0.1, 1.0).unwrap(), 2),
            ],
        )
        .unwrap()
    }

    #[test]
    fn rejects_overlap_and_gaps() {
        let sys = BaseSystem::golden_rotation(0);
        let overlap = vec![
            (sys.arc(0.0, 0.6).unwrap(), 1),
            (sys.arc(0.5, 1.0).unwrap(), 2),
        ];
        assert!(PartitionMap::new(&sys, overlap).is_err());
        let gap = vec![
            (sys.arc(0.0, 0.4).unwrap(), 1),
            (sys.arc(0.5, 1.0).unwrap(), 2),
        ];
        assert!(PartitionMap::new(&sys, gap).is_err());
    }

    #[test]
    fn pullback_zero_is_unchanged() {
        let sys = BaseSystem::golden_rotation(0);
        let f = two_piece(&sys);
        assert_eq!(f.pullback(&sys, 0), f);
    }

    #[test]
    fn pullback_moves_piece_to_preimage() {
        let sys = BaseSystem::rotation(300_000, 1_000_000, 0).unwrap();
        let f = two_piece(&sys);
        let g = f.pullback(&sys, 1);
        let p = sys.circle_point(0.75).unwrap();
        assert_eq!(*g.value_at(&sys, &p), 1);
        assert_eq!(g.pieces()[0].0, sys.arc(0.7, 0.8).unwrap());
    }

    #[test]
    fn pullback_composes() {
        let sys = BaseSystem::golden_rotation(0);
        let f = two_piece(&sys);
        assert_eq!(f.pullback(&sys, 1).pullback(&sys, 1), f.pullback(&sys, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = f.pullback(&sys, 7);
        for _ in 0..200 {
            let p = sys.sample_point(&mut rng);
            assert_eq!(g.value_at(&sys, &p), f.value_at(&sys, &sys.orbit(&p, 7)));
        }
    }

    #[test]
    fn bernoulli_pullback_matches_pointwise() {
        let sys = BaseSystem::bernoulli(vec![0.4, 0.6], 0).unwrap();
        let f = PartitionMap::new(
            &sys,
            vec![
                (sys.cylinder(0, &[0]).unwrap(), 'a'),
                (sys.cylinder(0, &[1, 0]).unwrap(), 'b'),
                (sys.cylinder(0, &[1, 1]).unwrap(), 'c'),
            ],
        )
        .unwrap();
        let g = f.pullback(&sys, -3);
        g.validate(&sys).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let p = sys.sample_point(&mut rng);
            assert_eq!(g.value_at(&sys, &p), f.value_at(&sys, &sys.orbit(&p, -3)));
        }
    }

    #[test]
    fn refinement_is_a_partition() {
        let sys = BaseSystem::golden_rotation(0);
        let f = two_piece(&sys);
        let g = f.pullback(&sys, 3);
        let r = f.refine(&g);
        r.validate(&sys).unwrap();
        assert!(r.len() >= 2);
    }

    #[test]
    fn itinerary_labels_follow_orbits() {
        let sys = BaseSystem::golden_rotation(0);
        let f = two_piece(&sys);
        let sets: Vec<BaseSet> = f.pieces().iter().map(|(s, _)| s.clone()).collect();
        let parts = itinerary(&sys, &sys.whole(), &[(&sets, 0), (&sets, 1), (&sets, 2)]);
        let total: f64 = parts.iter().map(|(s, _)| sys.measure(s)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let p = sys.sample_point(&mut rng);
            let (_, labels) = parts.iter().find(|(s, _)| sys.contains(s, &p)).unwrap();
            for (k, &j) in labels.iter().enumerate() {
                assert!(sys.contains(&sets[j], &sys.orbit(&p, k as i64)));
            }
        }
    }

    #[test]
    fn ess_sup_is_max_over_pieces() {
        let sys = BaseSystem::golden_rotation(0);
        let f = two_piece(&sys);
        assert_eq!(f.ess_sup(&sys, |&v| v as f64), 2.0);
    }
}
