//! Ergodic base systems with exact set algebra.
//!
//! Two models are provided: a circle rotation whose angle is a rational
//! approximant `p/q` with `q >= 10^6`, and a two-sided Bernoulli shift. Circle
//! points live on the integer grid `q * 2^64`, which keeps every translate of
//! an arc, and every dyadic shrinking of it used by the tower search, exact.

mod arcs;
mod cylinders;
mod partition;
mod tower;

pub use arcs::ArcSet;
pub use cylinders::{Cylinder, CylinderSet, ShiftPoint};
pub use partition::{itinerary, PartitionMap, SetIndex};
pub use tower::{first_return_decomposition, rokhlin_tower, tower_is_disjoint, FirstReturn};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest admissible denominator of the rotation angle.
pub const MIN_ANGLE_DENOMINATOR: u64 = 1_000_000;
const GRID_SHIFT: u32 = 64;
/// Largest cylinder coordinate accepted from decoded input.
const MAX_COORDINATE: u64 = 1 << 40;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaseError {
    #[error("rotation angle {numerator}/{denominator} must lie in (0,1) with denominator in [1e6, 2^62]")]
    InvalidAngle { numerator: u64, denominator: u64 },
    #[error(
        "bernoulli weights must be positive, at least two, at most 255, and sum to 1 (got {0:?})"
    )]
    InvalidWeights(Vec<f64>),
    #[error("set or point belongs to a different kind of base system")]
    KindMismatch,
    #[error("set has zero measure")]
    NullSet,
    #[error("tower search exhausted after {halvings} refinements (N = {height}, measure(U) = {measure:e})")]
    TowerExhausted {
        height: usize,
        halvings: u32,
        measure: f64,
    },
    #[error("partition invalid: {0}")]
    Partition(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaseKind {
    Rotation { numerator: u64, denominator: u64 },
    Bernoulli { weights: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseSystem {
    #[serde(flatten)]
    pub kind: BaseKind,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasePoint {
    Circle(u128),
    Shift(ShiftPoint),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseSet {
    Arcs(ArcSet),
    Cylinders(CylinderSet),
}

impl BaseSystem {
    pub fn rotation(numerator: u64, denominator: u64, seed: u64) -> Result<Self, BaseError> {
        let sys = BaseSystem {
            kind: BaseKind::Rotation {
                numerator,
                denominator,
            },
            seed,
        };
        sys.validate()?;
        Ok(sys)
    }

    /// Rotation by the Fibonacci approximant 832040/1346269 of the golden mean.
    pub fn golden_rotation(seed: u64) -> Self {
        BaseSystem::rotation(832_040, 1_346_269, seed).expect("valid constant angle")
    }

    pub fn bernoulli(weights: Vec<f64>, seed: u64) -> Result<Self, BaseError> {
        let sys = BaseSystem {
            kind: BaseKind::Bernoulli { weights },
            seed,
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn validate(&self) -> Result<(), BaseError> {
        match &self.kind {
            &BaseKind::Rotation {
                numerator,
                denominator,
            } => {
                if numerator == 0
                    || numerator >= denominator
                    || !(MIN_ANGLE_DENOMINATOR..=1 << 62).contains(&denominator)
                {
                    return Err(BaseError::InvalidAngle {
                        numerator,
                        denominator,
                    });
                }
            }
            BaseKind::Bernoulli { weights } => {
                let sum: f64 = weights.iter().sum();
                if weights.len() < 2
                    || weights.len() > 255
                    || weights.iter().any(|w| !(*w > 0.0) || !w.is_finite())
                    || (sum - 1.0).abs() > 1e-12
                {
                    return Err(BaseError::InvalidWeights(weights.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn is_rotation(&self) -> bool {
        matches!(self.kind, BaseKind::Rotation { .. })
    }

    /// Angle as a float, for rotations.
    pub fn angle(&self) -> Option<f64> {
        match self.kind {
            BaseKind::Rotation {
                numerator,
                denominator,
            } => Some(numerator as f64 / denominator as f64),
            BaseKind::Bernoulli { .. } => None,
        }
    }

    fn modulus(&self) -> u128 {
        match self.kind {
            BaseKind::Rotation { denominator, .. } => (denominator as u128) << GRID_SHIFT,
            BaseKind::Bernoulli { .. } => 0,
        }
    }

    fn weights(&self) -> &[f64] {
        match &self.kind {
            BaseKind::Bernoulli { weights } => weights,
            BaseKind::Rotation { .. } => &[],
        }
    }

    fn symbols(&self) -> u8 {
        self.weights().len() as u8
    }

    /// Grid offset of the rotation by `n` steps.
    fn rotation_shift(&self, n: i64) -> u128 {
        match self.kind {
            BaseKind::Rotation {
                numerator,
                denominator,
            } => {
                let r = (n as i128).rem_euclid(denominator as i128) as u128;
                ((r * numerator as u128) % denominator as u128) << GRID_SHIFT
            }
            BaseKind::Bernoulli { .. } => 0,
        }
    }

    pub fn whole(&self) -> BaseSet {
        match self.kind {
            BaseKind::Rotation { .. } => BaseSet::Arcs(ArcSet::full(self.modulus())),
            BaseKind::Bernoulli { .. } => BaseSet::Cylinders(CylinderSet::full(self.symbols())),
        }
    }

    pub fn empty(&self) -> BaseSet {
        match self.kind {
            BaseKind::Rotation { .. } => BaseSet::Arcs(ArcSet::empty(self.modulus())),
            BaseKind::Bernoulli { .. } => BaseSet::Cylinders(CylinderSet::empty(self.symbols())),
        }
    }

    /// Checks that a set (typically decoded from JSON) is well formed for this
    /// system: matching kind and modulus or alphabet, sorted disjoint arcs,
    /// and pairwise disjoint cylinders with sorted in-range constraints.
    pub fn check_set(&self, set: &BaseSet) -> Result<(), BaseError> {
        let bad = |why: &str| Err(BaseError::Partition(format!("malformed set: {why}")));
        match (set, &self.kind) {
            (BaseSet::Arcs(a), BaseKind::Rotation { .. }) => {
                if a.modulus != self.modulus() {
                    return bad("modulus differs from the base system");
                }
                let mut cursor = 0u128;
                for (i, &(lo, hi)) in a.arcs().iter().enumerate() {
                    if lo >= hi || hi > a.modulus || (i > 0 && lo <= cursor) {
                        return bad("arcs must be sorted, separated and inside the circle");
                    }
                    cursor = hi;
                }
                Ok(())
            }
            (BaseSet::Cylinders(c), BaseKind::Bernoulli { .. }) => {
                if c.symbols != self.symbols() {
                    return bad("alphabet differs from the base system");
                }
                for cyl in c.cylinders() {
                    let cs = &cyl.constraints;
                    if cs
                        .iter()
                        .any(|&(k, s)| s >= c.symbols || k.unsigned_abs() > MAX_COORDINATE)
                        || cs.windows(2).any(|w| w[0].0 >= w[1].0)
                    {
                        return bad("cylinder constraints must be sorted and in range");
                    }
                }
                let cyls = c.cylinders();
                for i in 0..cyls.len() {
                    for j in i + 1..cyls.len() {
                        if cyls[i].meet(&cyls[j]).is_some() {
                            return bad("cylinders overlap");
                        }
                    }
                }
                Ok(())
            }
            _ => Err(BaseError::KindMismatch),
        }
    }

    /// Union of many sets in one pass.
    pub fn union_all(&self, sets: &[BaseSet]) -> BaseSet {
        match self.kind {
            BaseKind::Rotation { .. } => {
                let mut raw = Vec::new();
                for s in sets {
                    match s {
                        BaseSet::Arcs(a) => raw.extend_from_slice(a.arcs()),
                        BaseSet::Cylinders(_) => panic!("{}", BaseError::KindMismatch),
                    }
                }
                BaseSet::Arcs(ArcSet::from_arcs(self.modulus(), raw))
            }
            BaseKind::Bernoulli { .. } => sets.iter().fold(self.empty(), |acc, s| acc.union(s)),
        }
    }

    /// The arc `[a, b)` of the circle given in unit coordinates, rounded to the grid.
    pub fn arc(&self, a: f64, b: f64) -> Result<BaseSet, BaseError> {
        if !self.is_rotation() {
            return Err(BaseError::KindMismatch);
        }
        let m = self.modulus();
        let lo = unit_to_grid(a, m);
        let hi = if b >= 1.0 { m } else { unit_to_grid(b, m) };
        Ok(BaseSet::Arcs(ArcSet::from_arcs(m, [(lo, hi)])))
    }

    /// Cylinder fixing `word` at coordinates `start..start+len`.
    pub fn cylinder(&self, start: i64, word: &[u8]) -> Result<BaseSet, BaseError> {
        if self.is_rotation() || word.iter().any(|&s| s >= self.symbols()) {
            return Err(BaseError::KindMismatch);
        }
        Ok(BaseSet::Cylinders(CylinderSet::single(
            self.symbols(),
            Cylinder::word(start, word),
        )))
    }

    /// Point of the circle at unit coordinate `x`.
    pub fn circle_point(&self, x: f64) -> Result<BasePoint, BaseError> {
        if !self.is_rotation() {
            return Err(BaseError::KindMismatch);
        }
        Ok(BasePoint::Circle(unit_to_grid(
            x.rem_euclid(1.0),
            self.modulus(),
        )))
    }

    /// Unit coordinate of a circle point.
    pub fn circle_coordinate(&self, p: &BasePoint) -> Option<f64> {
        match p {
            BasePoint::Circle(x) => Some(*x as f64 / self.modulus() as f64),
            BasePoint::Shift(_) => None,
        }
    }

    /// Symbol at coordinate `i` of a shift point.
    pub fn symbol(&self, p: &BasePoint, i: i64) -> Option<u8> {
        match p {
            BasePoint::Shift(s) => Some(s.symbol(i, self.weights())),
            BasePoint::Circle(_) => None,
        }
    }

    /// `theta^n (omega)`.
    pub fn orbit(&self, p: &BasePoint, n: i64) -> BasePoint {
        match p {
            BasePoint::Circle(x) => {
                let m = self.modulus();
                BasePoint::Circle((x + self.rotation_shift(n)) % m)
            }
            BasePoint::Shift(s) => BasePoint::Shift(s.shifted(n)),
        }
    }

    /// `theta^n (A)`.
    pub fn image(&self, set: &BaseSet, n: i64) -> BaseSet {
        match set {
            BaseSet::Arcs(a) => BaseSet::Arcs(a.translate(self.rotation_shift(n))),
            BaseSet::Cylinders(c) => BaseSet::Cylinders(c.shifted(n)),
        }
    }

    /// `theta^{-n} (A)`.
    pub fn preimage(&self, set: &BaseSet, n: i64) -> BaseSet {
        self.image(set, -n)
    }

    pub fn measure(&self, set: &BaseSet) -> f64 {
        match set {
            BaseSet::Arcs(a) => a.total_length() as f64 / self.modulus() as f64,
            BaseSet::Cylinders(c) => c.measure(self.weights()),
        }
    }

    pub fn contains(&self, set: &BaseSet, p: &BasePoint) -> bool {
        match (set, p) {
            (BaseSet::Arcs(a), BasePoint::Circle(x)) => a.contains(*x),
            (BaseSet::Cylinders(c), BasePoint::Shift(s)) => c.contains(s, self.weights()),
            _ => false,
        }
    }

    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> BasePoint {
        match self.kind {
            BaseKind::Rotation { .. } => BasePoint::Circle(rng.random_range(0..self.modulus())),
            BaseKind::Bernoulli { .. } => BasePoint::Shift(ShiftPoint::new(rng.random())),
        }
    }

    /// A point drawn from the normalised restriction of the measure to `set`.
    pub fn sample_in<R: Rng + ?Sized>(&self, set: &BaseSet, rng: &mut R) -> Option<BasePoint> {
        match set {
            BaseSet::Arcs(a) => {
                let total = a.total_length();
                if total == 0 {
                    return None;
                }
                let mut t = rng.random_range(0..total);
                for &(lo, hi) in a.arcs() {
                    if t < hi - lo {
                        return Some(BasePoint::Circle(lo + t));
                    }
                    t -= hi - lo;
                }
                None
            }
            BaseSet::Cylinders(c) => {
                let w = self.weights();
                let total = c.measure(w);
                if c.is_empty() || total <= 0.0 {
                    return None;
                }
                let mut t = rng.random::<f64>() * total;
                let cyls = c.cylinders();
                let mut chosen = &cyls[cyls.len() - 1];
                for cyl in cyls {
                    let m = cyl.measure(w);
                    if t < m {
                        chosen = cyl;
                        break;
                    }
                    t -= m;
                }
                Some(BasePoint::Shift(
                    ShiftPoint::new(rng.random()).pinned_to(chosen),
                ))
            }
        }
    }
}

fn unit_to_grid(x: f64, modulus: u128) -> u128 {
    let x = x.clamp(0.0, 1.0);
    // split to keep precision: modulus = q * 2^64
    let q = modulus >> GRID_SHIFT;
    let scaled = x * q as f64;
    let whole = scaled.floor();
    let frac = scaled - whole;
    let v = ((whole as u128) << GRID_SHIFT) + (frac * 2f64.powi(64)) as u128;
    v.min(modulus)
}

impl BaseSet {
    pub fn is_empty(&self) -> bool {
        match self {
            BaseSet::Arcs(a) => a.is_empty(),
            BaseSet::Cylinders(c) => c.is_empty(),
        }
    }

    /// Number of arcs or cylinders in the representation.
    pub fn piece_count(&self) -> usize {
        match self {
            BaseSet::Arcs(a) => a.arcs().len(),
            BaseSet::Cylinders(c) => c.cylinders().len(),
        }
    }

    pub fn intersect(&self, other: &BaseSet) -> BaseSet {
        match (self, other) {
            (BaseSet::Arcs(a), BaseSet::Arcs(b)) => BaseSet::Arcs(a.intersect(b)),
            (BaseSet::Cylinders(a), BaseSet::Cylinders(b)) => BaseSet::Cylinders(a.intersect(b)),
            _ => panic!("{}", BaseError::KindMismatch),
        }
    }

    pub fn difference(&self, other: &BaseSet) -> BaseSet {
        match (self, other) {
            (BaseSet::Arcs(a), BaseSet::Arcs(b)) => BaseSet::Arcs(a.difference(b)),
            (BaseSet::Cylinders(a), BaseSet::Cylinders(b)) => BaseSet::Cylinders(a.difference(b)),
            _ => panic!("{}", BaseError::KindMismatch),
        }
    }

    pub fn union(&self, other: &BaseSet) -> BaseSet {
        match (self, other) {
            (BaseSet::Arcs(a), BaseSet::Arcs(b)) => BaseSet::Arcs(a.union(b)),
            (BaseSet::Cylinders(a), BaseSet::Cylinders(b)) => BaseSet::Cylinders(a.union(b)),
            _ => panic!("{}", BaseError::KindMismatch),
        }
    }

    pub fn is_disjoint(&self, other: &BaseSet) -> bool {
        self.intersect(other).is_empty()
    }

    /// Splits the set into its arcs or cylinders.
    pub fn components(&self) -> Vec<BaseSet> {
        match self {
            BaseSet::Arcs(a) => a
                .arcs()
                .iter()
                .map(|&r| BaseSet::Arcs(ArcSet::from_arcs(a.modulus, [r])))
                .collect(),
            BaseSet::Cylinders(c) => c
                .cylinders()
                .iter()
                .map(|cy| BaseSet::Cylinders(CylinderSet::single(c.symbols, cy.clone())))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quarter() -> BaseSystem {
        BaseSystem::rotation(250_000, 1_000_000, 0).unwrap()
    }

    #[test]
    fn orbit_zero_is_identity() {
        let sys = BaseSystem::golden_rotation(1);
        let p = sys.circle_point(0.3).unwrap();
        assert_eq!(sys.orbit(&p, 0), p);
    }

    #[test]
    fn rotation_step_wraps_mod_one() {
        let sys = quarter();
        let p = sys.circle_point(0.9).unwrap();
        let x = sys.circle_coordinate(&sys.orbit(&p, 1)).unwrap();
        assert!((x - 0.15).abs() < 1e-12);
    }

    #[test]
    fn shift_orbit_is_invertible() {
        let sys = BaseSystem::bernoulli(vec![0.5, 0.5], 3).unwrap();
        let p = BasePoint::Shift(ShiftPoint::new(11));
        let back = sys.orbit(&sys.orbit(&p, -1), 1);
        for i in -10..10 {
            assert_eq!(sys.symbol(&p, i), sys.symbol(&back, i));
        }
    }

    #[test]
    fn angle_validation() {
        assert!(BaseSystem::rotation(1, 10, 0).is_err());
        assert!(BaseSystem::rotation(0, 1_000_000, 0).is_err());
        assert!(BaseSystem::bernoulli(vec![0.5, 0.6], 0).is_err());
        assert!(BaseSystem::bernoulli(vec![1.0], 0).is_err());
    }

    #[test]
    fn preimage_of_arc_under_translation() {
        let sys = BaseSystem::rotation(300_000, 1_000_000, 0).unwrap();
        let a = sys.arc(0.0, 0.1).unwrap();
        let pre = sys.preimage(&a, 1);
        let expected = sys.arc(0.7, 0.8).unwrap();
        assert_eq!(pre, expected);
    }

    #[test]
    fn sampled_points_land_in_set() {
        let sys = BaseSystem::bernoulli(vec![0.3, 0.7], 0).unwrap();
        let set = sys.cylinder(-2, &[1, 0, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let p = sys.sample_in(&set, &mut rng).unwrap();
            assert!(sys.contains(&set, &p));
        }
    }

    proptest! {
        #[test]
        fn rotation_preserves_measure(a in 0.0f64..1.0, len in 0.0f64..0.5, n in -50i64..50) {
            let sys = BaseSystem::golden_rotation(0);
            let set = sys.arc(a, (a + len).min(1.0)).unwrap();
            prop_assert_eq!(sys.measure(&sys.preimage(&set, n)), sys.measure(&set));
        }

        #[test]
        fn shift_preserves_measure(word in proptest::collection::vec(0u8..3, 1..6),
                                   start in -5i64..5, n in -20i64..20) {
            let sys = BaseSystem::bernoulli(vec![0.2, 0.3, 0.5], 0).unwrap();
            let set = sys.cylinder(start, &word).unwrap();
            let m0 = sys.measure(&set);
            prop_assert!((sys.measure(&sys.preimage(&set, n)) - m0).abs() < 1e-15);
        }

        #[test]
        fn membership_commutes_with_orbit(x in 0.0f64..1.0, n in -30i64..30) {
            let sys = BaseSystem::golden_rotation(0);
            let set = sys.arc(0.2, 0.45).unwrap();
            let p = sys.circle_point(x).unwrap();
            prop_assert_eq!(sys.contains(&sys.preimage(&set, n), &p),
                            sys.contains(&set, &sys.orbit(&p, n)));
        }
    }
}
