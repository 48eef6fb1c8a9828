//! Random cone families, the Hilbert projective metric, interior-ball
//! certificates and invariance certificates with their robustness radius.
//!
//! Three shapes are supported, all with aperture 1/2:
//! * halfspace: `<e, v> >= |v| / 2`
//! * graph: `v = u + gamma e` with `u` in a complement `F` and `|u| <= gamma / 2`
//! * image: `P C` for an invertible `P` and an inner family `C`

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::base::{itinerary, BaseError, BaseSet, BaseSystem, PartitionMap};
use crate::linalg::{self, Matrix, Vector};
use crate::opcore::{gaussian_vector, OpError, RandomOperator, RandomVector};
use crate::rng::stream;

/// Membership slack relative to the norm of the tested vector.
pub const MEMBER_TOL: f64 = 1e-12;
pub const BETA_TOL: f64 = 1e-9;
pub const BETA_CAP: f64 = 1e12;
pub const DEFAULT_SAMPLES: usize = 1000;
/// Fraction of invariance samples drawn within `BOUNDARY_BAND` of the cone boundary.
pub const BOUNDARY_FRACTION: f64 = 0.8;
pub const BOUNDARY_BAND: f64 = 1e-3;

const HALF_ANGLE: f64 = std::f64::consts::FRAC_PI_3;
const DUAL_COS: f64 = 0.866_025_403_784_438_6; // cos(pi/6)

#[derive(Debug, Error)]
pub enum ConeError {
    #[error("vector is in neither the cone nor its negative")]
    OutsideCone,
    #[error("beta needs a nonzero first argument")]
    ZeroVector,
    #[error("image map is singular on piece {0}")]
    SingularImage(usize),
    #[error("axis must be a unit vector field")]
    AxisNotUnit,
    #[error("graph slope bound must lie in [0, 1), got {0}")]
    InvalidEta(f64),
    #[error("complement frame on piece {0} does not span a complement of the axis")]
    BadComplement(usize),
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("horizon must be at least 1")]
    ZeroHorizon,
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error(transparent)]
    Base(#[from] BaseError),
    #[error(transparent)]
    Op(#[from] OpError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConeKind {
    Halfspace,
    Graph,
    Image,
}

/// The cone attached to a single partition piece.
#[derive(Clone, Debug, PartialEq)]
pub enum ConeSection {
    Halfspace {
        axis: Vector,
    },
    /// `functional` vanishes on the complement and takes the value 1 on `axis`,
    /// so `gamma = <functional, v>`.
    Graph {
        axis: Vector,
        functional: Vector,
    },
    Image {
        map: Matrix,
        inverse: Matrix,
        inner: Box<ConeSection>,
    },
}

impl ConeSection {
    pub fn dim(&self) -> usize {
        match self {
            ConeSection::Halfspace { axis } | ConeSection::Graph { axis, .. } => axis.len(),
            ConeSection::Image { map, .. } => map.nrows(),
        }
    }

    /// Nonnegative exactly on the cone, before normalisation.
    fn raw_margin(&self, v: &Vector) -> (f64, f64) {
        match self {
            ConeSection::Halfspace { axis } => (axis.dot(v) - 0.5 * v.norm(), v.norm()),
            ConeSection::Graph { axis, functional } => {
                let gamma = functional.dot(v);
                let u = v - axis * gamma;
                (0.5 * gamma - u.norm(), v.norm())
            }
            ConeSection::Image { inverse, inner, .. } => inner.raw_margin(&(inverse * v)),
        }
    }

    /// Margin scaled to the tested vector; zero on the boundary.
    pub fn margin(&self, v: &Vector) -> f64 {
        let (m, n) = self.raw_margin(v);
        if n == 0.0 {
            0.0
        } else {
            m / n
        }
    }

    pub fn member(&self, v: &Vector) -> bool {
        let (m, n) = self.raw_margin(v);
        m >= -MEMBER_TOL * n
    }

    fn raw_dual_margin(&self, u: &Vector) -> (f64, f64) {
        match self {
            // The halfspace cone is the circular cone of half-angle pi/3
            // around the axis; its dual is the circular cone of half-angle pi/6.
            ConeSection::Halfspace { axis } => (axis.dot(u) - DUAL_COS * u.norm(), u.norm()),
            // inf over |w| <= 1/2 in F of <u, e + w> is <u, e> - |proj_F u| / 2.
            ConeSection::Graph { axis, functional } => {
                let proj = u - functional * (functional.dot(u) / functional.norm_squared());
                (axis.dot(u) - 0.5 * proj.norm(), u.norm())
            }
            ConeSection::Image { map, inner, .. } => inner.raw_dual_margin(&(map.transpose() * u)),
        }
    }

    pub fn dual_margin(&self, u: &Vector) -> f64 {
        let (m, n) = self.raw_dual_margin(u);
        if n == 0.0 {
            0.0
        } else {
            m / n
        }
    }

    pub fn dual_member(&self, u: &Vector) -> bool {
        let (m, n) = self.raw_dual_margin(u);
        m >= -MEMBER_TOL * n
    }

    /// Unit interior point `c`.
    pub fn interior(&self) -> Vector {
        match self {
            ConeSection::Halfspace { axis } | ConeSection::Graph { axis, .. } => axis.clone(),
            ConeSection::Image { map, inner, .. } => (map * inner.interior()).normalize(),
        }
    }

    /// Unit interior point `c'` of the dual cone.
    pub fn dual_interior(&self) -> Vector {
        match self {
            ConeSection::Halfspace { axis } | ConeSection::Graph { axis, .. } => axis.clone(),
            ConeSection::Image { inverse, inner, .. } => {
                (inverse.transpose() * inner.dual_interior()).normalize()
            }
        }
    }

    /// Radius of balls around `c` and `c'` contained in the cone and its dual.
    pub fn radius(&self) -> f64 {
        match self {
            ConeSection::Halfspace { .. } => 1.0 / 6.0,
            ConeSection::Graph { functional, .. } => 1.0 / (3.0 * functional.norm()),
            // P^{-1} B(Pc/|Pc|, s) lies in B(c/|Pc|, s |P^{-1}|), and the cone is
            // scale invariant; dually with P^T in place of P^{-1}.
            ConeSection::Image {
                map,
                inverse,
                inner,
            } => {
                let r = inner.radius();
                let primal = r / (linalg::spectral_norm(inverse) * (map * inner.interior()).norm());
                let dual = r
                    / (linalg::spectral_norm(map)
                        * (inverse.transpose() * inner.dual_interior()).norm());
                primal.min(dual)
            }
        }
    }

    /// Largest `|<u, e>| / |u|` over the complement; graph sections only.
    pub fn slope_bound(&self) -> Option<f64> {
        match self {
            ConeSection::Graph { functional, .. } => {
                Some((1.0 - 1.0 / functional.norm_squared()).max(0.0).sqrt())
            }
            _ => None,
        }
    }

    /// A unit cone member. With `boundary` set the sample sits within
    /// `BOUNDARY_BAND` of the boundary; otherwise it is spread over the cone.
    pub fn sample_member<R: Rng + ?Sized>(&self, boundary: bool, rng: &mut R) -> Vector {
        match self {
            ConeSection::Halfspace { axis } => {
                let Some(w) = orthogonal_direction(axis, rng) else {
                    return axis.clone();
                };
                let phi = if boundary {
                    HALF_ANGLE - BOUNDARY_BAND * rng.random::<f64>()
                } else {
                    HALF_ANGLE * rng.random::<f64>()
                };
                axis * phi.cos() + w * phi.sin()
            }
            ConeSection::Graph { axis, functional } => {
                let Some(u) = orthogonal_direction(functional, rng) else {
                    return axis.clone();
                };
                let s = if boundary {
                    1.0 - 2.0 * BOUNDARY_BAND * rng.random::<f64>()
                } else {
                    rng.random::<f64>()
                };
                (axis + u * (0.5 * s)).normalize()
            }
            ConeSection::Image { map, inner, .. } => {
                (map * inner.sample_member(boundary, rng)).normalize()
            }
        }
    }

    pub fn beta(&self, u: &Vector, v: &Vector) -> Result<f64, ConeError> {
        beta(self, u, v)
    }

    pub fn hilbert_metric(&self, u: &Vector, v: &Vector) -> Result<f64, ConeError> {
        hilbert_metric(self, u, v)
    }
}

/// Random unit vector orthogonal to `n`, or `None` in dimension one.
fn orthogonal_direction<R: Rng + ?Sized>(n: &Vector, rng: &mut R) -> Option<Vector> {
    let d = n.len();
    if d < 2 {
        return None;
    }
    let basis = linalg::complement_basis(n);
    loop {
        if let Some(w) = linalg::normalized(&(&basis * gaussian_vector(d - 1, rng))) {
            return Some(w);
        }
    }
}

/// Uniform point of the ball `B(center, radius)`.
fn sample_ball<R: Rng + ?Sized>(center: &Vector, radius: f64, rng: &mut R) -> Vector {
    let d = center.len();
    let dir = loop {
        if let Some(w) = linalg::normalized(&gaussian_vector(d, rng)) {
            break w;
        }
    };
    let rho = radius * rng.random::<f64>().powf(1.0 / d as f64);
    center + dir * rho
}

/// `|w|`: `w` if it lies in the cone, `-w` if it lies in the negative cone.
pub fn cone_abs(cone: &ConeSection, w: &Vector) -> Result<Vector, ConeError> {
    if cone.member(w) {
        Ok(w.clone())
    } else if cone.member(&-w) {
        Ok(-w)
    } else {
        Err(ConeError::OutsideCone)
    }
}

/// `inf { t > 0 : t|u| - |v| in C }`, by geometric bracketing and bisection.
/// Returns `+inf` when no `t` up to `BETA_CAP` qualifies.
pub fn beta(cone: &ConeSection, u: &Vector, v: &Vector) -> Result<f64, ConeError> {
    if u.norm() == 0.0 {
        return Err(ConeError::ZeroVector);
    }
    let au = cone_abs(cone, u)?;
    let av = cone_abs(cone, v)?;
    let ok = |t: f64| cone.member(&(&au * t - &av));
    let mut hi = 1.0;
    while !ok(hi) {
        hi *= 2.0;
        if hi > BETA_CAP {
            return Ok(f64::INFINITY);
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        if hi - lo <= BETA_TOL.max(4.0 * f64::EPSILON * hi) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// `log beta(u, v) + log beta(v, u)`.
pub fn hilbert_metric(cone: &ConeSection, u: &Vector, v: &Vector) -> Result<f64, ConeError> {
    let a = beta(cone, u, v)?;
    let b = beta(cone, v, u)?;
    if a.is_infinite() || b.is_infinite() {
        return Ok(f64::INFINITY);
    }
    Ok(a.ln() + b.ln())
}

/// A measurable family of cones over a base system.
#[derive(Clone, Debug)]
pub struct ConeFamily {
    base: BaseSystem,
    dim: usize,
    kind: ConeKind,
    sections: PartitionMap<ConeSection>,
    radius: f64,
}

impl ConeFamily {
    /// `<e(omega), v> >= |v| / 2`.
    pub fn halfspace(axis: &RandomVector) -> Result<Self, ConeError> {
        if !axis.is_unit() {
            return Err(ConeError::AxisNotUnit);
        }
        let sections = axis
            .map()
            .map_values(|e| ConeSection::Halfspace { axis: e.clone() });
        Ok(Self::assemble(
            axis.base().clone(),
            axis.dim(),
            ConeKind::Halfspace,
            sections,
        ))
    }

    /// Graph cone with `F(omega)` the orthogonal complement of the axis.
    pub fn graph_orthogonal(axis: &RandomVector) -> Result<Self, ConeError> {
        if !axis.is_unit() {
            return Err(ConeError::AxisNotUnit);
        }
        let sections = axis.map().map_values(|e| ConeSection::Graph {
            axis: e.clone(),
            functional: e.clone(),
        });
        Ok(Self::assemble(
            axis.base().clone(),
            axis.dim(),
            ConeKind::Graph,
            sections,
        ))
    }

    /// Graph cone with `F(omega)` spanned by the columns of `frames` (`d x (d-1)`).
    pub fn graph(axis: &RandomVector, frames: &PartitionMap<Matrix>) -> Result<Self, ConeError> {
        if !axis.is_unit() {
            return Err(ConeError::AxisNotUnit);
        }
        let d = axis.dim();
        let joined = axis.map().refine(frames);
        let mut pieces = Vec::with_capacity(joined.len());
        for (k, (set, (e, frame))) in joined.into_pieces().into_iter().enumerate() {
            if frame.nrows() != d || frame.ncols() + 1 != d {
                return Err(ConeError::Dimension(frame.nrows(), d));
            }
            let mut m = Matrix::zeros(d, d);
            m.set_column(0, &e);
            m.columns_mut(1, d - 1).copy_from(&frame);
            let inv = m.try_inverse().ok_or(ConeError::BadComplement(k))?;
            let functional: Vector = inv.row(0).transpose();
            if !functional.iter().all(|x| x.is_finite()) {
                return Err(ConeError::BadComplement(k));
            }
            pieces.push((
                set,
                ConeSection::Graph {
                    axis: e,
                    functional,
                },
            ));
        }
        let sections = PartitionMap::from_pieces_unchecked(pieces);
        Ok(Self::assemble(
            axis.base().clone(),
            d,
            ConeKind::Graph,
            sections,
        ))
    }

    /// Graph cone over a constant axis whose complement is tilted so that the
    /// largest `|<u, e>| / |u|` over `u` in the complement equals `eta`.
    pub fn graph_with_slope(base: &BaseSystem, axis: &Vector, eta: f64) -> Result<Self, ConeError> {
        if !(0.0..1.0).contains(&eta) {
            return Err(ConeError::InvalidEta(eta));
        }
        let e = linalg::normalized(axis).ok_or(ConeError::AxisNotUnit)?;
        let d = e.len();
        let mut functional = e.clone();
        if d > 1 {
            let w = linalg::complement_basis(&e).column(0).into_owned();
            functional += w * (eta / (1.0 - eta * eta).sqrt());
        }
        let sections = PartitionMap::constant(
            base,
            ConeSection::Graph {
                axis: e,
                functional,
            },
        );
        Ok(Self::assemble(base.clone(), d, ConeKind::Graph, sections))
    }

    /// `P(omega) C_omega`; `P` must be invertible on every piece.
    pub fn image(map: &RandomOperator, inner: &ConeFamily) -> Result<Self, ConeError> {
        if map.dim() != inner.dim {
            return Err(ConeError::Dimension(map.dim(), inner.dim));
        }
        let joined = map.map().refine(&inner.sections);
        let mut pieces = Vec::with_capacity(joined.len());
        for (k, (set, (p, sec))) in joined.into_pieces().into_iter().enumerate() {
            let inverse = p.clone().try_inverse().ok_or(ConeError::SingularImage(k))?;
            if !linalg::is_finite(&inverse) {
                return Err(ConeError::SingularImage(k));
            }
            pieces.push((
                set,
                ConeSection::Image {
                    map: p,
                    inverse,
                    inner: Box::new(sec),
                },
            ));
        }
        let sections = PartitionMap::from_pieces_unchecked(pieces);
        Ok(Self::assemble(
            map.base().clone(),
            inner.dim,
            ConeKind::Image,
            sections,
        ))
    }

    fn assemble(
        base: BaseSystem,
        dim: usize,
        kind: ConeKind,
        sections: PartitionMap<ConeSection>,
    ) -> Self {
        let radius = sections
            .pieces()
            .iter()
            .map(|(_, s)| s.radius())
            .fold(f64::INFINITY, f64::min);
        ConeFamily {
            base,
            dim,
            kind,
            sections,
            radius,
        }
    }

    /// Same cones with a different claimed interior radius.
    pub fn with_radius(mut self, r: f64) -> Self {
        self.radius = r;
        self
    }

    pub fn base(&self) -> &BaseSystem {
        &self.base
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> ConeKind {
        self.kind
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Radius the construction guarantees, independent of any override.
    pub fn analytic_radius(&self) -> f64 {
        self.sections
            .pieces()
            .iter()
            .map(|(_, s)| s.radius())
            .fold(f64::INFINITY, f64::min)
    }

    /// Supremum of the graph slope bound over pieces.
    pub fn slope_bound(&self) -> Option<f64> {
        let vals: Option<Vec<f64>> = self
            .sections
            .pieces()
            .iter()
            .map(|(_, s)| s.slope_bound())
            .collect();
        vals.map(|v| v.into_iter().fold(0.0, f64::max))
    }

    pub fn sections(&self) -> &PartitionMap<ConeSection> {
        &self.sections
    }

    pub fn section_at(&self, p: &crate::base::BasePoint) -> &ConeSection {
        self.sections.value_at(&self.base, p)
    }

    pub fn interior(&self) -> RandomVector {
        let pieces = self
            .sections
            .pieces()
            .iter()
            .map(|(s, c)| (s.clone(), c.interior()))
            .collect();
        RandomVector::new(self.base.clone(), self.dim, pieces, true)
            .expect("sections form a partition")
    }

    fn section_sets(&self) -> Vec<BaseSet> {
        self.sections
            .pieces()
            .iter()
            .map(|(s, _)| s.clone())
            .collect()
    }
}

/// A sampled point that broke a certificate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counterexample {
    pub piece: usize,
    pub vector: Vec<f64>,
    pub margin: f64,
    /// The failure concerns the dual cone.
    pub dual: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionCertificate {
    pub pass: bool,
    pub radius: f64,
    pub analytic_radius: f64,
    pub samples_per_piece: usize,
    pub worst_margin: f64,
    pub worst_dual_margin: f64,
    pub seed: u64,
    pub counterexample: Option<Counterexample>,
}

/// Samples balls of the family's radius around `c` and `c'` on every piece.
/// Besides uniform samples, each piece is probed on the ball's edge along
/// directions tilted away from the centre, where violations appear first.
pub fn check_condition_c(
    family: &ConeFamily,
    samples: usize,
    seed: u64,
) -> Result<ConditionCertificate, ConeError> {
    if samples == 0 {
        return Err(ConeError::NoSamples);
    }
    let r = family.radius;
    let per_piece: Vec<(f64, f64, Option<Counterexample>)> = family
        .sections
        .pieces()
        .par_iter()
        .enumerate()
        .map(|(k, (_, sec))| {
            let mut rng = stream(seed, k as u64);
            let c = sec.interior();
            let cd = sec.dual_interior();
            let mut points: Vec<(Vector, bool)> = Vec::with_capacity(2 * samples + 16);
            for _ in 0..samples {
                points.push((sample_ball(&c, r, &mut rng), false));
                points.push((sample_ball(&cd, r, &mut rng), true));
            }
            for (center, dual) in [(&c, false), (&cd, true)] {
                if let Some(w) = orthogonal_direction(center, &mut rng) {
                    for tilt in [0.0, 0.25, 0.5, 1.0] {
                        let dir: Vector = (&w - center * tilt).normalize();
                        points.push((center + dir * r, dual));
                    }
                }
            }
            let mut worst = f64::INFINITY;
            let mut worst_dual = f64::INFINITY;
            let mut bad: Option<Counterexample> = None;
            for (v, dual) in points {
                let (m, ok) = if dual {
                    (sec.dual_margin(&v), sec.dual_member(&v))
                } else {
                    (sec.margin(&v), sec.member(&v))
                };
                if dual {
                    worst_dual = worst_dual.min(m);
                } else {
                    worst = worst.min(m);
                }
                if !ok && bad.as_ref().is_none_or(|b| m < b.margin) {
                    bad = Some(Counterexample {
                        piece: k,
                        vector: v.iter().copied().collect(),
                        margin: m,
                        dual,
                    });
                }
            }
            (worst, worst_dual, bad)
        })
        .collect();
    let worst_margin = per_piece.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let worst_dual_margin = per_piece.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let counterexample = per_piece.into_iter().find_map(|p| p.2);
    Ok(ConditionCertificate {
        pass: counterexample.is_none(),
        radius: r,
        analytic_radius: family.analytic_radius(),
        samples_per_piece: samples,
        worst_margin,
        worst_dual_margin,
        seed,
        counterexample,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvarianceCertificate {
    pub ok: bool,
    pub horizon: usize,
    pub radius: f64,
    /// Supremum over samples of `beta(|T^N v|, c(theta^N omega))`.
    pub beta_sup: f64,
    /// `ln beta_sup`, finite even where `beta_sup` overflows.
    pub log_beta_sup: f64,
    /// Smallest normalised membership margin of `|T^N v|` in the target cone.
    pub margin: f64,
    /// `log beta_sup + log(2 M / r)` with `M` the largest norm of an `N`-step product.
    pub hilbert_bound: f64,
    pub product_norm: f64,
    pub log_product_norm: f64,
    pub pieces: usize,
    pub samples_per_piece: usize,
    pub seed: u64,
    /// The horizon is not prime.
    pub composite_horizon: bool,
    pub counterexample: Option<Counterexample>,
}

pub fn is_prime(n: usize) -> bool {
    n >= 2
        && (2..)
            .take_while(|k| k * k <= n)
            .all(|k| !n.is_multiple_of(k))
}

/// A piece on which the source cone, the `N`-step product and the target
/// cone are all constant. The product is `exp(log_scale) * product`, with
/// `product` renormalised while it is accumulated so long horizons do not underflow.
#[derive(Clone, Debug)]
pub struct InvariancePiece {
    pub set: BaseSet,
    pub source: ConeSection,
    pub product: Matrix,
    pub log_scale: f64,
    pub target: ConeSection,
}

pub fn invariance_pieces(
    t: &RandomOperator,
    family: &ConeFamily,
    horizon: usize,
) -> Vec<InvariancePiece> {
    let sys = &family.base;
    let cone_sets = family.section_sets();
    let op_sets: Vec<BaseSet> = t.pieces().iter().map(|(s, _)| s.clone()).collect();
    let mut layers: Vec<(&[BaseSet], i64)> = vec![(&cone_sets, 0)];
    for i in 0..horizon {
        layers.push((&op_sets, i as i64));
    }
    layers.push((&cone_sets, horizon as i64));
    itinerary(sys, &sys.whole(), &layers)
        .into_iter()
        .map(|(set, labels)| {
            let mut product = Matrix::identity(t.dim(), t.dim());
            let mut log_scale = 0.0;
            for &j in &labels[1..=horizon] {
                product = &t.pieces()[j].1 * product;
                let c = product.amax();
                if c > 0.0 {
                    product /= c;
                    log_scale += c.ln();
                }
            }
            InvariancePiece {
                set,
                source: family.sections.pieces()[labels[0]].1.clone(),
                product,
                log_scale,
                target: family.sections.pieces()[labels[horizon + 1]].1.clone(),
            }
        })
        .collect()
}

/// Checks that `T^N` maps each sampled unit `v` of `C_omega` into
/// `C_{theta^N omega}` or its negative, recording the largest `beta` against
/// the target interior point.
pub fn invariance_certificate(
    t: &RandomOperator,
    family: &ConeFamily,
    horizon: usize,
    samples: usize,
    seed: u64,
) -> Result<InvarianceCertificate, ConeError> {
    if horizon == 0 {
        return Err(ConeError::ZeroHorizon);
    }
    if samples == 0 {
        return Err(ConeError::NoSamples);
    }
    if t.dim() != family.dim {
        return Err(ConeError::Dimension(t.dim(), family.dim));
    }
    let pieces = invariance_pieces(t, family, horizon);
    // per piece: log of the largest beta, margin, log of the product norm, worst failure
    let results: Vec<(f64, f64, f64, Option<Counterexample>)> = pieces
        .par_iter()
        .enumerate()
        .map(|(k, piece)| {
            let (src, prod, dst) = (&piece.source, &piece.product, &piece.target);
            let mut rng = stream(seed, k as u64);
            let target_c = dst.interior();
            let mut sup = 0.0f64;
            let mut margin = f64::INFINITY;
            let mut bad: Option<Counterexample> = None;
            for i in 0..samples {
                let boundary = (i as f64) < BOUNDARY_FRACTION * samples as f64;
                let v = src.sample_member(boundary, &mut rng);
                let w = prod * &v;
                let m = dst.margin(&w).max(dst.margin(&-&w));
                margin = margin.min(m);
                // beta(s w, c) = beta(w, c) / s keeps tiny products away from the bracket cap
                let scale = w.norm();
                let scaled = if scale > 0.0 {
                    beta(dst, &(&w / scale), &target_c).map(|b| b / scale)
                } else {
                    Err(ConeError::ZeroVector)
                };
                match scaled {
                    Ok(b) => sup = sup.max(b),
                    Err(_) => {
                        if bad.as_ref().is_none_or(|b| m < b.margin) {
                            bad = Some(Counterexample {
                                piece: k,
                                vector: v.iter().copied().collect(),
                                margin: m,
                                dual: false,
                            });
                        }
                    }
                }
            }
            // beta(c w, target) = beta(w, target) / c
            (
                sup.ln() - piece.log_scale,
                margin,
                linalg::spectral_norm(prod).ln() + piece.log_scale,
                bad,
            )
        })
        .collect();
    let log_beta_sup = results
        .iter()
        .map(|r| r.0)
        .fold(f64::NEG_INFINITY, f64::max);
    let margin = results.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let log_product_norm = results
        .iter()
        .map(|r| r.2)
        .fold(f64::NEG_INFINITY, f64::max);
    let counterexample = results.into_iter().find_map(|r| r.3);
    let ok = counterexample.is_none() && log_beta_sup.is_finite();
    Ok(InvarianceCertificate {
        ok,
        horizon,
        radius: family.radius,
        beta_sup: log_beta_sup.exp(),
        log_beta_sup,
        margin,
        hilbert_bound: log_beta_sup + log_product_norm + (2.0 / family.radius).ln(),
        product_norm: log_product_norm.exp(),
        log_product_norm,
        pieces: pieces.len(),
        samples_per_piece: samples,
        seed,
        composite_horizon: !is_prime(horizon),
        counterexample,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessRadius {
    pub epsilon: f64,
    /// `ln epsilon`, finite even where `epsilon` underflows.
    pub log_epsilon: f64,
    pub horizon: usize,
    pub radius: f64,
    pub beta_sup: f64,
    pub operator_norm: f64,
    /// `r / (4R)`, the allowed distance between `N`-step products.
    pub product_tolerance: f64,
    /// `4R / r`, the bound on `beta` for every perturbation within `epsilon`.
    pub beta_bound: f64,
}

/// Largest `eps` with `eps * N * (|T| + eps)^(N-1) <= r / (4R)`. Any `S` with
/// `|S - T| <= eps` then has `|S^N - T^N| <= r / (4R)` on every fibre, since
/// each factor of the telescoped difference is bounded by `|T| + eps`.
pub fn robustness_radius(
    t: &RandomOperator,
    family: &ConeFamily,
    horizon: usize,
    beta_sup: f64,
) -> Result<RobustnessRadius, ConeError> {
    robustness_radius_log(t, family, horizon, beta_sup.ln())
}

/// [`robustness_radius`] with `R` given by its logarithm; the search runs on `ln eps`.
pub fn robustness_radius_log(
    t: &RandomOperator,
    family: &ConeFamily,
    horizon: usize,
    log_beta_sup: f64,
) -> Result<RobustnessRadius, ConeError> {
    if horizon == 0 {
        return Err(ConeError::ZeroHorizon);
    }
    let r = family.radius;
    let norm = t.ess_sup_norm();
    let log_target = r.ln() - 4f64.ln() - log_beta_sup;
    let n = horizon as f64;
    let log_lipschitz = |x: f64| x + n.ln() + (n - 1.0) * (norm + x.exp()).ln();
    let log_epsilon = if horizon == 1 {
        log_target
    } else {
        let (mut lo, mut hi) = (log_target, log_target);
        let mut step = 1.0;
        while log_lipschitz(hi) < log_target {
            hi += step;
            step *= 2.0;
        }
        step = 1.0;
        while log_lipschitz(lo) > log_target {
            lo -= step;
            step *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if log_lipschitz(mid) <= log_target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    Ok(RobustnessRadius {
        epsilon: log_epsilon.exp(),
        log_epsilon,
        horizon,
        radius: r,
        beta_sup: log_beta_sup.exp(),
        operator_norm: norm,
        product_tolerance: log_target.exp(),
        beta_bound: (log_beta_sup + 4f64.ln() - r.ln()).exp(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::opcore::gaussian_matrix;
    use crate::spectrum::{lyapunov_spectrum_qr, SpectrumOptions};
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sys() -> BaseSystem {
        BaseSystem::golden_rotation(0)
    }

    fn halfspace_e1(d: usize) -> ConeFamily {
        let mut e = Vector::zeros(d);
        e[0] = 1.0;
        ConeFamily::halfspace(&RandomVector::constant(sys(), e)).unwrap()
    }

    fn section(f: &ConeFamily) -> ConeSection {
        f.sections().pieces()[0].1.clone()
    }

    #[test]
    fn halfspace_membership_examples() {
        let c = section(&halfspace_e1(2));
        assert!(c.member(&dvector![1.0, 0.0]));
        assert!(!c.member(&dvector![0.0, 1.0]));
        assert!(c.member(&dvector![1.0, 1.0]));
    }

    #[test]
    fn dual_membership_examples() {
        let c = section(&halfspace_e1(2));
        assert!(c.dual_member(&c.dual_interior()));
        assert!(!c.dual_member(&dvector![-1.0, 0.0]));
    }

    #[test]
    fn closed_form_duals_agree_with_sampled_members() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cones = [
            section(&halfspace_e1(3)),
            section(&ConeFamily::graph_with_slope(&sys(), &dvector![1.0, 0.5, -0.2], 0.6).unwrap()),
        ];
        for c in cones {
            let members: Vec<Vector> = (0..1000)
                .map(|i| c.sample_member(i % 2 == 0, &mut rng))
                .collect();
            for _ in 0..300 {
                let u = crate::opcore::random_unit_vector(3, &mut rng);
                let brute = members
                    .iter()
                    .map(|v| u.dot(v))
                    .fold(f64::INFINITY, f64::min);
                // Sampling only approaches the true infimum from above, so a
                // closed-form member must have a nonnegative sampled minimum,
                // and a clear non-member must show a negative one.
                if c.dual_member(&u) {
                    assert!(brute >= -1e-12, "{brute}");
                } else if c.dual_margin(&u) < -0.05 {
                    assert!(brute < 0.0, "{brute}");
                }
            }
        }
    }

    #[test]
    fn beta_scaling_examples() {
        let c = section(&halfspace_e1(3));
        let u = dvector![1.0, 0.2, -0.1];
        assert_relative_eq!(beta(&c, &u, &u).unwrap(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(beta(&c, &u, &(&u * 2.0)).unwrap(), 2.0, epsilon = 1e-9);
    }

    #[test]
    fn beta_matches_grid_scan() {
        let c = section(&halfspace_e1(2));
        let u = dvector![1.0, 0.0];
        let v = dvector![1.0, 0.9];
        let b = beta(&c, &u, &v).unwrap();
        // Scan t over [0, 4] and refine once around the first admissible point.
        let admissible = |t: f64| (t - 1.0) >= 0.5 * ((t - 1.0).powi(2) + 0.81).sqrt();
        let coarse = (0..1_000_000)
            .map(|i| 4.0 * i as f64 / 1e6)
            .find(|&t| admissible(t))
            .unwrap();
        let step = 4.0 / 1e6;
        let fine = (0..1_000_000)
            .map(|i| coarse - step + step * i as f64 / 1e6)
            .find(|&t| admissible(t))
            .unwrap();
        assert!((b - fine).abs() <= 1e-9 + step / 1e6, "{b} vs {fine}");
    }

    #[test]
    fn beta_rejects_vectors_outside_both_cones() {
        let c = section(&halfspace_e1(2));
        assert!(matches!(
            beta(&c, &dvector![1.0, 0.0], &dvector![0.0, 1.0]),
            Err(ConeError::OutsideCone)
        ));
        assert!(matches!(
            beta(&c, &dvector![0.0, 0.0], &dvector![1.0, 0.0]),
            Err(ConeError::ZeroVector)
        ));
    }

    #[test]
    fn beta_accepts_negative_cone() {
        let c = section(&halfspace_e1(2));
        let u = dvector![1.0, 0.3];
        assert_relative_eq!(beta(&c, &-&u, &u).unwrap(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn hilbert_metric_is_projective() {
        let c = section(&halfspace_e1(3));
        let u = dvector![1.0, 0.3, 0.1];
        assert!(hilbert_metric(&c, &u, &u).unwrap().abs() < 1e-8);
        assert!(hilbert_metric(&c, &u, &(&u * 3.0)).unwrap().abs() < 1e-8);
        let v = dvector![1.0, -0.2, 0.4];
        assert_relative_eq!(
            hilbert_metric(&c, &u, &v).unwrap(),
            hilbert_metric(&c, &v, &u).unwrap(),
            epsilon = 1e-8
        );
    }

    #[test]
    fn hilbert_metric_triangle_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = section(&halfspace_e1(3));
        for _ in 0..100 {
            let [a, b, d] = [0, 1, 2].map(|_| c.sample_member(false, &mut rng));
            let ab = hilbert_metric(&c, &a, &b).unwrap();
            let bd = hilbert_metric(&c, &b, &d).unwrap();
            let ad = hilbert_metric(&c, &a, &d).unwrap();
            assert!(ad <= ab + bd + 1e-7, "{ad} > {ab} + {bd}");
        }
    }

    #[test]
    fn cones_are_proper() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p =
            RandomOperator::constant(sys(), dmatrix![2.0, 1.0, 0.0; 0.0, 1.0, 0.5; 0.3, 0.0, 1.0]);
        let fams = [
            halfspace_e1(3),
            ConeFamily::graph_with_slope(&sys(), &dvector![0.0, 1.0, 1.0], 0.8).unwrap(),
            ConeFamily::image(&p, &halfspace_e1(3)).unwrap(),
        ];
        for f in fams {
            let c = section(&f);
            for _ in 0..10_000 {
                let v = gaussian_vector(3, &mut rng);
                assert!(!(c.member(&v) && c.member(&-&v)));
            }
            assert!(c.member(&Vector::zeros(3)) && c.member(&-Vector::zeros(3)));
        }
    }

    #[test]
    fn halfspace_radius_one_sixth_passes() {
        let f = halfspace_e1(4);
        assert_relative_eq!(f.radius(), 1.0 / 6.0);
        let cert = check_condition_c(&f, 1000, 1).unwrap();
        assert!(cert.pass);
        assert!(cert.worst_margin > 0.0 && cert.worst_dual_margin > 0.0);
    }

    #[test]
    fn graph_radius_follows_slope() {
        let f = ConeFamily::graph_with_slope(&sys(), &dvector![1.0, 2.0, 0.0], 0.5).unwrap();
        assert_relative_eq!(f.slope_bound().unwrap(), 0.5, epsilon = 1e-12);
        assert_relative_eq!(f.radius(), 0.75f64.sqrt() / 3.0, epsilon = 1e-12);
        let cert = check_condition_c(&f, 1000, 2).unwrap();
        assert!(cert.pass, "{cert:?}");
    }

    #[test]
    fn graph_from_frame_matches_slope() {
        let e = dvector![1.0, 0.0, 0.0];
        let frame = dmatrix![0.5, 0.0; 1.0, 0.0; 0.0, 1.0];
        let axis = RandomVector::constant(sys(), e);
        let f = ConeFamily::graph(&axis, &PartitionMap::constant(&sys(), frame)).unwrap();
        // The complement contains (0.5, 1, 0)/|.|, whose cosine with e is 0.5/sqrt(1.25).
        assert_relative_eq!(
            f.slope_bound().unwrap(),
            0.5 / 1.25f64.sqrt(),
            epsilon = 1e-12
        );
        assert!(check_condition_c(&f, 1000, 3).unwrap().pass);
    }

    #[test]
    fn inflated_radius_fails() {
        let f = halfspace_e1(3).with_radius(0.9);
        let cert = check_condition_c(&f, 1000, 4).unwrap();
        assert!(!cert.pass);
        let ce = cert.counterexample.unwrap();
        assert!(ce.margin < 0.0);
    }

    #[test]
    fn image_cone_satisfies_condition() {
        let p = RandomOperator::constant(sys(), dmatrix![2.0, 0.5; -0.3, 1.0]);
        let f = ConeFamily::image(&p, &halfspace_e1(2)).unwrap();
        assert!(check_condition_c(&f, 1000, 6).unwrap().pass);
        let c = section(&f);
        assert!(c.member(&(dmatrix![2.0, 0.5; -0.3, 1.0] * dvector![1.0, 0.2])));
    }

    #[test]
    fn singular_image_is_rejected() {
        let p = RandomOperator::constant(sys(), dmatrix![1.0, 1.0; 1.0, 1.0]);
        assert!(matches!(
            ConeFamily::image(&p, &halfspace_e1(2)),
            Err(ConeError::SingularImage(_))
        ));
    }

    #[test]
    fn projection_plus_identity_is_invariant() {
        let f = halfspace_e1(3);
        let e = dvector![1.0, 0.0, 0.0];
        let t = RandomOperator::constant(
            sys(),
            linalg::line_projector(&e) * 2.0 + Matrix::identity(3, 3) * 0.1,
        );
        let cert = invariance_certificate(&t, &f, 1, 1000, 7).unwrap();
        assert!(cert.ok);
        assert!(cert.beta_sup < 3.0, "{}", cert.beta_sup);
        assert!(cert.margin > 0.0);
        assert!(!cert.composite_horizon || cert.horizon == 1);
    }

    #[test]
    fn rotation_breaks_invariance() {
        let f = halfspace_e1(2);
        let t = RandomOperator::constant(sys(), dmatrix![0.0, -1.0; 1.0, 0.0]);
        let cert = invariance_certificate(&t, &f, 1, 1000, 8).unwrap();
        assert!(!cert.ok);
        assert!(cert.counterexample.is_some());
    }

    #[test]
    fn quadrant_beta_matches_boundary_grid() {
        // P sends the halfspace cone around e1 onto the positive quadrant.
        let (s, c) = (HALF_ANGLE.sin(), HALF_ANGLE.cos());
        let edges = dmatrix![c, c; s, -s];
        let p = edges.try_inverse().unwrap();
        let inner = halfspace_e1(2);
        let f = ConeFamily::image(&RandomOperator::constant(sys(), p), &inner).unwrap();
        let sec = section(&f);
        assert!(sec.member(&dvector![1.0, 0.0]) && sec.member(&dvector![0.0, 1.0]));
        let a = dmatrix![2.0, 1.0; 0.5, 1.5];
        let t = RandomOperator::constant(sys(), a.clone());
        let cert = invariance_certificate(&t, &f, 1, 2000, 9).unwrap();
        assert!(cert.ok);
        // In the quadrant, beta(w, c) = max_i c_i / w_i.
        let ci = sec.interior();
        let brute = (0..=100_000)
            .map(|i| {
                let th = std::f64::consts::FRAC_PI_2 * i as f64 / 100_000.0;
                let w = &a * dvector![th.cos(), th.sin()];
                (ci[0] / w[0]).max(ci[1] / w[1])
            })
            .fold(0.0, f64::max);
        assert!(
            (cert.beta_sup - brute).abs() <= 0.05 * brute,
            "{} vs {brute}",
            cert.beta_sup
        );
    }

    #[test]
    fn robustness_radius_at_horizon_one() {
        let f = halfspace_e1(2);
        let t = RandomOperator::constant(sys(), dmatrix![2.0, 0.0; 0.0, 0.3]);
        let rr = robustness_radius(&t, &f, 1, 1.7).unwrap();
        assert_relative_eq!(rr.epsilon, f.radius() / (4.0 * 1.7), epsilon = 1e-15);
        assert_relative_eq!(rr.beta_bound, 4.0 * 1.7 / f.radius());
    }

    #[test]
    fn doubling_norm_roughly_halves_radius_at_horizon_two() {
        let f = halfspace_e1(2);
        let t = RandomOperator::constant(sys(), dmatrix![50.0, 0.0; 0.0, 1.0]);
        let e1 = robustness_radius(&t, &f, 2, 2.0).unwrap().epsilon;
        let e2 = robustness_radius(&t.scaled(2.0), &f, 2, 2.0)
            .unwrap()
            .epsilon;
        assert!((e1 / e2 - 2.0).abs() < 1e-3, "{}", e1 / e2);
    }

    #[test]
    fn perturbations_within_radius_stay_invariant() {
        let f = halfspace_e1(3);
        let e = dvector![1.0, 0.0, 0.0];
        let t = RandomOperator::piecewise(
            sys(),
            vec![
                linalg::line_projector(&e) * 2.0 + Matrix::identity(3, 3) * 0.1,
                dmatrix![1.5, 0.1, 0.0; 0.0, 0.2, 0.05; 0.1, 0.0, 0.2],
            ],
        )
        .unwrap();
        for horizon in [1, 2] {
            let cert = invariance_certificate(&t, &f, horizon, 1000, 10).unwrap();
            assert!(cert.ok);
            let rr = robustness_radius(&t, &f, horizon, cert.beta_sup).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            for _ in 0..20 {
                let s = t.map_matrices(|m| {
                    let g = gaussian_matrix(3, 1.0, &mut rng);
                    m + &g * (rr.epsilon / linalg::spectral_norm(&g))
                });
                assert!(s.distance(&t) <= rr.epsilon * (1.0 + 1e-12));
                let sc = invariance_certificate(&s, &f, horizon, 300, 13).unwrap();
                assert!(sc.ok);
                assert!(
                    sc.beta_sup <= rr.beta_bound,
                    "{} > {}",
                    sc.beta_sup,
                    rr.beta_bound
                );
            }
        }
    }

    #[test]
    fn certified_maps_contract_the_hilbert_metric() {
        let f = halfspace_e1(2);
        let a = dmatrix![2.0, 0.4; 0.3, 0.5];
        let t = RandomOperator::constant(sys(), a.clone());
        assert!(invariance_certificate(&t, &f, 1, 1000, 14).unwrap().ok);
        let c = section(&f);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let members: Vec<Vector> = (0..400)
            .map(|i| c.sample_member(i % 2 == 0, &mut rng))
            .collect();
        let images: Vec<Vector> = members.iter().map(|v| &a * v).collect();
        let mut diam = 0.0f64;
        for x in &images {
            for y in &images {
                diam = diam.max(hilbert_metric(&c, x, y).unwrap());
            }
        }
        let rate = (diam / 4.0).tanh();
        for k in 0..200 {
            let (u, v) = (&members[k], &members[k + 200]);
            let before = hilbert_metric(&c, u, v).unwrap();
            let after = hilbert_metric(&c, &(&a * u), &(&a * v)).unwrap();
            assert!(after <= rate * before + 1e-7, "{after} > {rate} * {before}");
        }
    }

    #[test]
    fn certified_instances_have_simple_top_exponent() {
        let f = halfspace_e1(3);
        let e = dvector![1.0, 0.0, 0.0];
        let t = RandomOperator::piecewise(
            sys(),
            vec![
                linalg::line_projector(&e) * 2.0 + Matrix::identity(3, 3) * 0.1,
                dmatrix![1.2, 0.1, 0.0; 0.05, 0.3, 0.1; 0.0, 0.1, 0.2],
            ],
        )
        .unwrap();
        assert!(invariance_certificate(&t, &f, 1, 1000, 16).unwrap().ok);
        let rep = lyapunov_spectrum_qr(&t, 2, &SpectrumOptions::new(4000, 4, 1)).unwrap();
        let gap = rep.raw[0] - rep.raw[1];
        assert!(gap > 3.0 * (rep.raw_stderr[0] + rep.raw_stderr[1]), "{gap}");
    }

    #[test]
    fn certificates_round_trip_json() {
        let f = halfspace_e1(2);
        let t = RandomOperator::constant(sys(), dmatrix![0.0, -1.0; 1.0, 0.0]);
        let cert = invariance_certificate(&t, &f, 4, 50, 8).unwrap();
        assert!(cert.composite_horizon);
        let text = serde_json::to_string(&cert).unwrap();
        let back: InvarianceCertificate = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cert);
    }

    #[test]
    fn horizon_follows_itinerary_on_rotation() {
        let base = sys();
        let t = RandomOperator::piecewise(
            base.clone(),
            vec![dmatrix![2.0, 0.0; 0.0, 1.0], dmatrix![3.0, 0.1; 0.0, 0.5]],
        )
        .unwrap();
        let f = halfspace_e1(2);
        let pieces = invariance_pieces(&t, &f, 3);
        let total: f64 = pieces.iter().map(|q| base.measure(&q.set)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let p = base.sample_point(&mut rng);
            let piece = pieces.iter().find(|q| base.contains(&q.set, &p)).unwrap();
            let prod = &piece.product * piece.log_scale.exp();
            assert!((prod - t.cocycle_product(&p, 3)).norm() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn beta_is_homogeneous(x in -0.5f64..0.5, y in -0.5f64..0.5, s in 0.1f64..10.0) {
            let c = section(&halfspace_e1(3));
            let u = dvector![1.0, x, y];
            let v = dvector![1.0, y, -x];
            let b = beta(&c, &u, &v).unwrap();
            let bs = beta(&c, &u, &(&v * s)).unwrap();
            prop_assert!((bs - s * b).abs() <= 1e-8 * (1.0 + s * b));
        }

        #[test]
        fn interior_ball_points_are_members(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = ConeFamily::graph_with_slope(&sys(), &dvector![0.3, 1.0, -0.4], 0.7).unwrap();
            let c = section(&f);
            let p = sample_ball(&c.interior(), f.radius(), &mut rng);
            prop_assert!(c.member(&p));
            let q = sample_ball(&c.dual_interior(), f.radius(), &mut rng);
            prop_assert!(c.dual_member(&q));
        }
    }
}
