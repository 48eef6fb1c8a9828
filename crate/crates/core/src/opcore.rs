//! Random operators and vectors over a base system, with norms, cocycle
//! products and the constructive approximations (maximising vector,
//! finite-rank truncation, bijective completion).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::base::{BaseError, BasePoint, BaseSet, BaseSystem, PartitionMap};
use crate::linalg::{self, Matrix, Vector};

/// Relative tolerance under which two top singular values count as equal.
const MULTIPLICITY_TOL: f64 = 1e-9;
const UNIT_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum OpError {
    #[error("piece {piece}: expected {expected}x{expected} entries, found {found}")]
    Dimension {
        piece: usize,
        expected: usize,
        found: usize,
    },
    #[error("piece {piece} has non-finite entries")]
    NonFinite { piece: usize },
    #[error("piece {piece} vector is not unit (norm {norm})")]
    NotUnit { piece: usize, norm: f64 },
    #[error("epsilon must be positive, got {0}")]
    InvalidEpsilon(f64),
    #[error("operator vanishes at the requested point")]
    ZeroOperator,
    #[error(transparent)]
    Base(#[from] BaseError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// A truncated random operator: a `dim x dim` matrix on every partition piece.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomOperator {
    base: BaseSystem,
    dim: usize,
    map: PartitionMap<Matrix>,
}

/// Unit vector `f` maximising `|T(omega) f|`, with its certificate.
#[derive(Clone, Debug)]
pub struct MaximizingVector {
    pub vector: Vector,
    pub norm: f64,
    /// Top singular value is not simple; `vector` is one maximiser among many.
    pub degenerate: bool,
    /// `| |T f| - |T| |`.
    pub norm_residual: f64,
    /// Largest `|<T f, T u>|` over an orthonormal basis `u` of the complement of `f`.
    pub orthogonality_residual: f64,
}

impl RandomOperator {
    pub fn new(
        base: BaseSystem,
        dim: usize,
        pieces: Vec<(BaseSet, Matrix)>,
    ) -> Result<Self, OpError> {
        for (k, (_, m)) in pieces.iter().enumerate() {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(OpError::Dimension {
                    piece: k,
                    expected: dim,
                    found: m.len(),
                });
            }
            if !linalg::is_finite(m) {
                return Err(OpError::NonFinite { piece: k });
            }
        }
        let map = PartitionMap::new(&base, pieces)?;
        Ok(RandomOperator { base, dim, map })
    }

    pub fn constant(base: BaseSystem, m: Matrix) -> Self {
        assert_eq!(m.nrows(), m.ncols(), "square matrix required");
        let map = PartitionMap::constant(&base, m.clone());
        RandomOperator {
            dim: m.nrows(),
            base,
            map,
        }
    }

    /// One matrix per partition piece: equal arcs on the circle, or the
    /// cylinders `{omega_0 = s}` on the shift (which makes the cocycle i.i.d.).
    pub fn piecewise(base: BaseSystem, mats: Vec<Matrix>) -> Result<Self, OpError> {
        let dim = mats.first().map_or(0, |m| m.nrows());
        let pieces: Vec<(BaseSet, Matrix)> = if base.is_rotation() {
            let k = mats.len() as f64;
            mats.into_iter()
                .enumerate()
                .map(|(i, m)| Ok((base.arc(i as f64 / k, (i + 1) as f64 / k)?, m)))
                .collect::<Result<_, BaseError>>()?
        } else {
            mats.into_iter()
                .enumerate()
                .map(|(s, m)| Ok((base.cylinder(0, &[s as u8])?, m)))
                .collect::<Result<_, BaseError>>()?
        };
        RandomOperator::new(base, dim, pieces)
    }

    pub fn base(&self) -> &BaseSystem {
        &self.base
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn map(&self) -> &PartitionMap<Matrix> {
        &self.map
    }

    pub fn pieces(&self) -> &[(BaseSet, Matrix)] {
        self.map.pieces()
    }

    pub fn matrix_at(&self, p: &BasePoint) -> &Matrix {
        self.map.value_at(&self.base, p)
    }

    /// `T(theta^{n-1} omega) ... T(omega)`; the identity for `n = 0`.
    pub fn cocycle_product(&self, p: &BasePoint, n: usize) -> Matrix {
        let mut acc = Matrix::identity(self.dim, self.dim);
        let mut q = p.clone();
        for _ in 0..n {
            acc = self.matrix_at(&q) * acc;
            q = self.base.orbit(&q, 1);
        }
        acc
    }

    pub fn ess_sup_norm(&self) -> f64 {
        self.map.ess_sup(&self.base, linalg::spectral_norm).max(0.0)
    }

    /// `ess sup |T(omega) - S(omega)|` over the common refinement.
    pub fn distance(&self, other: &RandomOperator) -> f64 {
        self.map
            .refine(&other.map)
            .ess_sup(&self.base, |(a, b)| linalg::spectral_norm(&(a - b)))
            .max(0.0)
    }

    pub fn map_matrices(&self, mut f: impl FnMut(&Matrix) -> Matrix) -> RandomOperator {
        let map = self.map.map_values(|m| f(m));
        let dim = map.pieces().first().map_or(self.dim, |(_, m)| m.nrows());
        RandomOperator {
            base: self.base.clone(),
            dim,
            map,
        }
    }

    pub fn scaled(&self, c: f64) -> RandomOperator {
        self.map_matrices(|m| m * c)
    }

    pub fn maximizing_vector(&self, p: &BasePoint) -> Result<MaximizingVector, OpError> {
        maximizing_vector_of(self.matrix_at(p))
    }

    /// Zeroes every singular value below `eps` on every piece.
    pub fn finite_rank_approx(&self, eps: f64) -> Result<RandomOperator, OpError> {
        if !(eps > 0.0) {
            return Err(OpError::InvalidEpsilon(eps));
        }
        Ok(self.map_matrices(|m| truncate_singular_values(m, eps)))
    }

    /// Lifts singular values below `bijective_floor(dim, eps)` to that floor,
    /// so every piece is invertible and the lifts have squares summing below `eps^2`.
    pub fn bijective_approx(&self, eps: f64) -> Result<RandomOperator, OpError> {
        if !(eps > 0.0) {
            return Err(OpError::InvalidEpsilon(eps));
        }
        let floor = bijective_floor(self.dim, eps);
        Ok(self.map_matrices(|m| lift_singular_values(m, floor)))
    }

    /// `T` off the patched sets, the given matrix on each patch. Patches must be
    /// pairwise disjoint.
    pub fn patched(&self, patches: Vec<(BaseSet, Matrix)>) -> Result<RandomOperator, OpError> {
        if patches.is_empty() {
            return Ok(self.clone());
        }
        let sets: Vec<BaseSet> = patches.iter().map(|(s, _)| s.clone()).collect();
        let covered = self.base.union_all(&sets);
        let mut pieces: Vec<(BaseSet, Matrix)> = self
            .pieces()
            .iter()
            .filter_map(|(s, m)| {
                let rest = s.difference(&covered);
                (!rest.is_empty()).then(|| (rest, m.clone()))
            })
            .collect();
        pieces.extend(patches);
        RandomOperator::new(self.base.clone(), self.dim, pieces)
    }

    pub fn to_document(&self) -> OperatorDocument {
        OperatorDocument {
            base: self.base.clone(),
            dim: self.dim,
            pieces: self
                .map
                .pieces()
                .iter()
                .map(|(set, m)| MatrixPiece {
                    set: set.clone(),
                    entries: row_major(m),
                })
                .collect(),
        }
    }

    pub fn from_document(doc: OperatorDocument) -> Result<Self, OpError> {
        doc.base.validate()?;
        let dim = doc.dim;
        let mut pieces = Vec::with_capacity(doc.pieces.len());
        for (k, p) in doc.pieces.into_iter().enumerate() {
            if p.entries.len() != dim * dim {
                return Err(OpError::Dimension {
                    piece: k,
                    expected: dim,
                    found: p.entries.len(),
                });
            }
            pieces.push((p.set, Matrix::from_row_slice(dim, dim, &p.entries)));
        }
        RandomOperator::new(doc.base, dim, pieces)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_document()).expect("operator documents serialise")
    }

    pub fn from_json(text: &str) -> Result<Self, OpError> {
        RandomOperator::from_document(serde_json::from_str(text)?)
    }
}

/// The value every small singular value is lifted to by `bijective_approx`.
pub fn bijective_floor(dim: usize, eps: f64) -> f64 {
    eps / (2.0 * (dim.max(1) as f64).sqrt())
}

/// Raises every singular value below `floor` to `floor`.
pub fn lift_singular_values(m: &Matrix, floor: f64) -> Matrix {
    let s = linalg::svd(m);
    if s.sigma.iter().all(|&x| x >= floor) {
        return m.clone();
    }
    let mut s = s;
    // On the kernel the left vectors are free; orient them like the right
    // ones so a lifted null direction gets a positive diagonal entry.
    for k in 0..s.sigma.len() {
        if s.sigma[k] == 0.0 && s.u.column(k).dot(&s.v.column(k)) < 0.0 {
            s.u.column_mut(k).neg_mut();
        }
    }
    let lifted: Vec<f64> = s.sigma.iter().map(|&x| x.max(floor)).collect();
    s.recompose(&lifted)
}

/// Zeroes every singular value below `eps`.
pub fn truncate_singular_values(m: &Matrix, eps: f64) -> Matrix {
    let s = linalg::svd(m);
    let kept: Vec<f64> = s
        .sigma
        .iter()
        .map(|&x| if x < eps { 0.0 } else { x })
        .collect();
    s.recompose(&kept)
}

pub fn maximizing_vector_of(m: &Matrix) -> Result<MaximizingVector, OpError> {
    let s = linalg::svd(m);
    let top = s.sigma.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return Err(OpError::ZeroOperator);
    }
    let f = s.v.column(0).into_owned();
    let tf = m * &f;
    let degenerate = s.sigma.len() > 1 && s.sigma[1] >= top * (1.0 - MULTIPLICITY_TOL);
    let orthogonality_residual = if f.len() > 1 {
        let basis = linalg::complement_basis(&f);
        (m * basis).transpose().mul(&tf).amax()
    } else {
        0.0
    };
    Ok(MaximizingVector {
        norm_residual: (tf.norm() - top).abs(),
        vector: f,
        norm: top,
        degenerate,
        orthogonality_residual,
    })
}

use std::ops::Mul;

pub fn row_major(m: &Matrix) -> Vec<f64> {
    m.transpose().iter().copied().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixPiece {
    pub set: BaseSet,
    /// Row-major entries.
    pub entries: Vec<f64>,
}

/// Serialised form of a random operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorDocument {
    pub base: BaseSystem,
    pub dim: usize,
    pub pieces: Vec<MatrixPiece>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorPiece {
    pub set: BaseSet,
    pub entries: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorDocument {
    pub base: BaseSystem,
    pub dim: usize,
    pub unit: bool,
    pub pieces: Vec<VectorPiece>,
}

/// A random vector field; `unit` records that every value has norm one.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomVector {
    base: BaseSystem,
    dim: usize,
    map: PartitionMap<Vector>,
    unit: bool,
}

impl RandomVector {
    pub fn new(
        base: BaseSystem,
        dim: usize,
        pieces: Vec<(BaseSet, Vector)>,
        unit: bool,
    ) -> Result<Self, OpError> {
        for (k, (_, v)) in pieces.iter().enumerate() {
            if v.len() != dim {
                return Err(OpError::Dimension {
                    piece: k,
                    expected: dim,
                    found: v.len(),
                });
            }
            if unit && (v.norm() - 1.0).abs() > UNIT_TOL {
                return Err(OpError::NotUnit {
                    piece: k,
                    norm: v.norm(),
                });
            }
        }
        let map = PartitionMap::new(&base, pieces)?;
        Ok(RandomVector {
            base,
            dim,
            map,
            unit,
        })
    }

    /// A vector field defined only on some set, stored as a partial map. The
    /// pieces must be pairwise disjoint; that is not checked.
    pub fn partial(
        base: BaseSystem,
        dim: usize,
        pieces: Vec<(BaseSet, Vector)>,
        unit: bool,
    ) -> Self {
        RandomVector {
            base,
            dim,
            map: PartitionMap::from_pieces_unchecked(pieces),
            unit,
        }
    }

    pub fn constant(base: BaseSystem, v: Vector) -> Self {
        let unit = (v.norm() - 1.0).abs() <= UNIT_TOL;
        let dim = v.len();
        RandomVector {
            map: PartitionMap::constant(&base, v),
            base,
            dim,
            unit,
        }
    }

    pub fn base(&self) -> &BaseSystem {
        &self.base
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_unit(&self) -> bool {
        self.unit
    }

    pub fn map(&self) -> &PartitionMap<Vector> {
        &self.map
    }

    pub fn pieces(&self) -> &[(BaseSet, Vector)] {
        self.map.pieces()
    }

    pub fn vector_at(&self, p: &BasePoint) -> &Vector {
        self.map.value_at(&self.base, p)
    }

    pub fn try_vector_at(&self, p: &BasePoint) -> Option<&Vector> {
        self.map
            .piece_index(&self.base, p)
            .map(|k| &self.map.pieces()[k].1)
    }

    /// Measure of the set where the field is defined.
    pub fn domain_measure(&self) -> f64 {
        self.pieces()
            .iter()
            .map(|(s, _)| self.base.measure(s))
            .sum()
    }

    pub fn to_document(&self) -> VectorDocument {
        VectorDocument {
            base: self.base.clone(),
            dim: self.dim,
            unit: self.unit,
            pieces: self
                .pieces()
                .iter()
                .map(|(set, v)| VectorPiece {
                    set: set.clone(),
                    entries: v.iter().copied().collect(),
                })
                .collect(),
        }
    }

    /// Accepts partial fields; only dimensions, finiteness and unit norms are checked.
    pub fn from_document(doc: VectorDocument) -> Result<Self, OpError> {
        doc.base.validate()?;
        let mut pieces = Vec::with_capacity(doc.pieces.len());
        for (k, p) in doc.pieces.into_iter().enumerate() {
            if p.entries.len() != doc.dim {
                return Err(OpError::Dimension {
                    piece: k,
                    expected: doc.dim,
                    found: p.entries.len(),
                });
            }
            let v = Vector::from_vec(p.entries);
            if v.iter().any(|x| !x.is_finite()) {
                return Err(OpError::NonFinite { piece: k });
            }
            if doc.unit && (v.norm() - 1.0).abs() > UNIT_TOL {
                return Err(OpError::NotUnit {
                    piece: k,
                    norm: v.norm(),
                });
            }
            pieces.push((p.set, v));
        }
        let field = RandomVector::partial(doc.base, doc.dim, pieces, doc.unit);
        field.map.validate_partial(&field.base)?;
        Ok(field)
    }
}

/// Standard Gaussian `d x d` matrix scaled by `scale`.
pub fn gaussian_matrix<R: Rng + ?Sized>(d: usize, scale: f64, rng: &mut R) -> Matrix {
    Matrix::from_fn(d, d, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vector {
    Vector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn random_unit_vector<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vector {
    loop {
        if let Some(v) = linalg::normalized(&gaussian_vector(d, rng)) {
            return v;
        }
    }
}
