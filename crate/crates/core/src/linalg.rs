//! Dense linear-algebra helpers shared by every module.

use nalgebra::{DMatrix, DVector};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// `m = u * diag(sigma) * v^T`, singular values descending, each right
/// singular vector oriented so its first non-negligible entry is positive.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

pub fn svd(m: &Matrix) -> Svd {
    let s = nalgebra::SVD::new(m.clone(), true, true);
    let mut u = s.u.expect("left vectors requested");
    let mut v = s.v_t.expect("right vectors requested").transpose();
    let sigma: Vec<f64> = s.singular_values.iter().copied().collect();
    for k in 0..sigma.len() {
        let col = v.column(k);
        let lead = col.iter().copied().find(|x| x.abs() > 1e-14).unwrap_or(1.0);
        if lead < 0.0 {
            v.column_mut(k).neg_mut();
            u.column_mut(k).neg_mut();
        }
    }
    Svd { u, sigma, v }
}

impl Svd {
    pub fn recompose(&self, sigma: &[f64]) -> Matrix {
        let d = Matrix::from_diagonal(&Vector::from_column_slice(sigma));
        &self.u * d * self.v.transpose()
    }
}

pub fn singular_values(m: &Matrix) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    m.singular_values().iter().copied().collect()
}

pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

pub fn normalized(v: &Vector) -> Option<Vector> {
    let n = v.norm();
    (n > 0.0 && n.is_finite()).then(|| v / n)
}

/// Columns form an orthonormal basis of the orthogonal complement of `v`.
/// Built from the Householder reflection sending `v` to a multiple of the
/// first coordinate vector, so the result is a deterministic function of `v`.
pub fn complement_basis(v: &Vector) -> Matrix {
    let d = v.len();
    let unit = normalized(v).expect("nonzero vector");
    let s = if unit[0] >= 0.0 { -1.0 } else { 1.0 };
    let mut w = unit.clone();
    w[0] -= s;
    let wn = w.norm_squared();
    let mut h = Matrix::identity(d, d);
    if wn > 0.0 {
        h -= (&w * w.transpose()) * (2.0 / wn);
    }
    h.columns(1, d - 1).into_owned()
}

/// Orthogonal projector onto the line spanned by the unit vector `e`.
pub fn line_projector(e: &Vector) -> Matrix {
    e * e.transpose()
}

/// Matrix that maps `e_in` to `target` and acts as `base` on the orthogonal
/// complement of the unit vector `e_in`.
pub fn redefine_on_line(base: &Matrix, e_in: &Vector, target: &Vector) -> Matrix {
    base + (target - base * e_in) * e_in.transpose()
}

pub fn is_finite(m: &Matrix) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// `|cos|` residual between the directions of `a` and `b`:
/// `min(|a/|a| - b/|b||, |a/|a| + b/|b||)`.
pub fn direction_residual(a: &Vector, b: &Vector) -> f64 {
    match (normalized(a), normalized(b)) {
        (Some(x), Some(y)) => (&x - &y).norm().min((&x + &y).norm()),
        _ => f64::INFINITY,
    }
}

/// A matrix stored row by row as `exp(scale_i) * row_i`, so products whose
/// rows differ by hundreds of orders of magnitude stay representable.
#[derive(Clone, Debug)]
pub struct GradedRows {
    pub scales: Vec<f64>,
    pub rows: Vec<Vector>,
}

impl GradedRows {
    pub fn identity(d: usize) -> Self {
        GradedRows {
            scales: vec![0.0; d],
            rows: (0..d)
                .map(|i| Vector::from_fn(d, |j, _| if i == j { 1.0 } else { 0.0 }))
                .collect(),
        }
    }

    /// Replaces `self` by `r * self` for an upper-triangular (or any) square `r`.
    pub fn left_multiply(&mut self, r: &Matrix) {
        let d = self.rows.len();
        let mut scales = vec![f64::NEG_INFINITY; d];
        let mut rows = Vec::with_capacity(d);
        for i in 0..d {
            let lead = (0..d)
                .filter(|&j| r[(i, j)] != 0.0 && self.scales[j].is_finite())
                .map(|j| r[(i, j)].abs().ln() + self.scales[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut w = Vector::zeros(self.rows[0].len());
            if lead.is_finite() {
                for j in 0..d {
                    if r[(i, j)] != 0.0 && self.scales[j].is_finite() {
                        w += &self.rows[j] * (r[(i, j)] * (self.scales[j] - lead).exp());
                    }
                }
            }
            let n = w.norm();
            if n > 0.0 && lead.is_finite() {
                scales[i] = lead + n.ln();
                rows.push(w / n);
            } else {
                rows.push(w);
            }
        }
        self.scales = scales;
        self.rows = rows;
    }

    /// Logarithms of the singular values, descending, by one-sided Jacobi
    /// rotations of the rows carried out on the scaled representation.
    pub fn log_singular_values(&self) -> Vec<f64> {
        let mut s = self.scales.clone();
        let mut w = self.rows.clone();
        let d = w.len();
        for _sweep in 0..100 {
            let mut rotated = false;
            for i in 0..d {
                for j in i + 1..d {
                    if !s[i].is_finite() || !s[j].is_finite() {
                        continue;
                    }
                    let (hi, lo) = if s[i] >= s[j] { (i, j) } else { (j, i) };
                    let a = w[hi].norm_squared();
                    let b = w[lo].norm_squared();
                    let g = w[hi].dot(&w[lo]);
                    if g == 0.0 || g.abs() <= 1e-15 * (a * b).sqrt() {
                        continue;
                    }
                    rotated = true;
                    let rho = (s[lo] - s[hi]).exp();
                    // eta = rho * zeta with zeta the usual Jacobi cotangent
                    let eta = (rho * rho * b - a) / (2.0 * g);
                    let t_over_rho = eta.signum() / (eta.abs() + (rho * rho + eta * eta).sqrt());
                    let t = rho * t_over_rho;
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let new_hi = &w[hi] * c - &w[lo] * (c * t * rho);
                    let new_lo = &w[lo] * c + &w[hi] * (c * t_over_rho);
                    for (k, v) in [(hi, new_hi), (lo, new_lo)] {
                        let n = v.norm();
                        if n > 0.0 {
                            s[k] += n.ln();
                            w[k] = v / n;
                        } else {
                            s[k] = f64::NEG_INFINITY;
                            w[k] = v;
                        }
                    }
                }
            }
            if !rotated {
                break;
            }
        }
        let mut out: Vec<f64> = (0..d)
            .map(|k| {
                if s[k].is_finite() {
                    s[k] + w[k].norm().ln()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        out.sort_by(|x, y| y.total_cmp(x));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn svd_orders_and_reconstructs() {
        let m = Matrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, -1.0, 0.5, 3.0, 0.0, 1.0, 1.0]);
        let s = svd(&m);
        assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        assert_relative_eq!(s.recompose(&s.sigma), m, epsilon = 1e-12);
    }

    #[test]
    fn complement_is_orthonormal() {
        let v = Vector::from_vec(vec![0.3, -2.0, 1.0, 0.5]);
        let b = complement_basis(&v);
        assert_relative_eq!(b.transpose() * &b, Matrix::identity(3, 3), epsilon = 1e-12);
        assert!((b.transpose() * &v).norm() < 1e-12);
    }

    #[test]
    fn graded_singular_values_match_svd() {
        let m = Matrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 0.5, -1.0, 3.0, 1.0, 1.0, 1.0]);
        let mut g = GradedRows::identity(3);
        g.left_multiply(&m);
        let got = g.log_singular_values();
        let want: Vec<f64> = svd(&m).sigma.iter().map(|x| x.ln()).collect();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn graded_rows_survive_extreme_spread() {
        // diag(e^400, 1, e^-400) is not representable as a dense f64 product
        let mut g = GradedRows::identity(3);
        let step = Matrix::from_diagonal(&Vector::from_vec(vec![4f64.exp(), 1.0, (-4f64).exp()]));
        for _ in 0..100 {
            g.left_multiply(&step);
        }
        let got = g.log_singular_values();
        assert!(
            (got[0] - 400.0).abs() < 1e-9 && got[1].abs() < 1e-9 && (got[2] + 400.0).abs() < 1e-9
        );
    }

    #[test]
    fn redefine_keeps_complement() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let e = Vector::from_vec(vec![1.0, 0.0]);
        let t = Vector::from_vec(vec![5.0, 5.0]);
        let r = redefine_on_line(&m, &e, &t);
        assert_relative_eq!(&r * &e, t);
        let f = Vector::from_vec(vec![0.0, 1.0]);
        assert_relative_eq!(&r * &f, &m * &f);
    }
}
