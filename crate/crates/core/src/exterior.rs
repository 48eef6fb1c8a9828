//! Exterior powers via compound matrices, and the spectrum recovered from
//! the top exponents of the exterior-power cocycles.
//!
//! Wedge basis vectors `e_I = e_{i_1} ^ ... ^ e_{i_k}` are indexed by the
//! strictly increasing `k`-subsets `I` of `0..d` in lexicographic order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{Matrix, Vector};
use crate::opcore::RandomOperator;
use crate::spectrum::{
    self, SpectrumError, SpectrumMethod, SpectrumOptions, SpectrumReport, TopExponent,
};

/// Largest wedge-space dimension handled with explicit minors.
pub const MAX_COMPOUND_DIM: usize = 2000;

#[derive(Debug, Error, PartialEq)]
pub enum ExteriorError {
    #[error("wedge degree {k} outside 1..={d}")]
    Degree { k: usize, d: usize },
    #[error("C({d},{k}) = {size} exceeds the explicit-minor cap of {MAX_COMPOUND_DIM}")]
    TooLarge { d: usize, k: usize, size: usize },
    #[error("wedge factors have different lengths ({0} and {1})")]
    Length(usize, usize),
    #[error(transparent)]
    Spectrum(#[from] SpectrumError),
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > usize::MAX as u128 {
            return usize::MAX;
        }
    }
    acc as usize
}

/// All strictly increasing `k`-subsets of `0..d`, lexicographically ordered.
pub fn subsets(d: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(binomial(d, k));
    if k > d {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] < d - k + i) else {
            break;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
    out
}

fn check_degree(d: usize, k: usize) -> Result<(), ExteriorError> {
    if k == 0 || k > d {
        return Err(ExteriorError::Degree { k, d });
    }
    let size = binomial(d, k);
    if size > MAX_COMPOUND_DIM {
        return Err(ExteriorError::TooLarge { d, k, size });
    }
    Ok(())
}

/// `k`-th compound matrix: entry `(I, J)` is the minor `det M[I, J]`.
pub fn compound_matrix(m: &Matrix, k: usize) -> Result<Matrix, ExteriorError> {
    let d = m.nrows();
    check_degree(d, k)?;
    let idx = subsets(d, k);
    let n = idx.len();
    let mut out = Matrix::zeros(n, n);
    let mut sub = Matrix::zeros(k, k);
    for (a, rows) in idx.iter().enumerate() {
        for (b, cols) in idx.iter().enumerate() {
            for (r, &i) in rows.iter().enumerate() {
                for (c, &j) in cols.iter().enumerate() {
                    sub[(r, c)] = m[(i, j)];
                }
            }
            out[(a, b)] = sub.clone().determinant();
        }
    }
    Ok(out)
}

/// Coordinates of `v_1 ^ ... ^ v_k` in the wedge basis.
pub fn wedge_coordinates(vs: &[Vector]) -> Result<Vector, ExteriorError> {
    let k = vs.len();
    let d = vs.first().map_or(0, |v| v.len());
    check_degree(d, k)?;
    let frame = Matrix::from_columns(vs);
    let idx = subsets(d, k);
    Ok(Vector::from_iterator(
        idx.len(),
        idx.iter()
            .map(|rows| frame.select_rows(rows.iter()).determinant()),
    ))
}

/// `<u_1 ^ ... ^ u_k, v_1 ^ ... ^ v_k> = det(<u_i, v_j>)`.
pub fn wedge_inner_product(us: &[Vector], vs: &[Vector]) -> Result<f64, ExteriorError> {
    if us.len() != vs.len() {
        return Err(ExteriorError::Length(us.len(), vs.len()));
    }
    let k = us.len();
    if k == 0 {
        return Ok(1.0);
    }
    Ok(Matrix::from_fn(k, k, |i, j| us[i].dot(&vs[j])).determinant())
}

/// The cocycle `omega -> compound(T(omega), k)`.
pub fn compound_operator(t: &RandomOperator, k: usize) -> Result<RandomOperator, ExteriorError> {
    check_degree(t.dim(), k)?;
    Ok(t.map_matrices(|m| compound_matrix(m, k).expect("degree checked")))
}

/// `l_q = kappa(compound(T, q))`, the sum of the first `q` exponents.
pub fn partial_sum_exponent(
    t: &RandomOperator,
    q: usize,
    opts: &SpectrumOptions,
) -> Result<TopExponent, ExteriorError> {
    let c = compound_operator(t, q)?;
    Ok(spectrum::top_exponent(&c, opts)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExteriorSpectrum {
    pub report: SpectrumReport,
    /// `l_1, ..., l_{q_max}` with their standard errors.
    pub partial_sums: Vec<f64>,
    pub partial_stderr: Vec<f64>,
    /// `K_q = l_q - l_{q-1}`.
    pub increments: Vec<f64>,
    /// Indices `q` (1-based) where `K_{q+1} > K_q` by more than three standard errors.
    pub monotonicity_violations: Vec<usize>,
}

/// Exponents with multiplicities from the distinct values of `K_q = l_q - l_{q-1}`.
pub fn spectrum_via_exterior(
    t: &RandomOperator,
    q_max: usize,
    opts: &SpectrumOptions,
) -> Result<ExteriorSpectrum, ExteriorError> {
    check_degree(t.dim(), q_max)?;
    let mut ells = Vec::with_capacity(q_max);
    let mut ses = Vec::with_capacity(q_max);
    for q in 1..=q_max {
        let e = partial_sum_exponent(t, q, opts)?;
        ells.push(e.kappa);
        ses.push(e.stderr);
    }
    let mut ks = Vec::with_capacity(q_max);
    let mut kse = Vec::with_capacity(q_max);
    for q in 0..q_max {
        let prev = if q == 0 { 0.0 } else { ells[q - 1] };
        let prev_se = if q == 0 { 0.0 } else { ses[q - 1] };
        ks.push(if ells[q] == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            ells[q] - prev
        });
        kse.push(ses[q].hypot(prev_se));
    }
    let monotonicity_violations = (0..q_max.saturating_sub(1))
        .filter(|&q| ks[q + 1] > ks[q] + 3.0 * kse[q].hypot(kse[q + 1]))
        .map(|q| q + 1)
        .collect();
    let report = SpectrumReport::from_raw(SpectrumMethod::Exterior, ks.clone(), kse, opts);
    Ok(ExteriorSpectrum {
        report,
        partial_sums: ells
            .iter()
            .map(|x| x.max(opts.floor * q_max as f64))
            .collect(),
        partial_stderr: ses,
        increments: ks.iter().map(|x| x.max(opts.floor)).collect(),
        monotonicity_violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base::BaseSystem;
    use crate::linalg;
    use crate::opcore::gaussian_matrix;
    use crate::rng;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn diag(v: &[f64]) -> Matrix {
        Matrix::from_diagonal(&Vector::from_column_slice(v))
    }

    fn unit(d: usize, i: usize) -> Vector {
        Vector::from_fn(d, |j, _| if i == j { 1.0 } else { 0.0 })
    }

    /// Independent oracle: Leibniz expansion of the minor.
    fn leibniz_det(m: &Matrix, rows: &[usize], cols: &[usize]) -> f64 {
        fn perms(n: usize) -> Vec<Vec<usize>> {
            if n == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for p in perms(n - 1) {
                for pos in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(pos, n - 1);
                    out.push(q);
                }
            }
            out
        }
        let k = rows.len();
        perms(k)
            .into_iter()
            .map(|p| {
                let inversions = (0..k)
                    .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
                    .filter(|&(i, j)| p[i] > p[j])
                    .count();
                let sign = if inversions % 2 == 0 { 1.0 } else { -1.0 };
                sign * (0..k).map(|i| m[(rows[i], cols[p[i]])]).product::<f64>()
            })
            .sum()
    }

    #[test]
    fn subsets_are_lexicographic() {
        assert_eq!(
            subsets(4, 2),
            vec![
                vec![0, 1],
                vec![0, 2],
                vec![0, 3],
                vec![1, 2],
                vec![1, 3],
                vec![2, 3]
            ]
        );
        assert_eq!(subsets(3, 3), vec![vec![0, 1, 2]]);
        assert_eq!(binomial(6, 3), 20);
    }

    #[test]
    fn top_compound_is_determinant() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let c = compound_matrix(&m, 2).unwrap();
        assert_eq!(c.shape(), (1, 1));
        assert_relative_eq!(c[(0, 0)], -2.0, epsilon = 1e-14);
    }

    #[test]
    fn compound_of_diagonal() {
        let c = compound_matrix(&diag(&[2.0, 3.0, 5.0]), 2).unwrap();
        assert_relative_eq!(c, diag(&[6.0, 10.0, 15.0]), epsilon = 1e-13);
    }

    #[test]
    fn compound_entries_match_leibniz_oracle() {
        let mut r = rng::stream(21, 0);
        let m = gaussian_matrix(4, 1.0, &mut r);
        let c = compound_matrix(&m, 3).unwrap();
        let idx = subsets(4, 3);
        for (a, rows) in idx.iter().enumerate() {
            for (b, cols) in idx.iter().enumerate() {
                assert_relative_eq!(c[(a, b)], leibniz_det(&m, rows, cols), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn refuses_oversized_wedges() {
        let m = Matrix::identity(16, 16);
        assert!(matches!(
            compound_matrix(&m, 8),
            Err(ExteriorError::TooLarge { .. })
        ));
        assert!(matches!(
            compound_matrix(&m, 0),
            Err(ExteriorError::Degree { .. })
        ));
    }

    #[test]
    fn wedge_basis_inner_products() {
        let e = |i| unit(3, i);
        assert_relative_eq!(
            wedge_inner_product(&[e(0), e(1)], &[e(0), e(1)]).unwrap(),
            1.0
        );
        assert_relative_eq!(
            wedge_inner_product(&[e(0), e(1)], &[e(0), e(2)]).unwrap(),
            0.0
        );
    }

    #[test]
    fn wedge_inner_product_matches_coordinates() {
        let mut r = rng::stream(22, 0);
        for k in 1..=3 {
            let us: Vec<Vector> = (0..k)
                .map(|_| crate::opcore::gaussian_vector(4, &mut r))
                .collect();
            let vs: Vec<Vector> = (0..k)
                .map(|_| crate::opcore::gaussian_vector(4, &mut r))
                .collect();
            let gram = wedge_inner_product(&us, &vs).unwrap();
            let coords = wedge_coordinates(&us)
                .unwrap()
                .dot(&wedge_coordinates(&vs).unwrap());
            assert_relative_eq!(gram, coords, epsilon = 1e-10);
        }
    }

    #[test]
    fn partial_sums_of_diagonal() {
        let t = RandomOperator::constant(BaseSystem::golden_rotation(0), diag(&[2.0, 1.0, 0.5]));
        let opts = SpectrumOptions::new(1000, 2, 0);
        let l2 = partial_sum_exponent(&t, 2, &opts).unwrap();
        assert!((l2.kappa - 2f64.ln()).abs() < 1e-12);
        let l3 = partial_sum_exponent(&t, 3, &opts).unwrap();
        assert!(l3.kappa.abs() < 1e-12);
    }

    #[test]
    fn full_wedge_is_mean_log_determinant() {
        let mut r = rng::stream(23, 0);
        let mats: Vec<Matrix> = (0..2).map(|_| gaussian_matrix(3, 1.0, &mut r)).collect();
        let base = BaseSystem::bernoulli(vec![0.5, 0.5], 0).unwrap();
        let t = RandomOperator::piecewise(base, mats.clone()).unwrap();
        let opts = SpectrumOptions::new(4000, 8, 1);
        let l3 = partial_sum_exponent(&t, 3, &opts).unwrap();
        let want = 0.5 * (mats[0].determinant().abs().ln() + mats[1].determinant().abs().ln());
        assert!(
            (l3.kappa - want).abs() <= 3.0 * l3.stderr + 1e-9,
            "{} vs {want}",
            l3.kappa
        );
    }

    #[test]
    fn exterior_spectrum_of_diagonals() {
        let opts = SpectrumOptions::new(1000, 2, 0);
        let t = RandomOperator::constant(BaseSystem::golden_rotation(0), diag(&[2.0, 1.0, 0.5]));
        let s = spectrum_via_exterior(&t, 3, &opts).unwrap();
        assert_eq!(s.report.multiplicities, vec![1, 1, 1]);
        assert!((s.report.exponents[2] + 2f64.ln()).abs() < 1e-12);
        let t = RandomOperator::constant(BaseSystem::golden_rotation(0), diag(&[2.0, 2.0, 0.5]));
        let s = spectrum_via_exterior(&t, 3, &opts).unwrap();
        assert_eq!(s.report.multiplicities, vec![2, 1]);
        assert!((s.report.exponents[0] - 2f64.ln()).abs() < 1e-12);
        assert!(s.monotonicity_violations.is_empty());
    }

    #[test]
    fn exterior_route_matches_qr_route() {
        let mut r = rng::stream(24, 0);
        let mats: Vec<Matrix> = (0..3).map(|_| gaussian_matrix(4, 0.7, &mut r)).collect();
        let t =
            RandomOperator::piecewise(BaseSystem::bernoulli(vec![0.3, 0.3, 0.4], 0).unwrap(), mats)
                .unwrap();
        let opts = SpectrumOptions::new(10_000, 16, 5);
        let qr = spectrum::lyapunov_spectrum_qr(&t, 4, &opts).unwrap();
        let ext = spectrum_via_exterior(&t, 4, &opts).unwrap();
        for q in 0..4 {
            let tol = 3.0
                * qr.raw_stderr[..=q]
                    .iter()
                    .map(|s| s * s)
                    .sum::<f64>()
                    .sqrt()
                    .hypot(ext.partial_stderr[q]);
            assert!(
                (qr.partial_sums[q] - ext.partial_sums[q]).abs() <= tol,
                "q={q}: {} vs {}",
                qr.partial_sums[q],
                ext.partial_sums[q]
            );
        }
        assert!(ext.monotonicity_violations.is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn compound_is_multiplicative(seed in 0u64..10_000, k in 1usize..=4) {
            let mut r = rng::stream(seed, 0);
            let a = gaussian_matrix(4, 1.0, &mut r);
            let b = gaussian_matrix(4, 1.0, &mut r);
            let lhs = compound_matrix(&(&a * &b), k).unwrap();
            let rhs = compound_matrix(&a, k).unwrap() * compound_matrix(&b, k).unwrap();
            prop_assert!((&lhs - &rhs).norm() <= 1e-9 * lhs.norm().max(1.0));
        }

        #[test]
        fn compound_norm_is_product_of_top_singular_values(seed in 0u64..10_000, k in 1usize..=5) {
            let mut r = rng::stream(seed, 1);
            let m = gaussian_matrix(5, 1.0, &mut r);
            let sv = linalg::singular_values(&m);
            let want: f64 = sv[..k].iter().product();
            let got = linalg::spectral_norm(&compound_matrix(&m, k).unwrap());
            prop_assert!((got - want).abs() <= 1e-8 * want);
        }
    }
}
