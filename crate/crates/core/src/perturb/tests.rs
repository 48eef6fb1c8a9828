use super::*;
use crate::base::{rokhlin_tower, BaseSystem};
use crate::cones::{invariance_certificate, ConeFamily};
use crate::opcore::{gaussian_matrix, random_unit_vector};
use crate::rng;
use crate::spectrum::{SpectrumOptions, DEFAULT_FLOOR};
use nalgebra::{dmatrix, dvector};
use proptest::prelude::*;

fn sys() -> BaseSystem {
    BaseSystem::golden_rotation(0)
}

fn axis(d: usize, i: usize) -> Vector {
    let mut v = Vector::zeros(d);
    v[i] = 1.0;
    v
}

/// Two-piece operator on the circle with `u` mapped to `lambda_k u` on piece `k`.
fn with_invariant_axis(
    seed: u64,
    d: usize,
    scale: f64,
    lambdas: [f64; 2],
) -> (RandomOperator, RandomVector) {
    let mut r = rng::stream(seed, 0);
    let u = random_unit_vector(d, &mut r);
    let mats = lambdas
        .iter()
        .map(|&l| linalg::redefine_on_line(&gaussian_matrix(d, scale, &mut r), &u, &(&u * l)))
        .collect();
    let t = RandomOperator::piecewise(sys(), mats).unwrap();
    (t, RandomVector::constant(sys(), u))
}

fn shift(d: usize, scale: f64) -> Matrix {
    Matrix::from_fn(d, d, |i, j| if i == j + 1 { scale } else { 0.0 })
}

fn round_trip(r: &PerturbationResult) -> Verification {
    PerturbationResult::from_json(&r.to_json())
        .unwrap()
        .reverify()
        .unwrap()
}

// ---- boost ----

#[test]
fn boost_with_zero_alpha_is_identity() {
    let t = RandomOperator::constant(sys(), dmatrix![2.0, 1.0; 0.0, 0.5]);
    let e = RandomVector::constant(sys(), axis(2, 0));
    let r = boost_direction(&t, &e, 0.0).unwrap();
    assert_eq!(r.distance, 0.0);
    assert_eq!(r.operator, t);
}

#[test]
fn boost_distance_on_unit_norm_operator() {
    let t = RandomOperator::constant(sys(), dmatrix![1.0, 0.0; 0.0, -0.7]);
    assert_eq!(t.ess_sup_norm(), 1.0);
    let e = RandomVector::constant(sys(), axis(2, 1));
    let r = boost_direction(&t, &e, 0.1).unwrap();
    assert!(r.distance <= 0.221403);
    assert!((r.distance - 0.7 * (0.2f64).exp_m1()).abs() < 1e-12);
    assert!(r.all_hold());
}

#[test]
fn boost_margin_nonnegative_on_random_instances() {
    for seed in 0..50 {
        let (t, e) = with_invariant_axis(seed, 4, 0.5, [1.2, -0.8]);
        let r = boost_direction(&t, &e, 0.05 + 0.01 * seed as f64).unwrap();
        let g = r.guarantee("distance").unwrap();
        assert!(g.margin >= 0.0, "seed {seed}: margin {}", g.margin);
        assert!(r.guarantee("collinearity").unwrap().value < 1e-9);
    }
}

#[test]
fn boost_rejects_non_invariant_direction() {
    let t = RandomOperator::constant(sys(), dmatrix![0.0, 1.0; 1.0, 0.0]);
    let e = RandomVector::constant(sys(), dvector![1.0, 0.0]);
    match boost_direction(&t, &e, 0.1) {
        Err(PerturbError::NotInvariant { residual }) => assert!(residual > 1.0),
        other => panic!("{other:?}"),
    }
}

// ---- shear ----

#[test]
fn shear_conjugation_identity_holds() {
    let (t, e) = with_invariant_axis(3, 4, 0.5, [1.5, 0.9]);
    for eps in [0.1, 0.5, 1.0 - 1e-9] {
        let c = shear_conjugation(&t, &e, eps).unwrap();
        assert!(c.residual < 1e-12, "eps {eps}: {}", c.residual);
        let p = c.scaling.pieces()[0].1.clone();
        assert!((linalg::spectral_norm(&p) - 1.0).abs() < 1e-12);
        let q = c.inverse_scaling.pieces()[0].1.clone();
        assert!((linalg::spectral_norm(&q) - 1.0 / eps).abs() < 1e-9 / eps);
    }
}

#[test]
fn shear_rejects_out_of_range_epsilon() {
    let (t, e) = with_invariant_axis(3, 3, 0.5, [1.5, 0.9]);
    for eps in [0.0, 1.0, -0.3, f64::NAN] {
        assert!(matches!(
            shear_conjugation(&t, &e, eps),
            Err(PerturbError::InvalidParameter { .. })
        ));
    }
}

#[test]
fn shear_epsilon_bounds_sheared_products_off_the_axis() {
    let (t, e) = with_invariant_axis(5, 3, 0.4, [1.1, 0.7]);
    let s = boost_direction(&t, &e, 0.2).unwrap().operator;
    let (n, eta) = (5, 1.0 / 3.0);
    let eps = choose_shear_epsilon(&s, &t, &e, n, eta).unwrap();
    let c = shear_conjugation(&s, &e, eps).unwrap();
    let mut r = rng::stream(11, 0);
    for _ in 0..200 {
        let p = sys().sample_point(&mut r);
        let u = e.vector_at(&p);
        let raw = crate::opcore::gaussian_vector(3, &mut r);
        let v = &raw - u * u.dot(&raw);
        let lhs = (c.operator.cocycle_product(&p, n) * &v).norm();
        let rhs = (1.0 + eta) * linalg::spectral_norm(&t.cocycle_product(&p, n)) * v.norm();
        assert!(lhs <= rhs * (1.0 + 1e-12), "{lhs} > {rhs}");
    }
}

#[test]
fn shear_epsilon_single_step_bound() {
    let (t, e) = with_invariant_axis(8, 3, 0.6, [1.3, -0.6]);
    let s = boost_direction(&t, &e, 0.1).unwrap().operator;
    let eta = 0.25;
    let rho = 0.6;
    let eps = choose_shear_epsilon(&s, &t, &e, 1, eta).unwrap();
    assert!(eps >= eta * rho / s.ess_sup_norm() - 2f64.powi(-51));
}

#[test]
fn shear_epsilon_rejects_zero_tolerance() {
    let (t, e) = with_invariant_axis(8, 3, 0.6, [1.3, -0.6]);
    assert!(matches!(
        choose_shear_epsilon(&t, &t, &e, 3, 0.0),
        Err(PerturbError::InvalidParameter { .. })
    ));
}

#[test]
fn shear_epsilon_grows_with_tolerance() {
    let (t, e) = with_invariant_axis(9, 3, 0.5, [1.2, 0.8]);
    let s = boost_direction(&t, &e, 0.15).unwrap().operator;
    let eps: Vec<f64> = [0.05, 0.1, 0.2, 0.4]
        .iter()
        .map(|&eta| choose_shear_epsilon(&s, &t, &e, 4, eta).unwrap())
        .collect();
    assert!(eps.windows(2).all(|w| w[0] <= w[1]), "{eps:?}");
}

#[test]
fn shear_epsilon_needs_positive_step_floor() {
    let t = RandomOperator::constant(sys(), dmatrix![0.0, 0.0; 0.0, 1.0]);
    let e = RandomVector::constant(sys(), axis(2, 0));
    assert!(matches!(
        choose_shear_epsilon(&t, &t, &e, 2, 0.1),
        Err(PerturbError::RhoFloor { .. })
    ));
}

// ---- tower rotation ----

/// Identity on the tower except a strong contraction on its top floor.
fn contracting_top(n: usize) -> (RandomOperator, BaseSet) {
    let s = sys();
    let v = rokhlin_tower(&s, &s.whole(), n).unwrap();
    let id = RandomOperator::constant(s.clone(), Matrix::identity(3, 3));
    let t = id
        .patched(vec![(
            s.image(&v, n as i64 - 1),
            Matrix::identity(3, 3) * 0.01,
        )])
        .unwrap();
    (t, v)
}

fn boundary(v: &BaseSet, n: usize, start: Vector, end: Vector) -> RandomVector {
    let s = sys();
    RandomVector::partial(
        s.clone(),
        start.len(),
        vec![(v.clone(), start), (s.image(v, n as i64), end)],
        true,
    )
}

#[test]
fn tower_rotation_happens_on_the_first_contracting_floor() {
    let n = 4;
    let (t, v) = contracting_top(n);
    let e = boundary(&v, n, axis(3, 0), axis(3, 2));
    let eps = 0.3;
    let r = tower_rotate(&t, &v, n, &e, eps).unwrap();
    let mv = sys().measure(&v);
    for j in 0..n {
        let m = r.diagnostics[&format!("rotation_floor_{j:03}_measure")];
        if j == n - 1 {
            assert!((m - mv).abs() < 1e-15);
        } else {
            assert_eq!(m, 0.0);
        }
    }
    assert!(r.distance <= eps + 1e-10);
    assert!(r.guarantee("collinearity").unwrap().value < 1e-9);
    assert!(r.guarantee("scalar_floor").unwrap().value >= eps / 3.0);
    // the rotation floor carries exactly eps/3
    let top = sys().image(&v, n as i64 - 1);
    let beta = r
        .scalars
        .as_ref()
        .unwrap()
        .pieces()
        .iter()
        .find(|(s, _)| *s == top)
        .unwrap()
        .1;
    assert_eq!(beta, eps / 3.0);
    // outside the tower nothing changes
    let p = sys().circle_point(0.999).unwrap();
    let floors: Vec<BaseSet> = (0..n).map(|i| sys().image(&v, i as i64)).collect();
    if !floors.iter().any(|f| sys().contains(f, &p)) {
        assert_eq!(r.operator.matrix_at(&p), t.matrix_at(&p));
    }
}

#[test]
fn lift_scalar_examples() {
    let eps = 0.3;
    assert_eq!(lift_scalar(0.0, eps), eps / 3.0);
    assert_eq!(lift_scalar(1e-300, eps), eps / 3.0);
    assert_eq!(lift_scalar(-0.05, eps), -0.05 - eps / 3.0);
    assert_eq!(lift_scalar(0.2, eps), 0.2);
    assert_eq!(lift_scalar(-0.1, eps), -0.1);
    assert_eq!(bijective_budget(0.3), 1e-3);
    assert_eq!(bijective_budget(0.005), 0.0005);
}

#[test]
fn tower_rotation_requires_disjoint_floors() {
    let s = sys();
    let t = RandomOperator::constant(s.clone(), Matrix::identity(2, 2) * 0.01);
    let e = RandomVector::constant(s.clone(), axis(2, 0));
    assert!(matches!(
        tower_rotate(&t, &s.whole(), 2, &e, 0.3),
        Err(PerturbError::TowerNotDisjoint { .. })
    ));
}

#[test]
fn tower_rotation_without_contraction_names_the_column() {
    let s = sys();
    let v = rokhlin_tower(&s, &s.whole(), 3).unwrap();
    let t = RandomOperator::constant(s.clone(), Matrix::identity(2, 2));
    let e = boundary(&v, 3, axis(2, 0), axis(2, 1));
    assert!(matches!(
        tower_rotate(&t, &v, 3, &e, 0.3),
        Err(PerturbError::NoContractingStep { piece: 0, .. })
    ));
}

#[test]
fn tower_rotation_round_trips_through_json() {
    let (t, v) = contracting_top(3);
    let r = tower_rotate(&t, &v, 3, &boundary(&v, 3, axis(3, 1), axis(3, 0)), 0.2).unwrap();
    let check = round_trip(&r);
    assert!(check.reproduced && check.all_hold);
    assert_eq!(check.guarantees, r.guarantees);
}

#[test]
fn tampered_result_is_not_reproduced() {
    let (t, v) = contracting_top(3);
    let r = tower_rotate(&t, &v, 3, &boundary(&v, 3, axis(3, 1), axis(3, 0)), 0.2).unwrap();
    let mut doc = r.to_document();
    doc.operator.pieces[0].entries[0] += 0.5;
    let check = verify_document(doc).unwrap();
    assert!(!check.reproduced);
}

// ---- global invariant direction ----

#[test]
fn global_direction_with_whole_space_base() {
    let s = sys();
    let mut r = rng::stream(21, 0);
    let t = RandomOperator::constant(
        s.clone(),
        gaussian_matrix(3, 1.0, &mut r).normalize() * 0.05,
    );
    let h = RandomVector::constant(s.clone(), axis(3, 0));
    let out = global_invariant_direction(&t, &s.whole(), &h, 0.3, 10, 0.99).unwrap();
    assert_eq!(out.diagnostics["return_blocks"], 1.0);
    assert!((out.diagnostics["covered"] - 1.0).abs() < 1e-12);
    assert!(out.guarantee("collinearity").unwrap().value < 1e-9);
    assert!(out.guarantee("scalar_floor").unwrap().value >= 0.3 / 3.0);
    assert!(out.distance <= 0.3 + 1e-10);
}

#[test]
fn global_direction_covers_the_space_from_a_small_base() {
    let s = sys();
    let mut r = rng::stream(22, 0);
    let mats = (0..3).map(|_| gaussian_matrix(3, 0.02, &mut r)).collect();
    let t = RandomOperator::piecewise(s.clone(), mats).unwrap();
    let v = rokhlin_tower(&s, &s.whole(), 6).unwrap();
    let h = RandomVector::constant(s.clone(), axis(3, 2));
    let out = global_invariant_direction(&t, &v, &h, 0.3, 1000, 0.99).unwrap();
    assert!(out.diagnostics["covered"] >= 0.99);
    assert!(out.guarantee("collinearity").unwrap().value < 1e-9);
    assert!(out.all_hold());
    assert!(round_trip(&out).reproduced);
}

#[test]
fn global_direction_reports_coverage_shortfall() {
    let s = sys();
    let t = RandomOperator::constant(s.clone(), Matrix::identity(2, 2) * 0.01);
    let v = rokhlin_tower(&s, &s.whole(), 50).unwrap();
    let h = RandomVector::constant(s.clone(), axis(2, 0));
    assert!(matches!(
        global_invariant_direction(&t, &v, &h, 0.3, 5, 0.99),
        Err(PerturbError::Coverage { .. })
    ));
}

// ---- finite rank ----

#[test]
fn finite_rank_from_zero_operator() {
    let s = sys();
    let t = RandomOperator::constant(s.clone(), Matrix::zeros(3, 3));
    let eps = 0.3;
    let opts = FiniteRankOptions {
        spectrum: SpectrumOptions::new(1000, 4, 1),
        ..Default::default()
    };
    let out = finite_rank_with_direction(&t, eps, &opts).unwrap();
    assert!(out.rank >= 1);
    assert!(out.result.distance <= 2.0 * eps / 3.0 + 1e-10);
    assert_eq!(out.kappa_bound, (eps / 9.0).ln());
    assert!(
        out.kappa.kappa >= out.kappa_bound - 3.0 * out.kappa.stderr - 1e-9,
        "{:?}",
        out.kappa
    );
    assert!(out.result.all_hold());
}

#[test]
fn finite_rank_truncates_off_the_direction() {
    let s = sys();
    let mut r = rng::stream(31, 0);
    let mats = (0..2).map(|_| gaussian_matrix(4, 0.01, &mut r)).collect();
    let t = RandomOperator::piecewise(s, mats).unwrap();
    let out = finite_rank_with_direction(
        &t,
        0.3,
        &FiniteRankOptions {
            spectrum: SpectrumOptions::new(500, 2, 0),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(out.rank <= 4);
    assert!(out.result.distance <= 0.2 + 1e-10);
    assert!(out.kappa.kappa >= out.kappa_bound - 3.0 * out.kappa.stderr - 1e-9);
}

// ---- short blocks ----

#[test]
fn short_block_with_maximizing_start_keeps_the_operator() {
    let s = sys();
    let n = 3;
    let v = rokhlin_tower(&s, &s.whole(), n).unwrap();
    let m = dmatrix![0.9, 0.2, 0.0; 0.1, 0.5, 0.0; 0.0, 0.3, 0.4];
    let t = RandomOperator::constant(s.clone(), m.clone());
    let f = top_right_vector(&(&m * &m * &m)).unwrap();
    let g = RandomVector::partial(s.clone(), 3, vec![(v.clone(), f)], true);
    let r = short_block_perturb(&t, &v, n, &g, 0.1).unwrap();
    assert_eq!(r.diagnostics["sheared_measure"], 0.0);
    assert_eq!(r.diagnostics["raised_floors"], 0.0);
    assert_eq!(r.distance, 0.0);
    assert!(r.all_hold());
}

#[test]
fn short_block_with_orthogonal_start_shears() {
    let s = sys();
    let n = 3;
    let eps = 0.1;
    let v = rokhlin_tower(&s, &s.whole(), n).unwrap();
    let m = Matrix::from_diagonal(&dvector![0.9, 0.3, 0.05]);
    let t = RandomOperator::constant(s.clone(), m);
    let g = RandomVector::partial(s.clone(), 3, vec![(v.clone(), axis(3, 1))], true);
    let r = short_block_perturb(&t, &v, n, &g, eps).unwrap();
    assert!((r.diagnostics["sheared_measure"] - s.measure(&v)).abs() < 1e-15);
    let growth = r.guarantee("block_growth").unwrap();
    assert!(growth.value >= 2.0 * eps / (1.0 + 3.0 * eps) * (1.0 - 1e-12));
    assert!(r.all_hold());
}

#[test]
fn short_block_margins_on_random_instances() {
    let s = sys();
    for seed in 0..50u64 {
        let mut r = rng::stream(seed, 7);
        let n = 2 + (seed % 3) as usize;
        let v = rokhlin_tower(&s, &s.whole(), n).unwrap();
        let mats = (0..3).map(|_| gaussian_matrix(3, 0.3, &mut r)).collect();
        let t = RandomOperator::piecewise(s.clone(), mats).unwrap();
        let g = RandomVector::partial(
            s.clone(),
            3,
            vec![(v.clone(), random_unit_vector(3, &mut r))],
            true,
        );
        let out = short_block_perturb(&t, &v, n, &g, 0.12).unwrap();
        for g in &out.guarantees {
            assert!(g.margin >= 0.0, "seed {seed}: {g:?}");
        }
    }
}

#[test]
fn short_block_rejects_large_epsilon() {
    let s = sys();
    let v = rokhlin_tower(&s, &s.whole(), 2).unwrap();
    let t = RandomOperator::constant(s.clone(), Matrix::identity(2, 2));
    let g = RandomVector::partial(s.clone(), 2, vec![(v.clone(), axis(2, 0))], true);
    assert!(matches!(
        short_block_perturb(&t, &v, 2, &g, 0.2),
        Err(PerturbError::InvalidParameter { .. })
    ));
}

// ---- full construction ----

fn nilpotent_construction(eps: f64, k: usize) -> PerturbationResult {
    let s = sys();
    let t = RandomOperator::constant(s.clone(), shift(3, 1.0));
    let n = 3;
    let v = rokhlin_tower(&s, &s.whole(), n).unwrap();
    millionshchikov(&t, &v, n, eps, k, &MillionshchikovOptions::default()).unwrap()
}

#[test]
fn millionshchikov_on_nilpotent_shift() {
    let r = nilpotent_construction(0.1, 2);
    assert_eq!(r.original.ess_sup_norm(), 1.0);
    for g in &r.guarantees {
        assert!(g.holds && g.margin >= 0.0, "{g:?}");
    }
    assert!(r.guarantee("collinearity").unwrap().value < 1e-9);
    assert!(r.guarantee("coverage").unwrap().value >= 0.99);
    assert!(round_trip(&r).reproduced);
}

#[test]
fn millionshchikov_distance_is_near_its_budget_when_modifications_fire() {
    let eps = 0.1;
    let r = nilpotent_construction(eps, 2);
    assert!(r.diagnostics["raised_floors"] + r.diagnostics["remainder_shifts"] > 0.0);
    let bound = 3.0 * eps * 2.0;
    assert!(r.distance <= bound + 1e-10);
    assert!(r.distance >= eps, "{}", r.distance);
}

#[test]
fn millionshchikov_rejects_large_epsilon() {
    let s = sys();
    let t = RandomOperator::constant(s.clone(), shift(3, 1.0));
    let v = rokhlin_tower(&s, &s.whole(), 3).unwrap();
    assert!(matches!(
        millionshchikov(&t, &v, 3, 0.2, 1, &MillionshchikovOptions::default()),
        Err(PerturbError::InvalidParameter { .. })
    ));
}

// ---- growth, boost and cones together ----

#[test]
fn boosted_growth_gives_an_invariant_cone() {
    let (t, e) = with_invariant_axis(40, 3, 0.25, [1.0, 0.9]);
    let alpha = 0.3;
    let horizon = ((8.0f64).ln() / alpha).ceil() as usize;
    let carried = PerturbationResult::certify(
        t.clone(),
        t.clone(),
        Some(e.clone()),
        None,
        vec![Check::BlockGrowth {
            horizon,
            ratio: (-alpha * horizon as f64).exp(),
        }],
        BTreeMap::new(),
    )
    .unwrap();
    assert!(carried.all_hold());
    let boosted = boost_direction(&t, &e, alpha).unwrap().operator;
    let eps = choose_shear_epsilon(&boosted, &t, &e, horizon, 1.0 / 3.0).unwrap();
    let conj = shear_conjugation(&boosted, &e, eps).unwrap();
    let half = ConeFamily::halfspace(&e).unwrap();
    assert!(
        invariance_certificate(&conj.operator, &half, horizon, 200, 3)
            .unwrap()
            .ok
    );
    let image = ConeFamily::image(&conj.inverse_scaling, &half).unwrap();
    assert!(
        invariance_certificate(&boosted, &image, horizon, 200, 3)
            .unwrap()
            .ok
    );
}

#[test]
fn nowhere_dense_pipeline_on_scaled_shift() {
    let s = sys();
    let t = RandomOperator::constant(s, shift(3, 0.9));
    let norms = sup_power_norms(&t, 3).unwrap();
    assert_eq!(norms[2], 0.0);
    let eta = 0.5;
    let opts = PipelineOptions {
        spectrum: SpectrumOptions::new(1000, 2, 5),
        seed: 5,
        ..Default::default()
    };
    let out = theorem_a3_pipeline(&t, eta, &opts).unwrap();
    let rep = &out.report;
    assert!(out.result.distance <= 2.0 * eta / 3.0 + 1e-10);
    assert!(out.result.all_hold());
    assert!(rep.log_delta.is_finite() && rep.log_delta <= rep.robustness.log_epsilon);
    assert_eq!(rep.delta, rep.log_delta.exp());
    assert_eq!(rep.probes.len(), 20);
    assert!(rep.all_probes_pass);
    assert!(rep.growth_ratio >= rep.growth_target);
    assert!(rep.literal.repetitions > rep.repetitions);
    let n = rep.block_length as i32;
    let step_floor = rep.epsilon.powi(n + 1) / (1.0 + 2.0 * 0.9f64).powi(n - 1);
    assert!(rep.kappa.kappa > DEFAULT_FLOOR);
    assert!(
        rep.kappa.kappa >= step_floor.ln() - 3.0 * rep.kappa.stderr,
        "{:?}",
        rep.kappa
    );
}

#[test]
fn pipeline_rejects_non_decaying_operator() {
    let t = RandomOperator::constant(sys(), Matrix::identity(2, 2));
    let opts = PipelineOptions {
        max_horizon: 8,
        ..Default::default()
    };
    assert!(matches!(
        theorem_a3_pipeline(&t, 0.5, &opts),
        Err(PerturbError::NotDecaying { .. })
    ));
}

#[test]
fn literal_constants_are_out_of_reach() {
    let c = literal_constants(0.9, 0.5, 3);
    let (eps, alpha) = pipeline_epsilon_alpha(0.9, 0.5);
    assert_eq!((c.epsilon, c.alpha), (eps, alpha));
    assert!((-(alpha * c.block_length as f64) / 2.0).exp() <= eps);
    let kn = (c.repetitions * c.block_length) as f64;
    assert!(-alpha * kn <= c.growth_log10 * std::f64::consts::LN_10 + 1e-9);
    assert!(c.tower_height > 10_000);
}

// ---- evaluation and decoding ----

#[test]
fn decay_horizon_of_shift_and_identity() {
    let t = RandomOperator::constant(sys(), shift(3, 1.0));
    assert_eq!(decay_horizon(&t, 0.1, 10).unwrap(), 3);
    let id = RandomOperator::constant(sys(), Matrix::identity(2, 2));
    assert!(matches!(
        decay_horizon(&id, 0.5, 10),
        Err(PerturbError::NotDecaying { .. })
    ));
}

#[test]
fn missing_scalars_are_reported() {
    let t = RandomOperator::constant(sys(), Matrix::identity(2, 2));
    let r = PerturbationResult::certify(t.clone(), t.clone(), None, None, vec![], BTreeMap::new())
        .unwrap();
    assert!(matches!(
        evaluate(&Check::Collinearity { tol: 1e-9 }, &r),
        Err(PerturbError::MissingField(_))
    ));
}

#[test]
fn decoding_rejects_unknown_fields() {
    let (t, v) = contracting_top(2);
    let r = tower_rotate(&t, &v, 2, &boundary(&v, 2, axis(3, 1), axis(3, 0)), 0.2).unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    value["surplus"] = serde_json::json!(1);
    assert!(PerturbationResult::from_json(&value.to_string()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lifted_scalars_clear_the_floor(beta in -1.0f64..1.0, eps in 1e-3f64..0.9) {
        let l = lift_scalar(beta, eps);
        prop_assert!(l.abs() >= eps / 3.0);
        prop_assert!(l * beta >= 0.0);
        prop_assert!((l - beta).abs() <= eps / 3.0 * (1.0 + 1e-12));
    }

    #[test]
    fn boost_distance_never_exceeds_budget(seed in 0u64..1000, alpha in 0.0f64..1.0) {
        let (t, e) = with_invariant_axis(seed, 3, 0.5, [1.0, -0.5]);
        let r = boost_direction(&t, &e, alpha).unwrap();
        prop_assert!(r.distance <= (2.0 * alpha).exp_m1() * t.ess_sup_norm() + DISTANCE_SLACK);
    }

    #[test]
    fn rotation_closes_collinearity(seed in 0u64..1000, n in 2usize..6) {
        let s = sys();
        let mut r = rng::stream(seed, 3);
        let v = rokhlin_tower(&s, &s.whole(), n).unwrap();
        let mats = (0..2).map(|_| gaussian_matrix(3, 0.015, &mut r)).collect();
        let t = RandomOperator::piecewise(s.clone(), mats).unwrap();
        let e = boundary(&v, n, random_unit_vector(3, &mut r), random_unit_vector(3, &mut r));
        let out = tower_rotate(&t, &v, n, &e, 0.3).unwrap();
        prop_assert!(out.guarantee("collinearity").unwrap().value < 1e-9);
        prop_assert!(out.distance <= 0.3 + DISTANCE_SLACK);
        prop_assert!(round_trip(&out).reproduced);
    }
}
