//! Moving a norm-decaying cocycle to one whose top exponent is robustly
//! finite: build an invariant direction with controlled growth, boost it,
//! certify an invariant cone, and probe a ball around the result.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::base::rokhlin_tower;
use crate::cones::{
    invariance_certificate, robustness_radius_log, ConeFamily, InvarianceCertificate,
    RobustnessRadius,
};
use crate::linalg;
use crate::opcore::{gaussian_matrix, RandomOperator, RandomVector};
use crate::rng;
use crate::spectrum::{top_exponent, SpectrumOptions, TopExponent, DEFAULT_FLOOR};

use super::blocks::{millionshchikov, MillionshchikovOptions};
use super::boost::{boost_direction, choose_shear_epsilon, shear_conjugation};
use super::{decay_horizon, evaluate, Check, PerturbError, PerturbationResult, COLLINEARITY_TOL};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineOptions {
    pub k_max: usize,
    pub min_coverage: f64,
    /// Largest `n` tried when looking for `|T^n| < eps^n`.
    pub max_horizon: usize,
    /// Extra attempts with a longer horizon when the growth ratio falls short.
    pub max_k_retries: usize,
    pub cone_samples: usize,
    pub probes: usize,
    pub spectrum: SpectrumOptions,
    pub seed: u64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            k_max: 1000,
            min_coverage: 0.99,
            max_horizon: 64,
            max_k_retries: 8,
            cone_samples: 200,
            probes: 20,
            spectrum: SpectrumOptions::new(2000, 4, 0),
            seed: 0,
        }
    }
}

/// The block length and repetition count that the worst-case constants call for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiteralConstants {
    pub epsilon: f64,
    pub alpha: f64,
    pub block_length: usize,
    pub repetitions: usize,
    /// `(k + 1) N`, the height of the sub-tower the construction would need.
    pub tower_height: usize,
    /// `log10` of the guaranteed growth ratio at `kN` steps.
    pub growth_log10: f64,
}

/// `eps = min(1/6, eta / (9 (1 + |T|)))` and the largest `alpha` with `(e^{2 alpha} - 1)(1 + |T|) <= eta/3`.
pub fn pipeline_epsilon_alpha(norm: f64, eta: f64) -> (f64, f64) {
    let eps = (1.0 / 6.0f64).min(eta / (9.0 * (1.0 + norm)));
    let alpha = 0.5 * (eta / (3.0 * (1.0 + norm))).ln_1p();
    (eps, alpha)
}

/// `N = max(n_min, ceil(2 ln(1/eps) / alpha))` and the least `k` with
/// `e^{-alpha k N} <= eps^{k+4N} / (1 + 2|T|)^{4N}`.
pub fn literal_constants(norm: f64, eta: f64, n_min: usize) -> LiteralConstants {
    let (eps, alpha) = pipeline_epsilon_alpha(norm, eta);
    let n = n_min.max((2.0 * (1.0 / eps).ln() / alpha).ceil() as usize);
    let nf = n as f64;
    let growth = (1.0 + 2.0 * norm).ln();
    let k = (4.0 * nf * (growth - eps.ln()) / (alpha * nf + eps.ln()))
        .ceil()
        .max(1.0) as usize;
    LiteralConstants {
        epsilon: eps,
        alpha,
        block_length: n,
        repetitions: k,
        tower_height: (k + 1) * n,
        growth_log10: ((k as f64 + 4.0 * nf) * eps.ln() - 4.0 * nf * growth)
            / std::f64::consts::LN_10,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    /// Distance from the boosted operator, as a fraction of `delta`.
    pub scale: f64,
    pub distance: f64,
    pub kappa: f64,
    pub stderr: f64,
    pub passes: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NowhereDenseReport {
    pub eta: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub block_length: usize,
    pub repetitions: usize,
    pub horizon: usize,
    /// Worst `|S^H e| / |S^H|` after the direction construction.
    pub growth_ratio: f64,
    /// `e^{-alpha H}`.
    pub growth_target: f64,
    pub construction_distance: f64,
    pub shear_epsilon: f64,
    pub certificate: InvarianceCertificate,
    pub robustness: RobustnessRadius,
    pub delta: f64,
    /// `ln delta`, finite even where `delta` underflows to zero.
    pub log_delta: f64,
    /// `|T~ - T|`.
    pub distance: f64,
    pub kappa: TopExponent,
    pub literal: LiteralConstants,
    pub probes: Vec<Probe>,
    pub all_probes_pass: bool,
}

#[derive(Clone, Debug)]
pub struct NowhereDenseOutcome {
    /// `T~` with its invariant direction, measured against the input.
    pub result: PerturbationResult,
    pub construction: PerturbationResult,
    pub report: NowhereDenseReport,
}

/// Finds `T~` within `2 eta / 3` of a norm-decaying `T` and a radius `delta`
/// around `T~` on which an invariant cone family survives, then probes that
/// ball for a finite top exponent.
pub fn theorem_a3_pipeline(
    t: &RandomOperator,
    eta: f64,
    opts: &PipelineOptions,
) -> Result<NowhereDenseOutcome, PerturbError> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(PerturbError::InvalidParameter {
            name: "eta",
            value: eta,
        });
    }
    let sys = t.base();
    let norm = t.ess_sup_norm();
    let (eps, alpha) = pipeline_epsilon_alpha(norm, eta);
    let block = decay_horizon(t, eps, opts.max_horizon)? + 1;
    let literal = literal_constants(norm, eta, block);
    let v = rokhlin_tower(sys, &sys.whole(), block)?;
    let mopts = MillionshchikovOptions {
        k_max: opts.k_max,
        min_coverage: opts.min_coverage,
    };

    // the worst-case repetition count is far out of reach; grow k until the measured ratio suffices
    let mut k = ((8.0f64).ln() / (alpha * block as f64)).ceil().max(1.0) as usize;
    let mut attempt = 0;
    let (construction, ratio) = loop {
        let built = millionshchikov(t, &v, block, eps, k, &mopts)?;
        let horizon = k * block;
        let growth = evaluate(
            &Check::BlockGrowth {
                horizon,
                ratio: 0.0,
            },
            &built,
        )?
        .value;
        let target = (-alpha * horizon as f64).exp();
        if growth >= target {
            break (built, growth);
        }
        if attempt == opts.max_k_retries {
            return Err(PerturbError::Growth {
                ratio: growth,
                target,
                k,
            });
        }
        attempt += 1;
        let needed =
            (-(growth.max(f64::MIN_POSITIVE)).ln() / (alpha * block as f64)).ceil() as usize;
        k = needed.max(k + 1);
    };
    let horizon = k * block;
    let partial = construction
        .direction
        .clone()
        .expect("construction yields a direction");
    let direction = RandomVector::new(sys.clone(), t.dim(), partial.pieces().to_vec(), true)?;

    let boosted = boost_direction(&construction.operator, &direction, alpha)?;
    let shear = choose_shear_epsilon(
        &boosted.operator,
        &construction.operator,
        &direction,
        horizon,
        1.0 / 3.0,
    )?;
    let conj = shear_conjugation(&boosted.operator, &direction, shear)?;
    let cone = ConeFamily::image(&conj.inverse_scaling, &ConeFamily::halfspace(&direction)?)?;
    let certificate = invariance_certificate(
        &boosted.operator,
        &cone,
        horizon,
        opts.cone_samples,
        opts.seed,
    )?;
    if !certificate.ok {
        return Err(PerturbError::NotCertified { horizon });
    }
    let robustness =
        robustness_radius_log(&boosted.operator, &cone, horizon, certificate.log_beta_sup)?;
    let distance = t.distance(&boosted.operator);
    let log_delta = robustness.log_epsilon.min((eta - distance).ln());
    let delta = log_delta.exp();

    let kappa = top_exponent(&boosted.operator, &opts.spectrum)?;
    let mut probes = Vec::with_capacity(opts.probes);
    for i in 0..opts.probes {
        let mut r = rng::stream(opts.seed, 1_000_000 + i as u64);
        let raw = gaussian_matrix(t.dim(), 1.0, &mut r);
        let unit = &raw / linalg::spectral_norm(&raw);
        let scale = 1.0 - r.random::<f64>();
        let shift = unit * (delta * scale);
        let probe = boosted.operator.map_matrices(|m| m + &shift);
        let k = top_exponent(&probe, &opts.spectrum)?;
        probes.push(Probe {
            scale,
            distance: probe.distance(&boosted.operator),
            kappa: k.kappa,
            stderr: k.stderr,
            passes: k.kappa > DEFAULT_FLOOR,
        });
    }
    let all_probes_pass = probes.iter().all(|p| p.passes);

    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("delta".into(), delta);
    diagnostics.insert("log_delta".into(), log_delta);
    diagnostics.insert("shear_epsilon".into(), shear);
    diagnostics.insert("horizon".into(), horizon as f64);
    diagnostics.insert("kappa".into(), kappa.kappa);
    let result = PerturbationResult::certify(
        t.clone(),
        boosted.operator.clone(),
        Some(direction),
        boosted.scalars.clone(),
        vec![
            Check::Distance {
                bound: 2.0 * eta / 3.0,
            },
            Check::Collinearity {
                tol: COLLINEARITY_TOL,
            },
        ],
        diagnostics,
    )?;
    let report = NowhereDenseReport {
        eta,
        epsilon: eps,
        alpha,
        block_length: block,
        repetitions: k,
        horizon,
        growth_ratio: ratio,
        growth_target: (-alpha * horizon as f64).exp(),
        construction_distance: construction.distance,
        shear_epsilon: shear,
        certificate,
        robustness,
        delta,
        log_delta,
        distance,
        kappa,
        literal,
        probes,
        all_probes_pass,
    };
    Ok(NowhereDenseOutcome {
        result,
        construction,
        report,
    })
}
