use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Module, Result};
use crate::estimators::{self, Weights};
use crate::factor_model::{self, NuclearBoundReport};
use crate::nuclear_solver::{self, FitResult, SolverConfig};
use crate::panel_data::TreatmentMask;

/// Solver settings for the verification batteries: tight enough that the
/// duality gap is negligible next to the bounds being checked.
pub fn verification_solver() -> SolverConfig {
    SolverConfig {
        max_iters: 5000,
        tol: 1e-10,
        ..SolverConfig::default()
    }
}

/// True mean matrix, errors on the observed cells and the observation mask.
#[derive(Debug, Clone)]
pub struct OracleInstance {
    pub gamma_true: DMatrix<f64>,
    pub errors: DMatrix<f64>,
    pub mask: TreatmentMask,
}

impl OracleInstance {
    /// Errors off the mask must be zero.
    pub fn new(gamma_true: DMatrix<f64>, errors: DMatrix<f64>, mask: TreatmentMask) -> Result<Self> {
        let shape = gamma_true.shape();
        if errors.shape() != shape || mask.shape() != shape {
            return Err(Error::shape(Module::Simulation, "instance matrices differ in shape"));
        }
        for i in 0..shape.0 {
            for t in 0..shape.1 {
                if !mask.is_observed(i, t) && errors[(i, t)] != 0.0 {
                    return Err(Error::domain(Module::Simulation, format!("nonzero error at unobserved cell ({i}, {t})")));
                }
            }
        }
        Ok(Self {
            gamma_true,
            errors,
            mask,
        })
    }

    /// Outcomes `gamma_true + errors` (meaningful on the mask only).
    pub fn outcomes(&self) -> DMatrix<f64> {
        &self.gamma_true + &self.errors
    }

    fn cross(&self) -> f64 {
        self.mask.cells().map(|c| self.gamma_true[c] * self.errors[c]).sum()
    }

    fn check_fit(&self, fit: &FitResult) -> Result<()> {
        if fit.gamma_hat.shape() != self.gamma_true.shape() {
            return Err(Error::shape(Module::Simulation, "fit and instance differ in shape"));
        }
        Ok(())
    }
}

/// Random instance: rank-`rank` truth with standard normal factors, normal
/// errors with sd `noise_sd` and cells observed with probability `p_obs`.
pub fn random_instance(rng: &mut impl Rng, n: usize, t: usize, rank: usize, noise_sd: f64, p_obs: f64) -> Result<OracleInstance> {
    let mut normal = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(&mut *rng));
    let l: DMatrix<f64> = normal(n, rank);
    let f: DMatrix<f64> = normal(t, rank);
    let gamma_true = l * f.transpose();
    let mask = DMatrix::from_fn(n, t, |_, _| rng.random_bool(p_obs));
    let errors = DMatrix::from_fn(n, t, |i, s| {
        let e: f64 = StandardNormal.sample(rng);
        if mask[(i, s)] {
            noise_sd * e
        } else {
            0.0
        }
    });
    OracleInstance::new(gamma_true, errors, TreatmentMask::new(0, mask))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LemmaA2Report {
    pub rho: f64,
    pub error_spectral_norm: f64,
    pub precondition_met: bool,
    pub n_obs: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    /// `2 * gap / n` where `gap` bounds the fit's excess objective.
    pub solver_slack: f64,
    /// `None` when the precondition fails and no claim is made.
    pub holds: Option<bool>,
}

/// In-sample error of a completion fit against the bound
/// `2 rho ||G||_* / n - (2 / n) sum G E` over observed cells.
pub fn verify_lemma_a2(inst: &OracleInstance, fit: &FitResult, rho: f64) -> Result<LemmaA2Report> {
    inst.check_fit(fit)?;
    let n_obs = inst.mask.count();
    if n_obs == 0 {
        return Err(Error::EmptyMask(inst.mask.level()));
    }
    let n = n_obs as f64;
    let e_norm = nuclear_solver::spectral_norm(&inst.errors)?;
    let lhs = inst.mask.cells().map(|c| (fit.gamma_hat[c] - inst.gamma_true[c]).powi(2)).sum::<f64>() / n;
    let rhs = 2.0 * rho * nuclear_solver::nuclear_norm(&inst.gamma_true)? / n - 2.0 * inst.cross() / n;
    let gap = nuclear_solver::duality_gap(&fit.gamma_hat, &inst.outcomes(), &inst.mask, rho)?;
    let solver_slack = 2.0 * gap / n + 1e-12 * (1.0 + rhs.abs());
    let slack = rhs - lhs;
    let precondition_met = rho >= e_norm;
    Ok(LemmaA2Report {
        rho,
        error_spectral_norm: e_norm,
        precondition_met,
        n_obs,
        lhs,
        rhs,
        slack,
        solver_slack,
        holds: precondition_met.then_some(slack >= -solver_slack),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropA1Report {
    pub rho: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub error_spectral_norm: f64,
    pub v_spectral_norm: f64,
    pub nu_hat: f64,
    pub nu_true: f64,
    pub abs_error: f64,
    /// Bound widened for the fit's duality gap; equals `c4` for an exact minimizer.
    pub c4_with_slack: f64,
    pub precondition_met: bool,
    pub holds: Option<bool>,
}

/// Constants of the reduced-form bound that do not involve a fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PropA1Constants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub error_spectral_norm: f64,
    pub v_spectral_norm: f64,
}

impl PropA1Constants {
    pub fn precondition(&self, c4: f64, rho: f64) -> bool {
        self.c1 > 0.0 && rho > self.error_spectral_norm + c4 * self.v_spectral_norm
    }
}

pub fn prop_a1_constants(inst: &OracleInstance, propensities: &DMatrix<f64>, weights: &Weights, rho: f64) -> Result<PropA1Constants> {
    let shape = inst.gamma_true.shape();
    let w = weights.matrix();
    if propensities.shape() != shape || w.shape() != shape {
        return Err(Error::shape(Module::Simulation, "propensities and weights must match the instance"));
    }
    if propensities.iter().any(|&p| p == 0.0 || !p.is_finite()) {
        return Err(Error::domain(Module::Simulation, "propensities must be finite and nonzero"));
    }
    let nt = (shape.0 * shape.1) as f64;
    let d = |i: usize, t: usize| f64::from(u8::from(inst.mask.is_observed(i, t)));
    let q = w.zip_map(propensities, |w, p| w * w / p).sum() / nt;
    let v = DMatrix::from_fn(shape.0, shape.1, |i, t| {
        let p = propensities[(i, t)];
        w[(i, t)] * (d(i, t) - p) / p / q
    });
    let wpv = DMatrix::from_fn(shape.0, shape.1, |i, t| w[(i, t)] * v[(i, t)] / propensities[(i, t)]).sum() / nt;
    let c1 = (1.0 - wpv) / q;
    let c2 = v.component_mul(&inst.gamma_true).sum() / nt;
    let c3 = 2.0 * rho * nuclear_solver::nuclear_norm(&inst.gamma_true)? / (c1 * nt) - 2.0 * inst.cross() / (c1 * nt)
        + (c2 / c1).powi(2);
    let c4 = c3.max(0.0).sqrt() + c2.abs() / c1;
    Ok(PropA1Constants {
        c1,
        c2,
        c3,
        c4,
        error_spectral_norm: nuclear_solver::spectral_norm(&inst.errors)?,
        v_spectral_norm: nuclear_solver::spectral_norm(&v)?,
    })
}

/// Weighted reduced-form error `|nu_hat - nu|` against `c4`.
///
/// A fit whose objective is within `g` of the minimum satisfies the bound
/// with `c3` replaced by `c3 + 2 g / (c1 N T)`; the precondition is checked
/// at that widened value.
pub fn verify_prop_a1(
    inst: &OracleInstance,
    propensities: &DMatrix<f64>,
    weights: &Weights,
    fit: &FitResult,
    rho: f64,
) -> Result<PropA1Report> {
    inst.check_fit(fit)?;
    let k = prop_a1_constants(inst, propensities, weights, rho)?;
    let nt = inst.gamma_true.len() as f64;
    let nu_hat = estimators::weighted_reduced_form(&fit.gamma_hat, weights)?;
    let nu_true = estimators::weighted_reduced_form(&inst.gamma_true, weights)?;
    let gap = nuclear_solver::duality_gap(&fit.gamma_hat, &inst.outcomes(), &inst.mask, rho)?;
    let c4_with_slack = if k.c1 > 0.0 {
        (k.c3 + 2.0 * gap / (k.c1 * nt)).max(0.0).sqrt() + k.c2.abs() / k.c1 + 1e-12 * (1.0 + nu_true.abs())
    } else {
        f64::NAN
    };
    let precondition_met = k.precondition(c4_with_slack, rho);
    let abs_error = (nu_hat - nu_true).abs();
    Ok(PropA1Report {
        rho,
        c1: k.c1,
        c2: k.c2,
        c3: k.c3,
        c4: k.c4,
        error_spectral_norm: k.error_spectral_norm,
        v_spectral_norm: k.v_spectral_norm,
        nu_hat,
        nu_true,
        abs_error,
        c4_with_slack,
        precondition_met,
        holds: precondition_met.then_some(abs_error <= c4_with_slack),
    })
}

/// Instances with 50% random masks, rank-3 truth and `rho = 1.5 ||E||`.
pub fn lemma_a2_battery(seed: u64, count: usize, n: usize, t: usize) -> Result<Vec<LemmaA2Report>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let solver = verification_solver();
    (0..count)
        .map(|_| {
            let inst = random_instance(&mut rng, n, t, 3, 0.5, 0.5)?;
            let rho = 1.5 * nuclear_solver::spectral_norm(&inst.errors)?;
            let fit = nuclear_solver::fit_completion(&inst.outcomes(), &inst.mask, &SolverConfig { rho, ..solver })?;
            verify_lemma_a2(&inst, &fit, rho)
        })
        .collect()
}

/// Smallest doubling of `1.01 ||E||` meeting the reduced-form precondition.
pub fn prop_a1_rho(inst: &OracleInstance, propensities: &DMatrix<f64>, weights: &Weights) -> Result<Option<f64>> {
    let mut rho = 1.01 * nuclear_solver::spectral_norm(&inst.errors)?.max(1e-12);
    for _ in 0..64 {
        let k = prop_a1_constants(inst, propensities, weights, rho)?;
        if k.c1 <= 0.0 {
            return Ok(None);
        }
        if k.precondition(k.c4, rho) {
            return Ok(Some(rho));
        }
        rho *= 2.0;
    }
    Ok(None)
}

/// Bernoulli(1/2) assignment, unit weights, rank-1 truth and small noise.
pub fn prop_a1_battery(seed: u64, count: usize, n: usize, t: usize) -> Result<Vec<PropA1Report>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let solver = verification_solver();
    let p = DMatrix::from_element(n, t, 0.5);
    let w = Weights::uniform(n, t);
    (0..count)
        .map(|_| {
            let inst = random_instance(&mut rng, n, t, 1, 0.1, 0.5)?;
            let rho = prop_a1_rho(&inst, &p, &w)?
                .ok_or_else(|| Error::numeric(Module::Simulation, "no penalty satisfies the precondition"))?;
            let fit = nuclear_solver::fit_completion(&inst.outcomes(), &inst.mask, &SolverConfig { rho, ..solver })?;
            verify_prop_a1(&inst, &p, &w, &fit, rho)
        })
        .collect()
}

/// `sum_j s_j phi_j(A_i) phi_j(B_t)` with cosine basis functions and uniform
/// draws, compared with `sqrt(NT) sum_j s_j`.
pub fn lemma_a1_battery(seed: u64, count: usize, n: usize, t: usize, s: &[f64], eps: f64) -> Result<Vec<NuclearBoundReport>> {
    (0..count as u64)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k));
            let a: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let b: Vec<f64> = (0..t).map(|_| rng.random()).collect();
            let basis = |pts: &[f64]| {
                let cols: Vec<_> = (1..=s.len())
                    .map(|j| nalgebra::DVector::from_vec(factor_model::cosine_basis(pts, j)))
                    .collect();
                DMatrix::from_columns(&cols)
            };
            factor_model::nuclear_norm_bound_check(s, &basis(&a), &basis(&b), eps)
        })
        .collect()
}
