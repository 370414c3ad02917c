//! Nuclear-norm penalized least squares over the observed cells.
//!
//! The completion program is
//!
//! ```text
//! min_G  1/2 * sum_{(i,t) observed} (Y_it - G_it)^2 + rho * ||G||_*
//! ```
//!
//! solved by soft-impute: repeatedly fill the unobserved cells with the
//! current iterate and soft-threshold the singular values of the result.
//! Each step is a majorize-minimize step, so the objective never increases.

use nalgebra::{DMatrix, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Module, Result};
use crate::matrix_serde;
use crate::panel_data::{Covariates, TreatmentMask};

/// Singular values at or below `RANK_TOL_REL * s_1` do not count toward the
/// effective rank.
pub const RANK_TOL_REL: f64 = 1e-7;

/// Relative bracket width at which rank-targeting bisection stops.
pub const RANK_SEARCH_REL_WIDTH: f64 = 1e-4;

/// Upper bound on bisection steps in [`fit_with_rank`].
pub const RANK_SEARCH_MAX_STEPS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub rho: f64,
    pub max_iters: usize,
    /// Stop once the relative Frobenius change between iterates drops below this.
    pub tol: f64,
    /// Keep at most this many singular values in each thresholding step.
    pub rank_cap: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rho: 0.0,
            max_iters: 500,
            tol: 1e-6,
            rank_cap: None,
        }
    }
}

impl SolverConfig {
    pub fn with_rho(rho: f64) -> Self {
        Self {
            rho,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::domain(Module::NuclearSolver, format!("rho must be finite and >= 0, got {}", self.rho)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::domain(Module::NuclearSolver, format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(Error::domain(Module::NuclearSolver, "max_iters must be >= 1"));
        }
        if self.rank_cap == Some(0) {
            return Err(Error::domain(Module::NuclearSolver, "rank_cap must be >= 1"));
        }
        Ok(())
    }
}

/// Output of a completion fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    #[serde(with = "matrix_serde")]
    pub gamma_hat: DMatrix<f64>,
    /// Spectrum of `gamma_hat`, nonincreasing.
    pub singular_values: Vec<f64>,
    pub effective_rank: usize,
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Penalty used for this fit.
    pub rho: f64,
    /// Set by [`fit_with_rank`]: whether the requested rank was hit exactly.
    pub rank_exact: Option<bool>,
    pub beta_hat: Option<Vec<f64>>,
    pub alpha_hat: Option<Vec<f64>>,
    pub delta_hat: Option<Vec<f64>>,
    /// Fitted additive part `C_it'b + a_i + d_t` on every cell.
    #[serde(with = "matrix_serde::option", default)]
    pub additive: Option<DMatrix<f64>>,
    pub warnings: Vec<String>,
}

impl FitResult {
    /// Model prediction for cell `(i, t)`: interactive part plus any additive part.
    pub fn predicted(&self, i: usize, t: usize) -> f64 {
        let a = self.additive.as_ref().map_or(0.0, |m| m[(i, t)]);
        self.gamma_hat[(i, t)] + a
    }

    pub fn final_objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(f64::NAN)
    }
}

/// A matrix after singular value soft-thresholding.
struct Shrunk {
    matrix: DMatrix<f64>,
    singular_values: Vec<f64>,
}

fn check_finite(m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(Module::NuclearSolver, "matrix has non-finite entries"))
    }
}

/// Convergence threshold for the implicit-shift SVD. Tighter values can stall
/// on rank-deficient input and return inaccurate factors.
pub(crate) fn try_svd(m: &DMatrix<f64>, vectors: bool, module: Module) -> Result<SVD<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(module, "matrix has non-finite entries"));
    }
    let (r, c) = m.shape();
    let k = r.min(c);
    let a = faer::Mat::from_fn(r, c, |i, j| m[(i, j)]);
    let failed = |_| Error::numeric(module, "SVD did not converge");
    if !vectors || k == 0 {
        let s = if k == 0 { Vec::new() } else { a.singular_values().map_err(failed)? };
        return Ok(SVD {
            u: vectors.then(|| DMatrix::zeros(r, k)),
            v_t: vectors.then(|| DMatrix::zeros(k, c)),
            singular_values: nalgebra::DVector::from_vec(s),
        });
    }
    let dec = a.thin_svd().map_err(failed)?;
    let (u, v, s) = (dec.U(), dec.V(), dec.S().column_vector());
    Ok(SVD {
        u: Some(DMatrix::from_fn(r, k, |i, j| u[(i, j)])),
        v_t: Some(DMatrix::from_fn(k, c, |i, j| v[(j, i)])),
        singular_values: nalgebra::DVector::from_fn(k, |j, _| s[j]),
    })
}

fn svd(m: &DMatrix<f64>) -> Result<SVD<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    try_svd(m, true, Module::NuclearSolver)
}

fn shrink(m: &DMatrix<f64>, rho: f64, rank_cap: Option<usize>) -> Result<Shrunk> {
    let dec = svd(m)?;
    let (u, v_t) = (dec.u.as_ref().unwrap(), dec.v_t.as_ref().unwrap());
    let cap = rank_cap.unwrap_or(usize::MAX);
    let singular_values: Vec<f64> = dec
        .singular_values
        .iter()
        .enumerate()
        .map(|(j, &s)| if j < cap { (s - rho).max(0.0) } else { 0.0 })
        .collect();
    let keep = singular_values.iter().take_while(|&&s| s > 0.0).count();
    let mut matrix = DMatrix::zeros(m.nrows(), m.ncols());
    if keep > 0 {
        let mut scaled = u.columns(0, keep).into_owned();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= singular_values[j];
        }
        matrix = scaled * v_t.rows(0, keep);
    }
    Ok(Shrunk {
        matrix,
        singular_values,
    })
}

/// Singular value soft-thresholding: `U diag(max(s - rho, 0)) V'`.
pub fn svt(m: &DMatrix<f64>, rho: f64) -> Result<DMatrix<f64>> {
    if !(rho >= 0.0) {
        return Err(Error::domain(Module::NuclearSolver, format!("rho must be >= 0, got {rho}")));
    }
    Ok(shrink(m, rho, None)?.matrix)
}

/// Nonincreasing singular values.
pub fn singular_values(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let dec = try_svd(m, false, Module::NuclearSolver)?;
    Ok(dec.singular_values.iter().copied().collect())
}

pub fn nuclear_norm(m: &DMatrix<f64>) -> Result<f64> {
    Ok(singular_values(m)?.iter().sum())
}

pub fn spectral_norm(m: &DMatrix<f64>) -> Result<f64> {
    Ok(singular_values(m)?.first().copied().unwrap_or(0.0))
}

/// Count of singular values above `RANK_TOL_REL * s_1`.
pub fn effective_rank(singular_values: &[f64]) -> usize {
    let s1 = singular_values.iter().copied().fold(0.0_f64, f64::max);
    if s1 <= 0.0 {
        return 0;
    }
    singular_values.iter().filter(|&&s| s > RANK_TOL_REL * s1).count()
}

fn check_shapes(y: &DMatrix<f64>, mask: &TreatmentMask) -> Result<()> {
    if y.shape() != mask.shape() {
        return Err(Error::shape(
            Module::NuclearSolver,
            format!("Y is {:?} but mask is {:?}", y.shape(), mask.shape()),
        ));
    }
    Ok(())
}

fn observed_sq_error(y: &DMatrix<f64>, fitted: &DMatrix<f64>, mask: &TreatmentMask) -> f64 {
    mask.cells()
        .map(|(i, t)| (y[(i, t)] - fitted[(i, t)]).powi(2))
        .sum()
}

/// `1/2 * sum_observed (Y - G)^2 + rho * ||G||_*`.
pub fn objective(gamma: &DMatrix<f64>, y: &DMatrix<f64>, mask: &TreatmentMask, rho: f64) -> Result<f64> {
    check_shapes(y, mask)?;
    if gamma.shape() != y.shape() {
        return Err(Error::shape(
            Module::NuclearSolver,
            format!("Gamma is {:?} but Y is {:?}", gamma.shape(), y.shape()),
        ));
    }
    Ok(0.5 * observed_sq_error(y, gamma, mask) + rho * nuclear_norm(gamma)?)
}

/// Upper bound on `objective(gamma) - min objective` from a dual feasible point.
///
/// The dual of the completion program is `max <M, Y> - 1/2 ||M||_F^2` over
/// matrices `M` supported on the observed cells with spectral norm at most
/// `rho`. The scaled residual `P(Y - gamma)` is such a point.
pub fn duality_gap(gamma: &DMatrix<f64>, y: &DMatrix<f64>, mask: &TreatmentMask, rho: f64) -> Result<f64> {
    let primal = objective(gamma, y, mask, rho)?;
    let mut resid = DMatrix::zeros(y.nrows(), y.ncols());
    for (i, t) in mask.cells() {
        resid[(i, t)] = y[(i, t)] - gamma[(i, t)];
    }
    let s = spectral_norm(&resid)?;
    let scale = if s > rho { rho / s } else { 1.0 };
    let dual: f64 = mask
        .cells()
        .map(|(i, t)| {
            let m = scale * resid[(i, t)];
            m * y[(i, t)] - 0.5 * m * m
        })
        .sum();
    Ok((primal - dual).max(0.0))
}

fn fill_unobserved(y: &DMatrix<f64>, mask: &TreatmentMask, gamma: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(y.nrows(), y.ncols(), |i, t| {
        if mask.is_observed(i, t) {
            y[(i, t)]
        } else {
            gamma[(i, t)]
        }
    })
}

fn coverage_warnings(mask: &TreatmentMask) -> Vec<String> {
    let (rows, cols) = mask.empty_lines();
    let mut w = Vec::new();
    if !rows.is_empty() {
        w.push(format!("units never observed at level {}: {rows:?} (pure extrapolation)", mask.level()));
    }
    if !cols.is_empty() {
        w.push(format!("periods never observed at level {}: {cols:?} (pure extrapolation)", mask.level()));
    }
    w
}

/// Soft-impute fit of the completion program at `cfg.rho`.
pub fn fit_completion(y: &DMatrix<f64>, mask: &TreatmentMask, cfg: &SolverConfig) -> Result<FitResult> {
    fit_completion_from(y, mask, cfg, None)
}

/// As [`fit_completion`], starting the iteration from `init` instead of zero.
pub fn fit_completion_from(
    y: &DMatrix<f64>,
    mask: &TreatmentMask,
    cfg: &SolverConfig,
    init: Option<&DMatrix<f64>>,
) -> Result<FitResult> {
    cfg.validate()?;
    check_shapes(y, mask)?;
    if mask.count() == 0 {
        return Err(Error::EmptyMask(mask.level()));
    }
    check_finite(y)?;
    let mut gamma = match init {
        Some(g) if g.shape() == y.shape() => g.clone(),
        Some(g) => {
            return Err(Error::shape(
                Module::NuclearSolver,
                format!("initial iterate is {:?}, expected {:?}", g.shape(), y.shape()),
            ))
        }
        None => DMatrix::zeros(y.nrows(), y.ncols()),
    };
    let mut trace = Vec::new();
    let mut spectrum = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        iterations += 1;
        let z = fill_unobserved(y, mask, &gamma);
        let next = shrink(&z, cfg.rho, cfg.rank_cap)?;
        let denom = gamma.norm();
        let change = (&next.matrix - &gamma).norm();
        gamma = next.matrix;
        spectrum = next.singular_values;
        let penalty: f64 = spectrum.iter().sum();
        trace.push(0.5 * observed_sq_error(y, &gamma, mask) + cfg.rho * penalty);
        if change == 0.0 || (denom > 0.0 && change / denom < cfg.tol) {
            converged = true;
            break;
        }
    }
    Ok(FitResult {
        effective_rank: effective_rank(&spectrum),
        singular_values: spectrum,
        gamma_hat: gamma,
        objective_trace: trace,
        converged,
        iterations,
        rho: cfg.rho,
        rank_exact: None,
        beta_hat: None,
        alpha_hat: None,
        delta_hat: None,
        additive: None,
        warnings: coverage_warnings(mask),
    })
}

/// Pick the penalty so the fit has `target_rank` nonzero singular values.
///
/// Bisects over `rho` in `(0, s_max(P(Y))]`, where `s_max` is the spectral
/// norm of the zero-filled observed matrix (at that penalty the fit is zero).
/// Returns the fit at the largest penalty found whose rank is at least the
/// target; `rank_exact` records whether the rank equals the target.
pub fn fit_with_rank(
    y: &DMatrix<f64>,
    mask: &TreatmentMask,
    target_rank: usize,
    cfg: &SolverConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    check_shapes(y, mask)?;
    let max_rank = y.nrows().min(y.ncols());
    if target_rank == 0 || target_rank > max_rank {
        return Err(Error::domain(
            Module::NuclearSolver,
            format!("target rank {target_rank} outside 1..={max_rank}"),
        ));
    }
    if mask.count() == 0 {
        return Err(Error::EmptyMask(mask.level()));
    }
    let zero_filled = fill_unobserved(y, mask, &DMatrix::zeros(y.nrows(), y.ncols()));
    let s_max = spectral_norm(&zero_filled)?;

    let mut lo = 0.0;
    let mut hi = s_max;
    let mut best: Option<FitResult> = None;
    let mut last: Option<DMatrix<f64>> = None;
    for _ in 0..RANK_SEARCH_MAX_STEPS {
        let mid = 0.5 * (lo + hi);
        let step_cfg = SolverConfig { rho: mid, ..*cfg };
        let warm = best.as_ref().map(|f| &f.gamma_hat).or(last.as_ref());
        let fit = fit_completion_from(y, mask, &step_cfg, warm)?;
        if fit.effective_rank >= target_rank {
            lo = mid;
            best = Some(fit);
        } else {
            hi = mid;
            last = Some(fit.gamma_hat);
        }
        let exact = best.as_ref().is_some_and(|f| f.effective_rank == target_rank);
        if exact && hi - lo <= RANK_SEARCH_REL_WIDTH * hi {
            break;
        }
    }
    let mut fit = match best {
        Some(f) => f,
        None => fit_completion(y, mask, &SolverConfig { rho: 0.0, ..*cfg })?,
    };
    let exact = fit.effective_rank == target_rank;
    fit.rank_exact = Some(exact);
    if !exact {
        fit.warnings.push(format!(
            "no penalty gives rank {target_rank}; returning rank {}",
            fit.effective_rank
        ));
    }
    Ok(fit)
}

/// Completion with unpenalized covariate and two-way fixed-effect terms.
///
/// Alternates an exact least-squares step for the additive terms (minimum
/// norm when the design is rank deficient) with one soft-impute step for
/// the interactive part. Unit effects are centered over the units with at
/// least one observed cell; the intercept lives in the period effects.
pub fn fit_with_additive(
    y: &DMatrix<f64>,
    mask: &TreatmentMask,
    covariates: Option<&Covariates>,
    use_unit_fe: bool,
    use_time_fe: bool,
    cfg: &SolverConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    check_shapes(y, mask)?;
    if mask.count() == 0 {
        return Err(Error::EmptyMask(mask.level()));
    }
    let (n, t) = y.shape();
    let d_c = covariates.map_or(0, Covariates::dim);
    if d_c == 0 && !use_unit_fe && !use_time_fe {
        return fit_completion(y, mask, cfg);
    }
    let cells: Vec<(usize, usize)> = mask.cells().collect();
    if let Some(cov) = covariates {
        if cov.values.iter().any(|m| m.shape() != (n, t)) {
            return Err(Error::shape(Module::NuclearSolver, "covariate slices must match Y"));
        }
        for &(i, s) in &cells {
            if cov.values.iter().any(|m| !m[(i, s)].is_finite()) {
                return Err(Error::numeric(
                    Module::NuclearSolver,
                    format!("non-finite covariate at observed cell ({i}, {s})"),
                ));
            }
        }
    }
    check_finite(y)?;

    let unit_off = d_c;
    let time_off = unit_off + if use_unit_fe { n } else { 0 };
    let p = time_off + if use_time_fe { t } else { 0 };
    let mut design = DMatrix::zeros(cells.len(), p);
    for (r, &(i, s)) in cells.iter().enumerate() {
        if let Some(cov) = covariates {
            for (k, m) in cov.values.iter().enumerate() {
                design[(r, k)] = m[(i, s)];
            }
        }
        if use_unit_fe {
            design[(r, unit_off + i)] = 1.0;
        }
        if use_time_fe {
            design[(r, time_off + s)] = 1.0;
        }
    }
    let dec = svd(&design)?;
    let s_top = dec.singular_values.iter().copied().fold(0.0, f64::max);
    let eps = 1e-10 * s_top.max(1.0);
    let design_rank = dec.rank(eps);
    let (rows_empty, cols_empty) = mask.empty_lines();
    let mut expected_rank = d_c;
    if use_unit_fe {
        expected_rank += n - rows_empty.len();
    }
    if use_time_fe {
        expected_rank += t - cols_empty.len();
    }
    if use_unit_fe && use_time_fe {
        expected_rank -= 1;
    }
    let mut warnings = coverage_warnings(mask);
    if design_rank < expected_rank {
        warnings.push(format!(
            "collinear covariates: design rank {design_rank} < {expected_rank}; minimum-norm solution used"
        ));
    }
    let pinv = dec
        .pseudo_inverse(eps)
        .map_err(|e| Error::numeric(Module::NuclearSolver, e))?;

    let observed_units: Vec<usize> = (0..n).filter(|i| !rows_empty.contains(i)).collect();
    let mut gamma = DMatrix::<f64>::zeros(n, t);
    let mut additive = DMatrix::<f64>::zeros(n, t);
    let mut coef = nalgebra::DVector::<f64>::zeros(p);
    let mut spectrum = vec![0.0; n.min(t)];
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        iterations += 1;
        let resid = nalgebra::DVector::from_iterator(
            cells.len(),
            cells.iter().map(|&(i, s)| y[(i, s)] - gamma[(i, s)]),
        );
        coef = &pinv * resid;
        if use_unit_fe && use_time_fe && !observed_units.is_empty() {
            let shift = observed_units.iter().map(|&i| coef[unit_off + i]).sum::<f64>()
                / observed_units.len() as f64;
            for &i in &observed_units {
                coef[unit_off + i] -= shift;
            }
            for s in 0..t {
                coef[time_off + s] += shift;
            }
        }
        additive = DMatrix::from_fn(n, t, |i, s| {
            let mut a = 0.0;
            if let Some(cov) = covariates {
                for (k, m) in cov.values.iter().enumerate() {
                    a += coef[k] * m[(i, s)];
                }
            }
            if use_unit_fe {
                a += coef[unit_off + i];
            }
            if use_time_fe {
                a += coef[time_off + s];
            }
            a
        });
        let target = y - &additive;
        let z = fill_unobserved(&target, mask, &gamma);
        let next = shrink(&z, cfg.rho, cfg.rank_cap)?;
        gamma = next.matrix;
        spectrum = next.singular_values;
        let fitted = &additive + &gamma;
        let obj = 0.5 * observed_sq_error(y, &fitted, mask) + cfg.rho * spectrum.iter().sum::<f64>();
        let done = trace
            .last()
            .is_some_and(|&prev: &f64| (prev - obj).abs() <= cfg.tol * prev.abs().max(f64::MIN_POSITIVE));
        trace.push(obj);
        if done {
            converged = true;
            break;
        }
    }

    let beta_hat = (d_c > 0).then(|| coef.rows(0, d_c).iter().copied().collect());
    let alpha_hat = use_unit_fe.then(|| coef.rows(unit_off, n).iter().copied().collect());
    let delta_hat = use_time_fe.then(|| coef.rows(time_off, t).iter().copied().collect());
    Ok(FitResult {
        effective_rank: effective_rank(&spectrum),
        singular_values: spectrum,
        gamma_hat: gamma,
        objective_trace: trace,
        converged,
        iterations,
        rho: cfg.rho,
        rank_exact: None,
        beta_hat,
        alpha_hat,
        delta_hat,
        additive: Some(additive),
        warnings,
    })
}

/// As [`fit_with_rank`] but for the additive program.
pub fn fit_with_additive_rank(
    y: &DMatrix<f64>,
    mask: &TreatmentMask,
    covariates: Option<&Covariates>,
    use_unit_fe: bool,
    use_time_fe: bool,
    target_rank: usize,
    cfg: &SolverConfig,
) -> Result<FitResult> {
    let max_rank = y.nrows().min(y.ncols());
    if target_rank == 0 || target_rank > max_rank {
        return Err(Error::domain(
            Module::NuclearSolver,
            format!("target rank {target_rank} outside 1..={max_rank}"),
        ));
    }
    let zero_filled = fill_unobserved(y, mask, &DMatrix::zeros(y.nrows(), y.ncols()));
    let s_max = spectral_norm(&zero_filled)?;
    let mut lo = 0.0;
    let mut hi = s_max;
    let mut best: Option<FitResult> = None;
    for _ in 0..RANK_SEARCH_MAX_STEPS {
        let mid = 0.5 * (lo + hi);
        let fit = fit_with_additive(y, mask, covariates, use_unit_fe, use_time_fe, &SolverConfig { rho: mid, ..*cfg })?;
        if fit.effective_rank >= target_rank {
            lo = mid;
            best = Some(fit);
        } else {
            hi = mid;
        }
        let exact = best.as_ref().is_some_and(|f| f.effective_rank == target_rank);
        if exact && hi - lo <= RANK_SEARCH_REL_WIDTH * hi {
            break;
        }
    }
    let mut fit = match best {
        Some(f) => f,
        None => fit_with_additive(y, mask, covariates, use_unit_fe, use_time_fe, &SolverConfig { rho: 0.0, ..*cfg })?,
    };
    let exact = fit.effective_rank == target_rank;
    fit.rank_exact = Some(exact);
    if !exact {
        fit.warnings.push(format!(
            "no penalty gives rank {target_rank}; returning rank {}",
            fit.effective_rank
        ));
    }
    Ok(fit)
}
