//! Structural-function estimates from completions or matched counterfactuals,
//! plus the difference-in-means and difference-in-differences baselines.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Module, Result};
use crate::matching::MatchedCounterfactual;
use crate::nuclear_solver::{self, FitResult};
use crate::panel_data::{Level, PanelDataset};

/// Per-period estimates and their aggregate.
///
/// `aggregate = sum_t period_weights[t] * per_period[t]` over the periods
/// with an estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectEstimate {
    pub method: String,
    pub x: Level,
    /// Conditioning level for conditional targets.
    pub x0: Option<Level>,
    pub per_period: Vec<Option<f64>>,
    pub aggregate: f64,
    pub n_used_per_period: Vec<usize>,
    pub period_weights: Vec<f64>,
    pub warnings: Vec<String>,
}

impl EffectEstimate {
    /// CSV with columns `period,estimate,n_used`; the last row has period `all`.
    pub fn write_csv<W: Write>(&self, w: W, period_labels: &[String]) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::io(Module::Estimators, e.into());
        out.write_record(["period", "estimate", "n_used"]).map_err(io)?;
        for (t, v) in self.per_period.iter().enumerate() {
            let label = period_labels.get(t).cloned().unwrap_or_else(|| t.to_string());
            let est = v.map(|v| v.to_string()).unwrap_or_default();
            out.write_record([label, est, self.n_used_per_period[t].to_string()]).map_err(io)?;
        }
        let total: usize = self.n_used_per_period.iter().sum();
        out.write_record(["all".to_string(), self.aggregate.to_string(), total.to_string()])
            .map_err(io)?;
        out.flush().map_err(|e| Error::io(Module::Estimators, e))
    }

    /// Difference `self - other` period by period, aggregated with `self`'s weights.
    pub fn minus(&self, other: &EffectEstimate, method: impl Into<String>) -> Result<EffectEstimate> {
        if self.per_period.len() != other.per_period.len() {
            return Err(Error::shape(Module::Estimators, "estimates cover different numbers of periods"));
        }
        let per_period: Vec<Option<f64>> = self
            .per_period
            .iter()
            .zip(&other.per_period)
            .map(|(a, b)| Some((*a)? - (*b)?))
            .collect();
        let weights = self.period_weights.clone();
        Ok(EffectEstimate {
            method: method.into(),
            x: self.x,
            x0: self.x0,
            aggregate: weighted_total(&per_period, &weights),
            n_used_per_period: self.n_used_per_period.clone(),
            per_period,
            period_weights: weights,
            warnings: self.warnings.iter().chain(&other.warnings).cloned().collect(),
        })
    }
}

/// Renormalize weights over the periods that have an estimate and sum.
fn weighted_total(per_period: &[Option<f64>], weights: &[f64]) -> f64 {
    let mass: f64 = per_period.iter().zip(weights).filter(|(v, _)| v.is_some()).map(|(_, w)| w).sum();
    per_period
        .iter()
        .zip(weights)
        .filter_map(|(v, w)| v.map(|v| v * w / mass))
        .sum()
}

/// Known cell weights `W_it` for weighted targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights(DMatrix<f64>);

impl Weights {
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(Module::Estimators, "weights must be finite"));
        }
        Ok(Self(w))
    }

    pub fn uniform(n: usize, t: usize) -> Self {
        Self(DMatrix::from_element(n, t, 1.0))
    }

    /// `W_it = NT / n(x0) * 1{X_it = x0}`, so the weighted average is the
    /// mean over cells at level `x0`.
    pub fn conditional(ds: &PanelDataset, x0: Level) -> Result<Self> {
        let mask = ds.mask(x0)?;
        if mask.count() == 0 {
            return Err(Error::EmptyConditioningSet(x0));
        }
        let scale = (ds.n_units() * ds.n_periods()) as f64 / mask.count() as f64;
        Ok(Self(mask.matrix().map(|b| if b { scale } else { 0.0 })))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Read access to a fitted completion.
pub trait Completion {
    fn shape(&self) -> (usize, usize);
    /// Model prediction for cell `(i, t)`.
    fn predicted(&self, i: usize, t: usize) -> f64;
}

impl Completion for FitResult {
    fn shape(&self) -> (usize, usize) {
        self.gamma_hat.shape()
    }

    fn predicted(&self, i: usize, t: usize) -> f64 {
        FitResult::predicted(self, i, t)
    }
}

impl Completion for DMatrix<f64> {
    fn shape(&self) -> (usize, usize) {
        DMatrix::shape(self)
    }

    fn predicted(&self, i: usize, t: usize) -> f64 {
        self[(i, t)]
    }
}

fn check_completion_shape(fit: &impl Completion, ds: &PanelDataset) -> Result<()> {
    if fit.shape() != (ds.n_units(), ds.n_periods()) {
        return Err(Error::shape(
            Module::Estimators,
            format!("completion is {:?} but panel is {}x{}", fit.shape(), ds.n_units(), ds.n_periods()),
        ));
    }
    Ok(())
}

/// Plug-in average structural function: observed outcomes at level `x`,
/// completed values elsewhere; periods weighted equally.
pub fn asf_mc(fit: &impl Completion, ds: &PanelDataset, x: Level) -> Result<EffectEstimate> {
    check_completion_shape(fit, ds)?;
    ds.check_level(x)?;
    let (n, t) = (ds.n_units(), ds.n_periods());
    let per_period: Vec<Option<f64>> = (0..t)
        .map(|s| {
            let total: f64 = (0..n)
                .map(|i| if ds.treatment(i, s) == x { ds.outcome(i, s) } else { fit.predicted(i, s) })
                .sum();
            Some(total / n as f64)
        })
        .collect();
    let weights = vec![1.0 / t as f64; t];
    Ok(EffectEstimate {
        method: "MC".into(),
        x,
        x0: None,
        aggregate: weighted_total(&per_period, &weights),
        per_period,
        n_used_per_period: vec![n; t],
        period_weights: weights,
        warnings: Vec::new(),
    })
}

/// Plug-in conditional average structural function over cells at level `x0`;
/// periods weighted by their count of such cells.
pub fn casf_mc(fit: &impl Completion, ds: &PanelDataset, x: Level, x0: Level) -> Result<EffectEstimate> {
    check_completion_shape(fit, ds)?;
    ds.check_level(x)?;
    ds.check_level(x0)?;
    let (n, t) = (ds.n_units(), ds.n_periods());
    let mut per_period = Vec::with_capacity(t);
    let mut counts = Vec::with_capacity(t);
    for s in 0..t {
        let mut total = 0.0;
        let mut count = 0;
        for i in (0..n).filter(|&i| ds.treatment(i, s) == x0) {
            total += if x == x0 { ds.outcome(i, s) } else { fit.predicted(i, s) };
            count += 1;
        }
        per_period.push((count > 0).then(|| total / count as f64));
        counts.push(count);
    }
    let n_x0: usize = counts.iter().sum();
    if n_x0 == 0 {
        return Err(Error::EmptyConditioningSet(x0));
    }
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64 / n_x0 as f64).collect();
    Ok(EffectEstimate {
        method: "MC".into(),
        x,
        x0: Some(x0),
        aggregate: weighted_total(&per_period, &weights),
        per_period,
        n_used_per_period: counts,
        period_weights: weights,
        warnings: Vec::new(),
    })
}

/// `(NT)^-1 sum_it W_it Ytilde_it`, with per-period `sum_i W Ytilde / sum_i W`.
pub fn effect_from_matched(
    mc: &MatchedCounterfactual,
    ds: &PanelDataset,
    x: Level,
    weights: &Weights,
) -> Result<EffectEstimate> {
    let (n, t) = (ds.n_units(), ds.n_periods());
    if mc.x != x {
        return Err(Error::domain(
            Module::Estimators,
            format!("counterfactuals built at level {} but level {x} requested", mc.x),
        ));
    }
    if mc.y_tilde.shape() != (n, t) || weights.0.shape() != (n, t) {
        return Err(Error::shape(Module::Estimators, "counterfactuals and weights must match the panel"));
    }
    let w = &weights.0;
    if w.sum() == 0.0 {
        return Err(Error::domain(Module::Estimators, "weights sum to zero"));
    }
    let nt = (n * t) as f64;
    let mut per_period = Vec::with_capacity(t);
    let mut period_weights = Vec::with_capacity(t);
    let mut used = Vec::with_capacity(t);
    for s in 0..t {
        let ws: f64 = w.column(s).sum();
        let num: f64 = (0..n).map(|i| w[(i, s)] * mc.y_tilde[(i, s)]).sum();
        per_period.push((ws != 0.0).then(|| num / ws));
        period_weights.push(ws / nt);
        used.push(w.column(s).iter().filter(|&&v| v != 0.0).count());
    }
    let aggregate = w.component_mul(&mc.y_tilde).sum() / nt;
    let mut warnings = Vec::new();
    if !mc.fallback_cells.is_empty() {
        warnings.push(format!("{} cells used the global-mean fallback", mc.fallback_cells.len()));
    }
    if !mc.short_cells.is_empty() {
        warnings.push(format!("{} cells had fewer feasible matches than requested", mc.short_cells.len()));
    }
    Ok(EffectEstimate {
        method: mc.config.label(),
        x,
        x0: None,
        per_period,
        aggregate,
        n_used_per_period: used,
        period_weights,
        warnings,
    })
}

/// `(NT)^-1 sum_it W_it G_it`.
pub fn weighted_reduced_form(gamma: &DMatrix<f64>, weights: &Weights) -> Result<f64> {
    if gamma.shape() != weights.0.shape() {
        return Err(Error::shape(Module::Estimators, "weights must match the completed matrix"));
    }
    Ok(gamma.component_mul(&weights.0).sum() / gamma.len() as f64)
}

fn treated_counts(ds: &PanelDataset) -> Vec<usize> {
    (0..ds.n_periods()).map(|t| ds.count_in_period(1, t)).collect()
}

/// Per-period difference of treated and control means. Periods lacking
/// either group are skipped; the aggregate weights periods by treated count.
pub fn dmeans(ds: &PanelDataset) -> Result<EffectEstimate> {
    ds.require_binary(Module::Estimators)?;
    let (n, t) = (ds.n_units(), ds.n_periods());
    let mut per_period = Vec::with_capacity(t);
    let mut used = Vec::with_capacity(t);
    let mut skipped = Vec::new();
    for s in 0..t {
        let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..n {
            if ds.treatment(i, s) == 1 {
                s1 += ds.outcome(i, s);
                n1 += 1;
            } else {
                s0 += ds.outcome(i, s);
                n0 += 1;
            }
        }
        if n1 > 0 && n0 > 0 {
            per_period.push(Some(s1 / n1 as f64 - s0 / n0 as f64));
            used.push(n);
        } else {
            per_period.push(None);
            used.push(0);
            if n1 > 0 {
                skipped.push(s);
            }
        }
    }
    finish_att("Dmeans", ds, per_period, used, skipped)
}

fn finish_att(
    method: &str,
    ds: &PanelDataset,
    per_period: Vec<Option<f64>>,
    used: Vec<usize>,
    skipped: Vec<usize>,
) -> Result<EffectEstimate> {
    let counts = treated_counts(ds);
    let valid: f64 = counts
        .iter()
        .zip(&per_period)
        .filter(|(_, v)| v.is_some())
        .map(|(&c, _)| c as f64)
        .sum();
    if valid == 0.0 {
        return Err(Error::EmptyConditioningSet(1));
    }
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64 / valid).collect();
    let mut warnings = Vec::new();
    if !skipped.is_empty() {
        warnings.push(format!("periods with treated cells but no comparison group skipped: {skipped:?}"));
    }
    Ok(EffectEstimate {
        method: method.into(),
        x: 1,
        x0: Some(1),
        aggregate: weighted_total(&per_period, &weights),
        per_period,
        n_used_per_period: used,
        period_weights: weights,
        warnings,
    })
}

/// Two-way fixed-effects regression with one treatment interaction per
/// period that has treated cells. The interaction coefficients are the
/// per-period effects on the treated; the minimum-norm solution is used
/// when the design is rank deficient.
pub fn did(ds: &PanelDataset) -> Result<EffectEstimate> {
    ds.require_binary(Module::Estimators)?;
    let (n, t) = (ds.n_units(), ds.n_periods());
    let counts = treated_counts(ds);
    let treated_periods: Vec<usize> = (0..t).filter(|&s| counts[s] > 0).collect();
    if treated_periods.is_empty() {
        return Err(Error::EmptyConditioningSet(1));
    }
    let p = n + t + treated_periods.len();
    let mut design = DMatrix::zeros(n * t, p);
    let mut y = DVector::zeros(n * t);
    for s in 0..t {
        for i in 0..n {
            let r = i + s * n;
            design[(r, i)] = 1.0;
            design[(r, n + s)] = 1.0;
            if ds.treatment(i, s) == 1 {
                let k = treated_periods.binary_search(&s).unwrap();
                design[(r, n + t + k)] = 1.0;
            }
            y[r] = ds.outcome(i, s);
        }
    }
    let coef = min_norm_lstsq(design, &y)?;
    let mut per_period = vec![None; t];
    let mut used = vec![0; t];
    let mut skipped = Vec::new();
    for (k, &s) in treated_periods.iter().enumerate() {
        if counts[s] == n {
            // no control cells in this period: the interaction is not identified
            skipped.push(s);
            continue;
        }
        per_period[s] = Some(coef[n + t + k]);
        used[s] = n;
    }
    finish_att("DiD", ds, per_period, used, skipped)
}

pub(crate) fn min_norm_lstsq(design: DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let dec = nuclear_solver::try_svd(&design, true, Module::Estimators)?;
    let s_top = dec.singular_values.iter().copied().fold(0.0, f64::max);
    let eps = 1e-10 * s_top.max(1.0);
    let solve = |rhs: &DVector<f64>| dec.solve(rhs, eps).map_err(|e| Error::numeric(Module::Estimators, e));
    let coef = solve(y)?;
    // one step of iterative refinement
    let residual = y - &design * &coef;
    Ok(coef + solve(&residual)?)
}

/// Turn an effect on the treated into the untreated counterfactual mean of
/// the treated, `mu(0 | {1}) = mean(Y | X = 1) - ATT`, period by period.
pub fn counterfactual_from_att(att: &EffectEstimate, ds: &PanelDataset) -> Result<EffectEstimate> {
    let t = ds.n_periods();
    if att.per_period.len() != t {
        return Err(Error::shape(Module::Estimators, "estimate does not match the panel"));
    }
    let per_period: Vec<Option<f64>> = (0..t)
        .map(|s| {
            let effect = att.per_period[s]?;
            let (sum, cnt) = (0..ds.n_units())
                .filter(|&i| ds.treatment(i, s) == 1)
                .fold((0.0, 0usize), |(a, c), i| (a + ds.outcome(i, s), c + 1));
            (cnt > 0).then(|| sum / cnt as f64 - effect)
        })
        .collect();
    Ok(EffectEstimate {
        method: att.method.clone(),
        x: 0,
        x0: Some(1),
        aggregate: weighted_total(&per_period, &att.period_weights),
        per_period,
        n_used_per_period: att.n_used_per_period.clone(),
        period_weights: att.period_weights.clone(),
        warnings: att.warnings.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DsfScope {
    Aggregate,
    Period(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionEstimate {
    pub grid: Vec<f64>,
    pub f_raw: Vec<f64>,
    /// `f_raw` sorted into nondecreasing order.
    pub f_rearranged: Vec<f64>,
    pub scope: DsfScope,
}

impl DistributionEstimate {
    pub fn new(grid: Vec<f64>, f_raw: Vec<f64>, scope: DsfScope) -> Result<Self> {
        if grid.len() != f_raw.len() {
            return Err(Error::shape(Module::Estimators, "grid and estimates differ in length"));
        }
        check_grid(&grid)?;
        let mut f_rearranged = f_raw.clone();
        f_rearranged.sort_by(f64::total_cmp);
        Ok(Self {
            grid,
            f_raw,
            f_rearranged,
            scope,
        })
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.iter().any(|g| !g.is_finite()) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::domain(Module::Estimators, "grid must be finite and strictly increasing"));
    }
    Ok(())
}

/// Estimates of `P(Y(x) <= y)` from running a pipeline on indicator outcomes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DsfPanel {
    pub grid: Vec<f64>,
    pub estimates: Vec<EffectEstimate>,
}

impl DsfPanel {
    pub fn aggregate(&self) -> DistributionEstimate {
        let f = self.estimates.iter().map(|e| e.aggregate).collect();
        DistributionEstimate::new(self.grid.clone(), f, DsfScope::Aggregate).expect("grid checked at construction")
    }

    /// Per-period distribution, if every grid point produced an estimate for `t`.
    pub fn period(&self, t: usize) -> Option<DistributionEstimate> {
        let f: Option<Vec<f64>> = self.estimates.iter().map(|e| e.per_period.get(t).copied().flatten()).collect();
        Some(DistributionEstimate::new(self.grid.clone(), f?, DsfScope::Period(t)).expect("grid checked at construction"))
    }
}

/// Run `pipeline` on `1{Y <= y}` for every grid point in parallel.
pub fn dsf<F>(pipeline: F, ds: &PanelDataset, grid: &[f64]) -> Result<DsfPanel>
where
    F: Fn(&PanelDataset) -> Result<EffectEstimate> + Sync,
{
    if grid.is_empty() {
        return Err(Error::domain(Module::Estimators, "empty grid"));
    }
    check_grid(grid)?;
    let estimates = grid
        .par_iter()
        .map(|&y| {
            let indicator = ds.outcomes().map(|v| if v <= y { 1.0 } else { 0.0 });
            ds.with_outcomes(indicator)
                .and_then(|d| pipeline(&d))
                .map_err(|e| Error::Pipeline { y, source: Box::new(e) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DsfPanel {
        grid: grid.to_vec(),
        estimates,
    })
}

/// Type-1 sample quantiles (inverse empirical CDF) of `values` at
/// probabilities `0.10, 0.11, ..., 0.98`, duplicates removed.
pub fn default_grid(values: &[f64]) -> Result<Vec<f64>> {
    let probs: Vec<f64> = (10..=98).map(|k| k as f64 / 100.0).collect();
    quantile_grid(values, &probs)
}

pub fn quantile_grid(values: &[f64], probs: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::domain(Module::Estimators, "no values to build a grid from"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut grid: Vec<f64> = probs
        .iter()
        .map(|&p| {
            let k = ((n as f64 * p) - 1e-9).ceil().max(1.0) as usize;
            sorted[k.min(n) - 1]
        })
        .collect();
    grid.dedup();
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quantile {
    pub value: f64,
    /// No grid point reached the level; `value` is the largest grid point.
    pub out_of_range: bool,
}

/// Left inverse `inf { y in grid : F(y) >= tau }` of the rearranged DSF.
pub fn quantile_invert(de: &DistributionEstimate, tau: f64) -> Result<Quantile> {
    if de.grid.is_empty() {
        return Err(Error::domain(Module::Estimators, "empty grid"));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::domain(Module::Estimators, format!("tau must lie in (0, 1), got {tau}")));
    }
    Ok(match de.f_rearranged.iter().position(|&f| f >= tau) {
        Some(k) => Quantile {
            value: de.grid[k],
            out_of_range: false,
        },
        None => Quantile {
            value: *de.grid.last().unwrap(),
            out_of_range: true,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuantileEffect {
    pub tau: f64,
    pub treated: Quantile,
    pub control: Quantile,
    pub effect: f64,
}

/// `Q_treated(tau) - Q_control(tau)` at each `tau`.
pub fn quantile_effects(
    treated: &DistributionEstimate,
    control: &DistributionEstimate,
    taus: &[f64],
) -> Result<Vec<QuantileEffect>> {
    taus.iter()
        .map(|&tau| {
            let a = quantile_invert(treated, tau)?;
            let b = quantile_invert(control, tau)?;
            Ok(QuantileEffect {
                tau,
                treated: a,
                control: b,
                effect: a.value - b.value,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor_model::FactorStructure;
    use crate::matching::{self, NeighborRule};
    use crate::nuclear_solver::SolverConfig;
    use crate::panel_data::TreatmentMask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::cell::Cell;

    fn binary_panel(seed: u64, n: usize, t: usize, p: f64) -> PanelDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = DMatrix::from_fn(n, t, |_, _| rng.random_range(-2.0..2.0));
        let mut x = DMatrix::from_fn(n, t, |_, _| i64::from(rng.random_bool(p)));
        x[(0, 0)] = 0;
        x[(n - 1, t - 1)] = 1;
        PanelDataset::from_matrices(y, x).unwrap()
    }

    fn check_aggregate(e: &EffectEstimate) {
        let mass: f64 = e.per_period.iter().zip(&e.period_weights).filter(|(v, _)| v.is_some()).map(|(_, w)| w).sum();
        let direct: f64 = e.per_period.iter().zip(&e.period_weights).filter_map(|(v, w)| v.map(|v| v * w)).sum();
        assert!((direct / mass - e.aggregate).abs() < 1e-12);
    }

    /// Completion that counts reads.
    struct Counting<'a> {
        inner: &'a DMatrix<f64>,
        reads: Cell<usize>,
    }

    impl Completion for Counting<'_> {
        fn shape(&self) -> (usize, usize) {
            self.inner.shape()
        }
        fn predicted(&self, i: usize, t: usize) -> f64 {
            self.reads.set(self.reads.get() + 1);
            self.inner[(i, t)]
        }
    }

    #[test]
    fn asf_with_every_cell_observed_is_the_period_mean() {
        let y = DMatrix::from_row_slice(2, 2, &[1.0, 5.0, 3.0, 7.0]);
        let ds = PanelDataset::from_matrices(y, DMatrix::from_element(2, 2, 0)).unwrap();
        let junk = DMatrix::from_element(2, 2, 100.0);
        let e = asf_mc(&junk, &ds, 0).unwrap();
        assert_eq!(e.per_period, vec![Some(2.0), Some(6.0)]);
        assert_eq!(e.aggregate, 4.0);
    }

    #[test]
    fn asf_with_interpolating_fit_is_the_data_mean() {
        let ds = binary_panel(1, 6, 5, 0.4);
        let mask = TreatmentMask::full(0, 6, 5);
        let fit = nuclear_solver::fit_completion(ds.outcomes(), &mask, &SolverConfig::with_rho(0.0)).unwrap();
        let e = asf_mc(&fit, &ds, 0).unwrap();
        assert!((e.aggregate - ds.outcomes().mean()).abs() < 1e-8);
        check_aggregate(&e);
    }

    #[test]
    fn casf_at_its_own_level_never_reads_the_fit() {
        let ds = binary_panel(2, 7, 6, 0.5);
        let g = DMatrix::from_element(7, 6, f64::NAN);
        let probe = Counting { inner: &g, reads: Cell::new(0) };
        let e = casf_mc(&probe, &ds, 1, 1).unwrap();
        assert_eq!(probe.reads.get(), 0);
        let (sum, cnt) = ds.mask(1).unwrap().cells().fold((0.0, 0), |(a, c), (i, t)| (a + ds.outcome(i, t), c + 1));
        assert!((e.aggregate - sum / cnt as f64).abs() < 1e-12);
        check_aggregate(&e);
        let cf = casf_mc(&probe, &ds, 0, 1).unwrap();
        assert_eq!(probe.reads.get(), cnt);
        assert!(cf.aggregate.is_nan());
    }

    #[test]
    fn casf_without_conditioning_cells_is_an_error() {
        let ds = PanelDataset::new(
            DMatrix::zeros(2, 2),
            DMatrix::from_row_slice(2, 2, &[0, 0, 0, 2]),
            vec![0, 1, 2],
            None,
            vec!["a".into(), "b".into()],
            vec!["1".into(), "2".into()],
        )
        .unwrap();
        let g = DMatrix::zeros(2, 2);
        assert!(casf_mc(&g, &ds, 0, 2).is_ok());
        assert!(matches!(casf_mc(&g, &ds, 0, 1), Err(Error::EmptyConditioningSet(1))));
    }

    #[test]
    fn att_from_two_casf_calls() {
        let ds = binary_panel(3, 8, 6, 0.5);
        let g = DMatrix::from_element(8, 6, 0.25);
        let treated = casf_mc(&g, &ds, 1, 1).unwrap();
        let control = casf_mc(&g, &ds, 0, 1).unwrap();
        let att = treated.minus(&control, "MC").unwrap();
        assert!((att.aggregate - (treated.aggregate - control.aggregate)).abs() < 1e-12);
    }

    #[test]
    fn matched_effect_under_full_observation_is_the_sample_mean() {
        let ds = binary_panel(4, 5, 4, 0.0);
        let ds = PanelDataset::from_matrices(ds.outcomes().clone(), DMatrix::zeros(5, 4)).unwrap();
        let fs = FactorStructure {
            loadings: DMatrix::zeros(5, 1),
            factors: DMatrix::zeros(4, 1),
            singular_values: vec![0.0],
            rank: 1,
            numeric_rank: 0,
            rank_deficient: true,
        };
        let mc = matching::two_way_match(&fs, &ds, 0, NeighborRule::KNearest(3)).unwrap();
        let e = effect_from_matched(&mc, &ds, 0, &Weights::uniform(5, 4)).unwrap();
        assert!((e.aggregate - ds.outcomes().mean()).abs() < 1e-12);
        check_aggregate(&e);
    }

    #[test]
    fn matched_effect_on_additive_panels_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, t) = (9, 8);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y0 = DMatrix::from_fn(n, t, |i, s| a[i] + b[s]);
        let x = DMatrix::from_fn(n, t, |i, s| i64::from(i < 3 && s >= 4));
        let y = DMatrix::from_fn(n, t, |i, s| y0[(i, s)] + 2.0 * x[(i, s)] as f64);
        let ds = PanelDataset::from_matrices(y, x).unwrap();
        let fit = nuclear_solver::fit_with_rank(ds.outcomes(), &ds.mask(0).unwrap(), 2, &SolverConfig::default()).unwrap();
        let fs = crate::factor_model::extract_factors(&fit.gamma_hat, 2).unwrap();
        let mc = matching::two_way_match(&fs, &ds, 0, NeighborRule::KNearest(2)).unwrap();
        assert!(mc.fallback_cells.is_empty());
        let w = Weights::conditional(&ds, 1).unwrap();
        let e = effect_from_matched(&mc, &ds, 0, &w).unwrap();
        let truth: f64 = ds.mask(1).unwrap().cells().map(|c| y0[c]).sum::<f64>() / 12.0;
        assert!((e.aggregate - truth).abs() < 1e-12);
        check_aggregate(&e);
    }

    #[test]
    fn weighted_reduced_form_cases() {
        let ones = DMatrix::from_element(3, 4, 1.0);
        assert_eq!(weighted_reduced_form(&ones, &Weights::uniform(3, 4)).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let mut pick = DMatrix::zeros(3, 4);
        pick[(2, 1)] = 12.0;
        assert!((weighted_reduced_form(&g, &Weights::new(pick).unwrap()).unwrap() - g[(2, 1)]).abs() < 1e-15);
        let w = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let mut naive = 0.0;
        for i in 0..3 {
            for s in 0..4 {
                naive += w[(i, s)] * g[(i, s)];
            }
        }
        let got = weighted_reduced_form(&g, &Weights::new(w).unwrap()).unwrap();
        assert!((got - naive / 12.0).abs() < 1e-15);
        assert!(weighted_reduced_form(&g, &Weights::uniform(4, 3)).is_err());
    }

    #[test]
    fn dmeans_constant_gap() {
        let x = DMatrix::from_fn(4, 3, |i, _| i64::from(i < 2));
        let y = DMatrix::from_fn(4, 3, |i, s| s as f64 + if i < 2 { 0.7 } else { 0.0 });
        let e = dmeans(&PanelDataset::from_matrices(y, x).unwrap()).unwrap();
        for v in &e.per_period {
            assert!((v.unwrap() - 0.7).abs() < 1e-12);
        }
        assert!((e.aggregate - 0.7).abs() < 1e-12);
    }

    #[test]
    fn dmeans_single_treated_cell() {
        let mut x = DMatrix::zeros(3, 3);
        x[(1, 2)] = 1;
        let y = DMatrix::from_fn(3, 3, |i, s| (i * 3 + s) as f64);
        let e = dmeans(&PanelDataset::from_matrices(y, x).unwrap()).unwrap();
        assert_eq!(e.per_period[..2], [None, None]);
        assert!((e.aggregate - (5.0 - 5.0)).abs() < 1e-12);
        assert_eq!(e.n_used_per_period, vec![0, 0, 3]);
    }

    #[test]
    fn did_recovers_constant_effect() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, t) = (6, 5);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = DMatrix::from_fn(n, t, |i, s| i64::from(i < 2 && s >= 2));
        let y = DMatrix::from_fn(n, t, |i, s| a[i] + d[s] + 1.5 * x[(i, s)] as f64);
        let e = did(&PanelDataset::from_matrices(y, x).unwrap()).unwrap();
        assert_eq!(e.per_period[..2], [None, None]);
        for v in &e.per_period[2..] {
            assert!((v.unwrap() - 1.5).abs() < 1e-10);
        }
        check_aggregate(&e);
    }

    #[test]
    fn did_matches_normal_equations() {
        let ds = binary_panel(8, 5, 4, 0.4);
        let e = did(&ds).unwrap();
        let (n, t) = (5, 4);
        let tp: Vec<usize> = (0..t).filter(|&s| ds.count_in_period(1, s) > 0).collect();
        let p = n + t + tp.len();
        let x = DMatrix::from_fn(n * t, p, |r, c| {
            let (i, s) = (r % n, r / n);
            if c < n {
                f64::from(c == i)
            } else if c < n + t {
                f64::from(c - n == s)
            } else {
                f64::from(tp[c - n - t] == s && ds.treatment(i, s) == 1)
            }
        });
        let y = DVector::from_fn(n * t, |r, _| ds.outcome(r % n, r / n));
        // minimum-norm solution via the Moore-Penrose inverse of X'X
        let xtx = x.transpose() * &x;
        let pinv = xtx.pseudo_inverse(1e-9).unwrap();
        let beta = pinv * x.transpose() * y;
        for (k, &s) in tp.iter().enumerate() {
            if ds.count_in_period(1, s) < n {
                assert!((e.per_period[s].unwrap() - beta[n + t + k]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn did_requires_treated_cells() {
        let ds = PanelDataset::from_matrices(DMatrix::zeros(3, 3), DMatrix::zeros(3, 3)).unwrap();
        assert!(did(&ds).is_err());
    }

    #[test]
    fn counterfactual_from_att_subtracts_effect() {
        let x = DMatrix::from_fn(4, 2, |i, _| i64::from(i == 0));
        let y = DMatrix::from_fn(4, 2, |i, s| if i == 0 { 3.0 + s as f64 } else { 1.0 });
        let ds = PanelDataset::from_matrices(y, x).unwrap();
        let cf = counterfactual_from_att(&dmeans(&ds).unwrap(), &ds).unwrap();
        assert_eq!(cf.per_period, vec![Some(1.0), Some(1.0)]);
        assert_eq!(cf.aggregate, 1.0);
    }

    #[test]
    fn dsf_of_a_constant_steps_at_the_constant() {
        let ds = PanelDataset::from_matrices(DMatrix::from_element(3, 2, 2.0), DMatrix::zeros(3, 2)).unwrap();
        let g = DMatrix::zeros(3, 2);
        let panel = dsf(|d| asf_mc(&g, d, 0), &ds, &[1.0, 1.9, 2.0, 3.0]).unwrap();
        assert_eq!(panel.aggregate().f_rearranged, vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(panel.period(1).unwrap().f_raw, vec![0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn dsf_errors_name_the_grid_point() {
        let ds = binary_panel(9, 3, 3, 0.5);
        let err = dsf(
            |d| {
                if d.outcomes().sum() > 4.0 {
                    Err(Error::domain(Module::Estimators, "boom"))
                } else {
                    dmeans(d)
                }
            },
            &ds,
            &[-10.0, 10.0],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Pipeline { y, .. } if y == 10.0));
        assert!(dsf(dmeans, &ds, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn quantile_inversion_cases() {
        let de = DistributionEstimate::new(vec![1.0, 2.0, 3.0], vec![0.2, 0.5, 0.9], DsfScope::Aggregate).unwrap();
        assert_eq!(quantile_invert(&de, 0.5).unwrap(), Quantile { value: 2.0, out_of_range: false });
        assert_eq!(quantile_invert(&de, 0.95).unwrap(), Quantile { value: 3.0, out_of_range: true });
        assert!(quantile_invert(&de, 1.0).is_err());
        let empty = DistributionEstimate::new(vec![], vec![], DsfScope::Aggregate).unwrap();
        assert!(quantile_invert(&empty, 0.5).is_err());
    }

    #[test]
    fn default_grid_uses_inverse_cdf_quantiles() {
        let values: Vec<f64> = (1..=200).map(f64::from).collect();
        let g = default_grid(&values).unwrap();
        assert_eq!(g.len(), 89);
        assert_eq!(g[0], 20.0);
        assert_eq!(*g.last().unwrap(), 196.0);
        let few = default_grid(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!(few, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn effect_csv_has_aggregate_row() {
        let e = EffectEstimate {
            method: "x".into(),
            x: 0,
            x0: None,
            per_period: vec![Some(1.5), None],
            aggregate: 1.5,
            n_used_per_period: vec![3, 0],
            period_weights: vec![0.5, 0.5],
            warnings: vec![],
        };
        let mut buf = Vec::new();
        e.write_csv(&mut buf, &["a".into(), "b".into()]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "period,estimate,n_used\na,1.5,3\nb,,0\nall,1.5,3\n");
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn rearrangement_sorts_and_preserves_values(f in proptest::collection::vec(0.0f64..1.0, 1..30)) {
                let grid: Vec<f64> = (0..f.len()).map(|k| k as f64).collect();
                let de = DistributionEstimate::new(grid, f.clone(), DsfScope::Aggregate).unwrap();
                prop_assert!(de.f_rearranged.windows(2).all(|w| w[0] <= w[1]));
                let mut a = f.clone();
                a.sort_by(f64::total_cmp);
                prop_assert_eq!(&a, &de.f_rearranged);
                if f.windows(2).all(|w| w[0] <= w[1]) {
                    prop_assert_eq!(&f, &de.f_rearranged);
                }
            }

            #[test]
            fn quantile_is_a_left_inverse(f in proptest::collection::vec(0.0f64..1.0, 1..30), tau in 0.01f64..0.99) {
                let grid: Vec<f64> = (0..f.len()).map(|k| k as f64 * 0.5).collect();
                let de = DistributionEstimate::new(grid.clone(), f, DsfScope::Aggregate).unwrap();
                let q = quantile_invert(&de, tau).unwrap();
                let k = grid.iter().position(|&g| g == q.value).unwrap();
                if !q.out_of_range {
                    prop_assert!(de.f_rearranged[k] >= tau);
                }
                for j in 0..k {
                    prop_assert!(de.f_rearranged[j] < tau);
                }
            }

            #[test]
            fn did_exact_on_additive_panels(seed in any::<u64>(), n in 3usize..8, t in 3usize..8, beta in -3.0f64..3.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let d: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mut x = DMatrix::from_fn(n, t, |_, _| i64::from(rng.random_bool(0.4)));
                // two never-treated units and an untreated first period identify every interaction
                for s in 0..t {
                    x[(0, s)] = 0;
                    x[(1, s)] = 0;
                }
                for i in 0..n {
                    x[(i, 0)] = 0;
                }
                x[(n - 1, t - 1)] = 1;
                let y = DMatrix::from_fn(n, t, |i, s| a[i] + d[s] + beta * x[(i, s)] as f64);
                let e = did(&PanelDataset::from_matrices(y, x).unwrap()).unwrap();
                for v in e.per_period.iter().flatten() {
                    prop_assert!((v - beta).abs() < 1e-10);
                }
            }

            #[test]
            fn shifting_outcomes_shifts_levels_and_keeps_contrasts(seed in any::<u64>(), c in -5.0f64..5.0, two_way in any::<bool>()) {
                let ds = binary_panel(seed, 6, 5, 0.5);
                let shifted = ds.with_outcomes(ds.outcomes().add_scalar(c)).unwrap();
                let g = DMatrix::from_fn(6, 5, |i, s| (i as f64 - s as f64) * 0.1);
                let gc = g.add_scalar(c);
                let a0 = asf_mc(&g, &ds, 0).unwrap();
                let a1 = asf_mc(&gc, &shifted, 0).unwrap();
                prop_assert!((a1.aggregate - a0.aggregate - c).abs() < 1e-10);
                let b0 = casf_mc(&g, &ds, 0, 1).unwrap();
                let b1 = casf_mc(&gc, &shifted, 0, 1).unwrap();
                prop_assert!((b1.aggregate - b0.aggregate - c).abs() < 1e-10);

                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let fs = FactorStructure {
                    loadings: DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0)),
                    factors: DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0)),
                    singular_values: vec![1.0, 1.0],
                    rank: 2,
                    numeric_rank: 2,
                    rank_deficient: false,
                };
                let rule = NeighborRule::KNearest(2);
                let (m0, m1) = if two_way {
                    (matching::two_way_match(&fs, &ds, 0, rule).unwrap(), matching::two_way_match(&fs, &shifted, 0, rule).unwrap())
                } else {
                    (matching::simple_match(&fs, &ds, 0, rule).unwrap(), matching::simple_match(&fs, &shifted, 0, rule).unwrap())
                };
                let w = Weights::conditional(&ds, 1).unwrap();
                let e0 = effect_from_matched(&m0, &ds, 0, &w).unwrap();
                let e1 = effect_from_matched(&m1, &shifted, 0, &w).unwrap();
                prop_assert!((e1.aggregate - e0.aggregate - c).abs() < 1e-10);

                prop_assert!((dmeans(&shifted).unwrap().aggregate - dmeans(&ds).unwrap().aggregate).abs() < 1e-10);
                prop_assert!((did(&shifted).unwrap().aggregate - did(&ds).unwrap().aggregate).abs() < 1e-8);
            }

            #[test]
            fn aggregate_is_weighted_mean_of_periods(seed in any::<u64>()) {
                let ds = binary_panel(seed, 6, 5, 0.5);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let g = DMatrix::from_fn(6, 5, |_, _| rng.random_range(-1.0..1.0));
                check_aggregate(&asf_mc(&g, &ds, 0).unwrap());
                check_aggregate(&casf_mc(&g, &ds, 0, 1).unwrap());
                check_aggregate(&dmeans(&ds).unwrap());
                check_aggregate(&did(&ds).unwrap());
            }
        }
    }
}
