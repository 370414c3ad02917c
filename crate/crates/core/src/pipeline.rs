//! End-to-end estimation: fit, factors, matching and aggregation for a list
//! of methods, sharing completion fits between methods that use the same
//! penalty.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Module, Result};
use crate::estimators::{self, EffectEstimate, Weights};
use crate::factor_model;
use crate::matching::{self, MatchConfig};
use crate::nuclear_solver::{self, FitResult, SolverConfig};
use crate::panel_data::{Level, PanelDataset};

/// How the completion penalty is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    /// Bisect for the penalty giving this many factors.
    Rank(usize),
    Rho(f64),
}

impl Default for Penalty {
    fn default() -> Self {
        Penalty::Rank(5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MethodSpec {
    Dmeans,
    Did,
    Mc {
        #[serde(default)]
        penalty: Penalty,
        /// Include unit and period effects outside the penalty.
        #[serde(default)]
        additive: bool,
    },
    Match {
        #[serde(flatten)]
        config: MatchConfig,
        #[serde(default)]
        penalty: Penalty,
        #[serde(default)]
        additive: bool,
    },
}

impl MethodSpec {
    pub fn mc_rank(r: usize) -> Self {
        MethodSpec::Mc {
            penalty: Penalty::Rank(r),
            additive: false,
        }
    }

    pub fn twm(k: usize, r: usize) -> Self {
        MethodSpec::Match {
            config: MatchConfig::two_way(k),
            penalty: Penalty::Rank(r),
            additive: false,
        }
    }

    pub fn sm(k: usize, r: usize) -> Self {
        MethodSpec::Match {
            config: MatchConfig::simple(k),
            penalty: Penalty::Rank(r),
            additive: false,
        }
    }

    pub fn label(&self) -> String {
        match self {
            MethodSpec::Dmeans => "Dmeans".into(),
            MethodSpec::Did => "DiD".into(),
            MethodSpec::Mc { .. } => "MC".into(),
            MethodSpec::Match { config, .. } => config.label(),
        }
    }

    fn fit_key(&self) -> Option<FitKey> {
        match *self {
            MethodSpec::Mc { penalty, additive } | MethodSpec::Match { penalty, additive, .. } => {
                Some(FitKey::new(penalty, additive))
            }
            _ => None,
        }
    }

    /// Parse labels such as `Dmeans`, `DiD`, `MC`, `TWM-10`, `SM-5`.
    /// Completion-based methods use `rank` factors.
    pub fn parse(label: &str, rank: usize) -> Result<Self> {
        let bad = || Error::domain(Module::Estimators, format!("unknown method '{label}'"));
        let lower = label.trim().to_ascii_lowercase();
        let k = |rest: &str| rest.parse::<usize>().map_err(|_| bad());
        match lower.as_str() {
            "dmeans" => Ok(MethodSpec::Dmeans),
            "did" => Ok(MethodSpec::Did),
            "mc" => Ok(MethodSpec::mc_rank(rank)),
            _ => {
                if let Some(rest) = lower.strip_prefix("twm-") {
                    Ok(MethodSpec::twm(k(rest)?, rank))
                } else if let Some(rest) = lower.strip_prefix("sm-") {
                    Ok(MethodSpec::sm(k(rest)?, rank))
                } else {
                    Err(bad())
                }
            }
        }
    }
}

/// The eleven estimators compared in the simulation study.
pub fn default_specs() -> Vec<MethodSpec> {
    let mut specs = vec![MethodSpec::Dmeans, MethodSpec::Did, MethodSpec::mc_rank(5)];
    specs.extend([1, 5, 10, 30].map(|k| MethodSpec::twm(k, 5)));
    specs.extend([1, 5, 10, 30].map(|k| MethodSpec::sm(k, 5)));
    specs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct FitKey {
    rank: Option<usize>,
    rho_bits: u64,
    additive: bool,
}

impl FitKey {
    fn new(p: Penalty, additive: bool) -> Self {
        match p {
            Penalty::Rank(r) => Self {
                rank: Some(r),
                rho_bits: 0,
                additive,
            },
            Penalty::Rho(rho) => Self {
                rank: None,
                rho_bits: rho.to_bits(),
                additive,
            },
        }
    }
}

/// Target of estimation: `mu(x)` when `x0` is `None`, else `mu(x | {x0})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub x: Level,
    pub x0: Option<Level>,
}

impl Target {
    pub fn untreated_on_treated() -> Self {
        Self { x: 0, x0: Some(1) }
    }
}

fn fit_at(ds: &PanelDataset, x: Level, key: FitKey, solver: &SolverConfig) -> Result<FitResult> {
    let mask = ds.mask(x)?;
    let y = ds.outcomes();
    match (key.rank, key.additive) {
        (Some(r), false) => nuclear_solver::fit_with_rank(y, &mask, r, solver),
        (Some(r), true) => nuclear_solver::fit_with_additive_rank(y, &mask, ds.covariates(), true, true, r, solver),
        (None, additive) => {
            let cfg = SolverConfig {
                rho: f64::from_bits(key.rho_bits),
                ..*solver
            };
            if additive {
                nuclear_solver::fit_with_additive(y, &mask, ds.covariates(), true, true, &cfg)
            } else {
                nuclear_solver::fit_completion(y, &mask, &cfg)
            }
        }
    }
}

fn baseline(spec: &MethodSpec, ds: &PanelDataset, target: Target) -> Result<EffectEstimate> {
    let att = match spec {
        MethodSpec::Dmeans => estimators::dmeans(ds)?,
        _ => estimators::did(ds)?,
    };
    match (target.x, target.x0) {
        (0, Some(1)) => estimators::counterfactual_from_att(&att, ds),
        (1, Some(1)) => {
            let mut e = estimators::counterfactual_from_att(&att, ds)?;
            for (v, a) in e.per_period.iter_mut().zip(&att.per_period) {
                *v = v.zip(*a).map(|(v, a)| v + a);
            }
            e.aggregate += att.aggregate;
            e.x = 1;
            Ok(e)
        }
        _ => Err(Error::domain(
            Module::Estimators,
            format!("{} only estimates levels conditional on treatment (x0 = 1)", spec.label()),
        )),
    }
}

/// Estimate `target` with every method in `specs`, fitting each distinct
/// completion once. Results are in the order of `specs`.
pub fn estimate_many(
    ds: &PanelDataset,
    specs: &[MethodSpec],
    target: Target,
    solver: &SolverConfig,
) -> Vec<Result<EffectEstimate>> {
    let mut fits: HashMap<FitKey, Result<FitResult>> = HashMap::new();
    for key in specs.iter().filter_map(MethodSpec::fit_key) {
        fits.entry(key).or_insert_with(|| fit_at(ds, target.x, key, solver));
    }
    specs
        .iter()
        .map(|spec| {
            let fit = match spec.fit_key() {
                Some(key) => match &fits[&key] {
                    Ok(f) => Some(f),
                    Err(e) => return Err(clone_error(e)),
                },
                None => None,
            };
            estimate_one(ds, spec, target, fit)
        })
        .collect()
}

fn clone_error(e: &Error) -> Error {
    match e {
        Error::EmptyMask(x) => Error::EmptyMask(*x),
        Error::EmptyConditioningSet(x) => Error::EmptyConditioningSet(*x),
        Error::Domain { module, message } => Error::domain(*module, message.clone()),
        Error::Shape { module, message } => Error::shape(*module, message.clone()),
        other => Error::numeric(Module::Estimators, other.to_string()),
    }
}

fn estimate_one(ds: &PanelDataset, spec: &MethodSpec, target: Target, fit: Option<&FitResult>) -> Result<EffectEstimate> {
    let mut est = match spec {
        MethodSpec::Dmeans | MethodSpec::Did => baseline(spec, ds, target)?,
        MethodSpec::Mc { .. } => {
            let fit = fit.expect("fit prepared for completion methods");
            match target.x0 {
                Some(x0) => estimators::casf_mc(fit, ds, target.x, x0)?,
                None => estimators::asf_mc(fit, ds, target.x)?,
            }
        }
        MethodSpec::Match { config, .. } => {
            let fit = fit.expect("fit prepared for completion methods");
            let r = fit.effective_rank.max(1).min(ds.n_units().min(ds.n_periods()));
            let fs = factor_model::extract_factors(&fit.gamma_hat, r)?;
            let mc = matching::match_counterfactual(&fs, ds, target.x, config)?;
            let weights = match target.x0 {
                Some(x0) => Weights::conditional(ds, x0)?,
                None => Weights::uniform(ds.n_units(), ds.n_periods()),
            };
            let mut e = estimators::effect_from_matched(&mc, ds, target.x, &weights)?;
            e.x0 = target.x0;
            if let Some(x0) = target.x0 {
                // per-period values average over cells at x0 only
                e.n_used_per_period = (0..ds.n_periods()).map(|t| ds.count_in_period(x0, t)).collect();
            }
            e
        }
    };
    est.method = spec.label();
    if let Some(f) = fit {
        est.warnings.extend(f.warnings.iter().cloned());
        if f.rank_exact == Some(false) {
            est.warnings.push(format!("fit rank {} differs from the requested rank", f.effective_rank));
        }
    }
    Ok(est)
}

pub fn estimate(ds: &PanelDataset, spec: &MethodSpec, target: Target, solver: &SolverConfig) -> Result<EffectEstimate> {
    estimate_many(ds, std::slice::from_ref(spec), target, solver)
        .pop()
        .expect("one spec gives one result")
}

/// Effect `mu(1 | {x0}) - mu(0 | {x0})`; with `x0 = 1` this is the effect on the treated.
pub fn treatment_effect(ds: &PanelDataset, spec: &MethodSpec, x0: Option<Level>, solver: &SolverConfig) -> Result<EffectEstimate> {
    let treated = estimate(ds, spec, Target { x: 1, x0 }, solver)?;
    let control = estimate(ds, spec, Target { x: 0, x0 }, solver)?;
    treated.minus(&control, spec.label())
}

/// Quantile indices `0.10, 0.11, ..., 0.98`.
pub fn default_taus() -> Vec<f64> {
    (10..=98).map(|k| k as f64 / 100.0).collect()
}

/// Quantile effects on the treated: quantiles of `Y(1)` and `Y(0)` among
/// treated cells, from distribution estimates on `grid` (sample quantiles of
/// all observed outcomes when `None`).
pub fn quantile_treatment_effects(
    ds: &PanelDataset,
    spec: &MethodSpec,
    taus: &[f64],
    grid: Option<&[f64]>,
    solver: &SolverConfig,
) -> Result<Vec<estimators::QuantileEffect>> {
    let owned;
    let grid = match grid {
        Some(g) => g,
        None => {
            owned = estimators::default_grid(ds.outcomes().as_slice())?;
            &owned
        }
    };
    let panel = |x| estimators::dsf(|d| estimate(d, spec, Target { x, x0: Some(1) }, solver), ds, grid);
    let treated = panel(1)?.aggregate();
    let control = panel(0)?.aggregate();
    estimators::quantile_effects(&treated, &control, taus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn additive_panel(seed: u64) -> (PanelDataset, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, t) = (12, 10);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d: Vec<f64> = (0..t).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y0 = DMatrix::from_fn(n, t, |i, s| a[i] + d[s]);
        let x = DMatrix::from_fn(n, t, |i, s| i64::from(i < 4 && s >= 5));
        let y = DMatrix::from_fn(n, t, |i, s| y0[(i, s)] + 0.8 * x[(i, s)] as f64);
        (PanelDataset::from_matrices(y, x).unwrap(), y0)
    }

    #[test]
    fn labels_round_trip() {
        for spec in default_specs() {
            assert_eq!(MethodSpec::parse(&spec.label(), 5).unwrap(), spec);
        }
        assert!(MethodSpec::parse("XYZ-3", 5).is_err());
        assert!(MethodSpec::parse("TWM-x", 5).is_err());
        let labels: Vec<String> = default_specs().iter().map(MethodSpec::label).collect();
        assert_eq!(
            labels,
            ["Dmeans", "DiD", "MC", "TWM-1", "TWM-5", "TWM-10", "TWM-30", "SM-1", "SM-5", "SM-10", "SM-30"]
        );
    }

    #[test]
    fn specs_deserialize_from_json() {
        let spec: MethodSpec =
            serde_json::from_str(r#"{"method":"match","mode":"two_way","rule":{"k_nearest":10},"penalty":{"rank":6},"additive":true}"#)
                .unwrap();
        assert_eq!(
            spec,
            MethodSpec::Match {
                config: MatchConfig::two_way(10),
                penalty: Penalty::Rank(6),
                additive: true
            }
        );
        let mc: MethodSpec = serde_json::from_str(r#"{"method":"mc"}"#).unwrap();
        assert_eq!(mc, MethodSpec::mc_rank(5));
    }

    #[test]
    fn additive_panel_methods_agree_with_truth() {
        let (ds, y0) = additive_panel(1);
        let truth = ds.mask(1).unwrap().cells().map(|c| y0[c]).sum::<f64>() / 20.0;
        let specs = [MethodSpec::Did, MethodSpec::twm(3, 2)];
        let out = estimate_many(&ds, &specs, Target::untreated_on_treated(), &SolverConfig::default());
        for e in out {
            let e = e.unwrap();
            assert!((e.aggregate - truth).abs() < 1e-9, "{} {}", e.method, e.aggregate);
        }
        let att = treatment_effect(&ds, &MethodSpec::Did, Some(1), &SolverConfig::default()).unwrap();
        assert!((att.aggregate - 0.8).abs() < 1e-9);
    }

    #[test]
    fn baselines_reject_unconditional_targets() {
        let (ds, _) = additive_panel(2);
        let e = estimate(&ds, &MethodSpec::Dmeans, Target { x: 0, x0: None }, &SolverConfig::default());
        assert!(e.is_err());
        let tr = estimate(&ds, &MethodSpec::Dmeans, Target { x: 1, x0: Some(1) }, &SolverConfig::default()).unwrap();
        let direct = ds.mask(1).unwrap().cells().map(|c| ds.outcomes()[c]).sum::<f64>() / 20.0;
        assert!((tr.aggregate - direct).abs() < 1e-12);
    }

    #[test]
    fn fits_are_shared_between_methods() {
        let (ds, _) = additive_panel(3);
        let specs = [MethodSpec::mc_rank(2), MethodSpec::twm(1, 2), MethodSpec::sm(1, 2)];
        let together = estimate_many(&ds, &specs, Target::untreated_on_treated(), &SolverConfig::default());
        for (spec, e) in specs.iter().zip(together) {
            let alone = estimate(&ds, spec, Target::untreated_on_treated(), &SolverConfig::default()).unwrap();
            assert_eq!(e.unwrap(), alone);
        }
    }

    #[test]
    fn quantile_effects_cover_requested_taus() {
        let (ds, _) = additive_panel(5);
        let taus = [0.25, 0.5, 0.75];
        let q = quantile_treatment_effects(&ds, &MethodSpec::twm(1, 2), &taus, None, &SolverConfig::default()).unwrap();
        assert_eq!(q.len(), 3);
        for e in &q {
            assert!(!e.treated.out_of_range);
        }
        assert_eq!(default_taus().len(), 89);
    }

    #[test]
    fn unconditional_target_uses_uniform_weights() {
        let (ds, _) = additive_panel(4);
        let e = estimate(&ds, &MethodSpec::twm(2, 2), Target { x: 0, x0: None }, &SolverConfig::default()).unwrap();
        assert_eq!(e.per_period.len(), 10);
        assert!(e.per_period.iter().all(Option::is_some));
    }
}
