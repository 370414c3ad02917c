use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use super::dgp::{self, DgpConfig, FixedEffects};
use crate::error::{Error, Module, Result};
use crate::nuclear_solver::SolverConfig;
use crate::pipeline::{self, MethodSpec, Target};

/// Bias, standard deviation and root mean squared error for one estimator.
///
/// `bias` is `mean(estimate) - truth`; `sd` divides by the number of
/// successful replications, so `rmse^2 = bias^2 + sd^2`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimRow {
    pub label: String,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    pub n_ok: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeriodRow {
    pub label: String,
    pub period: usize,
    pub truth: f64,
    pub mean_estimate: f64,
    pub n_ok: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimSummary {
    pub rows: Vec<SimRow>,
    pub per_period: Vec<PeriodRow>,
    pub n_sims: usize,
    pub target_truth: f64,
    pub threshold: f64,
    pub config: DgpConfig,
    pub methods: Vec<MethodSpec>,
}

impl SimSummary {
    pub fn row(&self, label: &str) -> Option<&SimRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Columns `estimator,bias,sd,rmse,n_ok,n_failed`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::io(Module::Simulation, e.into());
        out.write_record(["estimator", "bias", "sd", "rmse", "n_ok", "n_failed"]).map_err(io)?;
        for r in &self.rows {
            out.write_record([
                r.label.clone(),
                r.bias.to_string(),
                r.sd.to_string(),
                r.rmse.to_string(),
                r.n_ok.to_string(),
                r.n_failed.to_string(),
            ])
            .map_err(io)?;
        }
        out.flush().map_err(|e| Error::io(Module::Simulation, e))
    }

    /// Columns `estimator,period,truth,mean_estimate,n_ok`; periods count from one.
    pub fn write_period_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::io(Module::Simulation, e.into());
        out.write_record(["estimator", "period", "truth", "mean_estimate", "n_ok"]).map_err(io)?;
        for r in &self.per_period {
            out.write_record([
                r.label.clone(),
                (r.period + 1).to_string(),
                r.truth.to_string(),
                r.mean_estimate.to_string(),
                r.n_ok.to_string(),
            ])
            .map_err(io)?;
        }
        out.flush().map_err(|e| Error::io(Module::Simulation, e))
    }
}

struct RepOutcome {
    aggregate: Vec<Option<f64>>,
    per_period: Vec<Vec<Option<f64>>>,
}

fn replicate(cfg: &DgpConfig, effects: &FixedEffects, specs: &[MethodSpec], solver: &SolverConfig, rep: u64) -> Result<RepOutcome> {
    let panel = dgp::draw_replication(cfg, effects, rep)?;
    let results = pipeline::estimate_many(&panel.dataset, specs, Target::untreated_on_treated(), solver);
    let mut out = RepOutcome {
        aggregate: Vec::with_capacity(specs.len()),
        per_period: Vec::with_capacity(specs.len()),
    };
    for r in results {
        match r {
            Ok(e) if e.aggregate.is_finite() => {
                out.aggregate.push(Some(e.aggregate));
                out.per_period.push(e.per_period);
            }
            _ => {
                out.aggregate.push(None);
                out.per_period.push(vec![None; cfg.n_periods]);
            }
        }
    }
    Ok(out)
}

/// Monte Carlo of `mu(0 | {1})`: the fixed draws come from `cfg.seed` and
/// replication `r` redraws the noise from its own stream. Failed estimates
/// are counted and left out of the statistics.
pub fn run_monte_carlo(cfg: &DgpConfig, specs: &[MethodSpec], n_sims: usize) -> Result<SimSummary> {
    run_monte_carlo_with(cfg, specs, n_sims, &SolverConfig::default())
}

pub fn run_monte_carlo_with(cfg: &DgpConfig, specs: &[MethodSpec], n_sims: usize, solver: &SolverConfig) -> Result<SimSummary> {
    if n_sims == 0 {
        return Err(Error::domain(Module::Simulation, "n_sims must be at least 1"));
    }
    cfg.validate()?;
    let effects = FixedEffects::draw(cfg)?;
    let truth = dgp::truth(cfg, &effects);
    if !truth.aggregate.is_finite() {
        return Err(Error::EmptyConditioningSet(1));
    }
    let reps: Vec<Result<RepOutcome>> = (0..n_sims as u64)
        .into_par_iter()
        .map(|r| replicate(cfg, &effects, specs, solver, r))
        .collect();
    let reps: Vec<RepOutcome> = reps.into_iter().collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(specs.len());
    let mut per_period = Vec::new();
    for (m, spec) in specs.iter().enumerate() {
        let label = spec.label();
        let ests: Vec<f64> = reps.iter().filter_map(|r| r.aggregate[m]).collect();
        let n_ok = ests.len();
        let (bias, sd) = if n_ok > 0 {
            let mean = ests.iter().sum::<f64>() / n_ok as f64;
            let var = ests.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n_ok as f64;
            (mean - truth.aggregate, var.sqrt())
        } else {
            (f64::NAN, f64::NAN)
        };
        rows.push(SimRow {
            label: label.clone(),
            bias,
            sd,
            rmse: (bias * bias + sd * sd).sqrt(),
            n_ok,
            n_failed: n_sims - n_ok,
        });
        for (t, tr) in truth.per_period.iter().enumerate() {
            let Some(tr) = *tr else { continue };
            let vals: Vec<f64> = reps.iter().filter_map(|r| r.per_period[m][t]).collect();
            let mean_estimate = if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            per_period.push(PeriodRow {
                label: label.clone(),
                period: t,
                truth: tr,
                mean_estimate,
                n_ok: vals.len(),
            });
        }
    }
    Ok(SimSummary {
        rows,
        per_period,
        n_sims,
        target_truth: truth.aggregate,
        threshold: effects.threshold,
        config: cfg.clone(),
        methods: specs.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DgpConfig {
        DgpConfig {
            n_units: 12,
            n_periods: 12,
            seed: 5,
            ..DgpConfig::default()
        }
    }

    #[test]
    fn rmse_identity_and_shape() {
        let specs = vec![MethodSpec::Dmeans, MethodSpec::Did, MethodSpec::mc_rank(2), MethodSpec::twm(1, 2), MethodSpec::sm(3, 2)];
        let s = run_monte_carlo(&small(), &specs, 6).unwrap();
        assert_eq!(s.rows.len(), 5);
        for r in &s.rows {
            assert_eq!(r.n_ok + r.n_failed, 6);
            assert!((r.rmse * r.rmse - r.bias * r.bias - r.sd * r.sd).abs() < 1e-10);
        }
        assert_eq!(s.row("SM-3").unwrap().label, "SM-3");
    }

    #[test]
    fn deterministic_given_seed() {
        let specs = vec![MethodSpec::Dmeans, MethodSpec::twm(2, 2)];
        let a = run_monte_carlo(&small(), &specs, 4).unwrap();
        let b = run_monte_carlo(&small(), &specs, 4).unwrap();
        assert_eq!(a, b);
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        a.write_csv(&mut ca).unwrap();
        b.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn noiseless_runs_have_zero_spread() {
        let cfg = DgpConfig {
            noise_sd: 0.0,
            ..small()
        };
        let specs = vec![MethodSpec::Dmeans, MethodSpec::Did, MethodSpec::mc_rank(2), MethodSpec::twm(1, 2)];
        let s = run_monte_carlo(&cfg, &specs, 3).unwrap();
        for r in &s.rows {
            assert!(r.sd < 1e-12, "{} {}", r.label, r.sd);
        }
    }

    #[test]
    fn zero_sims_rejected() {
        assert!(run_monte_carlo(&small(), &[MethodSpec::Dmeans], 0).is_err());
    }
}
