use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Module, Result};
use crate::panel_data::{Level, PanelDataset};

/// Seed of the draws used to calibrate the treatment threshold.
pub const CALIBRATION_SEED: u64 = 0x5eed_ca1b;
pub const CALIBRATION_DRAWS: usize = 1_000_000;

const STREAM_A: u64 = 0;
const STREAM_B: u64 = 1;
const STREAM_U: u64 = 16;

/// `exp(-(a - b)^2 / sigma^2) / (sqrt(2 pi) sigma)`.
pub fn gaussian_kernel(a: f64, b: f64, sigma: f64) -> f64 {
    let z = (a - b) / sigma;
    (-z * z).exp() / ((2.0 * std::f64::consts::PI).sqrt() * sigma)
}

/// Median of `g(A, B)` over `n_draws` uniform pairs drawn with [`CALIBRATION_SEED`].
pub fn calibrate_c(sigma: f64, n_draws: usize) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::domain(Module::Simulation, format!("sigma must be positive, got {sigma}")));
    }
    if n_draws == 0 {
        return Err(Error::domain(Module::Simulation, "calibration needs at least one draw"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(CALIBRATION_SEED);
    let mut g: Vec<f64> = (0..n_draws)
        .map(|_| {
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            gaussian_kernel(a, b, sigma)
        })
        .collect();
    let mid = n_draws / 2;
    let (_, c, _) = g.select_nth_unstable_by(mid, f64::total_cmp);
    Ok(*c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    /// `Y(x) = x + g + U`.
    #[default]
    Additive,
    /// `Y(x) = (1 + x) g + U`.
    Multiplicative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    pub n_units: usize,
    pub n_periods: usize,
    pub sigma: f64,
    pub noise_sd: f64,
    pub seed: u64,
    /// Leading share of units that may be treated.
    pub treat_unit_frac: f64,
    /// Trailing share of periods that may be treated.
    pub treat_period_frac: f64,
    pub model: Model,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            n_units: 30,
            n_periods: 30,
            sigma: 0.5,
            noise_sd: 0.5,
            seed: 1,
            treat_unit_frac: 0.5,
            treat_period_frac: 0.5,
            model: Model::Additive,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::domain(Module::Simulation, m));
        if self.n_units == 0 || self.n_periods == 0 {
            return bad("panel must have at least one unit and one period".into());
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return bad(format!("noise_sd must be nonnegative, got {}", self.noise_sd));
        }
        for (name, f) in [("treat_unit_frac", self.treat_unit_frac), ("treat_period_frac", self.treat_period_frac)] {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("{name} must lie in (0, 1], got {f}"));
            }
        }
        Ok(())
    }

    /// Number of leading units eligible for treatment.
    pub fn eligible_units(&self) -> usize {
        ((self.n_units as f64 * self.treat_unit_frac).ceil() as usize).min(self.n_units)
    }

    /// First period (0-based) eligible for treatment. With 30 periods and
    /// half eligible this is period 15 counted from one.
    pub fn first_eligible_period(&self) -> usize {
        let t = self.n_periods as f64;
        ((t * (1.0 - self.treat_period_frac)).floor() as usize).saturating_sub(1)
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Draws held fixed across Monte Carlo replications.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedEffects {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub threshold: f64,
    #[serde(with = "crate::matrix_serde")]
    pub treatments: DMatrix<Level>,
}

impl FixedEffects {
    pub fn draw(cfg: &DgpConfig) -> Result<Self> {
        let threshold = calibrate_c(cfg.sigma, CALIBRATION_DRAWS)?;
        Self::draw_with_threshold(cfg, threshold)
    }

    pub fn draw_with_threshold(cfg: &DgpConfig, threshold: f64) -> Result<Self> {
        cfg.validate()?;
        let mut ra = cfg.rng(STREAM_A);
        let mut rb = cfg.rng(STREAM_B);
        let a: Vec<f64> = (0..cfg.n_units).map(|_| ra.random()).collect();
        let b: Vec<f64> = (0..cfg.n_periods).map(|_| rb.random()).collect();
        let (ni, t0) = (cfg.eligible_units(), cfg.first_eligible_period());
        let treatments = DMatrix::from_fn(cfg.n_units, cfg.n_periods, |i, t| {
            Level::from(i < ni && t >= t0 && gaussian_kernel(a[i], b[t], cfg.sigma) >= threshold)
        });
        Ok(Self {
            a,
            b,
            threshold,
            treatments,
        })
    }

    pub fn g(&self, sigma: f64) -> DMatrix<f64> {
        DMatrix::from_fn(self.a.len(), self.b.len(), |i, t| gaussian_kernel(self.a[i], self.b[t], sigma))
    }
}

/// Noise-free `mu_t(0 | {1})` per period and over all treated cells.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Truth {
    pub per_period: Vec<Option<f64>>,
    pub aggregate: f64,
}

#[derive(Debug, Clone)]
pub struct SimPanel {
    pub dataset: PanelDataset,
    /// Potential outcomes at `x = 0` and `x = 1`.
    pub y0: DMatrix<f64>,
    pub y1: DMatrix<f64>,
    pub truth: Truth,
    pub effects: FixedEffects,
}

fn mean_potential(model: Model, x: f64, g: f64) -> f64 {
    match model {
        Model::Additive => x + g,
        Model::Multiplicative => (1.0 + x) * g,
    }
}

/// Truth of `mu(0 | {1})` given the held-fixed draws.
pub fn truth(cfg: &DgpConfig, effects: &FixedEffects) -> Truth {
    let g = effects.g(cfg.sigma);
    let x = &effects.treatments;
    let mut total = 0.0;
    let mut count = 0usize;
    let per_period = (0..cfg.n_periods)
        .map(|t| {
            let cells: Vec<f64> = (0..cfg.n_units)
                .filter(|&i| x[(i, t)] == 1)
                .map(|i| mean_potential(cfg.model, 0.0, g[(i, t)]))
                .collect();
            total += cells.iter().sum::<f64>();
            count += cells.len();
            (!cells.is_empty()).then(|| cells.iter().sum::<f64>() / cells.len() as f64)
        })
        .collect();
    Truth {
        per_period,
        aggregate: if count > 0 { total / count as f64 } else { f64::NAN },
    }
}

/// Panel for replication `rep`: only the noise depends on `rep`.
pub fn draw_replication(cfg: &DgpConfig, effects: &FixedEffects, rep: u64) -> Result<SimPanel> {
    cfg.validate()?;
    let (n, t) = (cfg.n_units, cfg.n_periods);
    if effects.a.len() != n || effects.b.len() != t {
        return Err(Error::shape(Module::Simulation, "fixed effects do not match the configured panel"));
    }
    let noise = Normal::new(0.0, cfg.noise_sd).map_err(|e| Error::domain(Module::Simulation, e.to_string()))?;
    let mut rng = cfg.rng(STREAM_U + rep);
    let g = effects.g(cfg.sigma);
    let mut draw = |x: f64| DMatrix::from_fn(n, t, |i, s| mean_potential(cfg.model, x, g[(i, s)]) + noise.sample(&mut rng));
    let y0 = draw(0.0);
    let y1 = draw(1.0);
    let x = effects.treatments.clone();
    let y = DMatrix::from_fn(n, t, |i, s| if x[(i, s)] == 1 { y1[(i, s)] } else { y0[(i, s)] });
    let units = (1..=n).map(|i| i.to_string()).collect();
    let periods = (1..=t).map(|s| s.to_string()).collect();
    let dataset = PanelDataset::new(y, x, vec![0, 1], None, units, periods)?;
    Ok(SimPanel {
        dataset,
        y0,
        y1,
        truth: truth(cfg, effects),
        effects: effects.clone(),
    })
}

/// One panel; reuses `effects` when given, else draws them from `cfg.seed`.
pub fn draw_panel(cfg: &DgpConfig, effects: Option<&FixedEffects>) -> Result<SimPanel> {
    match effects {
        Some(e) => draw_replication(cfg, e, 0),
        None => draw_replication(cfg, &FixedEffects::draw(cfg)?, 0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        assert!((gaussian_kernel(0.3, 0.3, 1.0) - 0.398_942_280_401_432_7).abs() < 1e-15);
        let direct = (-1.0f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert!((gaussian_kernel(0.0, 1.0, 1.0) - direct).abs() < 1e-15);
        assert!((gaussian_kernel(0.0, 1.0, 1.0) - 0.14676).abs() < 1e-5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (a, b, s): (f64, f64, f64) = (rng.random(), rng.random(), rng.random_range(0.1..2.0));
            assert_eq!(gaussian_kernel(a, b, s), gaussian_kernel(b, a, s));
            assert!(gaussian_kernel(a, b, s) <= gaussian_kernel(a, a, s));
        }
    }

    fn share_above(c: f64, sigma: f64, seed: u64, n: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hits = (0..n)
            .filter(|_| gaussian_kernel(rng.random(), rng.random(), sigma) >= c)
            .count();
        hits as f64 / n as f64
    }

    #[test]
    fn calibration_splits_draws_in_half() {
        for sigma in [0.25, 0.5, 1.0] {
            let c = calibrate_c(sigma, CALIBRATION_DRAWS).unwrap();
            let own = share_above(c, sigma, CALIBRATION_SEED, CALIBRATION_DRAWS);
            assert!((own - 0.5).abs() <= 1.0 / (CALIBRATION_DRAWS as f64).sqrt(), "{own}");
            let fresh = share_above(c, sigma, 77, 200_000);
            assert!((fresh - 0.5).abs() < 0.01, "{fresh}");
        }
        let c1 = calibrate_c(1.0, 500_000).unwrap();
        let c2 = calibrate_c(1.0, 1_000_000).unwrap();
        // density of g near its median is O(1) at sigma = 1, so the medians agree to O(n^-1/2)
        assert!((c1 - c2).abs() < 5.0 / (500_000f64).sqrt());
        assert!(calibrate_c(0.0, 10).is_err());
    }

    #[test]
    fn treated_cells_stay_in_eligible_block() {
        let cfg = DgpConfig::default();
        assert_eq!(cfg.eligible_units(), 15);
        assert_eq!(cfg.first_eligible_period(), 14);
        let p = draw_panel(&cfg, None).unwrap();
        let x = p.dataset.treatments();
        for i in 0..30 {
            for t in 0..30 {
                if x[(i, t)] == 1 {
                    assert!(i < 15 && t >= 14);
                }
            }
        }
        let treated = x.iter().filter(|&&v| v == 1).count();
        assert!(treated > 0);
    }

    #[test]
    fn eligible_share_near_half_on_large_panels() {
        let cfg = DgpConfig {
            n_units: 400,
            n_periods: 400,
            seed: 9,
            ..DgpConfig::default()
        };
        let fe = FixedEffects::draw(&cfg).unwrap();
        let (ni, t0) = (cfg.eligible_units(), cfg.first_eligible_period());
        let cells = ni * (400 - t0);
        let treated = fe.treatments.iter().filter(|&&v| v == 1).count();
        let share = treated as f64 / cells as f64;
        assert!((share - 0.5).abs() < 0.05, "{share}");
    }

    #[test]
    fn noiseless_unit_effect() {
        for model in [Model::Additive, Model::Multiplicative] {
            let cfg = DgpConfig {
                noise_sd: 0.0,
                model,
                ..DgpConfig::default()
            };
            let p = draw_panel(&cfg, None).unwrap();
            let g = p.effects.g(cfg.sigma);
            for i in 0..30 {
                for t in 0..30 {
                    let gap = p.y1[(i, t)] - p.y0[(i, t)];
                    let expect = if model == Model::Additive { 1.0 } else { g[(i, t)] };
                    assert!((gap - expect).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn replications_share_fixed_draws_only() {
        let cfg = DgpConfig::default();
        let fe = FixedEffects::draw(&cfg).unwrap();
        let r0 = draw_replication(&cfg, &fe, 0).unwrap();
        let r1 = draw_replication(&cfg, &fe, 1).unwrap();
        assert_eq!(r0.dataset.treatments(), r1.dataset.treatments());
        assert_eq!(r0.truth, r1.truth);
        assert_ne!(r0.y0, r1.y0);
        let again = draw_replication(&cfg, &fe, 1).unwrap();
        assert_eq!(again.y0, r1.y0);
    }

    #[test]
    fn truth_is_mean_kernel_over_treated_cells() {
        let cfg = DgpConfig::default();
        let fe = FixedEffects::draw(&cfg).unwrap();
        let g = fe.g(cfg.sigma);
        let cells: Vec<f64> = (0..30)
            .flat_map(|i| (0..30).map(move |t| (i, t)))
            .filter(|&c| fe.treatments[c] == 1)
            .map(|c| g[c])
            .collect();
        let tr = truth(&cfg, &fe);
        assert!((tr.aggregate - cells.iter().sum::<f64>() / cells.len() as f64).abs() < 1e-12);
        assert!(tr.per_period[..14].iter().all(Option::is_none));
    }

    #[test]
    fn config_validation() {
        let bad = DgpConfig {
            treat_unit_frac: 0.0,
            ..DgpConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = DgpConfig {
            sigma: -1.0,
            ..DgpConfig::default()
        };
        assert!(bad.validate().is_err());
        let full = DgpConfig {
            treat_period_frac: 1.0,
            ..DgpConfig::default()
        };
        assert_eq!(full.first_eligible_period(), 0);
    }
}
