//! Synthetic panels, Monte Carlo comparisons and numerical checks of the
//! finite-sample bounds.

pub mod bounds;
pub mod dgp;
pub mod monte_carlo;

pub use bounds::{
    lemma_a1_battery, lemma_a2_battery, prop_a1_battery, verify_lemma_a2, verify_prop_a1, LemmaA2Report, OracleInstance,
    PropA1Report,
};
pub use dgp::{calibrate_c, draw_panel, draw_replication, gaussian_kernel, DgpConfig, FixedEffects, Model, SimPanel, Truth};
pub use monte_carlo::{run_monte_carlo, run_monte_carlo_with, PeriodRow, SimRow, SimSummary};
