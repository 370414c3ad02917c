//! Command-line front end. Settings come from an optional JSON config file;
//! flags given on the command line take precedence.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Module, Result};
use crate::estimators::EffectEstimate;
use crate::factor_model;
use crate::matching;
use crate::nuclear_solver::{self, SolverConfig};
use crate::panel_data::{self, CsvSchema, Level, PanelDataset};
use crate::pipeline::{self, MethodSpec, Penalty, Target};
use crate::simulation::{self, bounds, DgpConfig, Model};

/// Environment variable holding the default worker thread count.
pub const THREADS_ENV: &str = "PANEL_MC_THREADS";

#[derive(Debug, Parser)]
#[command(name = "panel-mc", version, about = "Matrix completion and matching estimators for panel data")]
pub struct Cli {
    /// JSON file with run settings; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, global = true)]
    pub format: Option<Format>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Complete the outcome matrix at one treatment level.
    Fit(FitArgs),
    /// Per-period and aggregate effects for each method.
    Effects(EffectsArgs),
    /// Quantile effects on the treated.
    QuantileEffects(QuantileArgs),
    /// Monte Carlo comparison on the synthetic design.
    Simulate(SimulateArgs),
    /// Randomized checks of the finite-sample bounds.
    VerifyBounds(VerifyArgs),
    /// Singular value decay and match audit.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    /// Long-format CSV with one row per unit and period.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub unit_col: Option<String>,
    #[arg(long)]
    pub period_col: Option<String>,
    #[arg(long)]
    pub outcome_col: Option<String>,
    #[arg(long)]
    pub treatment_col: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct PenaltyArgs {
    /// Number of factors; the penalty is searched to give this rank.
    #[arg(long, conflicts_with = "rho")]
    pub rank: Option<usize>,
    /// Fixed nuclear norm penalty.
    #[arg(long)]
    pub rho: Option<f64>,
    /// Add unit and period effects outside the penalty.
    #[arg(long)]
    pub additive: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub penalty: PenaltyArgs,
    /// Treatment level whose outcomes are completed.
    #[arg(long)]
    pub level: Option<Level>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Effect on the treated, `mu(1 | {1}) - mu(0 | {1})`.
    Att,
    /// Untreated outcome of the treated, `mu(0 | {1})`.
    Counterfactual,
    /// Average structural function `mu(level)`.
    Asf,
}

#[derive(Debug, Args)]
pub struct EffectsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub penalty: PenaltyArgs,
    /// Method labels: Dmeans, DiD, MC, TWM-k, SM-k. Repeatable.
    #[arg(long = "method")]
    pub methods: Vec<String>,
    #[arg(long, value_enum)]
    pub target: Option<TargetKind>,
    /// Level for the `asf` target.
    #[arg(long)]
    pub level: Option<Level>,
}

#[derive(Debug, Args)]
pub struct QuantileArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub penalty: PenaltyArgs,
    #[arg(long = "method")]
    pub methods: Vec<String>,
    /// Quantile indices; defaults to 0.10, 0.11, ..., 0.98.
    #[arg(long = "tau")]
    pub taus: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Kernel bandwidth. Repeatable.
    #[arg(long = "sigma")]
    pub sigmas: Vec<f64>,
    /// Run the bandwidths 0.25, 0.5 and 1.0.
    #[arg(long)]
    pub sweep: bool,
    #[arg(long)]
    pub n_sims: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
    #[arg(long)]
    pub n_units: Option<usize>,
    #[arg(long)]
    pub n_periods: Option<usize>,
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    #[arg(long = "method")]
    pub methods: Vec<String>,
    /// Factors used by completion-based methods.
    #[arg(long)]
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelArg {
    Additive,
    Multiplicative,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Instances per battery.
    #[arg(long)]
    pub count: Option<usize>,
    /// Panel size for the completion bounds.
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub penalty: PenaltyArgs,
    #[arg(long)]
    pub level: Option<Level>,
    /// Matching method to audit, e.g. TWM-10 or SM-5.
    #[arg(long = "method")]
    pub method: Option<String>,
}

/// Settings read from the `--config` file. Every field is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub schema: CsvSchema,
    pub methods: Vec<MethodSpec>,
    pub rank: Option<usize>,
    pub rho: Option<f64>,
    pub additive: bool,
    pub level: Option<Level>,
    pub target: Option<TargetKind>,
    pub taus: Vec<f64>,
    pub output: Option<PathBuf>,
    pub format: Option<Format>,
    pub seed: Option<u64>,
    pub simulation: Option<SimulationConfig>,
    pub verify: Option<VerifyConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(flatten)]
    pub dgp: DgpConfig,
    pub sigmas: Vec<f64>,
    pub n_sims: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            dgp: DgpConfig::default(),
            sigmas: Vec::new(),
            n_sims: 1000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub count: usize,
    pub size: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { count: 100, size: 30 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(Module::Cli, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            module: Module::Cli,
            row: e.line(),
            message: format!("{}: {e}", path.display()),
        })
    }
}

fn cli_err(message: impl Into<String>) -> Error {
    Error::domain(Module::Cli, message)
}

struct Context {
    cfg: RunConfig,
    output: PathBuf,
    format: Format,
}

impl Context {
    fn file(&self, name: &str) -> Result<BufWriter<File>> {
        let path = self.output.join(name);
        File::create(&path)
            .map(BufWriter::new)
            .map_err(|e| Error::io(Module::Cli, std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut w = self.file(name)?;
        serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::io(Module::Cli, e.into()))?;
        writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io(Module::Cli, e))
    }

    fn dataset(&self, args: &DataArgs) -> Result<PanelDataset> {
        let path = args
            .data
            .as_ref()
            .or(self.cfg.data.as_ref())
            .ok_or_else(|| cli_err("no input data: pass --data or set \"data\" in the config"))?;
        let mut schema = self.cfg.schema.clone();
        let set = |field: &mut String, v: &Option<String>| {
            if let Some(v) = v {
                field.clone_from(v);
            }
        };
        set(&mut schema.unit, &args.unit_col);
        set(&mut schema.period, &args.period_col);
        set(&mut schema.outcome, &args.outcome_col);
        set(&mut schema.treatment, &args.treatment_col);
        panel_data::load_csv(path, &schema)
    }

    fn penalty(&self, args: &PenaltyArgs) -> (Penalty, bool) {
        let penalty = match (args.rank, args.rho) {
            (Some(r), _) => Penalty::Rank(r),
            (None, Some(rho)) => Penalty::Rho(rho),
            (None, None) => match (self.cfg.rank, self.cfg.rho) {
                (Some(r), _) => Penalty::Rank(r),
                (None, Some(rho)) => Penalty::Rho(rho),
                (None, None) => Penalty::default(),
            },
        };
        (penalty, args.additive || self.cfg.additive)
    }

    fn methods(&self, labels: &[String], penalty: (Penalty, bool), default: &[&str]) -> Result<Vec<MethodSpec>> {
        if labels.is_empty() && !self.cfg.methods.is_empty() {
            return Ok(self.cfg.methods.clone());
        }
        let labels: Vec<&str> = if labels.is_empty() {
            default.to_vec()
        } else {
            labels.iter().map(String::as_str).collect()
        };
        labels.iter().map(|l| Ok(with_penalty(MethodSpec::parse(l, 5)?, penalty))).collect()
    }
}

fn with_penalty(spec: MethodSpec, (p, add): (Penalty, bool)) -> MethodSpec {
    match spec {
        MethodSpec::Mc { .. } => MethodSpec::Mc { penalty: p, additive: add },
        MethodSpec::Match { config, .. } => MethodSpec::Match {
            config,
            penalty: p,
            additive: add,
        },
        other => other,
    }
}

fn file_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

fn sigma_label(s: f64) -> String {
    format!("{s}").replace('.', "p")
}

/// Run a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let output = cli
        .output
        .clone()
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| cli_err("no output directory: pass --output or set \"output\" in the config"))?;
    fs::create_dir_all(&output).map_err(|e| Error::io(Module::Cli, e))?;
    let format = cli.format.or(cfg.format).unwrap_or_default();
    let ctx = Context { cfg, output, format };
    match &cli.command {
        Command::Fit(a) => fit(&ctx, a),
        Command::Effects(a) => effects(&ctx, a),
        Command::QuantileEffects(a) => quantile_effects(&ctx, a),
        Command::Simulate(a) => simulate(&ctx, a),
        Command::VerifyBounds(a) => verify_bounds(&ctx, a),
        Command::Diagnose(a) => diagnose(&ctx, a),
    }
}

fn fit_for(ds: &PanelDataset, level: Level, (penalty, additive): (Penalty, bool)) -> Result<nuclear_solver::FitResult> {
    let mask = ds.mask(level)?;
    let solver = SolverConfig::default();
    let y = ds.outcomes();
    match (penalty, additive) {
        (Penalty::Rank(r), false) => nuclear_solver::fit_with_rank(y, &mask, r, &solver),
        (Penalty::Rank(r), true) => nuclear_solver::fit_with_additive_rank(y, &mask, ds.covariates(), true, true, r, &solver),
        (Penalty::Rho(rho), false) => nuclear_solver::fit_completion(y, &mask, &SolverConfig { rho, ..solver }),
        (Penalty::Rho(rho), true) => {
            nuclear_solver::fit_with_additive(y, &mask, ds.covariates(), true, true, &SolverConfig { rho, ..solver })
        }
    }
}

fn fit(ctx: &Context, a: &FitArgs) -> Result<()> {
    let ds = ctx.dataset(&a.data)?;
    let level = a.level.or(ctx.cfg.level).unwrap_or(0);
    let fit = fit_for(&ds, level, ctx.penalty(&a.penalty))?;
    ctx.json("fit.json", &fit)?;
    let decay = factor_model::decay_from_spectrum(fit.singular_values.clone());
    match ctx.format {
        Format::Csv => decay.write_csv(ctx.file("decay.csv")?),
        Format::Json => ctx.json("decay.json", &decay),
    }
}

fn write_estimate(ctx: &Context, ds: &PanelDataset, prefix: &str, e: &EffectEstimate) -> Result<()> {
    let name = format!("{prefix}_{}", file_label(&e.method));
    match ctx.format {
        Format::Csv => e.write_csv(ctx.file(&format!("{name}.csv"))?, ds.period_labels()),
        Format::Json => ctx.json(&format!("{name}.json"), e),
    }
}

const EFFECT_METHODS: [&str; 5] = ["Dmeans", "DiD", "MC", "TWM-10", "SM-5"];

fn effects(ctx: &Context, a: &EffectsArgs) -> Result<()> {
    let ds = ctx.dataset(&a.data)?;
    let specs = ctx.methods(&a.methods, ctx.penalty(&a.penalty), &EFFECT_METHODS)?;
    let solver = SolverConfig::default();
    let target = a.target.or(ctx.cfg.target).unwrap_or(TargetKind::Att);
    for spec in &specs {
        let e = match target {
            TargetKind::Att => pipeline::treatment_effect(&ds, spec, Some(1), &solver)?,
            TargetKind::Counterfactual => pipeline::estimate(&ds, spec, Target::untreated_on_treated(), &solver)?,
            TargetKind::Asf => {
                let x = a.level.or(ctx.cfg.level).unwrap_or(0);
                pipeline::estimate(&ds, spec, Target { x, x0: None }, &solver)?
            }
        };
        for w in &e.warnings {
            eprintln!("warning: {}: {w}", e.method);
        }
        write_estimate(ctx, &ds, "effects", &e)?;
    }
    Ok(())
}

fn quantile_effects(ctx: &Context, a: &QuantileArgs) -> Result<()> {
    let ds = ctx.dataset(&a.data)?;
    let specs = ctx.methods(&a.methods, ctx.penalty(&a.penalty), &["MC", "TWM-10", "SM-5"])?;
    let taus = if !a.taus.is_empty() {
        a.taus.clone()
    } else if !ctx.cfg.taus.is_empty() {
        ctx.cfg.taus.clone()
    } else {
        pipeline::default_taus()
    };
    let solver = SolverConfig::default();
    for spec in &specs {
        let q = pipeline::quantile_treatment_effects(&ds, spec, &taus, None, &solver)?;
        let name = format!("quantile_effects_{}", file_label(&spec.label()));
        match ctx.format {
            Format::Json => ctx.json(&format!("{name}.json"), &q)?,
            Format::Csv => {
                let mut out = csv::Writer::from_writer(ctx.file(&format!("{name}.csv"))?);
                let io = |e: csv::Error| Error::io(Module::Cli, e.into());
                out.write_record(["tau", "treated", "control", "effect", "out_of_range"]).map_err(io)?;
                for e in &q {
                    out.write_record([
                        e.tau.to_string(),
                        e.treated.value.to_string(),
                        e.control.value.to_string(),
                        e.effect.to_string(),
                        (e.treated.out_of_range || e.control.out_of_range).to_string(),
                    ])
                    .map_err(io)?;
                }
                out.flush().map_err(|e| Error::io(Module::Cli, e))?;
            }
        }
    }
    Ok(())
}

fn simulate(ctx: &Context, a: &SimulateArgs) -> Result<()> {
    let base = ctx.cfg.simulation.clone().unwrap_or_default();
    let mut dgp = base.dgp.clone();
    if let Some(s) = a.seed.or(ctx.cfg.seed) {
        dgp.seed = s;
    }
    if let Some(v) = a.noise_sd {
        dgp.noise_sd = v;
    }
    if let Some(v) = a.n_units {
        dgp.n_units = v;
    }
    if let Some(v) = a.n_periods {
        dgp.n_periods = v;
    }
    if let Some(m) = a.model {
        dgp.model = match m {
            ModelArg::Additive => Model::Additive,
            ModelArg::Multiplicative => Model::Multiplicative,
        };
    }
    let sigmas = if a.sweep {
        vec![0.25, 0.5, 1.0]
    } else if !a.sigmas.is_empty() {
        a.sigmas.clone()
    } else if !base.sigmas.is_empty() {
        base.sigmas.clone()
    } else {
        vec![dgp.sigma]
    };
    let n_sims = a.n_sims.unwrap_or(base.n_sims);
    let specs = if a.methods.is_empty() && ctx.cfg.methods.is_empty() {
        let r = a.rank.or(ctx.cfg.rank).unwrap_or(5);
        pipeline::default_specs().into_iter().map(|s| with_penalty(s, (Penalty::Rank(r), false))).collect()
    } else {
        let penalty = PenaltyArgs {
            rank: a.rank,
            ..PenaltyArgs::default()
        };
        ctx.methods(&a.methods, ctx.penalty(&penalty), &[])?
    };
    for sigma in sigmas {
        let cfg = DgpConfig { sigma, ..dgp.clone() };
        let summary = simulation::run_monte_carlo(&cfg, &specs, n_sims)?;
        let tag = sigma_label(sigma);
        match ctx.format {
            Format::Csv => {
                summary.write_csv(ctx.file(&format!("table_sigma{tag}.csv"))?)?;
                summary.write_period_csv(ctx.file(&format!("periods_sigma{tag}.csv"))?)?;
            }
            Format::Json => ctx.json(&format!("summary_sigma{tag}.json"), &summary)?,
        }
    }
    Ok(())
}

fn write_table<T: Serialize>(ctx: &Context, stem: &str, rows: &[T]) -> Result<()> {
    match ctx.format {
        Format::Json => ctx.json(&format!("{stem}.json"), &rows),
        Format::Csv => {
            let mut out = csv::Writer::from_writer(ctx.file(&format!("{stem}.csv"))?);
            for r in rows {
                out.serialize(r).map_err(|e| Error::io(Module::Cli, e.into()))?;
            }
            out.flush().map_err(|e| Error::io(Module::Cli, e))
        }
    }
}

#[derive(Serialize)]
struct LemmaA2Row {
    instance: usize,
    rho: f64,
    error_spectral_norm: f64,
    lhs: f64,
    rhs: f64,
    slack: f64,
    solver_slack: f64,
    status: &'static str,
}

#[derive(Serialize)]
struct PropA1Row {
    instance: usize,
    rho: f64,
    c1: f64,
    c2: f64,
    c3: f64,
    c4: f64,
    abs_error: f64,
    c4_with_slack: f64,
    status: &'static str,
}

#[derive(Serialize)]
struct LemmaA1Row {
    instance: usize,
    nuclear_norm: f64,
    bound: f64,
    normalized_slack: f64,
    holds: bool,
}

fn status(holds: Option<bool>) -> &'static str {
    match holds {
        Some(true) => "pass",
        Some(false) => "fail",
        None => "precondition_unmet",
    }
}

fn verify_bounds(ctx: &Context, a: &VerifyArgs) -> Result<()> {
    let vc = ctx.cfg.verify.clone().unwrap_or_default();
    let seed = a.seed.or(ctx.cfg.seed).unwrap_or(1);
    let count = a.count.unwrap_or(vc.count);
    let size = a.size.unwrap_or(vc.size);
    let lemma: Vec<LemmaA2Row> = bounds::lemma_a2_battery(seed, count, size, size)?
        .into_iter()
        .enumerate()
        .map(|(k, r)| LemmaA2Row {
            instance: k,
            rho: r.rho,
            error_spectral_norm: r.error_spectral_norm,
            lhs: r.lhs,
            rhs: r.rhs,
            slack: r.slack,
            solver_slack: r.solver_slack,
            status: status(r.holds),
        })
        .collect();
    write_table(ctx, "lemma_a2", &lemma)?;
    let prop: Vec<PropA1Row> = bounds::prop_a1_battery(seed, count, size, size)?
        .into_iter()
        .enumerate()
        .map(|(k, r)| PropA1Row {
            instance: k,
            rho: r.rho,
            c1: r.c1,
            c2: r.c2,
            c3: r.c3,
            c4: r.c4,
            abs_error: r.abs_error,
            c4_with_slack: r.c4_with_slack,
            status: status(r.holds),
        })
        .collect();
    write_table(ctx, "prop_a1", &prop)?;
    let nuclear: Vec<LemmaA1Row> = bounds::lemma_a1_battery(seed, count.min(20), 400, 400, &[0.5, 0.25, 0.125], 0.05)?
        .into_iter()
        .enumerate()
        .map(|(k, r)| LemmaA1Row {
            instance: k,
            nuclear_norm: r.nuclear_norm,
            bound: r.bound,
            normalized_slack: r.normalized_slack,
            holds: r.holds,
        })
        .collect();
    write_table(ctx, "lemma_a1", &nuclear)?;
    let failed = lemma.iter().filter(|r| r.status == "fail").count() + prop.iter().filter(|r| r.status == "fail").count();
    if failed > 0 {
        eprintln!("warning: {failed} bound checks failed");
    }
    Ok(())
}

fn diagnose(ctx: &Context, a: &DiagnoseArgs) -> Result<()> {
    let ds = ctx.dataset(&a.data)?;
    let level = a.level.or(ctx.cfg.level).unwrap_or(0);
    let penalty = ctx.penalty(&a.penalty);
    let fit = fit_for(&ds, level, penalty)?;
    let decay = factor_model::singular_decay(&fit.gamma_hat)?;
    let spec = MethodSpec::parse(a.method.as_deref().unwrap_or("TWM-10"), 5)?;
    let MethodSpec::Match { config, .. } = spec else {
        return Err(cli_err(format!("diagnose audits matching methods, got {}", spec.label())));
    };
    let r = match penalty.0 {
        Penalty::Rank(r) => r,
        Penalty::Rho(_) => fit.effective_rank.max(1),
    };
    let fs = factor_model::extract_factors(&fit.gamma_hat, r.min(ds.n_units().min(ds.n_periods())))?;
    let matched = matching::match_counterfactual(&fs, &ds, level, &config)?;
    match ctx.format {
        Format::Csv => {
            decay.write_csv(ctx.file("decay.csv")?)?;
            matched.write_csv(ctx.file("matches.csv")?)
        }
        Format::Json => {
            ctx.json("decay.json", &decay)?;
            ctx.json("matches.json", &matched)
        }
    }
}

/// Thread count from [`THREADS_ENV`], if set to a positive integer.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| cli_err(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        Err(_) => Ok(None),
    }
}
