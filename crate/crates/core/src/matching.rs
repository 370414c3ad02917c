//! Counterfactual outcomes by matching on estimated loadings and factors.
//!
//! For a cell `(i, t)` not at level `x`, the distance to a candidate `(j, s)`
//! is `|l_i - l_j|^2 + |f_t - f_s|^2`. Simple matching averages `Y_js` over
//! the chosen candidates. Two-way matching requires `X_is = X_jt = X_js = x`
//! and averages `Y_is + Y_jt - Y_js`, which cancels additive unit and period
//! effects exactly.

use std::cmp::Ordering;
use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Module, Result};
use crate::factor_model::FactorStructure;
use crate::panel_data::{Level, PanelDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    Simple,
    TwoWay,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborRule {
    KNearest(usize),
    /// Unit and period neighborhoods `|l_i - l_j| <= tau`, `|f_t - f_s| <= upsilon`.
    Radius { tau: f64, upsilon: f64 },
}

/// Ties in distance are broken by smaller `j`, then smaller `s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub mode: MatchMode,
    pub rule: NeighborRule,
}

impl MatchConfig {
    pub fn simple(k: usize) -> Self {
        Self {
            mode: MatchMode::Simple,
            rule: NeighborRule::KNearest(k),
        }
    }

    pub fn two_way(k: usize) -> Self {
        Self {
            mode: MatchMode::TwoWay,
            rule: NeighborRule::KNearest(k),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.rule {
            NeighborRule::KNearest(0) => Err(Error::domain(Module::Matching, "k must be >= 1")),
            NeighborRule::Radius { tau, upsilon } if !(tau > 0.0 && upsilon > 0.0) => Err(Error::domain(
                Module::Matching,
                format!("radii must be > 0, got tau = {tau}, upsilon = {upsilon}"),
            )),
            _ => Ok(()),
        }
    }

    /// Short label such as `TWM-10` or `SM-r(0.5,0.5)`.
    pub fn label(&self) -> String {
        let prefix = match self.mode {
            MatchMode::Simple => "SM",
            MatchMode::TwoWay => "TWM",
        };
        match self.rule {
            NeighborRule::KNearest(k) => format!("{prefix}-{k}"),
            NeighborRule::Radius { tau, upsilon } => format!("{prefix}-r({tau},{upsilon})"),
        }
    }
}

/// One selected candidate `(j, s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchTerm {
    pub unit: usize,
    pub period: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CellSource {
    /// `X_it = x`; the outcome itself is used.
    Observed,
    Matched(Vec<MatchTerm>),
    /// No feasible candidate; the mean over all cells at level `x` is used.
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchedCounterfactual {
    pub x: Level,
    pub config: MatchConfig,
    #[serde(with = "crate::matrix_serde")]
    pub y_tilde: DMatrix<f64>,
    /// Column-major, one entry per cell.
    pub sources: Vec<CellSource>,
    pub fallback_cells: Vec<(usize, usize)>,
    /// Cells matched with fewer than `k` candidates.
    pub short_cells: Vec<(usize, usize)>,
    /// Number of feasible candidates per cell (zero for observed cells).
    #[serde(with = "crate::matrix_serde")]
    pub n_it: DMatrix<usize>,
    n_units: usize,
    /// Cells at level `x`, column-major.
    #[serde(skip)]
    level_cells: Vec<(usize, usize)>,
}

impl MatchedCounterfactual {
    pub fn source(&self, i: usize, t: usize) -> &CellSource {
        &self.sources[i + t * self.n_units]
    }

    /// Outcome cells and coefficients whose weighted sum is `y_tilde[(i, t)]`.
    pub fn cell_weights(&self, i: usize, t: usize) -> Vec<((usize, usize), f64)> {
        match self.source(i, t) {
            CellSource::Observed => vec![((i, t), 1.0)],
            CellSource::Fallback => {
                let w = 1.0 / self.level_cells.len() as f64;
                self.level_cells.iter().map(|&c| (c, w)).collect()
            }
            CellSource::Matched(terms) => {
                let w = 1.0 / terms.len() as f64;
                match self.config.mode {
                    MatchMode::Simple => terms.iter().map(|m| ((m.unit, m.period), w)).collect(),
                    MatchMode::TwoWay => terms
                        .iter()
                        .flat_map(|m| [((i, m.period), w), ((m.unit, t), w), ((m.unit, m.period), -w)])
                        .collect(),
                }
            }
        }
    }

    /// Weights `omega` with `sum_it c_it y_tilde_it = sum_js omega_js Y_js`.
    ///
    /// `cell_weight` gives `c`; pass all ones for the plain average.
    pub fn outcome_weights(&self, cell_weight: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (n, t) = self.y_tilde.shape();
        if cell_weight.shape() != (n, t) {
            return Err(Error::shape(Module::Matching, "cell weights must be N x T"));
        }
        let mut omega = DMatrix::zeros(n, t);
        let mut fallback_mass = 0.0;
        for s in 0..t {
            for i in 0..n {
                let c = cell_weight[(i, s)];
                if c == 0.0 {
                    continue;
                }
                if matches!(self.source(i, s), CellSource::Fallback) {
                    fallback_mass += c;
                    continue;
                }
                for ((a, b), w) in self.cell_weights(i, s) {
                    omega[(a, b)] += c * w;
                }
            }
        }
        if fallback_mass != 0.0 {
            let w = fallback_mass / self.level_cells.len() as f64;
            for &(a, b) in &self.level_cells {
                omega[(a, b)] += w;
            }
        }
        Ok(omega)
    }

    /// Audit CSV: `unit,period,kind,match_unit,match_period,distance,weight`.
    ///
    /// Indices are 0-based positions in the panel. Fallback cells get one row
    /// with empty match columns.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::io(Module::Matching, e.into());
        out.write_record(["unit", "period", "kind", "match_unit", "match_period", "distance", "weight"])
            .map_err(io)?;
        let (n, t) = self.y_tilde.shape();
        for s in 0..t {
            for i in 0..n {
                let (iu, ts) = (i.to_string(), s.to_string());
                match self.source(i, s) {
                    CellSource::Observed => {
                        out.write_record([iu.as_str(), &ts, "observed", &iu, &ts, "0", "1"]).map_err(io)?
                    }
                    CellSource::Fallback => out.write_record([iu.as_str(), &ts, "fallback", "", "", "", ""]).map_err(io)?,
                    CellSource::Matched(terms) => {
                        let wt = (1.0 / terms.len() as f64).to_string();
                        for m in terms {
                            out.write_record([
                                iu.as_str(),
                                &ts,
                                "matched",
                                &m.unit.to_string(),
                                &m.period.to_string(),
                                &m.distance.to_string(),
                                &wt,
                            ])
                            .map_err(io)?;
                        }
                    }
                }
            }
        }
        out.flush().map_err(|e| Error::io(Module::Matching, e))
    }
}

fn row_sq_dists(m: &DMatrix<f64>) -> DMatrix<f64> {
    let k = m.nrows();
    DMatrix::from_fn(k, k, |a, b| (m.row(a) - m.row(b)).norm_squared())
}

fn by_distance(a: &MatchTerm, b: &MatchTerm) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then(a.unit.cmp(&b.unit))
        .then(a.period.cmp(&b.period))
}

fn keep_nearest(mut cands: Vec<MatchTerm>, k: usize) -> Vec<MatchTerm> {
    if cands.len() > k {
        cands.select_nth_unstable_by(k - 1, by_distance);
        cands.truncate(k);
    }
    cands.sort_by(by_distance);
    cands
}

/// Counterfactuals at level `x` from the factor structure fitted at that level.
pub fn match_counterfactual(
    fs: &FactorStructure,
    ds: &PanelDataset,
    x: Level,
    cfg: &MatchConfig,
) -> Result<MatchedCounterfactual> {
    cfg.validate()?;
    let (n, t) = (ds.n_units(), ds.n_periods());
    if fs.loadings.nrows() != n || fs.factors.nrows() != t {
        return Err(Error::shape(
            Module::Matching,
            format!(
                "factor structure is {}x{} but panel is {n}x{t}",
                fs.loadings.nrows(),
                fs.factors.nrows()
            ),
        ));
    }
    let mask = ds.mask(x)?;
    if mask.count() == 0 {
        return Err(Error::EmptyMask(x));
    }
    let at = |i: usize, s: usize| mask.is_observed(i, s);
    let y = ds.outcomes();
    let global_mean = mask.cells().map(|(i, s)| y[(i, s)]).sum::<f64>() / mask.count() as f64;
    let dl = row_sq_dists(&fs.loadings);
    let df = row_sq_dists(&fs.factors);

    let solve_cell = |i: usize, tt: usize| -> (CellSource, f64, usize) {
        if at(i, tt) {
            return (CellSource::Observed, y[(i, tt)], 0);
        }
        let term = |j: usize, s: usize| MatchTerm {
            unit: j,
            period: s,
            distance: dl[(i, j)] + df[(tt, s)],
        };
        let mut cands = Vec::new();
        match (cfg.mode, cfg.rule) {
            (MatchMode::Simple, NeighborRule::KNearest(_)) => {
                cands.extend(mask.cells().map(|(j, s)| term(j, s)));
            }
            (MatchMode::Simple, NeighborRule::Radius { tau, upsilon }) => {
                for s in (0..t).filter(|&s| df[(tt, s)].sqrt() <= upsilon) {
                    for j in (0..n).filter(|&j| dl[(i, j)].sqrt() <= tau && at(j, s)) {
                        cands.push(term(j, s));
                    }
                }
            }
            (MatchMode::TwoWay, rule) => {
                let (tau, upsilon) = match rule {
                    NeighborRule::Radius { tau, upsilon } => (tau, upsilon),
                    NeighborRule::KNearest(_) => (f64::INFINITY, f64::INFINITY),
                };
                let units: Vec<usize> = (0..n)
                    .filter(|&j| j != i && at(j, tt) && dl[(i, j)].sqrt() <= tau)
                    .collect();
                for s in (0..t).filter(|&s| s != tt && at(i, s) && df[(tt, s)].sqrt() <= upsilon) {
                    for &j in units.iter().filter(|&&j| at(j, s)) {
                        cands.push(term(j, s));
                    }
                }
            }
        }
        let feasible = cands.len();
        if feasible == 0 {
            return (CellSource::Fallback, global_mean, 0);
        }
        let chosen = match cfg.rule {
            NeighborRule::KNearest(k) => keep_nearest(cands, k),
            NeighborRule::Radius { .. } => {
                cands.sort_by(by_distance);
                cands
            }
        };
        let value = chosen
            .iter()
            .map(|m| match cfg.mode {
                MatchMode::Simple => y[(m.unit, m.period)],
                MatchMode::TwoWay => y[(i, m.period)] + y[(m.unit, tt)] - y[(m.unit, m.period)],
            })
            .sum::<f64>()
            / chosen.len() as f64;
        (CellSource::Matched(chosen), value, feasible)
    };

    let solved: Vec<(CellSource, f64, usize)> = (0..n * t)
        .into_par_iter()
        .map(|c| solve_cell(c % n, c / n))
        .collect();

    let mut y_tilde = DMatrix::zeros(n, t);
    let mut n_it = DMatrix::zeros(n, t);
    let mut fallback_cells = Vec::new();
    let mut short_cells = Vec::new();
    let mut sources = Vec::with_capacity(n * t);
    for (c, (src, value, feasible)) in solved.into_iter().enumerate() {
        let (i, s) = (c % n, c / n);
        y_tilde[(i, s)] = value;
        n_it[(i, s)] = feasible;
        match (&src, cfg.rule) {
            (CellSource::Fallback, _) => fallback_cells.push((i, s)),
            (CellSource::Matched(terms), NeighborRule::KNearest(k)) if terms.len() < k => short_cells.push((i, s)),
            _ => {}
        }
        sources.push(src);
    }
    Ok(MatchedCounterfactual {
        x,
        config: *cfg,
        y_tilde,
        sources,
        fallback_cells,
        short_cells,
        n_it,
        n_units: n,
        level_cells: mask.cells().collect(),
    })
}

pub fn simple_match(fs: &FactorStructure, ds: &PanelDataset, x: Level, rule: NeighborRule) -> Result<MatchedCounterfactual> {
    match_counterfactual(fs, ds, x, &MatchConfig { mode: MatchMode::Simple, rule })
}

pub fn two_way_match(fs: &FactorStructure, ds: &PanelDataset, x: Level, rule: NeighborRule) -> Result<MatchedCounterfactual> {
    match_counterfactual(fs, ds, x, &MatchConfig { mode: MatchMode::TwoWay, rule })
}
