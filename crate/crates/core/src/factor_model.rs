//! Factors and loadings of a completed matrix, plus spectrum diagnostics.

use std::io::Write;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Module, Result};
use crate::matrix_serde;
use crate::nuclear_solver::{self, RANK_TOL_REL};

/// Normalized factor decomposition `gamma = loadings * factors'`.
///
/// `factors' factors / T` is the identity and `loadings' loadings / N` is
/// diagonal. Each factor column has its first nonzero coordinate positive.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactorStructure {
    #[serde(with = "matrix_serde")]
    pub loadings: DMatrix<f64>,
    #[serde(with = "matrix_serde")]
    pub factors: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub rank: usize,
    /// Number of requested columns backed by a nonzero singular value.
    pub numeric_rank: usize,
    /// True when `rank > numeric_rank`; the extra columns are zero.
    pub rank_deficient: bool,
}

impl FactorStructure {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.loadings * self.factors.transpose()
    }
}

/// Rank-`r` factor structure with `f = sqrt(T) V_r` and `lambda = U_r diag(s) / sqrt(T)`.
pub fn extract_factors(gamma: &DMatrix<f64>, r: usize) -> Result<FactorStructure> {
    let (n, t) = gamma.shape();
    let max_rank = n.min(t);
    if r == 0 || r > max_rank {
        return Err(Error::domain(Module::FactorModel, format!("r = {r} outside 1..={max_rank}")));
    }
    let dec = nuclear_solver::try_svd(gamma, true, Module::FactorModel)?;
    let u = dec.u.as_ref().unwrap();
    let v_t = dec.v_t.as_ref().unwrap();
    let s = &dec.singular_values;
    let s1 = s.iter().copied().fold(0.0, f64::max);
    let numeric_rank = s.iter().take(r).filter(|&&x| s1 > 0.0 && x > RANK_TOL_REL * s1).count();
    let root_t = (t as f64).sqrt();
    let mut loadings = DMatrix::zeros(n, r);
    let mut factors = DMatrix::zeros(t, r);
    for j in 0..numeric_rank {
        let mut f = v_t.row(j).transpose() * root_t;
        let mut l = u.column(j) * (s[j] / root_t);
        let first = f.iter().copied().find(|x| x.abs() > 1e-12 * root_t).unwrap_or(1.0);
        if first < 0.0 {
            f = -f;
            l = -l;
        }
        factors.set_column(j, &f);
        loadings.set_column(j, &l);
    }
    let singular_values = (0..r).map(|j| if j < numeric_rank { s[j] } else { 0.0 }).collect();
    Ok(FactorStructure {
        loadings,
        factors,
        singular_values,
        rank: r,
        numeric_rank,
        rank_deficient: numeric_rank < r,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayReport {
    pub singular_values: Vec<f64>,
    /// `truncation_errors[r] = sum_{j > r} s_j^2` for `r = 0..=min(N, T)`.
    pub truncation_errors: Vec<f64>,
    pub fitted_alpha: Option<f64>,
}

impl DecayReport {
    /// CSV with columns `j,s_j,tail_energy`, one row per singular value.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| Error::io(Module::FactorModel, e.into());
        out.write_record(["j", "s_j", "tail_energy"]).map_err(io)?;
        for (j, s) in self.singular_values.iter().enumerate() {
            out.write_record([(j + 1).to_string(), s.to_string(), self.truncation_errors[j + 1].to_string()])
                .map_err(io)?;
        }
        out.flush().map_err(|e| Error::io(Module::FactorModel, e))
    }
}

pub fn singular_decay(gamma: &DMatrix<f64>) -> Result<DecayReport> {
    let s = nuclear_solver::singular_values(gamma)
        .map_err(|_| Error::numeric(Module::FactorModel, "matrix has non-finite entries"))?;
    Ok(decay_from_spectrum(s))
}

/// Decay report for a given nonincreasing spectrum.
pub fn decay_from_spectrum(singular_values: Vec<f64>) -> DecayReport {
    let m = singular_values.len();
    let mut truncation_errors = vec![0.0; m + 1];
    for r in (0..m).rev() {
        truncation_errors[r] = truncation_errors[r + 1] + singular_values[r].powi(2);
    }
    DecayReport {
        fitted_alpha: fit_alpha(&singular_values),
        singular_values,
        truncation_errors,
    }
}

fn fit_alpha(s: &[f64]) -> Option<f64> {
    let s1 = s.first().copied().unwrap_or(0.0);
    let nonzero = s.iter().filter(|&&x| s1 > 0.0 && x > RANK_TOL_REL * s1).count();
    if nonzero < 4 {
        return None;
    }
    let pts: Vec<(f64, f64)> = (1..nonzero)
        .map(|j| (((j + 1) as f64).ln(), s[j].ln()))
        .collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(-sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NuclearBoundReport {
    /// `||Gamma||_*` of the sampled matrix.
    pub nuclear_norm: f64,
    /// `sqrt(NT) * sum_j s_j`.
    pub bound: f64,
    /// `(bound - nuclear_norm) / sqrt(NT)`.
    pub normalized_slack: f64,
    pub eps: f64,
    pub holds: bool,
}

/// Compare the nuclear norm of `sum_j s_j u_j v_j'` with `sqrt(NT) * sum_j s_j`.
pub fn nuclear_norm_bound_check(
    s_true: &[f64],
    u_vals: &DMatrix<f64>,
    v_vals: &DMatrix<f64>,
    eps: f64,
) -> Result<NuclearBoundReport> {
    let j = s_true.len();
    if u_vals.ncols() != j || v_vals.ncols() != j {
        return Err(Error::shape(
            Module::FactorModel,
            format!(
                "{j} singular values but u has {} columns and v has {}",
                u_vals.ncols(),
                v_vals.ncols()
            ),
        ));
    }
    let (n, t) = (u_vals.nrows(), v_vals.nrows());
    let mut gamma = DMatrix::zeros(n, t);
    for (k, &s) in s_true.iter().enumerate() {
        gamma += u_vals.column(k) * v_vals.column(k).transpose() * s;
    }
    let nuclear_norm = nuclear_solver::nuclear_norm(&gamma)?;
    let root = ((n * t) as f64).sqrt();
    let bound = root * s_true.iter().sum::<f64>();
    let normalized_slack = (bound - nuclear_norm) / root;
    Ok(NuclearBoundReport {
        nuclear_norm,
        bound,
        normalized_slack,
        eps,
        holds: normalized_slack >= -eps,
    })
}

/// `sqrt(2) cos(2 pi j a)`, orthonormal in `L2(U(0,1))` for `j >= 1`.
pub fn cosine_basis(points: &[f64], j: usize) -> Vec<f64> {
    let w = 2.0 * std::f64::consts::PI * j as f64;
    points.iter().map(|&a| std::f64::consts::SQRT_2 * (w * a).cos()).collect()
}
