//! Balanced panels with discrete treatments.
//!
//! A [`PanelDataset`] holds an `N x T` outcome matrix, an `N x T` matrix of
//! treatment levels drawn from a finite declared support, and optional
//! covariates. [`TreatmentMask`] marks the cells observed at one level.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Module, Result};

/// A treatment level. Supports are finite sets of integers.
pub type Level = i64;

#[derive(Debug, Clone)]
pub struct PanelDataset {
    outcomes: DMatrix<f64>,
    treatments: DMatrix<Level>,
    support: Vec<Level>,
    covariates: Option<Covariates>,
    unit_labels: Vec<String>,
    period_labels: Vec<String>,
}

/// `d_c` covariate slices, each `N x T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    pub names: Vec<String>,
    pub values: Vec<DMatrix<f64>>,
}

impl Covariates {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Covariate vector `C_it`.
    pub fn at(&self, i: usize, t: usize) -> Vec<f64> {
        self.values.iter().map(|m| m[(i, t)]).collect()
    }
}

impl PanelDataset {
    pub fn new(
        outcomes: DMatrix<f64>,
        treatments: DMatrix<Level>,
        support: Vec<Level>,
        covariates: Option<Covariates>,
        unit_labels: Vec<String>,
        period_labels: Vec<String>,
    ) -> Result<Self> {
        let (n, t) = outcomes.shape();
        if n == 0 || t == 0 {
            return Err(Error::shape(Module::PanelData, "panel must have N >= 1 and T >= 1"));
        }
        if treatments.shape() != (n, t) {
            return Err(Error::shape(
                Module::PanelData,
                format!(
                    "outcomes are {n}x{t} but treatments are {}x{}",
                    treatments.nrows(),
                    treatments.ncols()
                ),
            ));
        }
        if unit_labels.len() != n || period_labels.len() != t {
            return Err(Error::shape(
                Module::PanelData,
                format!(
                    "expected {n} unit labels and {t} period labels, got {} and {}",
                    unit_labels.len(),
                    period_labels.len()
                ),
            ));
        }
        if let Some(pos) = outcomes.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                Module::PanelData,
                format!("non-finite outcome at cell {}", cell_name(pos, n)),
            ));
        }
        let mut support = support;
        support.sort_unstable();
        support.dedup();
        if support.is_empty() {
            return Err(Error::domain(Module::PanelData, "treatment support is empty"));
        }
        for j in 0..t {
            for i in 0..n {
                let x = treatments[(i, j)];
                if support.binary_search(&x).is_err() {
                    return Err(Error::domain(
                        Module::PanelData,
                        format!("treatment value {x} at ({i}, {j}) outside support {support:?}"),
                    ));
                }
            }
        }
        if let Some(cov) = &covariates {
            if cov.names.len() != cov.values.len() {
                return Err(Error::shape(Module::PanelData, "covariate names and slices differ in length"));
            }
            if cov.values.iter().any(|m| m.shape() != (n, t)) {
                return Err(Error::shape(Module::PanelData, format!("every covariate slice must be {n}x{t}")));
            }
        }
        Ok(Self {
            outcomes,
            treatments,
            support,
            covariates,
            unit_labels,
            period_labels,
        })
    }

    /// Build a dataset with labels `1..=N`, `1..=T` and the support taken
    /// from the observed treatment values.
    pub fn from_matrices(outcomes: DMatrix<f64>, treatments: DMatrix<Level>) -> Result<Self> {
        let support = treatments.iter().copied().collect();
        let units = (1..=outcomes.nrows()).map(|i| i.to_string()).collect();
        let periods = (1..=outcomes.ncols()).map(|t| t.to_string()).collect();
        Self::new(outcomes, treatments, support, None, units, periods)
    }

    pub fn n_units(&self) -> usize {
        self.outcomes.nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.outcomes.ncols()
    }

    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }

    pub fn treatments(&self) -> &DMatrix<Level> {
        &self.treatments
    }

    pub fn outcome(&self, i: usize, t: usize) -> f64 {
        self.outcomes[(i, t)]
    }

    pub fn treatment(&self, i: usize, t: usize) -> Level {
        self.treatments[(i, t)]
    }

    pub fn support(&self) -> &[Level] {
        &self.support
    }

    pub fn covariates(&self) -> Option<&Covariates> {
        self.covariates.as_ref()
    }

    pub fn unit_labels(&self) -> &[String] {
        &self.unit_labels
    }

    pub fn period_labels(&self) -> &[String] {
        &self.period_labels
    }

    pub fn is_binary(&self) -> bool {
        self.support == [0, 1]
    }

    pub(crate) fn require_binary(&self, module: Module) -> Result<()> {
        if self.is_binary() {
            Ok(())
        } else {
            Err(Error::domain(
                module,
                format!("binary treatment support {{0, 1}} required, found {:?}", self.support),
            ))
        }
    }

    pub fn check_level(&self, x: Level) -> Result<()> {
        if self.support.binary_search(&x).is_ok() {
            Ok(())
        } else {
            Err(Error::domain(
                Module::PanelData,
                format!("treatment level {x} outside support {:?}", self.support),
            ))
        }
    }

    /// Same panel with a replaced outcome matrix.
    pub fn with_outcomes(&self, outcomes: DMatrix<f64>) -> Result<Self> {
        Self::new(
            outcomes,
            self.treatments.clone(),
            self.support.clone(),
            self.covariates.clone(),
            self.unit_labels.clone(),
            self.period_labels.clone(),
        )
    }

    /// Indicator `D_it(x) = 1{X_it = x}` for every cell.
    pub fn mask(&self, x: Level) -> Result<TreatmentMask> {
        self.check_level(x)?;
        let mask = self.treatments.map(|v| v == x);
        Ok(TreatmentMask::new(x, mask))
    }

    /// Number of cells at treatment level `x` in period `t`.
    pub fn count_in_period(&self, x: Level, t: usize) -> usize {
        self.treatments.column(t).iter().filter(|&&v| v == x).count()
    }

    /// Write the panel in long format: one row per (unit, period).
    pub fn write_csv<W: Write>(&self, writer: W, schema: &CsvSchema) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![
            schema.unit.clone(),
            schema.period.clone(),
            schema.outcome.clone(),
            schema.treatment.clone(),
        ];
        if let Some(cov) = &self.covariates {
            header.extend(cov.names.iter().cloned());
        }
        w.write_record(&header).map_err(csv_io)?;
        for i in 0..self.n_units() {
            for t in 0..self.n_periods() {
                let mut rec = vec![
                    self.unit_labels[i].clone(),
                    self.period_labels[t].clone(),
                    self.outcomes[(i, t)].to_string(),
                    self.treatments[(i, t)].to_string(),
                ];
                if let Some(cov) = &self.covariates {
                    rec.extend(cov.values.iter().map(|m| m[(i, t)].to_string()));
                }
                w.write_record(&rec).map_err(csv_io)?;
            }
        }
        w.flush().map_err(|e| Error::io(Module::PanelData, e))
    }
}

fn cell_name(flat: usize, n: usize) -> String {
    format!("({}, {})", flat % n, flat / n)
}

fn csv_io(e: csv::Error) -> Error {
    Error::io(Module::PanelData, std::io::Error::other(e))
}

/// Observation pattern of one treatment level.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentMask {
    x: Level,
    mask: DMatrix<bool>,
    count: usize,
}

impl TreatmentMask {
    pub fn new(x: Level, mask: DMatrix<bool>) -> Self {
        let count = mask.iter().filter(|&&b| b).count();
        Self { x, mask, count }
    }

    /// Every cell observed.
    pub fn full(x: Level, n: usize, t: usize) -> Self {
        Self::new(x, DMatrix::from_element(n, t, true))
    }

    pub fn level(&self) -> Level {
        self.x
    }

    pub fn matrix(&self) -> &DMatrix<bool> {
        &self.mask
    }

    /// `n(x)`.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mask.shape()
    }

    pub fn is_observed(&self, i: usize, t: usize) -> bool {
        self.mask[(i, t)]
    }

    pub fn is_full(&self) -> bool {
        self.count == self.mask.len()
    }

    /// Observed cells in column-major order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.mask.nrows();
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(k, _)| (k % n, k / n))
    }

    /// Units with no observed cell, then periods with no observed cell.
    pub fn empty_lines(&self) -> (Vec<usize>, Vec<usize>) {
        let rows = (0..self.mask.nrows())
            .filter(|&i| !self.mask.row(i).iter().any(|&b| b))
            .collect();
        let cols = (0..self.mask.ncols())
            .filter(|&t| !self.mask.column(t).iter().any(|&b| b))
            .collect();
        (rows, cols)
    }
}

/// Column names for long-format CSV input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub unit: String,
    pub period: String,
    pub outcome: String,
    pub treatment: String,
    pub covariates: Vec<String>,
    /// Declared treatment support; inferred from the data when absent.
    pub support: Option<Vec<Level>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            unit: "unit".into(),
            period: "period".into(),
            outcome: "outcome".into(),
            treatment: "treatment".into(),
            covariates: Vec::new(),
            support: None,
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<PanelDataset> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| Error::io(Module::PanelData, e))?;
    read_csv(file, schema)
}

/// Parse a long-format panel. Data rows are numbered from 2 (the header is row 1).
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("column '{name}' not found in header")))
    };
    let unit_col = col(&schema.unit)?;
    let period_col = col(&schema.period)?;
    let outcome_col = col(&schema.outcome)?;
    let treat_col = col(&schema.treatment)?;
    let cov_cols = schema
        .covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;

    struct Row {
        unit: String,
        period: String,
        outcome: f64,
        treatment: Level,
        covariates: Vec<f64>,
        line: usize,
    }

    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let outcome = parse_real(field(outcome_col), line, &schema.outcome)?;
        let treatment = parse_level(field(treat_col), line)?;
        let covariates = cov_cols
            .iter()
            .zip(&schema.covariates)
            .map(|(&c, name)| parse_real(field(c), line, name))
            .collect::<Result<Vec<_>>>()?;
        rows.push(Row {
            unit: field(unit_col).to_string(),
            period: field(period_col).to_string(),
            outcome,
            treatment,
            covariates,
            line,
        });
    }
    if rows.is_empty() {
        return Err(parse_err(2, "no data rows".into()));
    }

    let units = ordered_labels(rows.iter().map(|r| r.unit.as_str()));
    let periods = ordered_labels(rows.iter().map(|r| r.period.as_str()));
    let unit_idx: HashMap<&str, usize> = units.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
    let period_idx: HashMap<&str, usize> =
        periods.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();

    let (n, t) = (units.len(), periods.len());
    let mut outcomes = DMatrix::zeros(n, t);
    let mut treatments = DMatrix::zeros(n, t);
    let mut seen = DMatrix::from_element(n, t, false);
    let mut cov_values = vec![DMatrix::zeros(n, t); cov_cols.len()];
    for r in &rows {
        let (i, j) = (unit_idx[r.unit.as_str()], period_idx[r.period.as_str()]);
        if seen[(i, j)] {
            return Err(parse_err(
                r.line,
                format!("duplicate row for unit '{}' period '{}'", r.unit, r.period),
            ));
        }
        seen[(i, j)] = true;
        outcomes[(i, j)] = r.outcome;
        treatments[(i, j)] = r.treatment;
        for (m, v) in cov_values.iter_mut().zip(&r.covariates) {
            m[(i, j)] = *v;
        }
    }

    let mut missing = Vec::new();
    for i in 0..n {
        for j in 0..t {
            if !seen[(i, j)] {
                missing.push((units[i].clone(), periods[j].clone()));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Unbalanced { missing });
    }

    let support = match &schema.support {
        Some(s) => s.clone(),
        None => treatments.iter().copied().collect(),
    };
    let covariates = (!cov_cols.is_empty()).then(|| Covariates {
        names: schema.covariates.clone(),
        values: cov_values,
    });
    PanelDataset::new(outcomes, treatments, support, covariates, units, periods)
}

/// Read a panel stored as two wide tables (first column unit label, one
/// column per period) for outcomes and treatments.
pub fn read_wide<R1: Read, R2: Read>(
    outcomes: R1,
    treatments: R2,
    support: Option<Vec<Level>>,
) -> Result<PanelDataset> {
    let (units, periods, y) = read_wide_table(outcomes, |s, line| parse_real(s, line, "outcome"))?;
    let (units2, periods2, x) = read_wide_table(treatments, parse_level)?;
    if units != units2 || periods != periods2 {
        return Err(Error::shape(
            Module::PanelData,
            "outcome and treatment tables have different unit or period labels",
        ));
    }
    let support = support.unwrap_or_else(|| x.iter().copied().collect());
    PanelDataset::new(y, x, support, None, units, periods)
}

fn read_wide_table<R: Read, T: nalgebra::Scalar + Copy>(
    reader: R,
    parse: impl Fn(&str, usize) -> Result<T>,
) -> Result<(Vec<String>, Vec<String>, DMatrix<T>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let periods: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut units = Vec::new();
    let mut values = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != periods.len() + 1 {
            return Err(parse_err(line, format!("expected {} fields, found {}", periods.len() + 1, rec.len())));
        }
        units.push(rec[0].to_string());
        for f in rec.iter().skip(1) {
            values.push(parse(f, line)?);
        }
    }
    let m = DMatrix::from_row_slice(units.len(), periods.len(), &values);
    Ok((units, periods, m))
}

/// Labels sorted numerically when every label is a number, otherwise in
/// order of first appearance.
fn ordered_labels<'a>(labels: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut ordered: Vec<String> = Vec::new();
    for l in labels {
        if seen.insert(l) {
            ordered.push(l.to_string());
        }
    }
    let numeric: Option<Vec<f64>> = ordered.iter().map(|s| s.parse::<f64>().ok()).collect();
    if let Some(keys) = numeric {
        let mut idx: Vec<usize> = (0..ordered.len()).collect();
        idx.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
        ordered = idx.into_iter().map(|k| ordered[k].clone()).collect();
    }
    ordered
}

fn parse_err(row: usize, message: String) -> Error {
    Error::Parse {
        module: Module::PanelData,
        row,
        message,
    }
}

fn parse_real(s: &str, line: usize, column: &str) -> Result<f64> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(parse_err(line, format!("column '{column}': '{s}' is not a finite number"))),
    }
}

fn parse_level(s: &str, line: usize) -> Result<Level> {
    if let Ok(v) = s.parse::<Level>() {
        return Ok(v);
    }
    match s.parse::<f64>() {
        Ok(v) if v.fract() == 0.0 && v.abs() < 9.0e15 => Ok(v as Level),
        _ => Err(parse_err(line, format!("treatment '{s}' is not an integer level"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> CsvSchema {
        CsvSchema::default()
    }

    #[test]
    fn minimal_balanced_panel() {
        let data = "unit,period,outcome,treatment\na,1,1.0,0\na,2,2.0,1\nb,1,3.0,0\nb,2,4.5,0\n";
        let ds = read_csv(data.as_bytes(), &schema()).unwrap();
        assert_eq!((ds.n_units(), ds.n_periods()), (2, 2));
        assert_eq!(ds.outcome(1, 1), 4.5);
        assert_eq!(ds.treatment(0, 1), 1);
        assert_eq!(ds.unit_labels(), ["a", "b"]);
    }

    #[test]
    fn missing_cell_is_reported() {
        let data = "unit,period,outcome,treatment\na,1,1.0,0\na,2,2.0,1\nb,1,3.0,0\n";
        match read_csv(data.as_bytes(), &schema()) {
            Err(Error::Unbalanced { missing }) => {
                assert_eq!(missing, vec![("b".to_string(), "2".to_string())]);
            }
            other => panic!("expected unbalanced error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_outcome_reports_row() {
        let data = "unit,period,outcome,treatment\na,1,1.0,0\na,2,abc,1\n";
        match read_csv(data.as_bytes(), &schema()) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn declared_support_is_enforced() {
        let data = "unit,period,outcome,treatment\na,1,1.0,0\na,2,2.0,2\n";
        let s = CsvSchema {
            support: Some(vec![0, 1]),
            ..schema()
        };
        assert!(matches!(read_csv(data.as_bytes(), &s), Err(Error::Domain { .. })));
    }

    #[test]
    fn numeric_labels_sort_numerically() {
        let data = "unit,period,outcome,treatment\n10,2000,1,0\n2,2000,2,0\n10,1996,3,0\n2,1996,4,0\n";
        let ds = read_csv(data.as_bytes(), &schema()).unwrap();
        assert_eq!(ds.unit_labels(), ["2", "10"]);
        assert_eq!(ds.period_labels(), ["1996", "2000"]);
        assert_eq!(ds.outcome(0, 0), 4.0);
    }

    #[test]
    fn text_labels_keep_first_appearance() {
        let data = "unit,period,outcome,treatment\nzeta,b,1,0\nalpha,b,2,0\nzeta,a,3,0\nalpha,a,4,0\n";
        let ds = read_csv(data.as_bytes(), &schema()).unwrap();
        assert_eq!(ds.unit_labels(), ["zeta", "alpha"]);
        assert_eq!(ds.period_labels(), ["b", "a"]);
    }

    #[test]
    fn duplicate_rows_rejected() {
        let data = "unit,period,outcome,treatment\na,1,1,0\na,1,2,0\n";
        assert!(matches!(read_csv(data.as_bytes(), &schema()), Err(Error::Parse { row: 3, .. })));
    }

    #[test]
    fn covariates_are_loaded() {
        let data = "unit,period,outcome,treatment,c\na,1,1,0,0.5\na,2,2,1,1.5\n";
        let s = CsvSchema {
            covariates: vec!["c".into()],
            ..schema()
        };
        let ds = read_csv(data.as_bytes(), &s).unwrap();
        assert_eq!(ds.covariates().unwrap().at(0, 1), vec![1.5]);
    }

    #[test]
    fn edr_shaped_layout() {
        let mut data = String::from("state,year,turnout,edr\n");
        for i in 0..47 {
            for t in 0..24 {
                let year = 1920 + 4 * t;
                let treated = i < 9 && year >= 1976;
                data.push_str(&format!("s{i},{year},{},{}\n", 0.5 + 0.001 * (i + t) as f64, treated as i32));
            }
        }
        let s = CsvSchema {
            unit: "state".into(),
            period: "year".into(),
            outcome: "turnout".into(),
            treatment: "edr".into(),
            covariates: vec![],
            support: Some(vec![0, 1]),
        };
        let ds = read_csv(data.as_bytes(), &s).unwrap();
        assert_eq!((ds.n_units(), ds.n_periods()), (47, 24));
        assert!(ds.is_binary());
    }

    #[test]
    fn masks_on_all_treated_panel() {
        let ds = PanelDataset::new(
            DMatrix::from_element(3, 4, 1.0),
            DMatrix::from_element(3, 4, 1),
            vec![0, 1],
            None,
            (0..3).map(|i| i.to_string()).collect(),
            (0..4).map(|i| i.to_string()).collect(),
        )
        .unwrap();
        assert_eq!(ds.mask(1).unwrap().count(), 12);
        assert!(ds.mask(1).unwrap().is_full());
        assert_eq!(ds.mask(0).unwrap().count(), 0);
        assert!(matches!(ds.mask(2), Err(Error::Domain { .. })));
    }

    #[test]
    fn wide_tables_load() {
        let y = "unit,1,2\na,1.0,2.0\nb,3.0,4.0\n";
        let x = "unit,1,2\na,0,1\nb,0,0\n";
        let ds = read_wide(y.as_bytes(), x.as_bytes(), None).unwrap();
        assert_eq!(ds.outcome(1, 0), 3.0);
        assert_eq!(ds.treatment(0, 1), 1);
        assert_eq!(ds.support(), [0, 1]);
    }

    #[test]
    fn mask_cells_iterate_column_major() {
        let m = DMatrix::from_row_slice(2, 2, &[true, false, true, true]);
        let mask = TreatmentMask::new(0, m);
        assert_eq!(mask.count(), 3);
        assert_eq!(mask.cells().collect::<Vec<_>>(), vec![(0, 0), (1, 0), (1, 1)]);
    }
}
