//! Panel data model, CSV ingestion, first-differencing, and fold assignment.
//!
//! Observations are long-format `(unit, time, y, d, x*, weight)` rows kept
//! sorted by `(unit, time)`. First-differencing happens after the basis
//! transformation: for each unit and each consecutive observation pair the
//! design carries the difference of standardized basis rows, the
//! standardized treatment-derivative row at the later period, and the
//! outcome difference. Cross-fitting folds are assigned to whole units so
//! within-unit dependence never crosses a fold boundary.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dictionary::{Dictionary, StandardizationStats};
use crate::error::{Error, Result};

/// One long-format panel row.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub unit: String,
    pub time: i64,
    pub y: f64,
    pub d: f64,
    pub x: Vec<f64>,
    pub weight: f64,
}

/// A validated panel: observations sorted by `(unit, time)`, at least two
/// periods per unit, constant covariate dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    units: Vec<String>,
    unit_starts: Vec<usize>,
    times: Vec<i64>,
    y: Vec<f64>,
    d: Vec<f64>,
    x: Vec<f64>,
    weights: Vec<f64>,
    h: usize,
}

impl PanelDataset {
    /// Build a dataset from unsorted observation rows.
    pub fn from_observations(mut rows: Vec<Observation>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::data("panel has no observations"));
        }
        let h = rows[0].x.len();
        for row in &rows {
            if row.x.len() != h {
                return Err(Error::data(format!(
                    "unit {} time {} has {} covariates, expected {h}",
                    row.unit,
                    row.time,
                    row.x.len()
                )));
            }
            let finite = row.y.is_finite()
                && row.d.is_finite()
                && row.x.iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::data(format!(
                    "non-finite value at unit {} time {}",
                    row.unit, row.time
                )));
            }
            if !row.weight.is_finite() || row.weight <= 0.0 {
                return Err(Error::data(format!(
                    "weight must be positive and finite at unit {} time {}",
                    row.unit, row.time
                )));
            }
        }
        rows.sort_by(|a, b| (&a.unit, a.time).cmp(&(&b.unit, b.time)));
        for pair in rows.windows(2) {
            if pair[0].unit == pair[1].unit && pair[0].time == pair[1].time {
                return Err(Error::data(format!(
                    "duplicate observation for unit {} at time {}",
                    pair[0].unit, pair[0].time
                )));
            }
        }

        let n_obs = rows.len();
        let mut units = Vec::new();
        let mut unit_starts = vec![0usize];
        for (i, row) in rows.iter().enumerate() {
            if units.last() != Some(&row.unit) {
                units.push(row.unit.clone());
                if i > 0 {
                    unit_starts.push(i);
                }
            }
        }
        unit_starts.push(n_obs);
        for (u, w) in unit_starts.windows(2).enumerate() {
            if w[1] - w[0] < 2 {
                return Err(Error::data(format!(
                    "unit {} has a single observation; panels need at least 2 periods per unit",
                    units[u]
                )));
            }
        }

        let mut ds = PanelDataset {
            units,
            unit_starts,
            times: Vec::with_capacity(n_obs),
            y: Vec::with_capacity(n_obs),
            d: Vec::with_capacity(n_obs),
            x: Vec::with_capacity(n_obs * h),
            weights: Vec::with_capacity(n_obs),
            h,
        };
        for row in rows {
            ds.times.push(row.time);
            ds.y.push(row.y);
            ds.d.push(row.d);
            ds.x.extend_from_slice(&row.x);
            ds.weights.push(row.weight);
        }
        Ok(ds)
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn n_obs(&self) -> usize {
        self.times.len()
    }

    /// Covariate dimension `h`.
    pub fn n_covariates(&self) -> usize {
        self.h
    }

    /// Total differenced rows, `sum_i (T_i - 1)`.
    pub fn n_differenced_rows(&self) -> usize {
        self.n_obs() - self.n_units()
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.units
    }

    /// Observation index range of unit `u`.
    pub fn unit_range(&self, u: usize) -> Range<usize> {
        self.unit_starts[u]..self.unit_starts[u + 1]
    }

    pub fn time(&self, obs: usize) -> i64 {
        self.times[obs]
    }

    pub fn outcome(&self, obs: usize) -> f64 {
        self.y[obs]
    }

    pub fn treatment(&self, obs: usize) -> f64 {
        self.d[obs]
    }

    pub fn covariates(&self, obs: usize) -> &[f64] {
        &self.x[obs * self.h..(obs + 1) * self.h]
    }

    pub fn weight(&self, obs: usize) -> f64 {
        self.weights[obs]
    }

    /// Raw variable row `[d, x1, .., xh]` consumed by dictionaries.
    pub fn raw_vars(&self, obs: usize) -> Vec<f64> {
        let mut row = Vec::with_capacity(1 + self.h);
        row.push(self.d[obs]);
        row.extend_from_slice(self.covariates(obs));
        row
    }

    /// Sorted distinct observation times.
    pub fn distinct_times(&self) -> Vec<i64> {
        let mut times: Vec<i64> = self.times.clone();
        times.sort_unstable();
        times.dedup();
        times
    }

    /// Rebuild the observation rows (sorted order).
    pub fn to_observations(&self) -> Vec<Observation> {
        (0..self.n_units())
            .flat_map(|u| {
                self.unit_range(u).map(move |obs| Observation {
                    unit: self.units[u].clone(),
                    time: self.times[obs],
                    y: self.y[obs],
                    d: self.d[obs],
                    x: self.covariates(obs).to_vec(),
                    weight: self.weights[obs],
                })
            })
            .collect()
    }

    /// Write the panel as CSV with the default schema
    /// (`unit,time,y,d,x1..xh,weight`), deterministic row order.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut header = String::from("unit,time,y,d");
        for j in 1..=self.h {
            header.push_str(&format!(",x{j}"));
        }
        header.push_str(",weight");
        writeln!(file, "{header}")?;
        for u in 0..self.n_units() {
            for obs in self.unit_range(u) {
                let mut line = format!(
                    "{},{},{},{}",
                    self.units[u], self.times[obs], self.y[obs], self.d[obs]
                );
                for v in self.covariates(obs) {
                    line.push_str(&format!(",{v}"));
                }
                line.push_str(&format!(",{}", self.weights[obs]));
                writeln!(file, "{line}")?;
            }
        }
        Ok(())
    }
}

/// Column-name mapping for CSV ingestion.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    pub unit: String,
    pub time: String,
    pub y: String,
    pub d: String,
    /// Covariate columns in order; `None` auto-detects headers `x1..xh`.
    pub x: Option<Vec<String>>,
    /// Weight column; `None` uses a `weight` header when present, else 1.
    pub weight: Option<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            unit: "unit".to_string(),
            time: "time".to_string(),
            y: "y".to_string(),
            d: "d".to_string(),
            x: None,
            weight: None,
        }
    }
}

/// Load a long-format panel CSV.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<PanelDataset> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::data(format!("bad CSV header: {e}")))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();

    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|hdr| hdr == name)
            .ok_or_else(|| Error::data(format!("missing column `{name}` in {}", path.display())))
    };
    let unit_idx = find(&schema.unit)?;
    let time_idx = find(&schema.time)?;
    let y_idx = find(&schema.y)?;
    let d_idx = find(&schema.d)?;
    let x_idx: Vec<usize> = match &schema.x {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        None => {
            // Auto-detect `x<k>` headers ordered by their numeric suffix.
            let mut numbered: Vec<(u32, usize)> = headers
                .iter()
                .enumerate()
                .filter_map(|(i, hdr)| {
                    hdr.strip_prefix('x')
                        .and_then(|suffix| suffix.parse::<u32>().ok())
                        .map(|k| (k, i))
                })
                .collect();
            numbered.sort_unstable();
            if numbered.is_empty() {
                return Err(Error::data(format!(
                    "missing covariate columns `x1..` in {}",
                    path.display()
                )));
            }
            numbered.into_iter().map(|(_, i)| i).collect()
        }
    };
    let weight_idx = match &schema.weight {
        Some(name) => Some(find(name)?),
        None => headers.iter().position(|hdr| hdr == "weight"),
    };

    let parse = |field: &str, column: &str, line: usize| -> Result<f64> {
        field.trim().parse::<f64>().map_err(|_| {
            Error::data(format!(
                "non-numeric value `{field}` in column `{column}` at data row {line}"
            ))
        })
    };

    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::data(format!("bad CSV record: {e}")))?;
        let get = |idx: usize| record.get(idx).unwrap_or("").to_string();
        let time: i64 = get(time_idx).trim().parse().map_err(|_| {
            Error::data(format!(
                "non-numeric value `{}` in column `{}` at data row {line}",
                get(time_idx),
                schema.time
            ))
        })?;
        let x = x_idx
            .iter()
            .map(|&i| parse(&get(i), &headers[i], line))
            .collect::<Result<Vec<f64>>>()?;
        let weight = match weight_idx {
            Some(i) => parse(&get(i), &headers[i], line)?,
            None => 1.0,
        };
        rows.push(Observation {
            unit: get(unit_idx).trim().to_string(),
            time,
            y: parse(&get(y_idx), &schema.y, line)?,
            d: parse(&get(d_idx), &schema.d, line)?,
            x,
            weight,
        });
    }
    PanelDataset::from_observations(rows)
}

/// Unit-integral fold labels for cross-fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldAssignment {
    n_folds: usize,
    seed: u64,
    fold_of_unit: Vec<u32>,
}

impl FoldAssignment {
    pub fn n_folds(&self) -> usize {
        self.n_folds
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fold_of(&self, unit: usize) -> u32 {
        self.fold_of_unit[unit]
    }

    pub fn n_assigned_units(&self) -> usize {
        self.fold_of_unit.len()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_folds];
        for &f in &self.fold_of_unit {
            sizes[f as usize] += 1;
        }
        sizes
    }
}

/// Shuffle units with a seeded generator and deal them round-robin into
/// `l` folds; all observations of a unit share its fold.
pub fn assign_folds(dataset: &PanelDataset, l: usize, seed: u64) -> Result<FoldAssignment> {
    if l < 2 {
        return Err(Error::config(format!("fold count must be >= 2, got {l}")));
    }
    if l > dataset.n_units() {
        return Err(Error::config(format!(
            "fold count {l} exceeds {} units",
            dataset.n_units()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.n_units()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut fold_of_unit = vec![0u32; dataset.n_units()];
    for (i, &unit) in order.iter().enumerate() {
        fold_of_unit[unit] = (i % l) as u32;
    }
    Ok(FoldAssignment { n_folds: l, seed, fold_of_unit })
}

/// First-differenced design: one row per (unit, consecutive period pair).
///
/// `delta_b` holds differences of standardized basis rows, `deriv` the
/// standardized treatment-derivative row at the later period. Inactive
/// dictionary columns are zeroed so they can never enter a fit.
#[derive(Debug, Clone)]
pub struct DifferencedDesign {
    delta_b: DMatrix<f64>,
    deriv: DMatrix<f64>,
    delta_y: DVector<f64>,
    weights: DVector<f64>,
    unit: Vec<u32>,
    time: Vec<i64>,
    fold: Vec<u32>,
    active: Vec<bool>,
}

impl DifferencedDesign {
    pub fn n_rows(&self) -> usize {
        self.delta_y.len()
    }

    pub fn p(&self) -> usize {
        self.delta_b.ncols()
    }

    pub fn delta_b(&self) -> &DMatrix<f64> {
        &self.delta_b
    }

    pub fn deriv(&self) -> &DMatrix<f64> {
        &self.deriv
    }

    pub fn delta_y(&self) -> &DVector<f64> {
        &self.delta_y
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn unit(&self) -> &[u32] {
        &self.unit
    }

    pub fn time(&self) -> &[i64] {
        &self.time
    }

    pub fn fold(&self) -> &[u32] {
        &self.fold
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    /// Row indices belonging to fold `l`.
    pub fn fold_rows(&self, l: u32) -> Vec<usize> {
        (0..self.n_rows()).filter(|&i| self.fold[i] == l).collect()
    }

    /// Row indices outside fold `l` (the training set for fold `l`).
    pub fn non_fold_rows(&self, l: u32) -> Vec<usize> {
        (0..self.n_rows()).filter(|&i| self.fold[i] != l).collect()
    }

    /// Copy out `(delta_b, deriv, delta_y, weights)` for a row subset.
    pub fn select(
        &self,
        rows: &[usize],
    ) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let p = self.p();
        let mut delta_b = DMatrix::zeros(rows.len(), p);
        let mut deriv = DMatrix::zeros(rows.len(), p);
        let mut delta_y = DVector::zeros(rows.len());
        let mut weights = DVector::zeros(rows.len());
        for (k, &r) in rows.iter().enumerate() {
            delta_b.set_row(k, &self.delta_b.row(r));
            deriv.set_row(k, &self.deriv.row(r));
            delta_y[k] = self.delta_y[r];
            weights[k] = self.weights[r];
        }
        (delta_b, deriv, delta_y, weights)
    }
}

/// Build the differenced design with one shared set of standardization
/// statistics. Row order: units in dataset order, periods ascending.
pub fn build_differenced_design(
    dataset: &PanelDataset,
    dict: &Dictionary,
    stats: &StandardizationStats,
    folds: &FoldAssignment,
) -> Result<DifferencedDesign> {
    if stats.len() != dict.len() {
        return Err(Error::data(format!(
            "standardization has {} columns, dictionary has {}",
            stats.len(),
            dict.len()
        )));
    }
    if folds.n_assigned_units() != dataset.n_units() {
        return Err(Error::data("fold assignment does not match dataset units"));
    }
    let p = dict.len();
    let m = dataset.n_differenced_rows();
    let mut design = DifferencedDesign {
        delta_b: DMatrix::zeros(m, p),
        deriv: DMatrix::zeros(m, p),
        delta_y: DVector::zeros(m),
        weights: DVector::zeros(m),
        unit: Vec::with_capacity(m),
        time: Vec::with_capacity(m),
        fold: Vec::with_capacity(m),
        active: stats.active().to_vec(),
    };
    let mut row = 0usize;
    for u in 0..dataset.n_units() {
        let range = dataset.unit_range(u);
        let mut prev = dict.eval_row(&dataset.raw_vars(range.start))?;
        for obs in range.start + 1..range.end {
            let cur = dict.eval_row(&dataset.raw_vars(obs))?;
            let deriv = dict.eval_row_derivative(&dataset.raw_vars(obs))?;
            for j in 0..p {
                if stats.active()[j] {
                    // The fitted mean cancels in the difference.
                    design.delta_b[(row, j)] = (cur[j] - prev[j]) / stats.sds()[j];
                    design.deriv[(row, j)] = deriv[j] / stats.sds()[j];
                }
            }
            design.delta_y[row] = dataset.outcome(obs) - dataset.outcome(obs - 1);
            design.weights[row] = dataset.weight(obs);
            design.unit.push(u as u32);
            design.time.push(dataset.time(obs));
            design.fold.push(folds.fold_of(u));
            prev = cur;
            row += 1;
        }
    }
    debug_assert_eq!(row, m);
    Ok(design)
}

/// Split a panel into consecutive-time sub-panels of `width` periods.
///
/// Window starts follow the sorted distinct times of the panel; a unit
/// enters a window only when it has observations at every window time.
/// Windows with no complete unit are omitted. A panel spanning fewer than
/// `width` periods yields no windows.
pub fn rolling_windows(dataset: &PanelDataset, width: usize) -> Result<Vec<PanelDataset>> {
    if width < 2 {
        return Err(Error::config(format!("window width must be >= 2, got {width}")));
    }
    let times = dataset.distinct_times();
    if times.len() < width {
        return Ok(Vec::new());
    }
    // Per unit: time -> observation index.
    let unit_times: Vec<BTreeMap<i64, usize>> = (0..dataset.n_units())
        .map(|u| {
            dataset
                .unit_range(u)
                .map(|obs| (dataset.time(obs), obs))
                .collect()
        })
        .collect();

    let mut windows = Vec::new();
    for start in 0..=times.len() - width {
        let span = &times[start..start + width];
        let mut rows = Vec::new();
        for (u, lookup) in unit_times.iter().enumerate() {
            let obs: Option<Vec<usize>> = span.iter().map(|t| lookup.get(t).copied()).collect();
            if let Some(obs) = obs {
                for o in obs {
                    rows.push(Observation {
                        unit: dataset.units[u].clone(),
                        time: dataset.time(o),
                        y: dataset.outcome(o),
                        d: dataset.treatment(o),
                        x: dataset.covariates(o).to_vec(),
                        weight: dataset.weight(o),
                    });
                }
            }
        }
        if !rows.is_empty() {
            windows.push(PanelDataset::from_observations(rows)?);
        }
    }
    Ok(windows)
}
