//! Cross-fitted debiased estimation with cluster-robust inference.
//!
//! For each fold, nuisance functions are fitted on out-of-fold units only:
//! standardization statistics, the differenced-outcome regression, and the
//! Riesz representer of the derivative functional. In-fold observations are
//! then scored as
//! `deriv'beta + (delta_b'rho) * (delta_y - delta_b'beta)`,
//! the derivative of the fitted regression plus a representer-weighted
//! residual correction. The point estimate is the weighted mean score; its
//! variance treats scores as correlated within a panel unit and independent
//! across units.
//!
//! Baselines reuse the same scaffolding. The plug-in Lasso drops the
//! correction term entirely (its understated uncertainty is part of what
//! the corrected estimator fixes). The OLS variants replace the Lasso
//! with weighted least squares on the linear or polynomial dictionary and
//! score with the least-squares delta-method correction — the unpenalized
//! representer `Q^-1 M` — so their clustered variances reflect
//! coefficient noise.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dictionary::{fit_standardization, Dictionary, DictionarySpec};
use crate::error::{Error, Result};
use crate::panel::{assign_folds, FoldAssignment, PanelDataset};
use crate::solvers::{
    l1_quadratic_descent, ols_fit, riesz_fit_iterative, QuadraticForm, RieszProblem, SolverResult,
};

/// Report schema version written into serialized estimates.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Estimation methods. `Dml` and `DmlIterative` differ only in the Riesz
/// solver (exact coordinate descent vs fixed-budget proximal gradient);
/// `LassoPlugIn` averages the regression derivative without a correction;
/// the OLS variants replace the Lasso with least squares on the linear or
/// polynomial dictionary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Dml,
    DmlIterative,
    LassoPlugIn,
    OlsLinear,
    OlsPoly,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Dml,
        Method::DmlIterative,
        Method::LassoPlugIn,
        Method::OlsLinear,
        Method::OlsPoly,
    ];

    /// Display name used in tables and reports.
    pub fn name(&self) -> &'static str {
        match self {
            Method::Dml => "DML",
            Method::DmlIterative => "DML Iterative",
            Method::LassoPlugIn => "Lasso",
            Method::OlsLinear => "OLS Linear",
            Method::OlsPoly => "OLS Poly",
        }
    }

    fn uses_lasso(&self) -> bool {
        matches!(self, Method::Dml | Method::DmlIterative | Method::LassoPlugIn)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "dml" => Ok(Method::Dml),
            "dmliterative" => Ok(Method::DmlIterative),
            "lasso" | "lassoplugin" => Ok(Method::LassoPlugIn),
            "olslinear" => Ok(Method::OlsLinear),
            "olspoly" => Ok(Method::OlsPoly),
            _ => Err(Error::config(format!(
                "unknown method `{s}` (expected DML, DMLIterative, Lasso, OLSLinear, OLSPoly)"
            ))),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Descending geometric penalty grid from `hi` to `lo`.
pub fn geometric_grid(hi: f64, lo: f64, count: usize) -> Vec<f64> {
    assert!(hi > 0.0 && lo > 0.0 && hi >= lo && count >= 1);
    if count == 1 {
        return vec![hi];
    }
    let ratio = (lo / hi).powf(1.0 / (count as f64 - 1.0));
    (0..count).map(|k| hi * ratio.powi(k as i32)).collect()
}

/// Configuration shared by estimation, tuning, and the Monte Carlo harness.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub method: Method,
    /// Cross-fitting fold count `L`.
    pub n_folds: usize,
    /// Candidate penalties for the regression Lasso (descending preferred).
    pub r_l_grid: Vec<f64>,
    /// Candidate penalties for the Riesz representer.
    pub r_alpha_grid: Vec<f64>,
    /// Seed for the unit shuffle behind fold assignment.
    pub seed: u64,
    /// Honor observation weights (otherwise every weight is 1).
    pub use_weights: bool,
    pub confidence_level: f64,
    /// Step budget of the iterative Riesz solver.
    pub iterative_budget: usize,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            method: Method::Dml,
            n_folds: 5,
            r_l_grid: geometric_grid(2.0, 0.02, 10),
            // The held-out representer loss is nearly flat close to its
            // minimum while the representer variance keeps growing as the
            // penalty shrinks; the grid floor keeps the selection out of
            // that region.
            r_alpha_grid: geometric_grid(5.0, 0.3, 8),
            seed: 0,
            use_weights: true,
            confidence_level: 0.95,
            iterative_budget: 400,
            solver_tol: 1e-8,
            solver_max_iter: 10_000,
        }
    }
}

impl EstimatorConfig {
    fn validate(&self) -> Result<()> {
        if self.n_folds < 2 {
            return Err(Error::config("fold count must be >= 2"));
        }
        if self.r_l_grid.is_empty() || self.r_alpha_grid.is_empty() {
            return Err(Error::config("penalty grids must be non-empty"));
        }
        if self
            .r_l_grid
            .iter()
            .chain(self.r_alpha_grid.iter())
            .any(|r| !r.is_finite() || *r < 0.0)
        {
            return Err(Error::config("penalties must be finite and >= 0"));
        }
        if !(self.confidence_level > 0.0 && self.confidence_level < 1.0) {
            return Err(Error::config("confidence level must lie in (0, 1)"));
        }
        if self.iterative_budget < 1 {
            return Err(Error::config("iterative budget must be >= 1"));
        }
        Ok(())
    }
}

/// Per-observation scores keyed by (unit, time), with weights normalized
/// to mean 1 so their weighted mean is the point estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreTable {
    unit: Vec<u32>,
    time: Vec<i64>,
    scores: Vec<f64>,
    weights: Vec<f64>,
}

impl ScoreTable {
    /// Assemble a table; weights are normalized to mean 1 here.
    pub fn new(unit: Vec<u32>, time: Vec<i64>, scores: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let m = scores.len();
        if m == 0 {
            return Err(Error::data("score table is empty"));
        }
        if unit.len() != m || time.len() != m || weights.len() != m {
            return Err(Error::data("score table fields have mismatched lengths"));
        }
        let mean_w = weights.iter().sum::<f64>() / m as f64;
        if !(mean_w > 0.0) {
            return Err(Error::data("score weights must have positive mean"));
        }
        let weights = weights.iter().map(|w| w / mean_w).collect();
        Ok(ScoreTable { unit, time, scores, weights })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn unit(&self) -> &[u32] {
        &self.unit
    }

    pub fn time(&self) -> &[i64] {
        &self.time
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weighted mean score (the point estimate).
    pub fn tau_hat(&self) -> f64 {
        self.scores
            .iter()
            .zip(self.weights.iter())
            .map(|(&s, &w)| w * s)
            .sum::<f64>()
            / self.len() as f64
    }

    /// Weighted per-observation contributions grouped by unit, in row order.
    fn unit_groups(&self) -> Vec<(u32, Vec<f64>)> {
        let mut groups: Vec<(u32, Vec<f64>)> = Vec::new();
        for i in 0..self.len() {
            let contribution = self.weights[i] * self.scores[i];
            match groups.last_mut() {
                Some((u, values)) if *u == self.unit[i] => values.push(contribution),
                _ => groups.push((self.unit[i], vec![contribution])),
            }
        }
        groups
    }

    /// Cluster-sandwich standard error of the mean score: unit totals are
    /// independent across units, so
    /// `se^2 = sum_i (s_i - m_i tau)^2 / m^2` with `s_i` the unit's summed
    /// weighted scores and `m_i` its row count. Coincides with
    /// `sqrt(V / m)` for the single-row-per-unit case (two periods).
    pub fn cluster_se(&self, tau_hat: f64) -> f64 {
        let m = self.len() as f64;
        let total: f64 = self
            .unit_groups()
            .iter()
            .map(|(_, values)| {
                let s: f64 = values.iter().sum();
                let dev = s - values.len() as f64 * tau_hat;
                dev * dev
            })
            .sum();
        total.sqrt() / m
    }
}

/// Cluster-robust variance of the mean score.
///
/// `V = (1/m) sum_i { sum_t (u_it - tau)^2
///                    + 2 sum_{t<t'} (u_it - u_i)(u_it' - u_i) }`
/// over weighted scores `u_it`, with `u_i` the unit mean and `m` the
/// realized differenced-row count. Returns the variance and whether a
/// negative value (possible from the cross terms) was clamped to zero.
pub fn clustered_variance(scores: &ScoreTable, tau_hat: f64) -> (f64, bool) {
    let mut total = 0.0;
    for (_, values) in scores.unit_groups() {
        let unit_mean = values.iter().sum::<f64>() / values.len() as f64;
        let squares: f64 = values.iter().map(|&u| (u - tau_hat) * (u - tau_hat)).sum();
        // Deviations from the unit mean sum to zero, so the pairwise cross
        // terms collapse: 2 * sum_{t<t'} v_t v_t' = -sum_t v_t^2.
        let centered_squares: f64 =
            values.iter().map(|&u| (u - unit_mean) * (u - unit_mean)).sum();
        total += squares - centered_squares;
    }
    let v = total / scores.len() as f64;
    if v < 0.0 {
        (0.0, true)
    } else {
        (v, false)
    }
}

/// Full output of one estimation run.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub schema_version: u32,
    pub method: Method,
    pub tau_hat: f64,
    /// Cluster-robust variance `V` of the score.
    pub variance: f64,
    /// Cluster-sandwich standard error over unit totals; equals
    /// `sqrt(V / m)` when every unit contributes one differenced row.
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub confidence_level: f64,
    pub mse_gamma_in_sample: f64,
    pub mse_gamma_cross_folds: f64,
    pub selected_r_l: Option<f64>,
    pub selected_r_alpha: Option<f64>,
    /// Nonzero regression coefficients per fold.
    pub nonzero_beta: Vec<usize>,
    /// Nonzero representer coefficients per fold (empty without a
    /// correction term).
    pub nonzero_rho: Vec<usize>,
    /// Differenced rows scored.
    pub n_obs: usize,
    pub n_units: usize,
    /// Dictionary size.
    pub p: usize,
    pub warnings: Vec<String>,
    pub scores: ScoreTable,
}

impl EstimateReport {
    /// Numeric fields paired with another report, for invariance checks.
    pub fn comparable_fields(&self, other: &EstimateReport) -> Vec<(&'static str, f64, f64)> {
        vec![
            ("tau_hat", self.tau_hat, other.tau_hat),
            ("variance", self.variance, other.variance),
            ("se", self.se, other.se),
            ("ci_lower", self.ci_lower, other.ci_lower),
            ("ci_upper", self.ci_upper, other.ci_upper),
            ("mse_gamma_in_sample", self.mse_gamma_in_sample, other.mse_gamma_in_sample),
            (
                "mse_gamma_cross_folds",
                self.mse_gamma_cross_folds,
                other.mse_gamma_cross_folds,
            ),
        ]
    }
}

/// One grid candidate evaluated during tuning.
#[derive(Debug, Clone, Serialize)]
pub struct GridPoint {
    pub penalty: f64,
    /// Held-out loss summed over folds, normalized by total weight.
    pub loss: f64,
    /// Whether every fold fit converged at this penalty.
    pub converged: bool,
}

/// Outcome of hyperparameter tuning.
#[derive(Debug, Clone, Serialize)]
pub struct TuneReport {
    pub r_l: f64,
    pub r_alpha: f64,
    pub gamma_grid: Vec<GridPoint>,
    pub alpha_grid: Vec<GridPoint>,
}

/// Pairwise difference test between two estimates on the same data.
#[derive(Debug, Clone, Serialize)]
pub struct MethodComparison {
    pub method_a: Method,
    pub method_b: Method,
    pub difference: f64,
    pub se: f64,
    pub z: f64,
    pub p_value: f64,
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

fn normal_quantile(q: f64) -> f64 {
    standard_normal().inverse_cdf(q)
}

fn two_sided_p_value(z: f64) -> f64 {
    if z.is_infinite() {
        return 0.0;
    }
    2.0 * (1.0 - standard_normal().cdf(z.abs()))
}

// ---------------------------------------------------------------------------
// Prepared per-fold data shared by tuning and estimation.
// ---------------------------------------------------------------------------

/// Fold-level matrices in the fold's own standardization.
struct FoldBlock {
    /// Global differenced-row indices of the held-out fold.
    test_rows: Vec<usize>,
    train_x: DMatrix<f64>,
    train_y: DVector<f64>,
    /// Training weights normalized to mean 1 within the fold.
    train_w: DVector<f64>,
    test_x: DMatrix<f64>,
    test_deriv: DMatrix<f64>,
    test_y: DVector<f64>,
    /// Lasso Gram moments of the training block. The Gram matrix is also
    /// the Riesz second-moment matrix: both average `x x'` over training
    /// rows.
    gram: QuadraticForm,
    /// Training mean of standardized derivative rows (Riesz linear term).
    m_hat: DVector<f64>,
    /// Held-out Riesz moments for the tuning loss.
    test_m_hat: DVector<f64>,
    test_q: DMatrix<f64>,
    /// Sum of globally normalized weights over the held-out rows.
    test_weight_sum: f64,
}

/// Differenced data prepared for one dictionary: per-fold standardized
/// blocks plus global row labels.
struct Prepared {
    p: usize,
    folds: Vec<FoldBlock>,
    row_unit: Vec<u32>,
    row_time: Vec<i64>,
    /// Globally normalized (mean 1) differenced-row weights.
    row_w: Vec<f64>,
}

impl Prepared {
    fn build(
        dataset: &PanelDataset,
        dict: &Dictionary,
        folds: &FoldAssignment,
        use_weights: bool,
    ) -> Result<Self> {
        let n_obs = dataset.n_obs();
        let p = dict.len();
        let m = dataset.n_differenced_rows();

        // Raw features for every observation row, raw differences and
        // derivative rows for every differenced row.
        let mut features = DMatrix::zeros(n_obs, p);
        for obs in 0..n_obs {
            features.set_row(obs, &dict.eval_row(&dataset.raw_vars(obs))?.transpose());
        }
        let mut raw_delta = DMatrix::zeros(m, p);
        let mut raw_deriv = DMatrix::zeros(m, p);
        let mut delta_y = DVector::zeros(m);
        let mut row_unit = Vec::with_capacity(m);
        let mut row_time = Vec::with_capacity(m);
        let mut row_fold = Vec::with_capacity(m);
        let mut row_w = Vec::with_capacity(m);
        let mut obs_unit = vec![0u32; n_obs];
        let mut row = 0usize;
        for u in 0..dataset.n_units() {
            let range = dataset.unit_range(u);
            for obs in range.clone() {
                obs_unit[obs] = u as u32;
            }
            for obs in range.start + 1..range.end {
                let diff = features.row(obs) - features.row(obs - 1);
                raw_delta.set_row(row, &diff);
                raw_deriv.set_row(
                    row,
                    &dict.eval_row_derivative(&dataset.raw_vars(obs))?.transpose(),
                );
                delta_y[row] = dataset.outcome(obs) - dataset.outcome(obs - 1);
                row_unit.push(u as u32);
                row_time.push(dataset.time(obs));
                row_fold.push(folds.fold_of(u));
                row_w.push(if use_weights { dataset.weight(obs) } else { 1.0 });
                row += 1;
            }
        }
        let w_mean = row_w.iter().sum::<f64>() / m as f64;
        for w in &mut row_w {
            *w /= w_mean;
        }

        let mut blocks = Vec::with_capacity(folds.n_folds());
        for l in 0..folds.n_folds() as u32 {
            blocks.push(Self::build_fold(
                dataset, folds, l, &features, &obs_unit, &raw_delta, &raw_deriv, &delta_y,
                &row_fold, &row_w, use_weights,
            )?);
        }
        Ok(Prepared { p, folds: blocks, row_unit, row_time, row_w })
    }

    #[allow(clippy::too_many_arguments)]
    fn build_fold(
        dataset: &PanelDataset,
        folds: &FoldAssignment,
        l: u32,
        features: &DMatrix<f64>,
        obs_unit: &[u32],
        raw_delta: &DMatrix<f64>,
        raw_deriv: &DMatrix<f64>,
        delta_y: &DVector<f64>,
        row_fold: &[u32],
        row_w: &[f64],
        use_weights: bool,
    ) -> Result<FoldBlock> {
        let p = raw_delta.ncols();
        // Standardization from the observation rows of out-of-fold units.
        let train_obs: Vec<usize> = (0..dataset.n_obs())
            .filter(|&obs| folds.fold_of(obs_unit[obs] as usize) != l)
            .collect();
        if train_obs.is_empty() {
            return Err(Error::config(format!("fold {l} has no training observations")));
        }
        let mut train_features = DMatrix::zeros(train_obs.len(), p);
        for (k, &obs) in train_obs.iter().enumerate() {
            train_features.set_row(k, &features.row(obs));
        }
        let stats_weights = use_weights
            .then(|| DVector::from_fn(train_obs.len(), |k, _| dataset.weight(train_obs[k])));
        let stats = fit_standardization(&train_features, stats_weights.as_ref())?;

        let scale = DVector::from_fn(p, |j, _| {
            if stats.active()[j] { 1.0 / stats.sds()[j] } else { 0.0 }
        });

        let m = raw_delta.nrows();
        let train_rows: Vec<usize> = (0..m).filter(|&i| row_fold[i] != l).collect();
        let test_rows: Vec<usize> = (0..m).filter(|&i| row_fold[i] == l).collect();
        if train_rows.is_empty() || test_rows.is_empty() {
            return Err(Error::config(format!("fold {l} is degenerate (no rows)")));
        }

        let scaled = |rows: &[usize], source: &DMatrix<f64>| {
            let mut out = DMatrix::zeros(rows.len(), p);
            for (k, &r) in rows.iter().enumerate() {
                for j in 0..p {
                    out[(k, j)] = source[(r, j)] * scale[j];
                }
            }
            out
        };
        let train_x = scaled(&train_rows, raw_delta);
        let train_deriv = scaled(&train_rows, raw_deriv);
        let test_x = scaled(&test_rows, raw_delta);
        let test_deriv = scaled(&test_rows, raw_deriv);
        let train_y = DVector::from_fn(train_rows.len(), |k, _| delta_y[train_rows[k]]);
        let test_y = DVector::from_fn(test_rows.len(), |k, _| delta_y[test_rows[k]]);

        // Training weights renormalized to mean 1 within the fold.
        let train_w_raw = DVector::from_fn(train_rows.len(), |k, _| row_w[train_rows[k]]);
        let train_w = &train_w_raw / (train_w_raw.sum() / train_rows.len() as f64);

        let gram = QuadraticForm::from_weighted_ls(&train_x, &train_y, &train_w);
        let mt = train_rows.len() as f64;
        let m_hat = train_deriv.transpose() * DVector::from_fn(train_rows.len(), |k, _| train_w[k] / mt);

        // Held-out moments, normalized within the fold.
        let test_w_raw = DVector::from_fn(test_rows.len(), |k, _| row_w[test_rows[k]]);
        let test_weight_sum = test_w_raw.sum();
        let test_w = &test_w_raw / (test_weight_sum / test_rows.len() as f64);
        let mv = test_rows.len() as f64;
        let test_m_hat =
            test_deriv.transpose() * DVector::from_fn(test_rows.len(), |k, _| test_w[k] / mv);
        let mut wx = test_x.clone();
        for (k, mut r) in wx.row_iter_mut().enumerate() {
            r *= test_w[k] / mv;
        }
        let test_q = test_x.transpose() * wx;

        Ok(FoldBlock {
            test_rows,
            train_x,
            train_y,
            train_w,
            test_x,
            test_deriv,
            test_y,
            gram,
            m_hat,
            test_m_hat,
            test_q,
            test_weight_sum,
        })
    }

    fn total_weight(&self) -> f64 {
        self.row_w.iter().sum()
    }
}

// ---------------------------------------------------------------------------
// Tuning.
// ---------------------------------------------------------------------------

/// Held-out squared-error losses for each Lasso penalty candidate.
fn gamma_grid_losses(prepared: &Prepared, cfg: &EstimatorConfig) -> Vec<GridPoint> {
    let mut candidates: Vec<f64> = cfg.r_l_grid.clone();
    candidates.sort_by(|a, b| b.partial_cmp(a).unwrap());
    candidates.dedup();
    let mut points: Vec<GridPoint> = candidates
        .iter()
        .map(|&penalty| GridPoint { penalty, loss: 0.0, converged: true })
        .collect();
    for block in &prepared.folds {
        let mut warm: Option<DVector<f64>> = None;
        for point in points.iter_mut() {
            let fit = match l1_quadratic_descent(
                &block.gram,
                point.penalty,
                cfg.solver_tol,
                cfg.solver_max_iter,
                warm.as_ref(),
            ) {
                Ok(fit) => fit,
                Err(_) => {
                    point.converged = false;
                    continue;
                }
            };
            point.converged &= fit.converged;
            let residual = &block.test_y - &block.test_x * &fit.coefficients;
            // Held-out SSE with globally normalized weights.
            let sse: f64 = residual
                .iter()
                .enumerate()
                .map(|(k, &r)| prepared.row_w[block.test_rows[k]] * r * r)
                .sum();
            point.loss += sse;
            warm = Some(fit.coefficients);
        }
    }
    let total_w = prepared.total_weight();
    for point in points.iter_mut() {
        point.loss /= total_w;
    }
    points
}

/// Held-out Riesz losses for each representer penalty candidate.
fn alpha_grid_losses(
    prepared: &Prepared,
    cfg: &EstimatorConfig,
    iterative: bool,
) -> Vec<GridPoint> {
    let mut candidates: Vec<f64> = cfg.r_alpha_grid.clone();
    candidates.sort_by(|a, b| b.partial_cmp(a).unwrap());
    candidates.dedup();
    let mut points: Vec<GridPoint> = candidates
        .iter()
        .map(|&penalty| GridPoint { penalty, loss: 0.0, converged: true })
        .collect();
    for block in &prepared.folds {
        let mut warm: Option<DVector<f64>> = None;
        for point in points.iter_mut() {
            let fit = match fit_riesz(block, point.penalty, cfg, iterative, warm.as_ref()) {
                Ok(fit) => fit,
                Err(_) => {
                    point.converged = false;
                    continue;
                }
            };
            point.converged &= fit.converged;
            let rho = &fit.coefficients;
            let quad = -2.0 * block.test_m_hat.dot(rho) + rho.dot(&(&block.test_q * rho));
            point.loss += block.test_weight_sum * quad;
            warm = Some(fit.coefficients);
        }
    }
    let total_w = prepared.total_weight();
    for point in points.iter_mut() {
        point.loss /= total_w;
    }
    points
}

/// Smallest loss wins; ties break toward the larger penalty. Candidates
/// that failed to converge on some fold are skipped unless all failed.
fn select_from_grid(points: &[GridPoint], label: &str) -> Result<f64> {
    let mut best: Option<&GridPoint> = None;
    for point in points.iter().filter(|p| p.converged) {
        let better = match best {
            None => true,
            // Grids are evaluated in descending penalty order, so a strict
            // improvement is required to move to a smaller penalty.
            Some(current) => point.loss < current.loss,
        };
        if better {
            best = Some(point);
        }
    }
    match best {
        Some(point) => Ok(point.penalty),
        None => Err(Error::Tuning(format!(
            "no {label} candidate converged on every fold"
        ))),
    }
}

fn fit_riesz(
    block: &FoldBlock,
    penalty: f64,
    cfg: &EstimatorConfig,
    iterative: bool,
    warm: Option<&DVector<f64>>,
) -> Result<SolverResult> {
    if iterative {
        let problem =
            RieszProblem::new(block.m_hat.clone(), block.gram.g.clone(), penalty)?;
        riesz_fit_iterative(&problem, cfg.iterative_budget)
    } else {
        let q = QuadraticForm { g: block.gram.g.clone(), c: block.m_hat.clone(), c0: 0.0 };
        l1_quadratic_descent(&q, penalty, cfg.solver_tol, cfg.solver_max_iter, warm)
    }
}

/// Select `(r_l, r_alpha)` by held-out loss over the configured grids.
///
/// The regression loss is the held-out weighted squared error; the
/// representer loss is the held-out quadratic form of the representer
/// objective. Fold assignment matches [`estimate`] at the same seed, and
/// the representer candidates are fitted with the solver implied by
/// `cfg.method` (iterative for `DmlIterative`, exact otherwise).
pub fn tune(
    dataset: &PanelDataset,
    dict_spec: DictionarySpec,
    cfg: &EstimatorConfig,
) -> Result<TuneReport> {
    cfg.validate()?;
    let folds = assign_folds(dataset, cfg.n_folds, cfg.seed)?;
    let dict = Dictionary::build(dict_spec, dataset.n_covariates())?;
    let prepared = Prepared::build(dataset, &dict, &folds, cfg.use_weights)?;
    let gamma_grid = gamma_grid_losses(&prepared, cfg);
    let alpha_grid = alpha_grid_losses(&prepared, cfg, cfg.method == Method::DmlIterative);
    // A singleton grid is a pass-through; the search applies otherwise.
    let r_l = if cfg.r_l_grid.len() == 1 {
        cfg.r_l_grid[0]
    } else {
        select_from_grid(&gamma_grid, "lasso penalty")?
    };
    let r_alpha = if cfg.r_alpha_grid.len() == 1 {
        cfg.r_alpha_grid[0]
    } else {
        select_from_grid(&alpha_grid, "riesz penalty")?
    };
    Ok(TuneReport { r_l, r_alpha, gamma_grid, alpha_grid })
}

// ---------------------------------------------------------------------------
// Estimation.
// ---------------------------------------------------------------------------

struct FoldFit {
    beta: DVector<f64>,
    rho: Option<DVector<f64>>,
    beta_converged: bool,
    rho_converged: bool,
    nonzero_beta: usize,
    nonzero_rho: usize,
    dropped_columns: usize,
}

fn count_nonzero(v: &DVector<f64>) -> usize {
    v.iter().filter(|&&x| x != 0.0).count()
}

/// Estimate the average derivative with one method.
pub fn estimate(
    dataset: &PanelDataset,
    dict_spec: DictionarySpec,
    cfg: &EstimatorConfig,
) -> Result<EstimateReport> {
    let mut reports = estimate_all(dataset, dict_spec, cfg, &[cfg.method])?;
    Ok(reports.pop().expect("one report per method"))
}

/// Estimate with several methods on the identical dataset and folds.
///
/// Shared work (dictionary evaluation, per-fold standardization, Gram
/// moments, the Lasso fits reused by `Dml`, `DmlIterative`, and
/// `LassoPlugIn`) is computed once; reports are returned in `methods`
/// order and match what per-method [`estimate`] calls would produce.
pub fn estimate_all(
    dataset: &PanelDataset,
    dict_spec: DictionarySpec,
    cfg: &EstimatorConfig,
    methods: &[Method],
) -> Result<Vec<EstimateReport>> {
    cfg.validate()?;
    if methods.is_empty() {
        return Err(Error::config("no methods requested"));
    }
    let mut seen = std::collections::HashSet::new();
    if !methods.iter().all(|m| seen.insert(*m)) {
        return Err(Error::config("duplicate methods requested"));
    }

    let folds = assign_folds(dataset, cfg.n_folds, cfg.seed)?;
    let h = dataset.n_covariates();

    let needs_poly = methods.iter().any(|m| *m != Method::OlsLinear);
    let needs_linear = methods.contains(&Method::OlsLinear);
    let poly_dict = Dictionary::build(dict_spec, h)?;
    let linear_dict = Dictionary::build(DictionarySpec::linear(), h)?;
    let poly = if needs_poly {
        Some(Prepared::build(dataset, &poly_dict, &folds, cfg.use_weights)?)
    } else {
        None
    };
    let linear = if needs_linear {
        Some(Prepared::build(dataset, &linear_dict, &folds, cfg.use_weights)?)
    } else {
        None
    };

    // Hyperparameters: tuned once on the full prepared data, shared by
    // every method that consumes them. Singleton grids skip the search.
    let needs_lasso = methods.iter().any(Method::uses_lasso);
    let r_l = if needs_lasso {
        let prepared = poly.as_ref().expect("lasso methods use the polynomial dictionary");
        Some(if cfg.r_l_grid.len() == 1 {
            cfg.r_l_grid[0]
        } else {
            select_from_grid(&gamma_grid_losses(prepared, cfg), "lasso penalty")?
        })
    } else {
        None
    };
    let tune_alpha = |iterative: bool| -> Result<f64> {
        let prepared = poly.as_ref().expect("riesz methods use the polynomial dictionary");
        if cfg.r_alpha_grid.len() == 1 {
            Ok(cfg.r_alpha_grid[0])
        } else {
            select_from_grid(&alpha_grid_losses(prepared, cfg, iterative), "riesz penalty")
        }
    };
    let r_alpha_exact = if methods.contains(&Method::Dml) { Some(tune_alpha(false)?) } else { None };
    let r_alpha_iter =
        if methods.contains(&Method::DmlIterative) { Some(tune_alpha(true)?) } else { None };

    // Shared Lasso fits per fold.
    let lasso_fits: Option<Vec<SolverResult>> = if needs_lasso {
        let prepared = poly.as_ref().unwrap();
        let penalty = r_l.unwrap();
        Some(
            prepared
                .folds
                .iter()
                .map(|block| {
                    l1_quadratic_descent(
                        &block.gram,
                        penalty,
                        cfg.solver_tol,
                        cfg.solver_max_iter,
                        None,
                    )
                })
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };

    let mut reports = Vec::with_capacity(methods.len());
    for &method in methods {
        let prepared = match method {
            Method::OlsLinear => linear.as_ref().unwrap(),
            _ => poly.as_ref().unwrap(),
        };
        let mut fold_fits = Vec::with_capacity(prepared.folds.len());
        for (l, block) in prepared.folds.iter().enumerate() {
            let fit = match method {
                Method::Dml | Method::DmlIterative => {
                    let lasso = &lasso_fits.as_ref().unwrap()[l];
                    let penalty = if method == Method::Dml {
                        r_alpha_exact.unwrap()
                    } else {
                        r_alpha_iter.unwrap()
                    };
                    let riesz =
                        fit_riesz(block, penalty, cfg, method == Method::DmlIterative, None)?;
                    FoldFit {
                        nonzero_beta: count_nonzero(&lasso.coefficients),
                        nonzero_rho: count_nonzero(&riesz.coefficients),
                        beta: lasso.coefficients.clone(),
                        rho: Some(riesz.coefficients),
                        beta_converged: lasso.converged,
                        rho_converged: riesz.converged,
                        dropped_columns: 0,
                    }
                }
                Method::LassoPlugIn => {
                    let lasso = &lasso_fits.as_ref().unwrap()[l];
                    FoldFit {
                        nonzero_beta: count_nonzero(&lasso.coefficients),
                        nonzero_rho: 0,
                        beta: lasso.coefficients.clone(),
                        rho: None,
                        beta_converged: lasso.converged,
                        rho_converged: true,
                        dropped_columns: 0,
                    }
                }
                Method::OlsLinear | Method::OlsPoly => {
                    let ols = ols_fit(&block.train_x, &block.train_y, Some(&block.train_w))?;
                    // Least squares implies the unpenalized representer
                    // Q^-1 M; carrying it in the score completes the
                    // delta-method influence function, so the clustered
                    // variance reflects coefficient noise too. A singular
                    // Gram (dropped columns) falls back to the raw plug-in
                    // score, which the dropped-columns warning flags.
                    let rho = block
                        .gram
                        .g
                        .clone()
                        .cholesky()
                        .map(|chol| chol.solve(&block.m_hat));
                    FoldFit {
                        nonzero_beta: count_nonzero(&ols.coefficients),
                        nonzero_rho: rho.as_ref().map_or(0, count_nonzero),
                        beta: ols.coefficients,
                        rho,
                        beta_converged: true,
                        rho_converged: true,
                        dropped_columns: ols.dropped.len(),
                    }
                }
            };
            fold_fits.push(fit);
        }

        let report = assemble_report(
            method,
            prepared,
            &fold_fits,
            dataset,
            cfg,
            match method {
                Method::Dml => r_alpha_exact,
                Method::DmlIterative => r_alpha_iter,
                _ => None,
            },
            if method.uses_lasso() { r_l } else { None },
        )?;
        reports.push(report);
    }
    Ok(reports)
}

#[allow(clippy::too_many_arguments)]
fn assemble_report(
    method: Method,
    prepared: &Prepared,
    fold_fits: &[FoldFit],
    dataset: &PanelDataset,
    cfg: &EstimatorConfig,
    selected_r_alpha: Option<f64>,
    selected_r_l: Option<f64>,
) -> Result<EstimateReport> {
    let m = prepared.row_w.len();
    let mut scores = vec![0.0f64; m];
    let mut mse_in_num = 0.0;
    let mut mse_in_den = 0.0;
    let mut mse_out_num = 0.0;
    let mut warnings = Vec::new();

    for (l, (block, fit)) in prepared.folds.iter().zip(fold_fits).enumerate() {
        let gamma_test = &block.test_x * &fit.beta;
        let deriv_test = &block.test_deriv * &fit.beta;
        let correction: Option<DVector<f64>> = fit.rho.as_ref().map(|rho| {
            let alpha = &block.test_x * rho;
            let residual = &block.test_y - &gamma_test;
            alpha.component_mul(&residual)
        });
        for (k, &row) in block.test_rows.iter().enumerate() {
            let mut s = deriv_test[k];
            if let Some(corr) = &correction {
                s += corr[k];
            }
            scores[row] = s;
            let err = block.test_y[k] - gamma_test[k];
            mse_out_num += prepared.row_w[row] * err * err;
        }
        // In-sample regression error over the training block.
        let gamma_train = &block.train_x * &fit.beta;
        for k in 0..block.train_y.len() {
            let err = block.train_y[k] - gamma_train[k];
            mse_in_num += block.train_w[k] * err * err;
            mse_in_den += block.train_w[k];
        }

        if !fit.beta_converged {
            warnings.push(format!("fold {l}: regression solver did not converge"));
        }
        if !fit.rho_converged {
            warnings.push(format!("fold {l}: representer solver did not converge"));
        }
        if fit.dropped_columns > 0 {
            warnings.push(format!(
                "fold {l}: {} linearly dependent columns dropped",
                fit.dropped_columns
            ));
        }
    }

    let table = ScoreTable::new(
        prepared.row_unit.clone(),
        prepared.row_time.clone(),
        scores,
        prepared.row_w.clone(),
    )?;
    let tau_hat = table.tau_hat();
    let (variance, clamped) = clustered_variance(&table, tau_hat);
    if clamped {
        warnings.push("negative cluster variance clamped to zero".to_string());
    }
    // Inference scales by independent unit totals; for two-period panels
    // this equals sqrt(variance / m).
    let se = table.cluster_se(tau_hat);
    let z = normal_quantile(0.5 + cfg.confidence_level / 2.0);

    Ok(EstimateReport {
        schema_version: REPORT_SCHEMA_VERSION,
        method,
        tau_hat,
        variance,
        se,
        ci_lower: tau_hat - z * se,
        ci_upper: tau_hat + z * se,
        confidence_level: cfg.confidence_level,
        mse_gamma_in_sample: mse_in_num / mse_in_den,
        mse_gamma_cross_folds: mse_out_num / prepared.total_weight(),
        selected_r_l,
        selected_r_alpha,
        nonzero_beta: fold_fits.iter().map(|f| f.nonzero_beta).collect(),
        nonzero_rho: fold_fits.iter().map(|f| f.nonzero_rho).collect(),
        n_obs: m,
        n_units: dataset.n_units(),
        p: prepared.p,
        warnings,
        scores: table,
    })
}

/// Pairwise z-tests on estimate differences.
///
/// For each report pair the per-observation score difference feeds the same
/// cluster-robust variance formula as the estimates themselves; the z
/// statistic is the difference of point estimates over its standard error.
pub fn compare(reports: &[EstimateReport]) -> Result<Vec<MethodComparison>> {
    if reports.len() < 2 {
        return Err(Error::config("comparison needs at least two reports"));
    }
    let base = &reports[0].scores;
    for report in &reports[1..] {
        let s = &report.scores;
        if s.unit() != base.unit() || s.time() != base.time() || s.weights() != base.weights() {
            return Err(Error::data(
                "reports cover different observation sets; cannot compare",
            ));
        }
    }
    let mut out = Vec::new();
    for i in 0..reports.len() {
        for j in i + 1..reports.len() {
            let (a, b) = (&reports[i], &reports[j]);
            let diff_scores: Vec<f64> = a
                .scores
                .scores()
                .iter()
                .zip(b.scores.scores())
                .map(|(&sa, &sb)| sa - sb)
                .collect();
            let table = ScoreTable::new(
                base.unit().to_vec(),
                base.time().to_vec(),
                diff_scores,
                base.weights().to_vec(),
            )?;
            let difference = table.tau_hat();
            let se = table.cluster_se(difference);
            let z = if se > 0.0 {
                difference / se
            } else if difference == 0.0 {
                0.0
            } else {
                f64::INFINITY * difference.signum()
            };
            out.push(MethodComparison {
                method_a: a.method,
                method_b: b.method,
                difference,
                se,
                z,
                p_value: two_sided_p_value(z),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::Observation;
    use approx::assert_relative_eq;
    use rand::RngExt;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn obs(unit: &str, time: i64, y: f64, d: f64, x: &[f64]) -> Observation {
        Observation { unit: unit.to_string(), time, y, d, x: x.to_vec(), weight: 1.0 }
    }

    /// Noiseless linear panel: y = a_i + 2 d, with d and x varying.
    fn linear_panel(n_units: usize, n_periods: usize) -> PanelDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut rows = Vec::new();
        for u in 0..n_units {
            let a: f64 = rng.random_range(-1.0..1.0);
            for t in 0..n_periods {
                let d: f64 = rng.random_range(-1.0..1.0);
                let x: f64 = rng.random_range(-1.0..1.0);
                rows.push(obs(&format!("u{u:03}"), t as i64, a + 2.0 * d, d, &[x]));
            }
        }
        PanelDataset::from_observations(rows).unwrap()
    }

    fn tiny_grid_config(method: Method) -> EstimatorConfig {
        EstimatorConfig {
            method,
            n_folds: 2,
            r_l_grid: vec![1e-9],
            r_alpha_grid: vec![1e-9],
            seed: 5,
            ..EstimatorConfig::default()
        }
    }

    #[test]
    fn noiseless_linear_recovery_for_every_method() {
        let ds = linear_panel(40, 2);
        for method in Method::ALL {
            let report = estimate(&ds, DictionarySpec::default(), &tiny_grid_config(method))
                .unwrap_or_else(|e| panic!("{method}: {e}"));
            assert!(
                (report.tau_hat - 2.0).abs() < 1e-6,
                "{method}: tau {}",
                report.tau_hat
            );
        }
    }

    #[test]
    fn weighted_mean_of_scores_equals_tau_hat() {
        let ds = linear_panel(40, 2);
        let report = estimate(&ds, DictionarySpec::default(), &tiny_grid_config(Method::Dml))
            .unwrap();
        let table = &report.scores;
        let mean: f64 = table
            .scores()
            .iter()
            .zip(table.weights())
            .map(|(&s, &w)| w * s)
            .sum::<f64>()
            / table.len() as f64;
        assert_relative_eq!(mean, report.tau_hat, epsilon = 1e-12);
        // One differenced row per unit: the sandwich reduces to V / m.
        assert_relative_eq!(report.se, (report.variance / table.len() as f64).sqrt());
        assert!(report.ci_lower <= report.tau_hat && report.tau_hat <= report.ci_upper);
    }

    #[test]
    fn multi_period_se_sums_unit_totals() {
        let table = ScoreTable::new(
            vec![0, 0, 0, 1, 1, 1, 2, 2, 2],
            vec![2, 3, 4, 2, 3, 4, 2, 3, 4],
            vec![1.0, 2.0, 1.5, -0.5, 0.5, 0.0, 3.0, 1.0, 2.0],
            vec![1.0; 9],
        )
        .unwrap();
        let tau = table.tau_hat();
        let m = table.len() as f64;
        // Independent recomputation over unit totals.
        let mut expected = 0.0;
        for unit in [&[1.0, 2.0, 1.5][..], &[-0.5, 0.5, 0.0][..], &[3.0, 1.0, 2.0][..]] {
            let dev = unit.iter().sum::<f64>() - unit.len() as f64 * tau;
            expected += dev * dev;
        }
        let se = table.cluster_se(tau);
        assert_relative_eq!(se, expected.sqrt() / m, epsilon = 1e-14);
        // With several rows per unit the raw V/m scaling understates the
        // dispersion of unit totals.
        let (v, _) = clustered_variance(&table, tau);
        assert!(se > (v / m).sqrt());
    }

    #[test]
    fn clustered_variance_matches_hand_computation() {
        // Three units, two differenced rows each.
        let table = ScoreTable::new(
            vec![0, 0, 1, 1, 2, 2],
            vec![2, 3, 2, 3, 2, 3],
            vec![1.0, 2.0, -0.5, 0.5, 3.0, 1.0],
            vec![1.0; 6],
        )
        .unwrap();
        let tau = table.tau_hat();
        assert_relative_eq!(tau, 7.0 / 6.0);

        // Independent spreadsheet-style evaluation with explicit loops.
        let units: Vec<Vec<f64>> = vec![vec![1.0, 2.0], vec![-0.5, 0.5], vec![3.0, 1.0]];
        let mut expected = 0.0;
        for unit in &units {
            let unit_mean = unit.iter().sum::<f64>() / unit.len() as f64;
            for &s in unit {
                expected += (s - tau) * (s - tau);
            }
            for t in 0..unit.len() {
                for t2 in t + 1..unit.len() {
                    expected += 2.0 * (unit[t] - unit_mean) * (unit[t2] - unit_mean);
                }
            }
        }
        expected /= 6.0;
        let (v, clamped) = clustered_variance(&table, tau);
        assert!(!clamped);
        assert_relative_eq!(v, expected, epsilon = 1e-14);
    }

    #[test]
    fn variance_with_one_row_per_unit_is_mean_squared_deviation() {
        let table = ScoreTable::new(
            vec![0, 1, 2, 3],
            vec![2; 4],
            vec![1.0, 3.0, -1.0, 0.5],
            vec![1.0; 4],
        )
        .unwrap();
        let tau = table.tau_hat();
        let (v, _) = clustered_variance(&table, tau);
        let expected: f64 = table
            .scores()
            .iter()
            .map(|&s| (s - tau) * (s - tau))
            .sum::<f64>()
            / 4.0;
        assert_relative_eq!(v, expected, epsilon = 1e-14);
    }

    #[test]
    fn identical_scores_have_zero_variance() {
        let table = ScoreTable::new(
            vec![0, 0, 1, 1],
            vec![2, 3, 2, 3],
            vec![1.5; 4],
            vec![1.0; 4],
        )
        .unwrap();
        let (v, clamped) = clustered_variance(&table, 1.5);
        assert_eq!(v, 0.0);
        assert!(!clamped);
    }

    #[test]
    fn estimate_matches_straight_line_recomputation() {
        // Two folds, linear dictionary, singleton penalties: recompute the
        // whole pipeline directly from the fold blocks and solver calls.
        let ds = linear_panel(12, 2);
        let cfg = tiny_grid_config(Method::Dml);
        let report = estimate(&ds, DictionarySpec::linear(), &cfg).unwrap();

        let folds = assign_folds(&ds, cfg.n_folds, cfg.seed).unwrap();
        let dict = Dictionary::build(DictionarySpec::linear(), 1).unwrap();
        let prepared = Prepared::build(&ds, &dict, &folds, true).unwrap();
        let mut scores = vec![0.0; ds.n_differenced_rows()];
        for block in &prepared.folds {
            let beta = l1_quadratic_descent(&block.gram, 1e-9, 1e-8, 10_000, None)
                .unwrap()
                .coefficients;
            let rho_problem =
                RieszProblem::new(block.m_hat.clone(), block.gram.g.clone(), 1e-9).unwrap();
            let rho = crate::solvers::riesz_fit_exact(&rho_problem, 1e-8, 10_000)
                .unwrap()
                .coefficients;
            for (k, &row) in block.test_rows.iter().enumerate() {
                let gamma = block.test_x.row(k).transpose().dot(&beta);
                let deriv = block.test_deriv.row(k).transpose().dot(&beta);
                let alpha = block.test_x.row(k).transpose().dot(&rho);
                scores[row] = deriv + alpha * (block.test_y[k] - gamma);
            }
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        assert_relative_eq!(report.tau_hat, mean, epsilon = 1e-10);
    }

    #[test]
    fn estimate_and_estimate_all_agree() {
        let ds = linear_panel(20, 2);
        let cfg = tiny_grid_config(Method::Dml);
        let joint = estimate_all(
            &ds,
            DictionarySpec::default(),
            &cfg,
            &[Method::Dml, Method::LassoPlugIn, Method::OlsPoly],
        )
        .unwrap();
        for report in &joint {
            let single = estimate(
                &ds,
                DictionarySpec::default(),
                &EstimatorConfig { method: report.method, ..cfg.clone() },
            )
            .unwrap();
            assert_eq!(report.tau_hat, single.tau_hat, "{}", report.method);
            assert_eq!(report.se, single.se);
            assert_eq!(report.mse_gamma_cross_folds, single.mse_gamma_cross_folds);
        }
    }

    #[test]
    fn fixed_effects_leave_reports_unchanged() {
        let ds = linear_panel(24, 3);
        let cfg = tiny_grid_config(Method::Dml);
        let base = estimate(&ds, DictionarySpec::default(), &cfg).unwrap();

        let mut rows = ds.to_observations();
        for row in &mut rows {
            let shift: f64 = row.unit.bytes().map(|b| (b as f64) * 0.77).sum();
            row.y += shift;
        }
        let shifted_ds = PanelDataset::from_observations(rows).unwrap();
        let shifted = estimate(&shifted_ds, DictionarySpec::default(), &cfg).unwrap();

        assert_relative_eq!(base.tau_hat, shifted.tau_hat, epsilon = 1e-10);
        assert_relative_eq!(base.se, shifted.se, epsilon = 1e-10);
        assert_relative_eq!(base.variance, shifted.variance, epsilon = 1e-10);
        assert_relative_eq!(
            base.mse_gamma_cross_folds,
            shifted.mse_gamma_cross_folds,
            epsilon = 1e-10
        );
    }

    #[test]
    fn weight_scaling_leaves_estimate_unchanged() {
        let mut rows = linear_panel(20, 2).to_observations();
        for (i, row) in rows.iter_mut().enumerate() {
            row.weight = 0.5 + (i % 3) as f64;
        }
        let ds = PanelDataset::from_observations(rows.clone()).unwrap();
        for row in &mut rows {
            row.weight *= 9.25;
        }
        let scaled = PanelDataset::from_observations(rows).unwrap();
        let cfg = tiny_grid_config(Method::Dml);
        let a = estimate(&ds, DictionarySpec::default(), &cfg).unwrap();
        let b = estimate(&scaled, DictionarySpec::default(), &cfg).unwrap();
        assert_relative_eq!(a.tau_hat, b.tau_hat, epsilon = 1e-12);
        assert_relative_eq!(a.se, b.se, epsilon = 1e-12);
    }

    #[test]
    fn singleton_grids_pass_through_tuning() {
        let ds = linear_panel(60, 2);
        let cfg = EstimatorConfig {
            r_l_grid: vec![0.37],
            r_alpha_grid: vec![0.21],
            n_folds: 2,
            seed: 3,
            ..EstimatorConfig::default()
        };
        let report = tune(&ds, DictionarySpec::default(), &cfg).unwrap();
        assert_eq!(report.r_l, 0.37);
        assert_eq!(report.r_alpha, 0.21);
    }

    #[test]
    fn tuning_selects_grid_minimum_with_ties_toward_larger_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut rows = Vec::new();
        for u in 0..60 {
            let a: f64 = rng.random_range(-1.0..1.0);
            for t in 0..2 {
                let d: f64 = rng.random_range(-1.0..1.0);
                let x: f64 = rng.random_range(-1.0..1.0);
                let noise: f64 = rng.random_range(-0.5..0.5);
                rows.push(obs(&format!("u{u:03}"), t, a + 2.0 * d + 0.5 * x + noise, d, &[x]));
            }
        }
        let ds = PanelDataset::from_observations(rows).unwrap();
        let cfg = EstimatorConfig { n_folds: 3, ..EstimatorConfig::default() };
        let report = tune(&ds, DictionarySpec::default(), &cfg).unwrap();
        let best_gamma = report
            .gamma_grid
            .iter()
            .filter(|p| p.converged)
            .fold(f64::INFINITY, |acc, p| acc.min(p.loss));
        let chosen = report
            .gamma_grid
            .iter()
            .find(|p| p.penalty == report.r_l)
            .unwrap();
        assert_eq!(chosen.loss, best_gamma);
        // No strictly-larger penalty attains the same loss.
        for point in report.gamma_grid.iter().filter(|p| p.converged) {
            if point.penalty > report.r_l {
                assert!(point.loss > best_gamma);
            }
        }
    }

    /// Unpenalized regression on the full expanded dictionary overfits, so
    /// held-out tuning must select a strictly positive penalty when zero
    /// is on the grid.
    #[test]
    fn tuning_rejects_zero_penalty_on_overfit_prone_data() {
        let dgp = crate::simulation::DgpConfig {
            n_units: 240,
            n_periods: 2,
            n_covariates: 6,
            seed: 27,
        };
        let ds = crate::simulation::generate_dataset(&dgp).unwrap();
        let cfg = EstimatorConfig {
            n_folds: 2,
            r_l_grid: vec![0.0, 0.05, 0.2],
            r_alpha_grid: vec![1.0],
            seed: 31,
            solver_tol: 1e-6,
            solver_max_iter: 50_000,
            ..EstimatorConfig::default()
        };
        let report = tune(&ds, DictionarySpec::default(), &cfg).unwrap();
        assert!(report.r_l > 0.0, "selected r_l {}", report.r_l);
        let at = |r: f64| {
            report
                .gamma_grid
                .iter()
                .find(|p| p.penalty == r)
                .expect("grid point present")
        };
        assert!(at(0.0).loss > at(report.r_l).loss);
    }

    #[test]
    fn compare_rejects_mismatched_observation_sets() {
        let cfg = tiny_grid_config(Method::Dml);
        let a = estimate(&linear_panel(20, 2), DictionarySpec::default(), &cfg).unwrap();
        let b = estimate(&linear_panel(22, 2), DictionarySpec::default(), &cfg).unwrap();
        assert!(matches!(compare(&[a, b]), Err(Error::Data(_))));
    }

    #[test]
    fn compare_identical_reports_gives_p_one() {
        let ds = linear_panel(20, 2);
        let cfg = tiny_grid_config(Method::Dml);
        let a = estimate(&ds, DictionarySpec::default(), &cfg).unwrap();
        let b = a.clone();
        let result = compare(&[a, b]).unwrap();
        assert_eq!(result.len(), 1);
        assert_eq!(result[0].z, 0.0);
        assert_eq!(result[0].p_value, 1.0);
    }

    #[test]
    fn compare_is_antisymmetric_and_matches_direct_computation() {
        let ds = linear_panel(25, 2);
        let cfg = tiny_grid_config(Method::Dml);
        let reports = estimate_all(
            &ds,
            DictionarySpec::default(),
            &cfg,
            &[Method::Dml, Method::OlsLinear],
        )
        .unwrap();
        let forward = compare(&reports).unwrap();
        let backward = compare(&[reports[1].clone(), reports[0].clone()]).unwrap();
        assert_relative_eq!(forward[0].z, -backward[0].z, epsilon = 1e-12);
        assert_relative_eq!(forward[0].p_value, backward[0].p_value, epsilon = 1e-12);

        // Direct recomputation from the score difference.
        let diff: Vec<f64> = reports[0]
            .scores
            .scores()
            .iter()
            .zip(reports[1].scores.scores())
            .map(|(&x, &y)| x - y)
            .collect();
        let table = ScoreTable::new(
            reports[0].scores.unit().to_vec(),
            reports[0].scores.time().to_vec(),
            diff,
            reports[0].scores.weights().to_vec(),
        )
        .unwrap();
        let d = table.tau_hat();
        let (v, _) = clustered_variance(&table, d);
        let se = (v / table.len() as f64).sqrt();
        assert_relative_eq!(forward[0].difference, d, epsilon = 1e-12);
        assert_relative_eq!(forward[0].se, se, epsilon = 1e-12);
    }

    /// With the outcome function inside the dictionary span, the corrected
    /// score is exactly orthogonal to regression shrinkage: the plug-in
    /// Lasso stays biased while the correction removes that bias up to
    /// Monte Carlo noise.
    #[test]
    fn correction_removes_shrinkage_bias_in_span() {
        let n_units = 400;
        let trials = 300;
        let theta = (1.2, 0.7);
        let true_tau_at = |d: f64| theta.0 + 2.0 * theta.1 * d;

        let mut dml_err = Vec::with_capacity(trials);
        let mut lasso_err = Vec::with_capacity(trials);
        for trial in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial as u64);
            let mut rows = Vec::new();
            let mut true_tau = 0.0;
            for u in 0..n_units {
                let a: f64 = rng.random_range(-1.0..1.0);
                for t in 0..2 {
                    let d: f64 = rng.random_range(-1.0..1.0);
                    let x: f64 = rng.random_range(-1.0..1.0);
                    let noise: f64 = rng.random_range(-1.0..1.0);
                    let y = a + theta.0 * d + theta.1 * d * d + noise;
                    true_tau += true_tau_at(d);
                    rows.push(obs(&format!("u{u:04}"), t, y, d, &[x]));
                }
            }
            true_tau /= (2 * n_units) as f64;
            let ds = PanelDataset::from_observations(rows).unwrap();
            let cfg = EstimatorConfig {
                n_folds: 2,
                // A deliberately heavy regression penalty and a near-zero
                // representer penalty.
                r_l_grid: vec![0.3],
                r_alpha_grid: vec![1e-6],
                seed: 7 + trial as u64,
                ..EstimatorConfig::default()
            };
            let spec = DictionarySpec { max_degree: 2, ..DictionarySpec::default() };
            let reports =
                estimate_all(&ds, spec, &cfg, &[Method::Dml, Method::LassoPlugIn]).unwrap();
            dml_err.push(reports[0].tau_hat - true_tau);
            lasso_err.push(reports[1].tau_hat - true_tau);
        }

        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let mcse = |v: &[f64]| {
            let m = mean(v);
            (v.iter().map(|e| (e - m) * (e - m)).sum::<f64>()
                / (v.len() as f64 - 1.0)
                / v.len() as f64)
                .sqrt()
        };
        let (dml_bias, dml_se) = (mean(&dml_err), mcse(&dml_err));
        let (lasso_bias, lasso_se) = (mean(&lasso_err), mcse(&lasso_err));
        assert!(
            dml_bias.abs() < 4.0 * dml_se,
            "debiased estimator keeps bias {dml_bias:+.4} (mcse {dml_se:.4})"
        );
        assert!(
            lasso_bias.abs() > 6.0 * lasso_se,
            "plug-in should be visibly shrunk, got {lasso_bias:+.4} (mcse {lasso_se:.4})"
        );
        assert!(dml_bias.abs() < lasso_bias.abs() / 3.0);
    }

    #[test]
    fn method_parsing_round_trips() {
        for method in Method::ALL {
            assert_eq!(method.name().parse::<Method>().unwrap(), method);
        }
        assert_eq!("dml-iterative".parse::<Method>().unwrap(), Method::DmlIterative);
        assert!("mystery".parse::<Method>().is_err());
    }
}

