//! Polynomial basis dictionaries with analytical treatment derivatives.
//!
//! A dictionary maps the raw variable vector `[d, x1, .., xh]` (treatment
//! first, covariates after) to a `p`-vector of monomial features. Terms are
//! powers of single variables plus pairwise products, with the treatment
//! derivative of every term available in closed form. Standardization
//! statistics (per-column mean and SD) are fitted once on a training sample
//! and reused to scale features and derivatives consistently.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Columns whose sample SD falls below this are treated as constant and
/// excluded from standardization and regression.
pub const SD_TOLERANCE: f64 = 1e-12;

/// A monomial over raw variables: a product of `var^power` factors.
///
/// Factors are stored sorted by variable index with powers >= 1; an empty
/// factor list is the intercept.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BasisTerm {
    exponents: Vec<(usize, u32)>,
}

impl BasisTerm {
    /// The constant term.
    pub fn intercept() -> Self {
        BasisTerm { exponents: Vec::new() }
    }

    /// Build a term from `(variable, power)` factors.
    ///
    /// Factors are canonicalized (sorted by variable, duplicates rejected).
    /// At most two distinct variables may appear and every power must be
    /// at least 1.
    pub fn new(factors: &[(usize, u32)]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for &(var, power) in factors {
            if power < 1 {
                return Err(Error::config(format!(
                    "basis term power must be >= 1, got {power} for variable {var}"
                )));
            }
            if map.insert(var, power).is_some() {
                return Err(Error::config(format!(
                    "variable {var} appears twice in basis term"
                )));
            }
        }
        if map.len() > 2 {
            return Err(Error::config(format!(
                "basis terms allow at most 2 distinct variables, got {}",
                map.len()
            )));
        }
        Ok(BasisTerm { exponents: map.into_iter().collect() })
    }

    /// Sorted `(variable, power)` factors; empty for the intercept.
    pub fn exponents(&self) -> &[(usize, u32)] {
        &self.exponents
    }

    /// Total degree (sum of powers).
    pub fn degree(&self) -> u32 {
        self.exponents.iter().map(|&(_, a)| a).sum()
    }

    /// Largest variable index used, if any.
    pub fn max_var(&self) -> Option<usize> {
        self.exponents.last().map(|&(v, _)| v)
    }

    /// Evaluate the monomial at a raw variable row.
    pub fn eval(&self, row: &[f64]) -> f64 {
        self.exponents
            .iter()
            .map(|&(v, a)| row[v].powi(a as i32))
            .product()
    }

    /// Evaluate the partial derivative with respect to variable `wrt`.
    ///
    /// Terms that do not contain `wrt` differentiate to zero; `v^a * w^b`
    /// differentiates to `a * v^(a-1) * w^b`.
    pub fn eval_derivative(&self, row: &[f64], wrt: usize) -> f64 {
        let Some(&(_, power)) = self.exponents.iter().find(|&&(v, _)| v == wrt) else {
            return 0.0;
        };
        let mut value = power as f64 * row[wrt].powi(power as i32 - 1);
        for &(v, a) in &self.exponents {
            if v != wrt {
                value *= row[v].powi(a as i32);
            }
        }
        value
    }
}

impl PartialOrd for BasisTerm {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for BasisTerm {
    /// Canonical order: by variable index sequence, then by power sequence.
    /// The intercept sorts first; single-variable terms precede the pairs
    /// that start at the same variable.
    fn cmp(&self, other: &Self) -> Ordering {
        let vars = |t: &Self| t.exponents.iter().map(|&(v, _)| v).collect::<Vec<_>>();
        let powers = |t: &Self| t.exponents.iter().map(|&(_, a)| a).collect::<Vec<_>>();
        vars(self)
            .cmp(&vars(other))
            .then_with(|| powers(self).cmp(&powers(other)))
    }
}

/// Which variable pairs receive interaction terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PairPolicy {
    /// Only (treatment, covariate) pairs.
    TreatmentPairsOnly,
    /// Every unordered pair of variables.
    AllPairs,
}

/// Construction recipe for a [`Dictionary`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DictionarySpec {
    /// Maximum per-factor power (each factor of a term carries a power in
    /// `1..=max_degree`; pairwise terms may therefore reach total degree
    /// `2 * max_degree`).
    pub max_degree: u32,
    pub pair_policy: PairPolicy,
    pub include_intercept: bool,
}

impl Default for DictionarySpec {
    fn default() -> Self {
        DictionarySpec {
            max_degree: 3,
            pair_policy: PairPolicy::TreatmentPairsOnly,
            include_intercept: true,
        }
    }
}

impl DictionarySpec {
    /// Purely additive degree-1 spec: raw treatment and covariates only.
    pub fn linear() -> Self {
        DictionarySpec {
            max_degree: 1,
            pair_policy: PairPolicy::TreatmentPairsOnly,
            include_intercept: false,
        }
    }
}

/// An ordered polynomial basis over `[d, x1, .., xh]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    spec: DictionarySpec,
    terms: Vec<BasisTerm>,
    n_covariates: usize,
}

/// Variable index of the treatment in raw rows.
pub const TREATMENT_INDEX: usize = 0;

impl Dictionary {
    /// Build the canonical dictionary for `n_covariates` covariates.
    ///
    /// Terms are all single-variable powers `1..=max_degree`, plus, for each
    /// qualifying pair `(v, w)`, every product `v^a * w^b` with `a, b` in
    /// `1..=max_degree`. A degree-1 spec is purely additive (no pairs).
    pub fn build(spec: DictionarySpec, n_covariates: usize) -> Result<Self> {
        if spec.max_degree < 1 {
            return Err(Error::config("dictionary max_degree must be >= 1"));
        }
        let n_vars = 1 + n_covariates;
        let mut terms = Vec::new();
        if spec.include_intercept {
            terms.push(BasisTerm::intercept());
        }
        for v in 0..n_vars {
            for a in 1..=spec.max_degree {
                terms.push(BasisTerm::new(&[(v, a)])?);
            }
        }
        if spec.max_degree >= 2 {
            let pairs: Vec<(usize, usize)> = match spec.pair_policy {
                PairPolicy::TreatmentPairsOnly => {
                    (1..n_vars).map(|j| (TREATMENT_INDEX, j)).collect()
                }
                PairPolicy::AllPairs => (0..n_vars)
                    .flat_map(|v| (v + 1..n_vars).map(move |w| (v, w)))
                    .collect(),
            };
            for (v, w) in pairs {
                for a in 1..=spec.max_degree {
                    for b in 1..=spec.max_degree {
                        terms.push(BasisTerm::new(&[(v, a), (w, b)])?);
                    }
                }
            }
        }
        terms.sort();
        debug_assert!(terms.windows(2).all(|w| w[0] < w[1]), "duplicate basis terms");
        Ok(Dictionary { spec, terms, n_covariates })
    }

    /// Assemble a dictionary from explicit terms (callers guarantee
    /// canonical order and consistency with `n_covariates`).
    #[cfg(test)]
    pub(crate) fn from_parts(
        spec: DictionarySpec,
        terms: Vec<BasisTerm>,
        n_covariates: usize,
    ) -> Self {
        Dictionary { spec, terms, n_covariates }
    }

    pub fn spec(&self) -> &DictionarySpec {
        &self.spec
    }

    /// Number of basis terms, `p`.
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[BasisTerm] {
        &self.terms
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    /// Raw row length expected by `eval_row` (`1 + n_covariates`).
    pub fn n_vars(&self) -> usize {
        1 + self.n_covariates
    }

    /// Human-readable label for term `j` (`1`, `d^2`, `d*x3^2`, ...).
    pub fn term_label(&self, j: usize) -> String {
        let term = &self.terms[j];
        if term.exponents().is_empty() {
            return "1".to_string();
        }
        term.exponents()
            .iter()
            .map(|&(v, a)| {
                let name = if v == TREATMENT_INDEX {
                    "d".to_string()
                } else {
                    format!("x{v}")
                };
                if a == 1 {
                    name
                } else {
                    format!("{name}^{a}")
                }
            })
            .collect::<Vec<_>>()
            .join("*")
    }

    fn check_row(&self, row: &[f64]) -> Result<()> {
        if row.len() < self.n_vars() {
            return Err(Error::data(format!(
                "raw row has {} variables, dictionary needs {}",
                row.len(),
                self.n_vars()
            )));
        }
        if let Some(bad) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::data(format!("non-finite raw variable value {bad}")));
        }
        Ok(())
    }

    /// Evaluate every basis term at a raw row.
    pub fn eval_row(&self, row: &[f64]) -> Result<DVector<f64>> {
        self.check_row(row)?;
        Ok(DVector::from_iterator(
            self.terms.len(),
            self.terms.iter().map(|t| t.eval(row)),
        ))
    }

    /// Evaluate the treatment derivative of every basis term at a raw row.
    pub fn eval_row_derivative(&self, row: &[f64]) -> Result<DVector<f64>> {
        self.check_row(row)?;
        Ok(DVector::from_iterator(
            self.terms.len(),
            self.terms
                .iter()
                .map(|t| t.eval_derivative(row, TREATMENT_INDEX)),
        ))
    }
}

/// Per-column mean and SD of evaluated basis features, with an activity
/// mask flagging non-constant columns.
#[derive(Debug, Clone)]
pub struct StandardizationStats {
    means: DVector<f64>,
    sds: DVector<f64>,
    active: Vec<bool>,
}

impl StandardizationStats {
    pub fn means(&self) -> &DVector<f64> {
        &self.means
    }

    pub fn sds(&self) -> &DVector<f64> {
        &self.sds
    }

    /// `false` exactly when the column SD is below [`SD_TOLERANCE`].
    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    /// Center and scale a feature matrix; inactive columns map to 0.
    pub fn standardize_matrix(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = features.clone();
        self.standardize_in_place(&mut out);
        out
    }

    pub(crate) fn standardize_in_place(&self, features: &mut DMatrix<f64>) {
        for j in 0..features.ncols() {
            let mut col = features.column_mut(j);
            if self.active[j] {
                let (mu, sd) = (self.means[j], self.sds[j]);
                col.apply(|v| *v = (*v - mu) / sd);
            } else {
                col.fill(0.0);
            }
        }
    }

    /// Invert `standardize_matrix` (`x * sd + mean`); inactive columns
    /// restore the constant column mean.
    pub fn destandardize_matrix(&self, standardized: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = standardized.clone();
        for j in 0..out.ncols() {
            let (mu, sd) = (self.means[j], self.sds[j]);
            let scale = if self.active[j] { sd } else { 0.0 };
            out.column_mut(j).apply(|v| *v = *v * scale + mu);
        }
        out
    }
}

/// Fit standardization statistics on an `n x p` feature matrix.
///
/// Weights, when given, are normalized to mean 1; the SD keeps the
/// unweighted `n - 1` denominator.
pub fn fit_standardization(
    features: &DMatrix<f64>,
    weights: Option<&DVector<f64>>,
) -> Result<StandardizationStats> {
    let n = features.nrows();
    let p = features.ncols();
    if n < 2 {
        return Err(Error::data(format!(
            "standardization needs at least 2 rows, got {n}"
        )));
    }
    let w = normalized_weights(n, weights)?;
    let mut means = DVector::zeros(p);
    let mut sds = DVector::zeros(p);
    let mut active = vec![false; p];
    for j in 0..p {
        let col = features.column(j);
        let mean = col.dot(&w) / n as f64;
        let ss: f64 = col
            .iter()
            .zip(w.iter())
            .map(|(&x, &wi)| wi * (x - mean) * (x - mean))
            .sum();
        let sd = (ss / (n as f64 - 1.0)).sqrt();
        means[j] = mean;
        sds[j] = sd;
        active[j] = sd >= SD_TOLERANCE;
    }
    Ok(StandardizationStats { means, sds, active })
}

pub(crate) fn normalized_weights(
    n: usize,
    weights: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    match weights {
        None => Ok(DVector::from_element(n, 1.0)),
        Some(w) => {
            if w.len() != n {
                return Err(Error::data(format!(
                    "weight vector length {} does not match {n} rows",
                    w.len()
                )));
            }
            if w.iter().any(|&wi| !wi.is_finite() || wi <= 0.0) {
                return Err(Error::data("weights must be finite and positive"));
            }
            let mean = w.sum() / n as f64;
            Ok(w / mean)
        }
    }
}

/// How standardized treatment derivatives are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeMode {
    /// `b_D^j / sd_j`, the large-sample form used in estimation.
    Simple,
    /// The finite-sample form that also differentiates through the fitted
    /// mean and SD; differs from `Simple` by O(1/n).
    FullCorrection,
}

/// Standardized treatment-derivative row for one raw observation.
///
/// `Simple` returns `b_D^j / sd_j` per active column. `FullCorrection`
/// multiplies each entry by
/// `(n-1)/n - (b^j - mean_j)^2 / ((n-1) * sd_j^2)`,
/// the exact derivative of the standardized basis function when the
/// statistics themselves were fitted on `n` observations. Inactive columns
/// are 0 in both modes.
pub fn standardized_derivative(
    dict: &Dictionary,
    stats: &StandardizationStats,
    row: &[f64],
    mode: DerivativeMode,
    n: usize,
) -> Result<DVector<f64>> {
    if stats.len() != dict.len() {
        return Err(Error::data(format!(
            "standardization has {} columns, dictionary has {}",
            stats.len(),
            dict.len()
        )));
    }
    if mode == DerivativeMode::FullCorrection && n < 2 {
        return Err(Error::config(
            "full-correction derivative needs sample size n >= 2",
        ));
    }
    let deriv = dict.eval_row_derivative(row)?;
    let mut out = DVector::zeros(dict.len());
    match mode {
        DerivativeMode::Simple => {
            for j in 0..dict.len() {
                if stats.active[j] {
                    out[j] = deriv[j] / stats.sds[j];
                }
            }
        }
        DerivativeMode::FullCorrection => {
            let base = dict.eval_row(row)?;
            let nf = n as f64;
            for j in 0..dict.len() {
                if stats.active[j] {
                    let scaled = deriv[j] / stats.sds[j];
                    let centered = base[j] - stats.means[j];
                    let factor = (nf - 1.0) / nf
                        - centered * centered / ((nf - 1.0) * stats.sds[j] * stats.sds[j]);
                    out[j] = scaled * factor;
                }
            }
        }
    }
    Ok(out)
}
