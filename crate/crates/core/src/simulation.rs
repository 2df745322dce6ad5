//! Benchmark data-generating process and Monte Carlo harness.
//!
//! The DGP draws a panel with unit effects correlated with treatment and
//! covariates: `a_i ~ N(1,1)`, `x_j ~ N(a_i, 1)` per period,
//! `d = 0.1 theta'x + Beta(1,7)` with `theta_j = 1/j^2`, and
//! `y = a_i + d + d^2 + d^3 + d x_1 + 0.1 theta'x + eps`, `eps ~ N(0,1)`.
//! The target functional is the average treatment derivative
//! `E[1 + 2d + 3d^2 + x_1]`, evaluated empirically per draw.
//!
//! The harness replays independent trials (fresh draws per trial), runs
//! every requested method on the identical dataset and fold assignment,
//! and aggregates bias, spread, MSE, coverage, and regression MSE into a
//! per-method summary. Per-trial seeds derive from the master seed by a
//! counter hash, so trials are reproducible independently and in parallel.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{Beta, Normal};

use crate::dictionary::DictionarySpec;
use crate::error::{Error, Result};
use crate::estimator::{estimate, estimate_all, EstimateReport, EstimatorConfig, Method};
use crate::panel::{Observation, PanelDataset};

/// Size and seed of one simulated panel.
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    pub n_units: usize,
    pub n_periods: usize,
    pub n_covariates: usize,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig { n_units: 1000, n_periods: 2, n_covariates: 20, seed: 0 }
    }
}

impl DgpConfig {
    fn validate(&self) -> Result<()> {
        if self.n_units < 2 || self.n_periods < 2 || self.n_covariates < 1 {
            return Err(Error::config(
                "simulated panels need >= 2 units, >= 2 periods, >= 1 covariate",
            ));
        }
        Ok(())
    }
}

/// SplitMix64 step, used to derive independent per-trial seeds from a
/// master seed and a counter.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for stream `stream` of trial `index` under `master`.
pub fn derive_seed(master: u64, index: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_add(1)) ^ splitmix64(stream.wrapping_mul(0x9E37_79B9)))
}

fn theta(h: usize) -> Vec<f64> {
    (1..=h).map(|j| 1.0 / (j * j) as f64).collect()
}

/// Draw one panel from the benchmark DGP; bit-identical per seed.
pub fn generate_dataset(cfg: &DgpConfig) -> Result<PanelDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit_effect = Normal::new(1.0, 1.0).expect("valid normal");
    let standard = Normal::new(0.0, 1.0).expect("valid normal");
    let beta_draw = Beta::new(1.0, 7.0).expect("valid beta");
    let theta = theta(cfg.n_covariates);
    let width = cfg.n_units.to_string().len();

    let mut rows = Vec::with_capacity(cfg.n_units * cfg.n_periods);
    for i in 0..cfg.n_units {
        let a = rng.sample(unit_effect);
        for t in 0..cfg.n_periods {
            let x: Vec<f64> = (0..cfg.n_covariates).map(|_| a + rng.sample(standard)).collect();
            let theta_x: f64 = theta.iter().zip(&x).map(|(&th, &xv)| th * xv).sum();
            let d = 0.1 * theta_x + rng.sample(beta_draw);
            let eps = rng.sample(standard);
            let y = a + d + d * d + d * d * d + d * x[0] + 0.1 * theta_x + eps;
            rows.push(Observation {
                unit: format!("u{:0width$}", i, width = width),
                time: t as i64,
                y,
                d,
                x,
                weight: 1.0,
            });
        }
    }
    PanelDataset::from_observations(rows)
}

/// Empirical average derivative of the DGP's outcome function over all
/// observations: `mean(1 + 2d + 3d^2 + x_1)`.
pub fn true_average_derivative(dataset: &PanelDataset) -> Result<f64> {
    if dataset.n_covariates() < 1 {
        return Err(Error::data("benchmark target needs at least one covariate"));
    }
    let n = dataset.n_obs();
    let total: f64 = (0..n)
        .map(|obs| {
            let d = dataset.treatment(obs);
            1.0 + 2.0 * d + 3.0 * d * d + dataset.covariates(obs)[0]
        })
        .sum();
    Ok(total / n as f64)
}

/// One method's result on one trial.
#[derive(Debug, Clone, Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub method: Method,
    pub tau_hat: f64,
    pub se: f64,
    pub true_tau: f64,
    pub covered: bool,
    pub mse_gamma_in: f64,
    pub mse_gamma_out: f64,
}

/// Per-method aggregates over trials. `bias`, `sd`, and `mse_tau` are
/// moments of the per-trial error `tau_hat - true_tau`, so
/// `mse_tau = bias^2 + sd^2 (n-1)/n` holds exactly.
#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub trials_used: usize,
    pub failures: usize,
    pub mean_true_value: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    /// Sample SD (n-1 denominator) of per-trial errors; 0 for one trial.
    pub sd: f64,
    pub mse_tau: f64,
    pub coverage: f64,
    pub mse_gamma_in_sample: f64,
    pub mse_gamma_cross_folds: f64,
}

/// Aggregates for every requested method.
#[derive(Debug, Clone, Serialize)]
pub struct SimulationSummary {
    pub schema_version: u32,
    pub n_trials: usize,
    pub methods: Vec<MethodSummary>,
}

/// Summary plus raw per-trial records.
#[derive(Debug, Clone)]
pub struct MonteCarloResult {
    pub summary: SimulationSummary,
    pub records: Vec<TrialRecord>,
    /// Per-method failure messages, if any trial failed.
    pub failures: Vec<(usize, Method, String)>,
}

/// Aggregate trial records into a summary, preserving `methods` order.
pub fn summarize(
    records: &[TrialRecord],
    methods: &[Method],
    n_trials: usize,
    failures: &[(usize, Method, String)],
) -> SimulationSummary {
    let mut summaries = Vec::with_capacity(methods.len());
    for &method in methods {
        let rows: Vec<&TrialRecord> = records.iter().filter(|r| r.method == method).collect();
        let n = rows.len();
        let nf = n as f64;
        let errors: Vec<f64> = rows.iter().map(|r| r.tau_hat - r.true_tau).collect();
        let bias = errors.iter().sum::<f64>() / nf.max(1.0);
        let sd = if n > 1 {
            (errors.iter().map(|e| (e - bias) * (e - bias)).sum::<f64>() / (nf - 1.0)).sqrt()
        } else {
            0.0
        };
        let mean = |f: fn(&TrialRecord) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / nf.max(1.0);
        summaries.push(MethodSummary {
            method,
            trials_used: n,
            failures: failures.iter().filter(|(_, m, _)| *m == method).count(),
            mean_true_value: mean(|r| r.true_tau),
            mean_estimate: mean(|r| r.tau_hat),
            bias,
            sd,
            mse_tau: errors.iter().map(|e| e * e).sum::<f64>() / nf.max(1.0),
            coverage: rows.iter().filter(|r| r.covered).count() as f64 / nf.max(1.0),
            mse_gamma_in_sample: mean(|r| r.mse_gamma_in),
            mse_gamma_cross_folds: mean(|r| r.mse_gamma_out),
        });
    }
    SimulationSummary { schema_version: 1, n_trials, methods: summaries }
}

/// Run `trials` independent draws, estimating every method on each draw.
///
/// All methods of a trial share the dataset and fold assignment. A method
/// failing on a trial is recorded and excluded from that method's
/// aggregates; configuration errors abort the whole run.
pub fn run_monte_carlo(
    dgp: &DgpConfig,
    dict_spec: DictionarySpec,
    methods: &[Method],
    trials: usize,
    est: &EstimatorConfig,
) -> Result<MonteCarloResult> {
    if trials < 1 {
        return Err(Error::config("trial count must be >= 1"));
    }
    if methods.is_empty() {
        return Err(Error::config("no methods requested"));
    }
    dgp.validate()?;

    struct TrialOutcome {
        records: Vec<TrialRecord>,
        failures: Vec<(usize, Method, String)>,
    }

    let run_trial = |k: usize| -> Result<TrialOutcome> {
        let dgp_k = DgpConfig { seed: derive_seed(dgp.seed, k as u64, 0), ..dgp.clone() };
        let dataset = generate_dataset(&dgp_k)?;
        let true_tau = true_average_derivative(&dataset)?;
        let est_k = EstimatorConfig { seed: derive_seed(est.seed, k as u64, 1), ..est.clone() };

        let to_record = |report: &EstimateReport| TrialRecord {
            trial: k,
            method: report.method,
            tau_hat: report.tau_hat,
            se: report.se,
            true_tau,
            covered: report.ci_lower <= true_tau && true_tau <= report.ci_upper,
            mse_gamma_in: report.mse_gamma_in_sample,
            mse_gamma_out: report.mse_gamma_cross_folds,
        };

        match estimate_all(&dataset, dict_spec, &est_k, methods) {
            Ok(reports) => Ok(TrialOutcome {
                records: reports.iter().map(to_record).collect(),
                failures: Vec::new(),
            }),
            Err(Error::Config(e)) => Err(Error::Config(e)),
            Err(_) => {
                // Re-run methods individually so one failure does not take
                // down the trial for everyone.
                let mut records = Vec::new();
                let mut failures = Vec::new();
                for &method in methods {
                    let cfg = EstimatorConfig { method, ..est_k.clone() };
                    match estimate(&dataset, dict_spec, &cfg) {
                        Ok(report) => records.push(to_record(&report)),
                        Err(e) => failures.push((k, method, e.to_string())),
                    }
                }
                Ok(TrialOutcome { records, failures })
            }
        }
    };

    let outcomes: Vec<Result<TrialOutcome>> = (0..trials).into_par_iter().map(run_trial).collect();
    let mut records = Vec::with_capacity(trials * methods.len());
    let mut failures = Vec::new();
    for outcome in outcomes {
        let outcome = outcome?;
        records.extend(outcome.records);
        failures.extend(outcome.failures);
    }
    let summary = summarize(&records, methods, trials, &failures);
    Ok(MonteCarloResult { summary, records, failures })
}

/// Format a value with four significant digits for summary tables.
fn sig4(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let magnitude = v.abs().log10().floor() as i32;
    if !(-4..=6).contains(&magnitude) {
        return format!("{v:.3e}");
    }
    let decimals = (3 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}

/// Render a summary as a Markdown table with one column per method.
pub fn summary_markdown(summary: &SimulationSummary) -> String {
    let mut out = String::new();
    let header: Vec<String> = summary.methods.iter().map(|m| m.method.to_string()).collect();
    out.push_str(&format!("| method | {} |\n", header.join(" | ")));
    out.push_str(&format!("|---|{}\n", "---|".repeat(summary.methods.len())));
    let rows: [(&str, fn(&MethodSummary) -> f64); 8] = [
        ("True Value", |m| m.mean_true_value),
        ("Average Derivative", |m| m.mean_estimate),
        ("Bias", |m| m.bias),
        ("Standard Deviation", |m| m.sd),
        ("MSE tau", |m| m.mse_tau),
        ("Coverage", |m| m.coverage),
        ("MSE gamma In Sample", |m| m.mse_gamma_in_sample),
        ("MSE gamma Cross Folds", |m| m.mse_gamma_cross_folds),
    ];
    for (label, accessor) in rows {
        let cells: Vec<String> = summary.methods.iter().map(|m| sig4(accessor(m))).collect();
        out.push_str(&format!("| {label} | {} |\n", cells.join(" | ")));
    }
    out
}

/// Render per-trial records as CSV (one row per trial and method).
pub fn records_csv(records: &[TrialRecord]) -> String {
    let mut out =
        String::from("trial,method,tau_hat,se,true_tau,covered,mse_gamma_in,mse_gamma_out\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.trial, r.method, r.tau_hat, r.se, r.true_tau, r.covered, r.mse_gamma_in, r.mse_gamma_out
        ));
    }
    out
}
