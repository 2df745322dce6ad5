//! JSON run configuration and flag-over-config resolution.

use std::path::{Path, PathBuf};

use paneldml::dictionary::{DictionarySpec, PairPolicy};
use paneldml::estimator::{EstimatorConfig, Method};
use paneldml::panel::CsvSchema;
use paneldml::{Error, Result};
use serde::Deserialize;

use crate::{CommonArgs, DictArgs, SchemaArgs};

/// Reproducible run settings; every field optional, flags win over file
/// values. Unknown keys are rejected so stale configurations fail loudly.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    pub trials: Option<usize>,
    pub units: Option<usize>,
    pub periods: Option<usize>,
    pub covariates: Option<usize>,
    pub methods: Option<Vec<String>>,
    pub method: Option<String>,
    pub folds: Option<usize>,
    pub level: Option<f64>,
    pub r_l_grid: Option<Vec<f64>>,
    pub r_alpha_grid: Option<Vec<f64>>,
    pub iterative_budget: Option<usize>,
    pub max_degree: Option<u32>,
    pub pairs: Option<String>,
    pub intercept: Option<bool>,
    pub input: Option<PathBuf>,
    pub schema: Option<CsvSchema>,
    pub no_weights: Option<bool>,
    pub width: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))
    }
}

/// Values every command needs, resolved from flags and configuration.
pub struct Resolved {
    pub config: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn resolve_common(common: &CommonArgs) -> Result<Resolved> {
    let config = RunConfig::load(common.config.as_deref())?;
    let jobs = common.jobs.or(config.jobs);
    if let Some(jobs) = jobs {
        if jobs == 0 {
            return Err(Error::Config("jobs must be >= 1".to_string()));
        }
        // First configuration wins; later calls in-process are no-ops.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let seed = common
        .seed
        .or(config.seed)
        .unwrap_or_else(|| rand::random::<u64>());
    let out = common
        .out
        .clone()
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out)?;
    Ok(Resolved { config, seed, out })
}

pub fn parse_methods(flag: Option<&str>, config: &RunConfig) -> Result<Vec<Method>> {
    let from_flag: Option<Vec<String>> =
        flag.map(|s| s.split(',').map(|m| m.trim().to_string()).collect());
    let names = from_flag
        .or_else(|| config.methods.clone())
        .unwrap_or_else(|| Method::ALL.iter().map(|m| m.name().to_string()).collect());
    names.iter().map(|name| name.parse()).collect()
}

pub fn parse_single_method(flag: Option<&str>, config: &RunConfig) -> Result<Method> {
    match flag.or(config.method.as_deref()) {
        Some(name) => name.parse(),
        None => Ok(Method::Dml),
    }
}

pub fn resolve_dict_spec(args: &DictArgs, config: &RunConfig) -> Result<DictionarySpec> {
    let mut spec = DictionarySpec::default();
    if let Some(degree) = args.max_degree.or(config.max_degree) {
        spec.max_degree = degree;
    }
    if let Some(pairs) = args.pairs.as_deref().or(config.pairs.as_deref()) {
        spec.pair_policy = match pairs.to_ascii_lowercase().as_str() {
            "treatment" | "treatment-pairs-only" => PairPolicy::TreatmentPairsOnly,
            "all" | "all-pairs" => PairPolicy::AllPairs,
            other => {
                return Err(Error::Config(format!(
                    "unknown pair policy `{other}` (expected `treatment` or `all`)"
                )))
            }
        };
    }
    if let Some(intercept) = args.intercept.or(config.intercept) {
        spec.include_intercept = intercept;
    }
    Ok(spec)
}

pub fn resolve_schema(args: &SchemaArgs, config: &RunConfig) -> CsvSchema {
    let mut schema = config.schema.clone().unwrap_or_default();
    if let Some(v) = &args.unit_col {
        schema.unit = v.clone();
    }
    if let Some(v) = &args.time_col {
        schema.time = v.clone();
    }
    if let Some(v) = &args.outcome_col {
        schema.y = v.clone();
    }
    if let Some(v) = &args.treatment_col {
        schema.d = v.clone();
    }
    if let Some(v) = &args.covariate_cols {
        schema.x = Some(v.split(',').map(|c| c.trim().to_string()).collect());
    }
    if let Some(v) = &args.weight_col {
        schema.weight = Some(v.clone());
    }
    schema
}

/// Estimator configuration from resolved options.
pub struct EstimatorOptions {
    pub folds: Option<usize>,
    pub level: Option<f64>,
    pub no_weights: bool,
    pub method: Method,
    pub seed: u64,
}

pub fn resolve_estimator(opts: &EstimatorOptions, config: &RunConfig) -> EstimatorConfig {
    let mut est = EstimatorConfig { method: opts.method, seed: opts.seed, ..EstimatorConfig::default() };
    if let Some(folds) = opts.folds.or(config.folds) {
        est.n_folds = folds;
    }
    if let Some(level) = opts.level.or(config.level) {
        est.confidence_level = level;
    }
    if let Some(grid) = &config.r_l_grid {
        est.r_l_grid = grid.clone();
    }
    if let Some(grid) = &config.r_alpha_grid {
        est.r_alpha_grid = grid.clone();
    }
    if let Some(budget) = config.iterative_budget {
        est.iterative_budget = budget;
    }
    est.use_weights = !(opts.no_weights || config.no_weights.unwrap_or(false));
    est
}

pub fn required_input(flag: Option<&Path>, config: &RunConfig) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| config.input.clone())
        .ok_or_else(|| Error::Config("no input CSV given (use --input or config)".to_string()))
}

/// File-name slug for a method ("DML Iterative" -> "dml_iterative").
pub fn method_slug(method: Method) -> String {
    method.name().to_ascii_lowercase().replace(' ', "_")
}
