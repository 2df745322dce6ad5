//! `rolling`: estimate every consecutive-time window and fit a weighted
//! trend through the window estimates.

use paneldml::estimator::estimate;
use paneldml::panel::{load_csv, rolling_windows, PanelDataset};
use paneldml::simulation::derive_seed;
use paneldml::trend::{wls_trend, TrendPoint};
use paneldml::{Error, Result};
use rayon::prelude::*;

use crate::config::{
    parse_single_method, required_input, resolve_common, resolve_dict_spec, resolve_estimator,
    resolve_schema, EstimatorOptions,
};
use crate::RollingArgs;

pub fn run(args: RollingArgs) -> Result<()> {
    let resolved = resolve_common(&args.common)?;
    let config = &resolved.config;
    let input = required_input(args.input.as_deref(), config)?;
    let schema = resolve_schema(&args.schema, config);
    let dict_spec = resolve_dict_spec(&args.dict, config)?;
    let method = parse_single_method(args.method.as_deref(), config)?;
    let width = args.width.or(config.width).unwrap_or(2);
    let est = resolve_estimator(
        &EstimatorOptions {
            folds: args.folds,
            level: args.level,
            no_weights: args.no_weights,
            method,
            seed: resolved.seed,
        },
        config,
    );

    let dataset = load_csv(&input, &schema)?;
    let windows = rolling_windows(&dataset, width)?;
    if windows.is_empty() {
        return Err(Error::Config(format!(
            "panel spans fewer than {width} periods; no rolling windows"
        )));
    }

    struct WindowRow {
        start: i64,
        end: i64,
        n_units: usize,
        tau_hat: f64,
        se: f64,
        ci_lower: f64,
        ci_upper: f64,
    }

    let rows: Vec<WindowRow> = windows
        .par_iter()
        .enumerate()
        .map(|(k, window): (usize, &PanelDataset)| -> Result<WindowRow> {
            let cfg = paneldml::estimator::EstimatorConfig {
                seed: derive_seed(resolved.seed, k as u64, 2),
                ..est.clone()
            };
            let report = estimate(window, dict_spec, &cfg)?;
            let times = window.distinct_times();
            Ok(WindowRow {
                start: times[0],
                end: *times.last().unwrap(),
                n_units: window.n_units(),
                tau_hat: report.tau_hat,
                se: report.se,
                ci_lower: report.ci_lower,
                ci_upper: report.ci_upper,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let points: Vec<TrendPoint> = rows
        .iter()
        .map(|r| TrendPoint { time: r.start as f64, estimate: r.tau_hat, se: r.se })
        .collect();
    let trend = wls_trend(&points)?;

    let mut csv =
        String::from("window_start,window_end,n_units,tau_hat,se,ci_lower,ci_upper\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.start, r.end, r.n_units, r.tau_hat, r.se, r.ci_lower, r.ci_upper
        ));
    }
    std::fs::write(resolved.out.join("rolling.csv"), csv)?;
    std::fs::write(
        resolved.out.join("trend.csv"),
        format!(
            "slope,se_slope,z,p_value,residual_variance\n{},{},{},{},{}\n",
            trend.slope, trend.se_slope, trend.z, trend.p_value, trend.residual_variance
        ),
    )?;

    println!("seed: {}", resolved.seed);
    println!("windows: {} (width {width}, method {method})", rows.len());
    println!(
        "trend slope: {:.6e} (se {:.3e}, z {:.3}, p {:.4})",
        trend.slope, trend.se_slope, trend.z, trend.p_value
    );
    println!("wrote rolling.csv, trend.csv to {}", resolved.out.display());
    Ok(())
}
