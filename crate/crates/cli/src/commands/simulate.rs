//! `simulate`: Monte Carlo study over the benchmark data-generating
//! process, emitting a summary table and per-trial records.

use paneldml::dictionary::DictionarySpec;
use paneldml::simulation::{records_csv, run_monte_carlo, summary_markdown, DgpConfig};
use paneldml::Result;

use crate::config::{parse_methods, resolve_common, resolve_estimator, EstimatorOptions};
use crate::SimulateArgs;

pub fn run(args: SimulateArgs) -> Result<()> {
    let resolved = resolve_common(&args.common)?;
    let config = &resolved.config;
    let methods = parse_methods(args.methods.as_deref(), config)?;

    let dgp = DgpConfig {
        n_units: args.units.or(config.units).unwrap_or(1000),
        n_periods: args.periods.or(config.periods).unwrap_or(2),
        n_covariates: args.covariates.or(config.covariates).unwrap_or(20),
        seed: resolved.seed,
    };
    let trials = args.trials.or(config.trials).unwrap_or(200);
    let est = resolve_estimator(
        &EstimatorOptions {
            folds: args.folds,
            level: args.level,
            no_weights: false,
            method: methods[0],
            seed: resolved.seed,
        },
        config,
    );

    let result = run_monte_carlo(&dgp, DictionarySpec::default(), &methods, trials, &est)?;

    let table = summary_markdown(&result.summary);
    let mut report = format!(
        "seed: {}\ntrials: {} (units {}, periods {}, covariates {})\n\n{}",
        resolved.seed, trials, dgp.n_units, dgp.n_periods, dgp.n_covariates, table
    );
    if !result.failures.is_empty() {
        report.push_str(&format!("\nfailed method-trials: {}\n", result.failures.len()));
    }

    std::fs::write(resolved.out.join("summary.md"), &report)?;
    std::fs::write(
        resolved.out.join("summary.json"),
        serde_json::to_string_pretty(&result.summary).expect("serializable summary"),
    )?;
    std::fs::write(resolved.out.join("trials.csv"), records_csv(&result.records))?;

    print!("{report}");
    println!("\nwrote summary.md, summary.json, trials.csv to {}", resolved.out.display());
    Ok(())
}
