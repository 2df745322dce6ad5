//! `tune`: held-out penalty selection on a panel CSV, with the full
//! loss-vs-penalty grid written as CSV.

use paneldml::estimator::tune;
use paneldml::panel::load_csv;
use paneldml::Result;

use crate::config::{
    parse_single_method, required_input, resolve_common, resolve_dict_spec, resolve_estimator,
    resolve_schema, EstimatorOptions,
};
use crate::TuneArgs;

pub fn run(args: TuneArgs) -> Result<()> {
    let resolved = resolve_common(&args.common)?;
    let config = &resolved.config;
    let input = required_input(args.input.as_deref(), config)?;
    let schema = resolve_schema(&args.schema, config);
    let dict_spec = resolve_dict_spec(&args.dict, config)?;
    let method = parse_single_method(args.method.as_deref(), config)?;
    let est = resolve_estimator(
        &EstimatorOptions {
            folds: args.folds,
            level: None,
            no_weights: args.no_weights,
            method,
            seed: resolved.seed,
        },
        config,
    );

    let dataset = load_csv(&input, &schema)?;
    let report = tune(&dataset, dict_spec, &est)?;

    let mut csv = String::from("target,penalty,loss,converged\n");
    for point in &report.gamma_grid {
        csv.push_str(&format!("gamma,{},{},{}\n", point.penalty, point.loss, point.converged));
    }
    for point in &report.alpha_grid {
        csv.push_str(&format!("alpha,{},{},{}\n", point.penalty, point.loss, point.converged));
    }
    std::fs::write(resolved.out.join("tuning_grid.csv"), csv)?;

    println!("seed: {}", resolved.seed);
    println!("selected r_l: {}", report.r_l);
    println!("selected r_alpha: {}", report.r_alpha);
    println!("wrote tuning_grid.csv to {}", resolved.out.display());
    Ok(())
}
