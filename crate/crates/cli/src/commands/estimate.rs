//! `estimate`: run requested methods on a panel CSV, write one JSON report
//! per method plus a pairwise-comparison table.

use paneldml::estimator::{compare, estimate_all, EstimateReport, MethodComparison};
use paneldml::panel::load_csv;
use paneldml::Result;

use crate::config::{
    method_slug, parse_methods, required_input, resolve_common, resolve_dict_spec,
    resolve_estimator, resolve_schema, EstimatorOptions,
};
use crate::EstimateArgs;

pub fn run(args: EstimateArgs) -> Result<()> {
    let resolved = resolve_common(&args.common)?;
    let config = &resolved.config;
    let input = required_input(args.input.as_deref(), config)?;
    let schema = resolve_schema(&args.schema, config);
    let dict_spec = resolve_dict_spec(&args.dict, config)?;
    let methods = parse_methods(args.methods.as_deref(), config)?;
    let est = resolve_estimator(
        &EstimatorOptions {
            folds: args.folds,
            level: args.level,
            no_weights: args.no_weights,
            method: methods[0],
            seed: resolved.seed,
        },
        config,
    );

    let dataset = load_csv(&input, &schema)?;
    let reports = estimate_all(&dataset, dict_spec, &est, &methods)?;

    for report in &reports {
        let path = resolved.out.join(format!("report_{}.json", method_slug(report.method)));
        std::fs::write(&path, serde_json::to_string_pretty(report).expect("serializable report"))?;
    }

    println!("seed: {}", resolved.seed);
    println!(
        "input: {} ({} units, {} observations, {} covariates)",
        input.display(),
        dataset.n_units(),
        dataset.n_obs(),
        dataset.n_covariates()
    );
    print!("{}", report_table(&reports));

    if reports.len() >= 2 {
        let comparisons = compare(&reports)?;
        std::fs::write(resolved.out.join("comparison.csv"), comparison_csv(&comparisons))?;
        print!("{}", comparison_table(&comparisons));
    }
    println!("wrote reports to {}", resolved.out.display());
    Ok(())
}

fn report_table(reports: &[EstimateReport]) -> String {
    let mut out = String::from(
        "| method | estimate | se | ci_lower | ci_upper | mse_gamma_in | mse_gamma_out |\n|---|---|---|---|---|---|---|\n",
    );
    for r in reports {
        out.push_str(&format!(
            "| {} | {:.6} | {:.6} | {:.6} | {:.6} | {:.6} | {:.6} |\n",
            r.method,
            r.tau_hat,
            r.se,
            r.ci_lower,
            r.ci_upper,
            r.mse_gamma_in_sample,
            r.mse_gamma_cross_folds
        ));
    }
    out
}

fn comparison_csv(comparisons: &[MethodComparison]) -> String {
    let mut out = String::from("method_a,method_b,difference,se,z,p_value\n");
    for c in comparisons {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.method_a, c.method_b, c.difference, c.se, c.z, c.p_value
        ));
    }
    out
}

fn comparison_table(comparisons: &[MethodComparison]) -> String {
    let mut out =
        String::from("| method_a | method_b | difference | se | z | p_value |\n|---|---|---|---|---|---|\n");
    for c in comparisons {
        out.push_str(&format!(
            "| {} | {} | {:.6} | {:.6} | {:.3} | {:.6} |\n",
            c.method_a, c.method_b, c.difference, c.se, c.z, c.p_value
        ));
    }
    out
}
