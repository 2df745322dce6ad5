//! Acceptance suite: every check prints one PASS line with the measured
//! values, so a full run documents how the build behaves at benchmark
//! scale. The simulation-based checks share one 200-trial run.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use paneldml::dictionary::{
    fit_standardization, standardized_derivative, DerivativeMode, Dictionary, DictionarySpec,
    PairPolicy, TREATMENT_INDEX,
};
use paneldml::estimator::{clustered_variance, estimate_all, EstimatorConfig, Method, ScoreTable};
use paneldml::panel::{assign_folds, build_differenced_design, PanelDataset};
use paneldml::simulation::{run_monte_carlo, summary_markdown, DgpConfig, MonteCarloResult};
use paneldml::solvers::{
    assemble_riesz_problem, lasso_fit, lasso_kkt_residual, riesz_fit_exact, riesz_fit_iterative,
    riesz_kkt_residual, LassoProblem, RieszProblem,
};

const BENCH_TRIALS: usize = 200;

fn benchmark() -> &'static MonteCarloResult {
    static BENCH: OnceLock<MonteCarloResult> = OnceLock::new();
    BENCH.get_or_init(|| {
        let dgp = DgpConfig { n_units: 1000, n_periods: 2, n_covariates: 20, seed: 11 };
        let est = EstimatorConfig { seed: 13, ..EstimatorConfig::default() };
        run_monte_carlo(&dgp, DictionarySpec::default(), &Method::ALL, BENCH_TRIALS, &est)
            .expect("benchmark simulation runs")
    })
}

fn method_summary(result: &MonteCarloResult, method: Method) -> &paneldml::simulation::MethodSummary {
    result
        .summary
        .methods
        .iter()
        .find(|m| m.method == method)
        .expect("method present in summary")
}

#[test]
fn benchmark_simulation_bands() {
    let result = benchmark();
    println!("{}", summary_markdown(&result.summary));
    let dml = method_summary(result, Method::Dml);
    let lasso = method_summary(result, Method::LassoPlugIn);
    let ols_linear = method_summary(result, Method::OlsLinear);
    let ols_poly = method_summary(result, Method::OlsPoly);

    let checks = [
        (
            "mean true value in [2.85, 3.05]",
            (2.85..=3.05).contains(&dml.mean_true_value),
            format!("{:.4}", dml.mean_true_value),
        ),
        ("|bias(DML)| < 0.05", dml.bias.abs() < 0.05, format!("{:+.4}", dml.bias)),
        (
            "|bias(Lasso)| in [0.15, 0.45]",
            (0.15..=0.45).contains(&lasso.bias.abs()),
            format!("{:+.4}", lasso.bias),
        ),
        (
            "|bias(DML)| < |bias(Lasso)|/3",
            dml.bias.abs() < lasso.bias.abs() / 3.0,
            format!("{:.4} vs {:.4}", dml.bias.abs(), lasso.bias.abs() / 3.0),
        ),
        (
            "coverage(DML) in [0.85, 0.97]",
            (0.85..=0.97).contains(&dml.coverage),
            format!("{:.3}", dml.coverage),
        ),
        ("coverage(Lasso) < 0.5", lasso.coverage < 0.5, format!("{:.3}", lasso.coverage)),
        (
            "SD(OLS Poly) > SD(DML)",
            ols_poly.sd > dml.sd,
            format!("{:.4} vs {:.4}", ols_poly.sd, dml.sd),
        ),
        (
            "MSE tau: DML < OLS Poly",
            dml.mse_tau < ols_poly.mse_tau,
            format!("{:.4} vs {:.4}", dml.mse_tau, ols_poly.mse_tau),
        ),
        (
            "MSE tau: DML < OLS Linear",
            dml.mse_tau < ols_linear.mse_tau,
            format!("{:.4} vs {:.4}", dml.mse_tau, ols_linear.mse_tau),
        ),
    ];
    let all_pass = checks.iter().all(|(_, ok, _)| *ok);
    println!(
        "ACCEPTANCE benchmark_simulation_bands: {}",
        if all_pass { "PASS" } else { "FAIL" }
    );
    for (label, ok, detail) in &checks {
        println!("  [{}] {label}: {detail}", if *ok { "ok" } else { "FAIL" });
    }
    assert!(all_pass, "benchmark simulation bands violated");
}

#[test]
fn overfitting_signature() {
    let result = benchmark();
    let dml = method_summary(result, Method::Dml);
    let lasso = method_summary(result, Method::LassoPlugIn);
    let ols_poly = method_summary(result, Method::OlsPoly);
    let ok = ols_poly.mse_gamma_cross_folds > 3.0 * dml.mse_gamma_cross_folds
        && ols_poly.mse_gamma_cross_folds > 3.0 * lasso.mse_gamma_cross_folds;
    println!(
        "ACCEPTANCE overfitting_signature: {} (cross-fold MSE gamma: OLS Poly {:.3} vs DML {:.3})",
        if ok { "PASS" } else { "FAIL" },
        ols_poly.mse_gamma_cross_folds,
        dml.mse_gamma_cross_folds
    );
    assert!(ok);
}

#[test]
fn reduced_dictionary_configurations() {
    let p124 = Dictionary::build(DictionarySpec::default(), 10).unwrap().len();
    assert_eq!(p124, 124, "10-covariate dictionary size");

    let mut all_pass = true;
    let mut details = Vec::new();
    for (label, periods) in [("h=10 T=2", 2usize), ("h=10 T=5", 5usize)] {
        let dgp = DgpConfig { n_units: 1000, n_periods: periods, n_covariates: 10, seed: 17 };
        let est = EstimatorConfig { seed: 19, ..EstimatorConfig::default() };
        let methods = [Method::Dml, Method::LassoPlugIn];
        let result = run_monte_carlo(&dgp, DictionarySpec::default(), &methods, 100, &est)
            .expect("reduced configuration runs");
        let dml = method_summary(&result, Method::Dml);
        let lasso = method_summary(&result, Method::LassoPlugIn);
        let ok = dml.bias.abs() < lasso.bias.abs() && dml.coverage >= 0.85;
        all_pass &= ok;
        details.push(format!(
            "  [{}] {label}: bias DML {:+.4} vs Lasso {:+.4}, coverage DML {:.3}",
            if ok { "ok" } else { "FAIL" },
            dml.bias,
            lasso.bias,
            dml.coverage
        ));
    }
    println!(
        "ACCEPTANCE reduced_dictionary_configurations: {} (p = {p124})",
        if all_pass { "PASS" } else { "FAIL" }
    );
    for line in &details {
        println!("{line}");
    }
    assert!(all_pass);
}

#[test]
fn riesz_identity_oracle() {
    // Identity basis on standard normal draws: the representer of the
    // derivative functional is the identity, so rho -> 1.
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
    let draws = DMatrix::from_fn(n, 1, |_, _| rng.sample(normal));
    let deriv = DMatrix::from_element(n, 1, 1.0);
    let problem = RieszProblem::from_rows(&draws, &deriv, None, 0.0).unwrap();
    let fit = riesz_fit_exact(&problem, 1e-8, 10_000).unwrap();
    let rho = fit.coefficients[0];
    let ok = fit.converged && (rho - 1.0).abs() < 0.02;
    println!(
        "ACCEPTANCE riesz_identity_oracle: {} (rho = {rho:.5})",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok);
}

/// Refining lattice search over a box: brute force at 11 points per
/// dimension, re-centered on the incumbent each level. Convexity keeps the
/// minimum inside the shrinking box.
fn grid_search_min(
    objective: &dyn Fn(&DVector<f64>) -> f64,
    dims: usize,
    initial_halfwidth: f64,
) -> (DVector<f64>, f64) {
    let mut center = DVector::zeros(dims);
    let mut halfwidth = initial_halfwidth;
    let mut best_point = center.clone();
    let mut best = objective(&best_point);
    for level in 0..16 {
        let steps = 11usize;
        let cell = 2.0 * halfwidth / (steps as f64 - 1.0);
        let mut index = vec![0usize; dims];
        loop {
            let point = DVector::from_fn(dims, |d, _| {
                center[d] - halfwidth + cell * index[d] as f64
            });
            let value = objective(&point);
            if value < best {
                best = value;
                best_point = point;
            }
            // Odometer increment over the lattice.
            let mut d = 0;
            loop {
                if d == dims {
                    break;
                }
                index[d] += 1;
                if index[d] < steps {
                    break;
                }
                index[d] = 0;
                d += 1;
            }
            if d == dims {
                break;
            }
        }
        if level == 0 {
            // The optimum must be interior to the starting box.
            for d in 0..dims {
                assert!(
                    (best_point[d] - center[d]).abs() < halfwidth - cell / 2.0,
                    "grid search hit the initial boundary"
                );
            }
        }
        center = best_point.clone();
        halfwidth = 1.5 * cell;
    }
    (best_point, best)
}

#[test]
fn solver_grid_search_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let tol = 1e-8;
    let mut max_gap = 0.0f64;
    let mut max_kkt = 0.0f64;
    let mut iterative_ok = true;
    for case in 0..100 {
        let p = 1 + case % 3;
        let m = 20 + case % 7;

        // Lasso problem with bounded coefficients.
        let x = DMatrix::from_fn(m, p, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(m, |i, _| {
            (0..p).map(|j| x[(i, j)] * (0.8 - 0.3 * j as f64)).sum::<f64>()
                + rng.random_range(-0.3..0.3)
        });
        let penalty = rng.random_range(0.0..0.3);
        let lasso = LassoProblem::new(x, y, None, penalty).unwrap();
        let fit = lasso_fit(&lasso, tol, 50_000).unwrap();
        assert!(fit.converged);
        let (_, grid_min) = grid_search_min(&|b| lasso.objective(b), p, 4.0);
        max_gap = max_gap.max(fit.objective - grid_min);
        max_kkt = max_kkt.max(lasso_kkt_residual(&lasso, &fit.coefficients));

        // Riesz problem with well-conditioned positive-definite moments,
        // so the optimum stays inside the oracle's search box.
        let a = DMatrix::from_fn(m, p, |_, _| rng.random_range(-1.0..1.0));
        let q = a.transpose() * &a / m as f64 + DMatrix::identity(p, p) * 0.4;
        let m_vec = DVector::from_fn(p, |_, _| rng.random_range(-0.8..0.8));
        let r_alpha = rng.random_range(0.0..0.3);
        let riesz = RieszProblem::new(m_vec, q, r_alpha).unwrap();
        let fit = riesz_fit_exact(&riesz, tol, 50_000).unwrap();
        assert!(fit.converged);
        let (_, grid_min) = grid_search_min(&|r| riesz.objective(r), p, 4.0);
        max_gap = max_gap.max(fit.objective - grid_min);
        max_kkt = max_kkt.max(riesz_kkt_residual(&riesz, &fit.coefficients));

        let iterative = riesz_fit_iterative(&riesz, 400).unwrap();
        iterative_ok &= iterative.objective >= fit.objective - 1e-12;
    }
    let ok = max_gap < 1e-5 && max_kkt < 1e-6 && iterative_ok;
    println!(
        "ACCEPTANCE solver_grid_search_exactness: {} (max objective gap {max_gap:.2e}, max KKT {max_kkt:.2e}, exact <= iterative: {iterative_ok})",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok);
}

#[test]
fn derivative_correctness() {
    let dict = Dictionary::build(DictionarySpec::default(), 20).unwrap();
    assert_eq!(dict.len(), 244);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    // Keep variables away from zero so relative error is well defined for
    // every treatment-bearing term.
    let mut draw = |rng: &mut ChaCha8Rng| {
        let magnitude: f64 = rng.random_range(0.5..3.0);
        if rng.random_range(0.0..1.0) < 0.5 {
            -magnitude
        } else {
            magnitude
        }
    };
    let step = 1e-5;
    let mut max_rel = 0.0f64;
    for _ in 0..1000 {
        let row: Vec<f64> = (0..21).map(|_| draw(&mut rng)).collect();
        let analytic = dict.eval_row_derivative(&row).unwrap();
        let mut up = row.clone();
        let mut down = row.clone();
        up[TREATMENT_INDEX] += step;
        down[TREATMENT_INDEX] -= step;
        let fd = (dict.eval_row(&up).unwrap() - dict.eval_row(&down).unwrap()) / (2.0 * step);
        for j in 0..dict.len() {
            let rel = if analytic[j] == fd[j] {
                0.0
            } else {
                (analytic[j] - fd[j]).abs() / analytic[j].abs()
            };
            max_rel = max_rel.max(rel);
        }
    }

    // Scaling of the finite-sample standardization correction: the gap to
    // the simple form shrinks as 1/n.
    let n_rows = 200;
    let features = DMatrix::from_fn(n_rows, dict.len(), |i, j| {
        let row: Vec<f64> = (0..21)
            .map(|v| 0.5 + ((i * 31 + v * 17 + j) % 97) as f64 / 40.0)
            .collect();
        dict.eval_row(&row).unwrap()[j]
    });
    let stats = fit_standardization(&features, None).unwrap();
    let row: Vec<f64> = (0..21).map(|v| 0.8 + 0.07 * v as f64).collect();
    let gap = |n: usize| {
        let simple =
            standardized_derivative(&dict, &stats, &row, DerivativeMode::Simple, n).unwrap();
        let full =
            standardized_derivative(&dict, &stats, &row, DerivativeMode::FullCorrection, n)
                .unwrap();
        (simple - full).amax()
    };
    let ratio = gap(100) / gap(1000);

    let ok = max_rel < 1e-6 && (7.0..=13.0).contains(&ratio);
    println!(
        "ACCEPTANCE derivative_correctness: {} (max relative error {max_rel:.2e}, correction gap ratio {ratio:.2})",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok);
}

#[test]
fn structural_invariants() {
    let mut failures = Vec::new();

    // Dictionary sizes.
    let tpo = DictionarySpec::default();
    let all = DictionarySpec {
        pair_policy: PairPolicy::AllPairs,
        include_intercept: false,
        ..DictionarySpec::default()
    };
    for (spec, h, expected) in
        [(tpo, 20, 244), (tpo, 10, 124), (all, 2, 36), (all, 8, 351)]
    {
        let p = Dictionary::build(spec, h).unwrap().len();
        if p != expected {
            failures.push(format!("dictionary size {p} != {expected} (h={h})"));
        }
    }

    // Fold unit-integrity on an unbalanced panel.
    let dgp = DgpConfig { n_units: 97, n_periods: 3, n_covariates: 3, seed: 37 };
    let ds = paneldml::simulation::generate_dataset(&dgp).unwrap();
    let folds = assign_folds(&ds, 5, 41).unwrap();
    let sizes = folds.fold_sizes();
    if sizes.iter().max().unwrap() - sizes.iter().min().unwrap() > 1 {
        failures.push(format!("fold sizes unbalanced: {sizes:?}"));
    }
    let dict = Dictionary::build(DictionarySpec::default(), 3).unwrap();
    let features = DMatrix::from_fn(ds.n_obs(), dict.len(), |i, j| {
        dict.eval_row(&ds.raw_vars(i)).unwrap()[j]
    });
    let stats = fit_standardization(&features, None).unwrap();
    let design = build_differenced_design(&ds, &dict, &stats, &folds).unwrap();
    for (i, &u) in design.unit().iter().enumerate() {
        if design.fold()[i] != folds.fold_of(u as usize) {
            failures.push(format!("row {i} fold label mismatch"));
            break;
        }
    }

    // Q is positive semidefinite.
    let problem = assemble_riesz_problem(&design, 0.0).unwrap();
    let min_eig = problem.q_mat().clone().symmetric_eigen().eigenvalues.min();
    if min_eig < -1e-10 {
        failures.push(format!("Q min eigenvalue {min_eig:.2e}"));
    }

    // T=2 variance equals the cross-term-free special case exactly.
    let table = ScoreTable::new(
        (0..40).collect(),
        vec![2; 40],
        (0..40).map(|i| (i as f64 * 0.77).sin() * 2.0).collect(),
        vec![1.0; 40],
    )
    .unwrap();
    let tau = table.tau_hat();
    let (v, _) = clustered_variance(&table, tau);
    let direct: f64 = table
        .scores()
        .iter()
        .zip(table.weights())
        .map(|(&s, &w)| {
            let u = w * s;
            (u - tau) * (u - tau)
        })
        .sum::<f64>()
        / table.len() as f64;
    if v != direct {
        failures.push(format!("T=2 variance {v} != direct {direct}"));
    }

    // Per-unit outcome shifts change nothing, for every method.
    let small = DgpConfig { n_units: 200, n_periods: 2, n_covariates: 2, seed: 43 };
    let base_ds = paneldml::simulation::generate_dataset(&small).unwrap();
    let cfg = EstimatorConfig {
        n_folds: 2,
        r_l_grid: vec![0.3, 0.1],
        r_alpha_grid: vec![1.0, 0.5],
        seed: 47,
        ..EstimatorConfig::default()
    };
    let base = estimate_all(&base_ds, DictionarySpec::default(), &cfg, &Method::ALL).unwrap();
    let mut rows = base_ds.to_observations();
    for row in &mut rows {
        let shift: f64 = row.unit.bytes().map(|b| b as f64 * 1.37).sum();
        row.y += shift;
    }
    let shifted_ds = PanelDataset::from_observations(rows).unwrap();
    let shifted = estimate_all(&shifted_ds, DictionarySpec::default(), &cfg, &Method::ALL).unwrap();
    for (a, b) in base.iter().zip(&shifted) {
        for (field, va, vb) in a.comparable_fields(b) {
            if (va - vb).abs() > 1e-10 * va.abs().max(1.0) {
                failures.push(format!(
                    "{}: {field} moved {va} -> {vb} under unit shifts",
                    a.method
                ));
            }
        }
    }

    let ok = failures.is_empty();
    println!(
        "ACCEPTANCE structural_invariants: {}",
        if ok { "PASS" } else { "FAIL" }
    );
    for f in &failures {
        println!("  [FAIL] {f}");
    }
    assert!(ok, "{failures:?}");
}
