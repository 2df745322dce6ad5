//! Debiased machine learning for average derivatives in additive
//! fixed-effects panel models.
//!
//! The pipeline: expand treatment and covariates through a polynomial
//! basis dictionary, first-difference outcomes and basis rows to remove
//! unit fixed effects, fit the regression function by cross-fitted Lasso,
//! fit a Riesz representer for the derivative functional on the same
//! differenced basis, and combine both into a debiased score per
//! observation. Inference clusters at the panel-unit level.
//!
//! Modules:
//! - [`dictionary`]: polynomial basis terms, analytical treatment
//!   derivatives, standardization.
//! - [`panel`]: panel data model, CSV ingestion, first-differencing,
//!   unit-integral fold assignment.
//! - [`solvers`]: coordinate-descent Lasso, exact and fixed-budget
//!   proximal-gradient Riesz solvers, rank-revealing weighted OLS.
//! - [`estimator`]: cross-fitted estimation, cluster-robust variance,
//!   hyperparameter tuning, method comparison.
//! - [`simulation`]: benchmark data-generating process and Monte Carlo
//!   harness.
//! - [`trend`]: weighted least-squares trend fits for rolling estimates.

pub mod dictionary;
pub mod error;
pub mod estimator;
pub mod panel;
pub mod simulation;
pub mod solvers;
pub mod trend;

pub use error::{Error, Result};
