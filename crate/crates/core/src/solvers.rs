//! L1-regularized solvers and weighted least squares.
//!
//! The Lasso and the exact Riesz-representer program share one engine:
//! both minimize a convex quadratic plus an L1 penalty,
//! `f(b) = c0 - 2 c'b + b'G b + r * |b|_1`,
//! by cyclic coordinate descent with soft-thresholding. For the Lasso,
//! `G` and `c` are weighted design moments; for the Riesz program they are
//! the second-moment matrix of differenced basis rows and the mean
//! derivative row. The iterative Riesz variant runs proximal gradient for
//! a fixed step budget with no optimality claim, matching estimators that
//! stop after finite training time.
//!
//! Weights are normalized to mean 1 on entry, so rescaling all weights by
//! a positive constant never changes a solution.

use nalgebra::{DMatrix, DVector};

use crate::dictionary::normalized_weights;
use crate::error::{Error, Result};
use crate::panel::DifferencedDesign;

/// Outcome of an L1 solver run.
#[derive(Debug, Clone)]
pub struct SolverResult {
    pub coefficients: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
}

/// Weighted Lasso regression problem
/// `(1/m) sum_k w_k (y_k - x_k'b)^2 + penalty * |b|_1`.
#[derive(Debug, Clone)]
pub struct LassoProblem {
    design: DMatrix<f64>,
    response: DVector<f64>,
    weights: DVector<f64>,
    penalty: f64,
}

impl LassoProblem {
    pub fn new(
        design: DMatrix<f64>,
        response: DVector<f64>,
        weights: Option<DVector<f64>>,
        penalty: f64,
    ) -> Result<Self> {
        let m = design.nrows();
        if m == 0 {
            return Err(Error::data("lasso problem has no rows"));
        }
        if response.len() != m {
            return Err(Error::data("response length does not match design rows"));
        }
        if !penalty.is_finite() || penalty < 0.0 {
            return Err(Error::config("lasso penalty must be finite and >= 0"));
        }
        if design.iter().any(|v| !v.is_finite()) || response.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("lasso problem contains non-finite entries"));
        }
        let weights = normalized_weights(m, weights.as_ref())?;
        Ok(LassoProblem { design, response, weights, penalty })
    }

    pub fn penalty(&self) -> f64 {
        self.penalty
    }

    /// Penalized objective value at `beta`.
    pub fn objective(&self, beta: &DVector<f64>) -> f64 {
        let residual = &self.response - &self.design * beta;
        let m = self.design.nrows() as f64;
        let loss = residual
            .iter()
            .zip(self.weights.iter())
            .map(|(&r, &w)| w * r * r)
            .sum::<f64>()
            / m;
        loss + self.penalty * beta.iter().map(|b| b.abs()).sum::<f64>()
    }

    pub(crate) fn quadratic_form(&self) -> QuadraticForm {
        QuadraticForm::from_weighted_ls(&self.design, &self.response, &self.weights)
    }
}

/// The quadratic `c0 - 2 c'b + b'G b` in Gram form; `G` is symmetric PSD.
#[derive(Debug, Clone)]
pub(crate) struct QuadraticForm {
    pub g: DMatrix<f64>,
    pub c: DVector<f64>,
    pub c0: f64,
}

impl QuadraticForm {
    /// Gram form of a weighted least-squares loss `(1/m) sum w (y - x'b)^2`
    /// with weights already normalized to mean 1.
    pub fn from_weighted_ls(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> Self {
        let m = x.nrows() as f64;
        let mut wx = x.clone();
        for (i, mut row) in wx.row_iter_mut().enumerate() {
            row *= w[i] / m;
        }
        let mut g = x.transpose() * &wx;
        symmetrize(&mut g);
        let c = wx.transpose() * y;
        let c0 = y.iter().zip(w.iter()).map(|(&yi, &wi)| wi * yi * yi).sum::<f64>() / m;
        QuadraticForm { g, c, c0 }
    }

}

fn symmetrize(g: &mut DMatrix<f64>) {
    for i in 0..g.nrows() {
        for j in i + 1..g.ncols() {
            let v = 0.5 * (g[(i, j)] + g[(j, i)]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Cyclic coordinate descent on `c0 - 2 c'b + b'G b + penalty |b|_1`.
///
/// Converges when a full sweep moves no coefficient by more than `tol`
/// and the KKT residual is below `10 * tol`. Columns with `G_jj = 0` and
/// a conflicting linear term make the objective unbounded below.
pub(crate) fn l1_quadratic_descent(
    q: &QuadraticForm,
    penalty: f64,
    tol: f64,
    max_iter: usize,
    warm_start: Option<&DVector<f64>>,
) -> Result<SolverResult> {
    if tol <= 0.0 {
        return Err(Error::config("solver tolerance must be positive"));
    }
    let p = q.c.len();
    let diag_floor = 1e-14 * q.g.diagonal().amax().max(1.0);
    for j in 0..p {
        if q.g[(j, j)] <= diag_floor && 2.0 * q.c[j].abs() > penalty + 1e-14 {
            return Err(Error::solver(format!(
                "objective unbounded below along coordinate {j} (zero curvature, nonzero slope)"
            )));
        }
    }

    let mut beta = match warm_start {
        Some(b) => b.clone(),
        None => DVector::zeros(p),
    };
    // Maintain u = G * beta across coordinate updates.
    let mut u = &q.g * &beta;
    let mut prev_objective = f64::INFINITY;
    let g_storage = q.g.as_slice();

    let update_coord = |j: usize, beta: &mut DVector<f64>, u: &mut DVector<f64>| -> f64 {
        let g_jj = q.g[(j, j)];
        if g_jj <= diag_floor {
            return 0.0;
        }
        let old = beta[j];
        // Linear coefficient with coordinate j removed.
        let partial = q.c[j] - (u[j] - g_jj * old);
        let new = soft_threshold(partial, penalty / 2.0) / g_jj;
        if new == old {
            return 0.0;
        }
        let delta = new - old;
        // Column j of the column-major Gram storage.
        let col = &g_storage[j * p..(j + 1) * p];
        for (ui, &gij) in u.iter_mut().zip(col) {
            *ui += delta * gij;
        }
        beta[j] = new;
        delta.abs()
    };

    let mut sweep = 0usize;
    let mut active: Vec<usize> = Vec::with_capacity(p);
    while sweep < max_iter {
        // Full sweep: admits new coordinates and certifies convergence.
        sweep += 1;
        let mut max_change = 0.0f64;
        for j in 0..p {
            max_change = max_change.max(update_coord(j, &mut beta, &mut u));
        }
        if sweep % 128 == 0 {
            // Refresh limits accumulated drift in u.
            u = &q.g * &beta;
        }
        let objective = q.c0 - 2.0 * q.c.dot(&beta)
            + beta.dot(&u)
            + penalty * beta.iter().map(|b| b.abs()).sum::<f64>();
        debug_assert!(
            objective <= prev_objective + 1e-10 * (1.0 + prev_objective.abs()),
            "coordinate descent objective increased: {prev_objective} -> {objective}"
        );
        prev_objective = objective;

        if max_change < tol && kkt_residual_gram(q, penalty, &beta, &u) < 10.0 * tol {
            return Ok(SolverResult {
                coefficients: beta,
                iterations: sweep,
                converged: true,
                objective,
            });
        }

        // Bounded inner sweeps over the current support; full sweeps above
        // remain the only place convergence is certified.
        active.clear();
        active.extend((0..p).filter(|&j| beta[j] != 0.0));
        if active.len() == p {
            continue;
        }
        let inner_budget = 50.min(max_iter.saturating_sub(sweep + 1));
        for _ in 0..inner_budget {
            sweep += 1;
            let mut inner_change = 0.0f64;
            for &j in &active {
                inner_change = inner_change.max(update_coord(j, &mut beta, &mut u));
            }
            if inner_change < tol {
                break;
            }
        }
    }

    Ok(SolverResult {
        coefficients: beta,
        iterations: max_iter,
        converged: false,
        objective: prev_objective,
    })
}

fn kkt_residual_gram(
    q: &QuadraticForm,
    penalty: f64,
    beta: &DVector<f64>,
    u: &DVector<f64>,
) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..beta.len() {
        let grad = 2.0 * (u[j] - q.c[j]);
        let r = if beta[j] == 0.0 {
            (grad.abs() - penalty).max(0.0)
        } else {
            (grad + penalty * beta[j].signum()).abs()
        };
        worst = worst.max(r);
    }
    worst
}

/// Stationarity violation of `beta` for a Lasso problem: subgradient
/// distance from zero, maximized over coordinates.
pub fn lasso_kkt_residual(problem: &LassoProblem, beta: &DVector<f64>) -> f64 {
    let q = problem.quadratic_form();
    let u = &q.g * beta;
    kkt_residual_gram(&q, problem.penalty, beta, &u)
}

/// Solve a weighted Lasso by cyclic coordinate descent.
pub fn lasso_fit(problem: &LassoProblem, tol: f64, max_iter: usize) -> Result<SolverResult> {
    l1_quadratic_descent(&problem.quadratic_form(), problem.penalty, tol, max_iter, None)
}

/// Riesz-representer program `-2 M'rho + rho'Q rho + penalty |rho|_1`.
///
/// `M` is the weighted mean of standardized derivative rows and `Q` the
/// weighted second-moment matrix of differenced standardized rows, so `Q`
/// is symmetric positive semidefinite by construction.
#[derive(Debug, Clone)]
pub struct RieszProblem {
    m_vec: DVector<f64>,
    q_mat: DMatrix<f64>,
    penalty: f64,
}

impl RieszProblem {
    /// Build from explicit moments. `q_mat` must be symmetric (checked to
    /// a small tolerance, then symmetrized exactly).
    pub fn new(m_vec: DVector<f64>, q_mat: DMatrix<f64>, penalty: f64) -> Result<Self> {
        if q_mat.nrows() != q_mat.ncols() || q_mat.nrows() != m_vec.len() {
            return Err(Error::data("riesz problem dimensions do not match"));
        }
        if !penalty.is_finite() || penalty < 0.0 {
            return Err(Error::config("riesz penalty must be finite and >= 0"));
        }
        if m_vec.iter().any(|v| !v.is_finite()) || q_mat.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("riesz problem contains non-finite entries"));
        }
        let scale = q_mat.amax().max(1.0);
        let mut q_mat = q_mat;
        for i in 0..q_mat.nrows() {
            for j in i + 1..q_mat.ncols() {
                if (q_mat[(i, j)] - q_mat[(j, i)]).abs() > 1e-8 * scale {
                    return Err(Error::data("riesz second-moment matrix is not symmetric"));
                }
            }
        }
        symmetrize(&mut q_mat);
        Ok(RieszProblem { m_vec, q_mat, penalty })
    }

    /// Weighted moments of a differenced design block: `M` from derivative
    /// rows, `Q` from outer products of differenced rows. Weights are
    /// normalized to mean 1 within the block.
    pub fn from_rows(
        delta_b: &DMatrix<f64>,
        deriv: &DMatrix<f64>,
        weights: Option<&DVector<f64>>,
        penalty: f64,
    ) -> Result<Self> {
        let m = delta_b.nrows();
        if m == 0 {
            return Err(Error::data("riesz problem has no rows"));
        }
        if deriv.nrows() != m || deriv.ncols() != delta_b.ncols() {
            return Err(Error::data("derivative rows do not match differenced rows"));
        }
        let w = normalized_weights(m, weights)?;
        let mf = m as f64;
        let mut wx = delta_b.clone();
        for (i, mut row) in wx.row_iter_mut().enumerate() {
            row *= w[i] / mf;
        }
        let mut q_mat = delta_b.transpose() * &wx;
        symmetrize(&mut q_mat);
        let m_vec = deriv.transpose() * DVector::from_fn(m, |i, _| w[i] / mf);
        RieszProblem::new(m_vec, q_mat, penalty)
    }

    pub fn m_vec(&self) -> &DVector<f64> {
        &self.m_vec
    }

    pub fn q_mat(&self) -> &DMatrix<f64> {
        &self.q_mat
    }

    pub fn penalty(&self) -> f64 {
        self.penalty
    }

    /// Unpenalized quadratic loss `-2 M'rho + rho'Q rho`; this is also the
    /// held-out tuning criterion for the representer.
    pub fn quadratic_loss(&self, rho: &DVector<f64>) -> f64 {
        -2.0 * self.m_vec.dot(rho) + rho.dot(&(&self.q_mat * rho))
    }

    /// Penalized objective value at `rho`.
    pub fn objective(&self, rho: &DVector<f64>) -> f64 {
        self.quadratic_loss(rho) + self.penalty * rho.iter().map(|r| r.abs()).sum::<f64>()
    }

    fn quadratic_form(&self) -> QuadraticForm {
        QuadraticForm { g: self.q_mat.clone(), c: self.m_vec.clone(), c0: 0.0 }
    }
}

/// Assemble the Riesz program from every row of a differenced design.
pub fn assemble_riesz_problem(design: &DifferencedDesign, r_alpha: f64) -> Result<RieszProblem> {
    RieszProblem::from_rows(design.delta_b(), design.deriv(), Some(design.weights()), r_alpha)
}

/// Stationarity violation of `rho` for a Riesz program.
pub fn riesz_kkt_residual(problem: &RieszProblem, rho: &DVector<f64>) -> f64 {
    let q = problem.quadratic_form();
    let u = &q.g * rho;
    kkt_residual_gram(&q, problem.penalty, rho, &u)
}

/// Solve the Riesz program exactly by coordinate descent.
///
/// Per-coordinate update: `rho_j <- S(M_j - sum_{k!=j} Q_jk rho_k, penalty/2) / Q_jj`
/// for `Q_jj > 0`. Returns an error when a zero-curvature coordinate has a
/// slope the penalty cannot dominate (objective unbounded below).
pub fn riesz_fit_exact(problem: &RieszProblem, tol: f64, max_iter: usize) -> Result<SolverResult> {
    l1_quadratic_descent(&problem.quadratic_form(), problem.penalty, tol, max_iter, None)
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration with a
/// deterministic start vector.
pub fn power_iteration_max_eigenvalue(q: &DMatrix<f64>) -> f64 {
    let p = q.nrows();
    if p == 0 {
        return 0.0;
    }
    // Slightly uneven start avoids being orthogonal to structured modes.
    let mut v = DVector::from_fn(p, |i, _| 1.0 + 0.01 * (i + 1) as f64 / p as f64);
    v /= v.norm();
    let mut lambda = 0.0f64;
    for _ in 0..1000 {
        let qv = q * &v;
        let norm = qv.norm();
        if norm <= f64::MIN_POSITIVE {
            return 0.0;
        }
        let next = qv.dot(&v);
        v = qv / norm;
        if (next - lambda).abs() <= 1e-12 * next.abs().max(1.0) {
            return next.max(0.0);
        }
        lambda = next;
    }
    lambda.max(0.0)
}

/// Step size used by [`riesz_fit_iterative`]: the reciprocal of the
/// gradient Lipschitz constant `2 * lambda_max(Q)`, shrunk marginally to
/// absorb power-iteration error.
pub fn iterative_step_size(problem: &RieszProblem) -> f64 {
    let lambda = power_iteration_max_eigenvalue(problem.q_mat());
    1.0 / (2.0 * lambda.max(f64::MIN_POSITIVE) * 1.01)
}

/// Proximal-gradient Riesz solver with a fixed step budget.
///
/// Each step follows the gradient `2 Q rho - 2 M` with the step size from
/// [`iterative_step_size`] and soft-thresholds by `step * penalty`. It runs
/// exactly `step_budget` iterations and claims no optimality: the exact
/// solver's objective is a lower bound on this one's.
pub fn riesz_fit_iterative(problem: &RieszProblem, step_budget: usize) -> Result<SolverResult> {
    if step_budget < 1 {
        return Err(Error::config("step budget must be >= 1"));
    }
    let p = problem.m_vec.len();
    let step = iterative_step_size(problem);
    let q_storage = problem.q_mat.as_slice();
    let mut rho = DVector::zeros(p);
    let mut q_rho = DVector::zeros(p);
    for _ in 0..step_budget {
        // Q * rho accumulated over nonzero coordinates only.
        q_rho.fill(0.0);
        for j in 0..p {
            if rho[j] != 0.0 {
                let col = &q_storage[j * p..(j + 1) * p];
                let scale = rho[j];
                for (qi, &qij) in q_rho.iter_mut().zip(col) {
                    *qi += scale * qij;
                }
            }
        }
        let threshold = step * problem.penalty;
        for j in 0..p {
            let moved = rho[j] - step * 2.0 * (q_rho[j] - problem.m_vec[j]);
            rho[j] = soft_threshold(moved, threshold);
        }
    }
    let objective = problem.objective(&rho);
    Ok(SolverResult {
        coefficients: rho,
        iterations: step_budget,
        converged: true,
        objective,
    })
}

/// Weighted least-squares fit with rank handling.
#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coefficients: DVector<f64>,
    pub rank: usize,
    /// Original column indices dropped as linearly dependent.
    pub dropped: Vec<usize>,
}

/// Weighted least squares through a column-pivoted QR decomposition.
///
/// Columns judged linearly dependent (pivoted `R` diagonal below a relative
/// tolerance) receive coefficient 0 and are reported in `dropped`.
pub fn ols_fit(
    design: &DMatrix<f64>,
    response: &DVector<f64>,
    weights: Option<&DVector<f64>>,
) -> Result<OlsFit> {
    let m = design.nrows();
    let p = design.ncols();
    if m == 0 {
        return Err(Error::data("least squares needs at least one row"));
    }
    if response.len() != m {
        return Err(Error::data("response length does not match design rows"));
    }
    let w = normalized_weights(m, weights)?;

    let mut xw = design.clone();
    let mut yw = response.clone();
    for i in 0..m {
        let s = w[i].sqrt();
        xw.row_mut(i).scale_mut(s);
        yw[i] *= s;
    }

    let qr = xw.col_piv_qr();
    let r = qr.r();
    let k = r.nrows().min(r.ncols());
    let lead = r[(0, 0)].abs();
    let tol = lead * 1e-10;
    let mut rank = 0;
    for i in 0..k {
        if r[(i, i)].abs() > tol {
            rank += 1;
        } else {
            break;
        }
    }

    // Solve in pivoted column order, then map back to original order.
    let mut coefficients = DVector::zeros(p);
    if rank > 0 {
        let qt_y = qr.q().transpose() * &yw;
        // Back-substitution on the leading rank x rank block of R.
        for i in (0..rank).rev() {
            let mut acc = qt_y[i];
            for j in i + 1..rank {
                acc -= r[(i, j)] * coefficients[j];
            }
            coefficients[i] = acc / r[(i, i)];
        }
    }
    let mut dropped_marker = DVector::from_fn(p, |i, _| if i >= rank { 1.0 } else { 0.0 });
    qr.p().inv_permute_rows(&mut coefficients);
    qr.p().inv_permute_rows(&mut dropped_marker);
    let dropped: Vec<usize> = dropped_marker
        .iter()
        .enumerate()
        .filter(|&(_, &v)| v == 1.0)
        .map(|(i, _)| i)
        .collect();
    Ok(OlsFit { coefficients, rank, dropped })
}
