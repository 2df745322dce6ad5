//! Weighted least-squares trend fits over a sequence of estimates.
//!
//! Used to ask whether rolling-window estimates drift over time. The fit is
//! two-pass: an unweighted regression of the estimates on time yields a
//! residual variance, then each point is reweighted by the inverse of
//! (its squared standard error + that residual variance) and the line is
//! refitted. The second-pass weights are treated as known inverse
//! variances, so the slope variance comes straight off the weighted normal
//! equations.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// A fitted linear trend with normal-approximation inference.
#[derive(Debug, Clone, Serialize)]
pub struct TrendFit {
    pub slope: f64,
    pub intercept: f64,
    pub se_slope: f64,
    pub z: f64,
    pub p_value: f64,
    /// First-pass residual variance entering the second-pass weights.
    pub residual_variance: f64,
}

/// One observation for the trend fit.
#[derive(Debug, Clone, Copy)]
pub struct TrendPoint {
    /// Time coordinate (window start year, for rolling estimates).
    pub time: f64,
    pub estimate: f64,
    pub se: f64,
}

fn line_fit(points: &[TrendPoint], weights: &[f64]) -> Result<(f64, f64, f64)> {
    // Weighted normal equations for (intercept, slope), centered at the
    // weighted time mean so year-scale coordinates stay well conditioned.
    // Returns the slope variance assuming weights are inverse variances.
    let sw: f64 = weights.iter().sum();
    let mean_t: f64 = points.iter().zip(weights).map(|(p, &w)| w * p.time).sum::<f64>() / sw;
    let mean_y: f64 = points.iter().zip(weights).map(|(p, &w)| w * p.estimate).sum::<f64>() / sw;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (p, &w) in points.iter().zip(weights) {
        let dt = p.time - mean_t;
        sxx += w * dt * dt;
        sxy += w * dt * (p.estimate - mean_y);
    }
    if sxx <= 1e-12 * sw * points.iter().map(|p| p.time * p.time).fold(0.0, f64::max).max(1.0) {
        return Err(Error::data(
            "trend fit is degenerate (time points do not vary)",
        ));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_t;
    let var_slope = 1.0 / sxx;
    Ok((intercept, slope, var_slope))
}

/// Fit a linear trend to estimates with per-point standard errors.
pub fn wls_trend(points: &[TrendPoint]) -> Result<TrendFit> {
    if points.len() < 2 {
        return Err(Error::data("trend fit needs at least two points"));
    }
    if points
        .iter()
        .any(|p| !p.time.is_finite() || !p.estimate.is_finite() || !p.se.is_finite() || p.se < 0.0)
    {
        return Err(Error::data("trend fit needs finite inputs and se >= 0"));
    }

    // First pass: unweighted fit for the residual variance.
    let ones = vec![1.0; points.len()];
    let (intercept0, slope0, _) = line_fit(points, &ones)?;
    let rss: f64 = points
        .iter()
        .map(|p| {
            let r = p.estimate - intercept0 - slope0 * p.time;
            r * r
        })
        .sum();
    let df = points.len().saturating_sub(2);
    let residual_variance = if df > 0 { rss / df as f64 } else { 0.0 };

    // Second pass: inverse-variance weights.
    let weights: Vec<f64> = points
        .iter()
        .map(|p| 1.0 / (p.se * p.se + residual_variance).max(f64::MIN_POSITIVE))
        .collect();
    let (intercept, slope, var_slope) = line_fit(points, &weights)?;
    let se_slope = var_slope.sqrt();
    let z = if se_slope > 0.0 { slope / se_slope } else { 0.0 };
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p_value = 2.0 * (1.0 - normal.cdf(z.abs()));
    Ok(TrendFit { slope, intercept, se_slope, z, p_value, residual_variance })
}
