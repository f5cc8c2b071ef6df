//! Log-log least squares fits of scaling exponents.

use serde::Serialize;

use crate::error::{Error, Result};

/// Values below this floor are treated as numerically zero and left out of the fit.
pub const VALUE_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct ScalingFit {
    /// `p` in `value ~ C eps^p`
    pub exponent: f64,
    /// `ln C`
    pub intercept: f64,
    pub r_squared: f64,
    /// indices dropped because the value was under [`VALUE_FLOOR`]
    pub excluded: Vec<usize>,
    /// fewer than two values above the floor; exponent, intercept and r² are NaN
    pub degenerate: bool,
}

pub fn fit_scaling(eps: &[f64], values: &[f64]) -> Result<ScalingFit> {
    if eps.len() != values.len() {
        return Err(Error::Validation("eps and values differ in length".into()));
    }
    if eps.len() < 3 {
        return Err(Error::Validation(format!("a scaling fit needs at least 3 points, got {}", eps.len())));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut excluded = Vec::new();
    for (i, (&e, &v)) in eps.iter().zip(values).enumerate() {
        if !(e > 0.0) {
            return Err(Error::NonPositiveValue { index: i, value: e });
        }
        if !(v > 0.0) {
            return Err(Error::NonPositiveValue { index: i, value: v });
        }
        if v < VALUE_FLOOR {
            excluded.push(i);
            continue;
        }
        xs.push(e.ln());
        ys.push(v.ln());
    }
    if xs.len() < 2 {
        log::warn!("degenerate scaling fit: {} of {} values below floor {VALUE_FLOOR:e}", excluded.len(), eps.len());
        return Ok(ScalingFit { exponent: f64::NAN, intercept: f64::NAN, r_squared: f64::NAN, excluded, degenerate: true });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Validation("all eps values coincide".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(ScalingFit { exponent: slope, intercept, r_squared, excluded, degenerate: false })
}
