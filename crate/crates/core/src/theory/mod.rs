//! Bias-variance model of per-node generalization error and the scaling law
//! it implies for the optimal number of experts.
//!
//! The model is
//! `L(U, k) = β k^μ + ρ α U + (1 − ρ) α U / k^φ + ε`,
//! whose stationary point in `k` is
//! `k* = ((1 − ρ) α φ U / (β μ))^{1 / (μ + φ)}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid step of the brute-force minimizer.
pub const GRID_STEP: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub beta: f64,
    pub mu: f64,
    pub alpha: f64,
    pub phi: f64,
    pub rho: f64,
    pub eps: f64,
}

impl Default for ScalingParams {
    fn default() -> Self {
        ScalingParams {
            beta: 0.01,
            mu: 1.0,
            alpha: 1.0,
            phi: 1.0,
            rho: 0.0,
            eps: 0.0,
        }
    }
}

impl ScalingParams {
    pub fn validate(&self) -> Result<()> {
        let pos = |x: f64| x.is_finite() && x > 0.0;
        if !(pos(self.beta) && pos(self.mu) && pos(self.alpha) && pos(self.phi)) {
            return Err(Error::invalid("beta, mu, alpha and phi must be positive"));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::invalid(format!("rho = {} outside [0, 1)", self.rho)));
        }
        if !self.eps.is_finite() {
            return Err(Error::invalid("eps must be finite"));
        }
        Ok(())
    }

    /// Predicted log-log slope of `k*` against `U`.
    pub fn exponent(&self) -> f64 {
        1.0 / (self.mu + self.phi)
    }
}

/// Model error of a node with uncertainty `u` served by `k` experts.
pub fn generalization_error(sp: &ScalingParams, u: f64, k: f64) -> f64 {
    let variance = sp.alpha * u;
    sp.beta * k.powf(sp.mu) + sp.rho * variance + (1.0 - sp.rho) * variance / k.powf(sp.phi) + sp.eps
}

fn check_inputs(sp: &ScalingParams, u: f64, k_max: f64) -> Result<()> {
    sp.validate()?;
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::invalid(format!("uncertainty {u} outside [0, 1]")));
    }
    if !(k_max >= 1.0 && k_max.is_finite()) {
        return Err(Error::invalid(format!("k_max = {k_max} must be at least 1")));
    }
    Ok(())
}

/// Minimizer of [`generalization_error`] over `k ∈ [1, k_max]` on a grid of
/// step [`GRID_STEP`]; the first grid point wins ties.
pub fn optimal_k_bruteforce(sp: &ScalingParams, u: f64, k_max: f64) -> Result<f64> {
    check_inputs(sp, u, k_max)?;
    let steps = ((k_max - 1.0) / GRID_STEP).floor() as usize;
    let mut best = (1.0, generalization_error(sp, u, 1.0));
    for i in 1..=steps {
        let k = 1.0 + i as f64 * GRID_STEP;
        let e = generalization_error(sp, u, k);
        if e < best.1 {
            best = (k, e);
        }
    }
    Ok(best.0)
}

/// Stationary point of the model, clamped to `[1, k_max]`.
pub fn optimal_k_closed_form(sp: &ScalingParams, u: f64, k_max: f64) -> Result<f64> {
    check_inputs(sp, u, k_max)?;
    let kappa = (1.0 - sp.rho) * sp.alpha * sp.phi / (sp.beta * sp.mu);
    Ok((kappa * u).powf(sp.exponent()).clamp(1.0, k_max))
}

/// Integer budget in `1..=k_max` minimizing the model error.
pub fn optimal_k_integer(sp: &ScalingParams, u: f64, k_max: usize) -> Result<usize> {
    check_inputs(sp, u, k_max as f64)?;
    let mut best = (1, generalization_error(sp, u, 1.0));
    for k in 2..=k_max {
        let e = generalization_error(sp, u, k as f64);
        if e < best.1 {
            best = (k, e);
        }
    }
    Ok(best.0)
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    let mut grid: Vec<f64> = (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect();
    grid[0] = lo;
    grid[n - 1] = hi;
    grid
}

/// Slope of `ln k*` against `ln U` using brute-force minimizers.
pub fn fit_scaling_exponent(sp: &ScalingParams, u_grid: &[f64], k_max: f64) -> Result<f64> {
    if u_grid.len() < 10 {
        return Err(Error::invalid(format!("{} grid points, need at least 10", u_grid.len())));
    }
    if u_grid.iter().any(|&u| !(u > 0.0)) {
        return Err(Error::invalid("uncertainty grid must be strictly positive"));
    }
    let lo = u_grid.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = u_grid.iter().cloned().fold(0.0, f64::max);
    if hi / lo < 10.0 {
        return Err(Error::invalid("uncertainty grid must span at least one decade"));
    }
    let mut x = Vec::with_capacity(u_grid.len());
    let mut y = Vec::with_capacity(u_grid.len());
    for &u in u_grid {
        x.push(u.ln());
        y.push(optimal_k_bruteforce(sp, u, k_max)?.ln());
    }
    Ok(ols_slope(&x, &y))
}

/// One row of the scaling-law table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub mu: f64,
    pub phi: f64,
    pub rho: f64,
    pub u: f64,
    pub k_bruteforce: f64,
    pub k_closed_form: f64,
    pub fitted_slope: f64,
}

/// Brute-force and closed-form optima over `u_grid`, each row carrying the
/// slope fitted over the whole grid.
pub fn scaling_table(sp: &ScalingParams, u_grid: &[f64], k_max: f64) -> Result<Vec<ScalingRow>> {
    let slope = fit_scaling_exponent(sp, u_grid, k_max)?;
    u_grid
        .iter()
        .map(|&u| {
            Ok(ScalingRow {
                mu: sp.mu,
                phi: sp.phi,
                rho: sp.rho,
                u,
                k_bruteforce: optimal_k_bruteforce(sp, u, k_max)?,
                k_closed_form: optimal_k_closed_form(sp, u, k_max)?,
                fitted_slope: slope,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand() -> ScalingParams {
        ScalingParams {
            beta: 0.25,
            ..ScalingParams::default()
        }
    }

    #[test]
    fn error_examples() {
        assert!((generalization_error(&hand(), 1.0, 2.0) - 1.0).abs() < 1e-15);
        let sp = ScalingParams {
            eps: 0.1,
            ..hand()
        };
        assert!((generalization_error(&sp, 0.0, 3.0) - (0.75 + 0.1)).abs() < 1e-15);
        assert_eq!(optimal_k_integer(&sp, 0.0, 8).unwrap(), 1);
        let almost_one = ScalingParams {
            rho: 1.0 - 1e-15,
            ..hand()
        };
        let a = generalization_error(&almost_one, 0.8, 1.0) - almost_one.beta;
        let b = generalization_error(&almost_one, 0.8, 7.0) - almost_one.beta * 7.0;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn optimum_examples() {
        let sp = hand();
        let k = optimal_k_bruteforce(&sp, 1.0, 10.0).unwrap();
        assert!((k - 2.0).abs() < 1e-2);
        assert_eq!(optimal_k_closed_form(&sp, 1.0, 10.0).unwrap(), 2.0);
        assert_eq!(optimal_k_bruteforce(&sp, 0.0, 10.0).unwrap(), 1.0);
        let base = ScalingParams::default();
        let k1 = optimal_k_bruteforce(&base, 0.3, 50.0).unwrap();
        let k2 = optimal_k_bruteforce(&base, 0.6, 50.0).unwrap();
        assert!((k2 / k1 / 2f64.sqrt() - 1.0).abs() < 0.01);
    }

    #[test]
    fn slopes_match_exponent() {
        let grid = log_grid(0.1, 1.0, 12);
        for (mu, phi) in [(1.0, 1.0), (1.0, 2.0), (2.0, 2.0)] {
            let sp = ScalingParams {
                mu,
                phi,
                ..ScalingParams::default()
            };
            let slope = fit_scaling_exponent(&sp, &grid, 100.0).unwrap();
            assert!((slope - 1.0 / (mu + phi)).abs() < 0.02, "mu {mu} phi {phi}: {slope}");
        }
    }

    #[test]
    fn invalid_inputs() {
        let sp = ScalingParams::default();
        assert!(fit_scaling_exponent(&sp, &log_grid(0.1, 1.0, 5), 10.0).is_err());
        assert!(fit_scaling_exponent(&sp, &log_grid(0.5, 1.0, 12), 10.0).is_err());
        assert!(optimal_k_bruteforce(&sp, 1.5, 10.0).is_err());
        assert!(optimal_k_bruteforce(&sp, 0.5, 0.5).is_err());
        let bad = ScalingParams { rho: 1.0, ..sp };
        assert!(bad.validate().is_err());
    }
}
