//! Empirical univariate margins: the map between data scale and copula scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Empirical cdf with plotting positions `rank / (n + 1)` and a linearly
/// interpolated quantile function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMarginal {
    sorted: Vec<f64>,
}

impl EmpiricalMarginal {
    pub fn fit(sample: &[f64]) -> Result<Self> {
        if sample.len() < 2 {
            return Err(Error::invalid(format!("an empirical margin needs at least 2 values, got {}", sample.len())));
        }
        if let Some(pos) = sample.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("non-finite value at index {pos}")));
        }
        let mut sorted = sample.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(EmpiricalMarginal { sorted })
    }

    pub fn n(&self) -> usize {
        self.sorted.len()
    }

    pub fn sorted_sample(&self) -> &[f64] {
        &self.sorted
    }

    /// Number of sample values `<= x`, clamped to `[1, n]` and scaled by
    /// `1 / (n + 1)`, so the result never touches 0 or 1.
    pub fn cdf(&self, x: f64) -> f64 {
        let n = self.sorted.len();
        let rank = self.sorted.partition_point(|&s| s <= x).clamp(1, n);
        rank as f64 / (n + 1) as f64
    }

    /// Generalized inverse of [`cdf`](Self::cdf) on the plotting-position
    /// grid, linear between order statistics and constant beyond the
    /// extreme positions.
    pub fn quantile(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::invalid(format!("quantile level {u} is outside (0,1)")));
        }
        Ok(self.quantile_unchecked(u))
    }

    pub(crate) fn quantile_unchecked(&self, u: f64) -> f64 {
        let n = self.sorted.len();
        let t = u * (n + 1) as f64;
        let nearest = t.round();
        // snap so that quantile(cdf(x_i)) reproduces x_i exactly
        let t = if (t - nearest).abs() < 1e-9 * (n + 1) as f64 { nearest } else { t };
        if t <= 1.0 {
            return self.sorted[0];
        }
        if t >= n as f64 {
            return self.sorted[n - 1];
        }
        let k = t.floor() as usize;
        let frac = t - k as f64;
        let lo = self.sorted[k - 1];
        if frac == 0.0 {
            return lo;
        }
        lo + frac * (self.sorted[k] - lo)
    }
}
