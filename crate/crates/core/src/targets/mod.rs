//! Plug-in estimators of the treatment-specific mean and of the integrated
//! squared density, with their canonical gradients and Wald intervals.

mod ate;
mod density;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{HalError, Result};
use crate::select::{Rule, SelectorReport};

pub use ate::{eic_ate, fit_ate, AteConfig, AteEstimate, KnotRows, PropensityFit};
pub use density::{
    bin_index, density_bins, eic_density, fit_density, fit_density_hal, psi_density, DensityConfig, DensityEstimate, DensityFit, DensityPlugin,
    HazardDensity,
};

/// Standard normal 0.975 quantile.
pub const Z_975: f64 = 1.959964;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldInterval {
    pub lo: f64,
    pub hi: f64,
    pub se: f64,
}

/// `psi +- z se` with `se = sd(eic) / sqrt(n)` (sample standard deviation).
pub fn wald_ci(psi: f64, eic: &[f64], level: f64) -> Result<WaldInterval> {
    if !(level > 0.0 && level < 1.0) {
        return Err(HalError::InvalidInput(format!("confidence level {level} outside (0, 1)")));
    }
    let n = eic.len();
    if n < 2 {
        return Err(HalError::DegenerateEic(format!("{n} gradient values")));
    }
    let mean = eic.iter().sum::<f64>() / n as f64;
    let var = eic.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) || !var.is_finite() {
        return Err(HalError::DegenerateEic("canonical gradient is constant".into()));
    }
    let se = var.sqrt() / (n as f64).sqrt();
    let z = if level == 0.95 {
        Z_975
    } else {
        Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(0.5 + level / 2.0)
    };
    Ok(WaldInterval {
        lo: psi - z * se,
        hi: psi + z * se,
        se,
    })
}

/// Diagnostics shared by both estimands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// `sqrt(n) P_n D*` at the selected fit.
    pub sqrt_n_pn_dstar: f64,
    /// `P_n D*^2` at the selected fit.
    pub pn_dstar_sq: f64,
    /// Smallest empirical mean of an active non-intercept basis function.
    pub min_active_pn_phi: Option<f64>,
    /// Smallest absolute empirical score of an active non-intercept basis function.
    pub min_active_score: Option<f64>,
    #[serde(rename = "C_selected")]
    pub c_selected: f64,
    pub active_count: usize,
    pub not_met: bool,
}

/// Serialized summary of one estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimand: String,
    pub n: usize,
    pub psi: f64,
    pub se: f64,
    pub ci: (f64, f64),
    #[serde(rename = "C_cv")]
    pub c_cv: f64,
    #[serde(rename = "C_selected")]
    pub c_selected: f64,
    pub rule: Rule,
    pub diagnostics: Diagnostics,
    pub selector: SelectorReport,
}

impl EstimateReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Writes one gradient value per line under an `eic` header.
pub fn write_eic_csv(path: impl AsRef<std::path::Path>, eic: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["eic"])?;
    for d in eic {
        w.write_record([format!("{d:e}")])?;
    }
    w.flush()?;
    Ok(())
}
