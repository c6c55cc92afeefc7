//! Data-generating processes, Monte Carlo runner and report emission for
//! the treatment-specific mean and integrated squared density studies.

mod mc;
mod plot;
mod report;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, Normal as NormalDist};

use crate::data::Dataset;
use crate::error::{HalError, Result};
use crate::loss::expit;

pub use mc::{run_monte_carlo, summarize, Estimator, McReport, ReplicateRow, SimConfig, SummaryRow, BETA_SAMPLER};
pub use plot::{render_plots, PlotSet};
pub use report::{
    emit_report, read_manifest, read_replicates, read_summary, regenerate_plots, write_plots, RunManifest, CONFIG_JSON, REPLICATES_CSV,
    SUMMARY_CSV,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpKind {
    /// W1 = 4Z - 2 with Z ~ Beta(.85, .85), W2 ~ Bern(.5), A and Y through expit(w1 - 2 w1 w2).
    AteSim61,
    /// O ~ N(-4, spread).
    DensitySim62,
    /// Constant regression and propensity 1/2; the target is zero.
    CustomNull,
}

impl std::fmt::Display for DgpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DgpKind::AteSim61 => "ate_sim61",
            DgpKind::DensitySim62 => "density_sim62",
            DgpKind::CustomNull => "custom_null",
        })
    }
}

/// How the second argument of a `Normal(mean, s)` statement is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spread {
    StandardDeviation,
    Variance,
}

impl Spread {
    pub fn sd(self, s: f64) -> f64 {
        match self {
            Spread::StandardDeviation => s,
            Spread::Variance => s.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpSpec {
    pub kind: DgpKind,
    /// Second argument of the outcome noise (ATE) or of the density.
    pub spread: f64,
    pub spread_reading: Spread,
}

impl DgpSpec {
    pub fn ate() -> Self {
        Self {
            kind: DgpKind::AteSim61,
            spread: 0.25,
            spread_reading: Spread::StandardDeviation,
        }
    }

    pub fn density() -> Self {
        Self {
            kind: DgpKind::DensitySim62,
            spread: 5.0 / 3.0,
            spread_reading: Spread::StandardDeviation,
        }
    }

    pub fn null() -> Self {
        Self {
            kind: DgpKind::CustomNull,
            spread: 1.0,
            spread_reading: Spread::StandardDeviation,
        }
    }

    pub fn sd(&self) -> f64 {
        self.spread_reading.sd(self.spread)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spread.is_finite() && self.spread > 0.0) {
            return Err(HalError::InvalidInput(format!("spread {} must be positive", self.spread)));
        }
        Ok(())
    }
}

impl Default for DgpSpec {
    fn default() -> Self {
        Self::ate()
    }
}

/// Independent random streams per replicate and purpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Data = 1,
    Folds = 2,
}

/// ChaCha20 keyed by `(base_seed, n, replicate)`, one stream per purpose, so
/// draws for one purpose never shift when another consumes more.
pub fn stream(base_seed: u64, n: usize, replicate: usize, purpose: Purpose) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&base_seed.to_le_bytes());
    key[8..16].copy_from_slice(&(n as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(replicate as u64).to_le_bytes());
    let mut rng = ChaCha20Rng::from_seed(key);
    rng.set_stream(purpose as u64);
    rng
}

/// Draws one data set of the ATE-type designs.
pub fn dgp_ate<R: Rng>(spec: &DgpSpec, n: usize, rng: &mut R) -> Result<Dataset> {
    spec.validate()?;
    let eps = Normal::new(0.0, spec.sd()).map_err(|e| HalError::InvalidInput(e.to_string()))?;
    match spec.kind {
        DgpKind::AteSim61 => {
            let beta = Beta::new(0.85, 0.85).map_err(|e| HalError::InvalidInput(e.to_string()))?;
            let mut w1 = Vec::with_capacity(n);
            let mut w2 = Vec::with_capacity(n);
            let mut a = Vec::with_capacity(n);
            let mut y = Vec::with_capacity(n);
            for _ in 0..n {
                let x1 = 4.0 * beta.sample(rng) - 2.0;
                let x2 = f64::from(u8::from(rng.gen::<f64>() < 0.5));
                let q = expit(x1 - 2.0 * x1 * x2);
                a.push(f64::from(u8::from(rng.gen::<f64>() < q)));
                y.push(q + eps.sample(rng));
                w1.push(x1);
                w2.push(x2);
            }
            Dataset::with_names(vec![w1, w2], vec!["W1".into(), "W2".into()], y, Some(a))
        }
        DgpKind::CustomNull => {
            let mut w = Vec::with_capacity(n);
            let mut a = Vec::with_capacity(n);
            let mut y = Vec::with_capacity(n);
            for _ in 0..n {
                w.push(rng.gen::<f64>());
                a.push(f64::from(u8::from(rng.gen::<f64>() < 0.5)));
                y.push(eps.sample(rng));
            }
            Dataset::with_names(vec![w], vec!["W".into()], y, Some(a))
        }
        DgpKind::DensitySim62 => Err(HalError::InvalidInput("density design has no regression data".into())),
    }
}

/// Draws `n` observations of the density design.
pub fn dgp_density<R: Rng>(spec: &DgpSpec, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    spec.validate()?;
    if spec.kind != DgpKind::DensitySim62 {
        return Err(HalError::InvalidInput(format!("{} is not a density design", spec.kind)));
    }
    let normal = Normal::new(-4.0, spec.sd()).map_err(|e| HalError::InvalidInput(e.to_string()))?;
    Ok((0..n).map(|_| normal.sample(rng)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueValues {
    pub psi0: f64,
    pub efficiency_bound: f64,
}

const QUAD_TOL: f64 = 1e-13;

fn beta_85_pdf(z: f64) -> f64 {
    use statrs::distribution::Beta as BetaDist;
    // Integrable poles at both ends; the nodes may round onto them.
    if z <= 0.0 || z >= 1.0 {
        return 0.0;
    }
    BetaDist::new(0.85, 0.85).expect("valid shape").pdf(z)
}

/// Target value and efficiency bound by numerical quadrature.
pub fn true_values(spec: &DgpSpec) -> Result<TrueValues> {
    spec.validate()?;
    let sd = spec.sd();
    match spec.kind {
        DgpKind::AteSim61 => {
            // Expectations over W2 in {0, 1} and W1 = 4Z - 2.
            let over_w = |f: &dyn Fn(f64, f64) -> f64| -> f64 {
                [0.0, 1.0]
                    .iter()
                    .map(|&w2| {
                        0.5 * quadrature::integrate(|z| f(4.0 * z - 2.0, w2) * beta_85_pdf(z), 0.0, 1.0, QUAD_TOL)
                            .integral
                    })
                    .sum()
            };
            let qbar = |w1: f64, w2: f64| expit(w1 - 2.0 * w1 * w2);
            let psi0 = over_w(&qbar);
            let second = over_w(&|a, b| qbar(a, b).powi(2));
            let inverse_g = over_w(&|a, b| 1.0 / qbar(a, b));
            Ok(TrueValues {
                psi0,
                efficiency_bound: sd * sd * inverse_g + second - psi0 * psi0,
            })
        }
        DgpKind::DensitySim62 => {
            let normal = NormalDist::new(-4.0, sd).map_err(|e| HalError::InvalidInput(e.to_string()))?;
            let integral = |k: i32| {
                let half = |a: f64, b: f64| quadrature::integrate(|o| normal.pdf(o).powi(k), a, b, QUAD_TOL).integral;
                half(-4.0 - 40.0 * sd, -4.0) + half(-4.0, -4.0 + 40.0 * sd)
            };
            let psi0 = integral(2);
            Ok(TrueValues {
                psi0,
                efficiency_bound: 4.0 * (integral(3) - psi0 * psi0),
            })
        }
        DgpKind::CustomNull => Ok(TrueValues {
            psi0: 0.0,
            efficiency_bound: 2.0 * sd * sd,
        }),
    }
}
