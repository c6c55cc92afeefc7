use serde::{Deserialize, Serialize};

use super::{wald_ci, Diagnostics, EstimateReport, WaldInterval};
use crate::basis::{design_matrix, enumerate_basis, BasisCaps, DesignMatrix};
use crate::data::Dataset;
use crate::error::{HalError, Result};
use crate::lasso::{HalFit, SolverOptions};
use crate::loss::{expit, LossKind};
use crate::select::{
    select_c, vfold_split, CvConfig, Fold, Selection, SelectionProblem, SelectorReport, TraceRow, UndersmoothConfig,
};

/// Long-format rows allowed before the fit is refused.
const ROW_BUDGET: f64 = 5e7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensityConfig {
    /// `None` picks 320 bins from n = 1000 on and 80 below.
    pub bins: Option<usize>,
    /// Padding on each side of the sample range, as a fraction of it.
    pub pad_fraction: f64,
    pub caps: BasisCaps,
    pub cv: CvConfig,
    pub undersmooth: UndersmoothConfig,
    pub solver: SolverOptions,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            bins: None,
            pad_fraction: 1e-3,
            caps: BasisCaps::default(),
            cv: CvConfig::default(),
            undersmooth: UndersmoothConfig::default(),
            solver: SolverOptions::default(),
        }
    }
}

pub fn density_bins(n: usize) -> usize {
    if n >= 1000 {
        320
    } else {
        80
    }
}

/// Piecewise-constant density assembled from discrete hazards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardDensity {
    pub bin_edges: Vec<f64>,
    pub hazard: Vec<f64>,
    pub density: Vec<f64>,
    pub binwidth: f64,
}

impl HazardDensity {
    /// `density_b = h_b prod_{b' < b} (1 - h_b') / width`.
    pub fn from_hazard(bin_edges: Vec<f64>, hazard: Vec<f64>) -> Result<Self> {
        if bin_edges.len() != hazard.len() + 1 || hazard.is_empty() {
            return Err(HalError::Dimension("need one more edge than hazards".into()));
        }
        if hazard.iter().any(|h| !(0.0..=1.0).contains(h)) {
            return Err(HalError::Domain("hazards must lie in [0, 1]".into()));
        }
        let binwidth = bin_edges[1] - bin_edges[0];
        if !(binwidth > 0.0) {
            return Err(HalError::Domain("bins must have positive width".into()));
        }
        let mut survival = 1.0;
        let density = hazard
            .iter()
            .map(|&h| {
                let d = h * survival / binwidth;
                survival *= 1.0 - h;
                d
            })
            .collect();
        Ok(Self {
            bin_edges,
            hazard,
            density,
            binwidth,
        })
    }

    pub fn bins(&self) -> usize {
        self.hazard.len()
    }

    pub fn mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.binwidth
    }

    /// Probability left beyond the last bin.
    pub fn shortfall(&self) -> f64 {
        self.hazard.iter().map(|h| 1.0 - h).product()
    }

    /// Density at `o`; zero outside the binned range.
    pub fn density_at(&self, o: f64) -> f64 {
        bin_index(&self.bin_edges, o).map_or(0.0, |b| self.density[b])
    }
}

/// Bin containing `o` (last bin closed on the right), if any.
pub fn bin_index(edges: &[f64], o: f64) -> Option<usize> {
    let b = edges.len().checked_sub(1)?;
    let (lo, hi) = (edges[0], edges[b]);
    if !(o >= lo && o <= hi) {
        return None;
    }
    let width = (hi - lo) / b as f64;
    Some((((o - lo) / width).floor() as usize).min(b - 1))
}

/// `sum_b density_b^2 width`, the exact integral of the squared density.
pub fn psi_density(d: &HazardDensity) -> f64 {
    d.density.iter().map(|p| p * p).sum::<f64>() * d.binwidth
}

/// `D*(o) = 2 (p(o) - psi)`.
pub fn eic_density(o: &[f64], d: &HazardDensity, psi: f64) -> Vec<f64> {
    o.iter().map(|&x| 2.0 * (d.density_at(x) - psi)).collect()
}

fn equidistant_edges(o: &[f64], bins: usize, pad_fraction: f64) -> Vec<f64> {
    let min = o.iter().copied().fold(f64::INFINITY, f64::min);
    let max = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let pad = if range > 0.0 {
        pad_fraction * range
    } else {
        pad_fraction * min.abs().max(1.0)
    };
    let (lo, hi) = (min - pad, max + pad);
    let w = (hi - lo) / bins as f64;
    (0..=bins)
        .map(|b| if b == bins { hi } else { lo + w * b as f64 })
        .collect()
}

/// Event and at-risk counts per bin for the observations in `rows`.
fn counts(bins_of: &[usize], rows: impl Iterator<Item = usize>, bins: usize) -> (Vec<f64>, Vec<f64>) {
    let mut events = vec![0.0; bins];
    for i in rows {
        events[bins_of[i]] += 1.0;
    }
    let mut at_risk = vec![0.0; bins];
    let mut remaining: f64 = events.iter().sum();
    for b in 0..bins {
        at_risk[b] = remaining;
        remaining -= events[b];
    }
    (events, at_risk)
}

fn grouped(base: &Dataset, events: &[f64], at_risk: &[f64]) -> Result<Dataset> {
    let y = events
        .iter()
        .zip(at_risk)
        .map(|(e, r)| if *r > 0.0 { e / r } else { 0.0 })
        .collect();
    base.with_outcome(y, Some(at_risk.to_vec()))
}

/// Fitted hazard density with the selector output and the CV comparator.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityFit {
    pub density: HazardDensity,
    pub cv_density: HazardDensity,
    pub fit: HalFit,
    pub report: SelectorReport,
}

fn assemble(design: &DesignMatrix, fit: &HalFit, edges: &[f64]) -> Result<HazardDensity> {
    let hazard = fit.predict(design)?.into_iter().map(expit).collect();
    HazardDensity::from_hazard(edges.to_vec(), hazard)
}

/// Density of a univariate sample by a zero-order HAL logistic fit of the
/// discrete hazard over equidistant bins. Long-format data enter as one
/// row per bin weighted by its at-risk count.
pub fn fit_density_hal(o: &[f64], cfg: &DensityConfig) -> Result<DensityFit> {
    let n = o.len();
    if n < 50 {
        return Err(HalError::InvalidInput(format!("density fit needs at least 50 observations, got {n}")));
    }
    if let Some(x) = o.iter().find(|x| !x.is_finite()) {
        return Err(HalError::NonFinite(format!("observation {x}")));
    }
    let bins = cfg.bins.unwrap_or_else(|| density_bins(n));
    if bins < 10 {
        return Err(HalError::InvalidInput(format!("at least 10 bins are required, got {bins}")));
    }
    if n as f64 * bins as f64 > ROW_BUDGET {
        return Err(HalError::InvalidInput(format!(
            "{n} observations x {bins} bins exceeds the long-format budget of {ROW_BUDGET}; use fewer bins or a subsample"
        )));
    }
    let edges = equidistant_edges(o, bins, cfg.pad_fraction);
    let bins_of: Vec<usize> = o
        .iter()
        .map(|&x| bin_index(&edges, x).expect("sample lies inside its own range"))
        .collect();
    let mids: Vec<f64> = edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let base = Dataset::with_names(vec![mids], vec!["bin_midpoint".into()], vec![0.0; bins], None)?;
    let (events, at_risk) = counts(&bins_of, 0..n, bins);
    let data = grouped(&base, &events, &at_risk)?;
    let dict = enumerate_basis(&data, 0, &cfg.caps)?;
    let design = design_matrix(&data, &dict)?;

    // Folds split observations; each fold's counts are aggregated per bin.
    let labels = vfold_split(n, cfg.cv.folds, cfg.cv.seed)?;
    let folds = (0..cfg.cv.folds)
        .map(|v| {
            let (ev, rv) = counts(&bins_of, (0..n).filter(|&i| labels[i] == v), bins);
            let et: Vec<f64> = events.iter().zip(&ev).map(|(a, b)| a - b).collect();
            let rt: Vec<f64> = at_risk.iter().zip(&rv).map(|(a, b)| a - b).collect();
            Ok(Fold {
                train: grouped(&base, &et, &rt)?,
                valid: grouped(&base, &ev, &rv)?,
                complementary: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let gradient = |fit: &HalFit| -> Result<Vec<f64>> {
        let d = assemble(&design, fit, &edges)?;
        let psi = psi_density(&d);
        Ok(bins_of.iter().map(|&b| 2.0 * (d.density[b] - psi)).collect())
    };
    let mut problem = SelectionProblem::new(&design, &data, LossKind::binomial());
    problem.sample_size = Some(n as f64);
    problem.eic = Some(&gradient);
    let Selection { report, fit, cv_fit } = select_c(&problem, &folds, &cfg.cv, &cfg.undersmooth, &cfg.solver)?;
    Ok(DensityFit {
        density: assemble(&design, &fit, &edges)?,
        cv_density: assemble(&design, &cv_fit, &edges)?,
        fit,
        report,
    })
}

/// Plug-in of the integrated squared density at one fitted density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityPlugin {
    pub psi: f64,
    pub interval: WaldInterval,
    pub sqrt_n_pn_dstar: f64,
    pub shortfall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate {
    pub psi: f64,
    pub eic: Vec<f64>,
    pub interval: WaldInterval,
    pub diagnostics: Diagnostics,
    pub density: HazardDensity,
    /// The same functional at the cross-validated fit, on the same data.
    pub cv: DensityPlugin,
    pub report: EstimateReport,
}

fn plugin(o: &[f64], d: &HazardDensity) -> Result<(f64, Vec<f64>, WaldInterval)> {
    let psi = psi_density(d);
    let eic = eic_density(o, d, psi);
    let interval = wald_ci(psi, &eic, 0.95)?;
    Ok((psi, eic, interval))
}

/// Estimates `int p^2` from a univariate sample.
pub fn fit_density(o: &[f64], cfg: &DensityConfig) -> Result<DensityEstimate> {
    let n = o.len();
    let rn = (n as f64).sqrt();
    let fitted = fit_density_hal(o, cfg)?;
    let (psi, eic, interval) = plugin(o, &fitted.density)?;
    let (psi_cv, eic_cv, interval_cv) = plugin(o, &fitted.cv_density)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let row: &TraceRow = &fitted.report.criterion_trace[fitted.report.selected_index];
    let diagnostics = Diagnostics {
        sqrt_n_pn_dstar: rn * mean(&eic),
        pn_dstar_sq: eic.iter().map(|d| d * d).sum::<f64>() / n as f64,
        min_active_pn_phi: row.min_active_pn_phi,
        min_active_score: row.min_active_score,
        c_selected: fitted.fit.l1_norm,
        active_count: fitted.fit.active_non_intercept().count(),
        not_met: fitted.report.not_met,
    };
    let cv = DensityPlugin {
        psi: psi_cv,
        interval: interval_cv,
        sqrt_n_pn_dstar: rn * mean(&eic_cv),
        shortfall: fitted.cv_density.shortfall(),
    };
    let report = EstimateReport {
        estimand: "integrated_squared_density".into(),
        n,
        psi,
        se: interval.se,
        ci: (interval.lo, interval.hi),
        c_cv: fitted.report.c_cv,
        c_selected: fitted.report.c_selected,
        rule: fitted.report.rule,
        diagnostics: diagnostics.clone(),
        selector: fitted.report,
    };
    Ok(DensityEstimate {
        psi,
        eic,
        interval,
        diagnostics,
        density: fitted.density,
        cv,
        report,
    })
}
