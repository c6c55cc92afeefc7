use serde::{Deserialize, Serialize};

use super::{wald_ci, Diagnostics, EstimateReport, WaldInterval};
use crate::basis::{design_matrix, enumerate_basis, BasisCaps};
use crate::data::Dataset;
use crate::error::{HalError, Result};
use crate::lasso::{HalFit, SolverOptions};
use crate::loss::{expit, Family, LossKind};
use crate::select::{
    cv_select_c, select_c, vfold_split, weight_folds, CvConfig, Selection, SelectionProblem, SelectorReport,
    UndersmoothConfig,
};

/// Rows whose covariate values supply the outcome regression knots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnotRows {
    /// Every row. Under knot thinning with a cap that is an odd multiple of
    /// the propensity cap, the propensity knots are then a subset of these.
    All,
    Treated,
}

/// Settings of the treatment-specific mean estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AteConfig {
    /// Basis caps of the zero-order propensity fit.
    pub propensity_caps: BasisCaps,
    pub propensity_cv: CvConfig,
    pub outcome_m: usize,
    pub outcome_caps: BasisCaps,
    pub outcome_knots: KnotRows,
    pub outcome_family: Family,
    pub cv: CvConfig,
    pub undersmooth: UndersmoothConfig,
    /// Propensities are truncated to `[gmin, 1 - gmin]`.
    pub gmin: f64,
    /// Largest fraction of rows that may be truncated before the fit is refused.
    pub truncation_budget: f64,
    pub solver: SolverOptions,
}

impl Default for AteConfig {
    fn default() -> Self {
        Self {
            propensity_caps: BasisCaps::default(),
            propensity_cv: CvConfig::default(),
            outcome_m: 0,
            outcome_caps: BasisCaps::default(),
            outcome_knots: KnotRows::All,
            outcome_family: Family::SquaredError,
            cv: CvConfig::default(),
            undersmooth: UndersmoothConfig::default(),
            gmin: 0.01,
            truncation_budget: 0.1,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityFit {
    /// Truncated fitted propensities, one per row.
    pub gbar: Vec<f64>,
    pub truncated_rows: Vec<usize>,
    pub report: SelectorReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AteEstimate {
    pub psi: f64,
    pub eic: Vec<f64>,
    pub interval: WaldInterval,
    pub diagnostics: Diagnostics,
    /// Plug-in at the cross-validated bound.
    pub psi_cv: f64,
    /// `Qbar(1, W_i)` at the selected fit.
    pub qbar1: Vec<f64>,
    pub fit: HalFit,
    pub propensity: PropensityFit,
    pub report: EstimateReport,
}

/// `D*_i = a_i / g_i (y_i - qA_i) + q1_i - psi`.
pub fn eic_ate(qbar1: &[f64], qbar_a: &[f64], gbar: &[f64], a: &[f64], y: &[f64], psi: f64) -> Result<Vec<f64>> {
    let n = qbar1.len();
    if [qbar_a.len(), gbar.len(), a.len(), y.len()].iter().any(|&l| l != n) {
        return Err(HalError::Dimension("gradient inputs differ in length".into()));
    }
    (0..n)
        .map(|i| {
            let g = gbar[i];
            if !(g > 0.0 && g <= 1.0) {
                return Err(HalError::Domain(format!("propensity {g} at row {i} is not in (0, 1]")));
            }
            Ok(a[i] / g * (y[i] - qbar_a[i]) + qbar1[i] - psi)
        })
        .collect()
}

fn fit_propensity(data: &Dataset, a: &[f64], cfg: &AteConfig) -> Result<PropensityFit> {
    let g_data = Dataset::with_names(
        data.columns().to_vec(),
        data.column_meta().iter().map(|c| c.name.clone()).collect(),
        a.to_vec(),
        None,
    )?;
    let dict = enumerate_basis(&g_data, 0, &cfg.propensity_caps)?;
    let design = design_matrix(&g_data, &dict)?;
    let Selection { report, fit, .. } =
        cv_select_c(&design, &g_data, &LossKind::binomial(), &cfg.propensity_cv, &cfg.solver)?;
    let raw: Vec<f64> = fit.predict(&design)?.into_iter().map(expit).collect();
    let (lo, hi) = (cfg.gmin, 1.0 - cfg.gmin);
    let truncated_rows: Vec<usize> = (0..raw.len()).filter(|&i| raw[i] < lo || raw[i] > hi).collect();
    if truncated_rows.len() as f64 > cfg.truncation_budget * raw.len() as f64 {
        return Err(HalError::Positivity {
            count: truncated_rows.len(),
            gmin: raw.iter().copied().fold(f64::INFINITY, f64::min),
            gmax: raw.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            rows: truncated_rows,
        });
    }
    if !truncated_rows.is_empty() {
        log::debug!("{} propensities truncated to [{lo}, {hi}]", truncated_rows.len());
    }
    Ok(PropensityFit {
        gbar: raw.iter().map(|g| g.clamp(lo, hi)).collect(),
        truncated_rows,
        report,
    })
}

/// Plug-in estimator of `E Qbar(1, W)` with an undersmoothed outcome fit.
pub fn fit_ate(data: &Dataset, cfg: &AteConfig) -> Result<AteEstimate> {
    let a = data
        .treatment()
        .ok_or_else(|| HalError::InvalidInput("data has no treatment column".into()))?
        .to_vec();
    let n = data.n();
    let treated: Vec<usize> = (0..n).filter(|&i| a[i] == 1.0).collect();
    if treated.is_empty() || treated.len() == n {
        return Err(HalError::DegenerateTreatment(format!(
            "{} of {n} rows treated",
            treated.len()
        )));
    }
    if !(cfg.gmin > 0.0 && cfg.gmin < 0.5) {
        return Err(HalError::InvalidInput(format!("gmin {} outside (0, 0.5)", cfg.gmin)));
    }
    let propensity = fit_propensity(data, &a, cfg)?;
    let gbar = &propensity.gbar;

    // The design covers every row so that Qbar(1, W_i) is available for the whole sample.
    let dict = match cfg.outcome_knots {
        KnotRows::All => enumerate_basis(data, cfg.outcome_m, &cfg.outcome_caps)?,
        KnotRows::Treated => enumerate_basis(&data.subset(&treated)?, cfg.outcome_m, &cfg.outcome_caps)?,
    };
    let design = design_matrix(data, &dict)?;
    let loss = LossKind {
        family: cfg.outcome_family,
        ..LossKind::squared_error()
    }
    .among_treated();
    let y = data.y();
    let gradient = |fit: &HalFit| -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let q1: Vec<f64> = fit.predict(&design)?.into_iter().map(|q| loss.mean(q)).collect();
        let psi = q1.iter().sum::<f64>() / n as f64;
        let d = eic_ate(&q1, &q1, gbar, &a, y, psi)?;
        Ok((d, q1, psi))
    };
    let evaluator = |fit: &HalFit| gradient(fit).map(|(d, _, _)| d);

    let labels = vfold_split(n, cfg.cv.folds, cfg.cv.seed)?;
    let folds = weight_folds(data, &labels, cfg.cv.folds)?;
    let mut problem = SelectionProblem::new(&design, data, loss);
    problem.sample_size = Some(n as f64);
    problem.eic = Some(&evaluator);
    problem.m = cfg.outcome_m;
    let selection = select_c(&problem, &folds, &cfg.cv, &cfg.undersmooth, &cfg.solver)?;

    let (eic, qbar1, psi) = gradient(&selection.fit)?;
    let (_, _, psi_cv) = gradient(&selection.cv_fit)?;
    let interval = wald_ci(psi, &eic, 0.95)?;
    let row = &selection.report.criterion_trace[selection.report.selected_index];
    let pn_dstar = eic.iter().sum::<f64>() / n as f64;
    let diagnostics = Diagnostics {
        sqrt_n_pn_dstar: (n as f64).sqrt() * pn_dstar,
        pn_dstar_sq: eic.iter().map(|d| d * d).sum::<f64>() / n as f64,
        min_active_pn_phi: row.min_active_pn_phi,
        min_active_score: row.min_active_score,
        c_selected: selection.fit.l1_norm,
        active_count: selection.fit.active_non_intercept().count(),
        not_met: selection.report.not_met,
    };
    let report = EstimateReport {
        estimand: "treatment_specific_mean".into(),
        n,
        psi,
        se: interval.se,
        ci: (interval.lo, interval.hi),
        c_cv: selection.report.c_cv,
        c_selected: selection.report.c_selected,
        rule: selection.report.rule,
        diagnostics: diagnostics.clone(),
        selector: selection.report,
    };
    Ok(AteEstimate {
        psi,
        eic,
        interval,
        diagnostics,
        psi_cv,
        qbar1,
        fit: selection.fit,
        propensity,
        report,
    })
}
