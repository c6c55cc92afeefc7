use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mc::{summarize, McReport, ReplicateRow, SimConfig, SummaryRow};
use super::plot::{render_plots, PlotSet};
use super::TrueValues;
use crate::error::Result;

pub const SUMMARY_CSV: &str = "summary.csv";
pub const REPLICATES_CSV: &str = "replicates.csv";
pub const CONFIG_JSON: &str = "config.json";

/// Contents of `config.json`: everything besides the replicate rows needed
/// to rebuild the summary and the figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: SimConfig,
    pub truth: TrueValues,
    /// Standard deviation implied by the spread and its reading.
    pub resolved_sd: f64,
    pub failure_fraction: f64,
    pub failed: bool,
    pub version: String,
}

impl RunManifest {
    pub fn of(report: &McReport) -> Self {
        Self {
            config: report.config.clone(),
            truth: report.truth,
            resolved_sd: report.config.dgp.sd(),
            failure_fraction: report.failure_fraction,
            failed: report.failed,
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    pub fn title(&self) -> String {
        format!("{} ({} replicates, rule {})", self.config.dgp.kind, self.config.replicates, self.config.rule())
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_replicates(path: impl AsRef<Path>) -> Result<Vec<ReplicateRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<ReplicateRow>, _>>()?;
    Ok(rows)
}

pub fn read_summary(path: impl AsRef<Path>) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<SummaryRow>, _>>()?;
    Ok(rows)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<RunManifest> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn write_plots(set: &PlotSet, dir: impl AsRef<Path>) -> Result<()> {
    fs::create_dir_all(dir.as_ref())?;
    for (name, svg) in &set.files {
        fs::write(dir.as_ref().join(name), svg)?;
    }
    Ok(())
}

/// Rebuilds the figures of a run directory from `replicates.csv` and
/// `config.json` and writes them to `out`.
pub fn regenerate_plots(run_dir: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<PlotSet> {
    let manifest = read_manifest(run_dir.as_ref().join(CONFIG_JSON))?;
    let rows = read_replicates(run_dir.as_ref().join(REPLICATES_CSV))?;
    let summary = summarize(&rows, &manifest.truth, &manifest.config.n_grid);
    let set = render_plots(&summary, &rows, &manifest.truth, &manifest.title());
    write_plots(&set, out)?;
    Ok(set)
}

/// Writes the summary, the replicate rows, the manifest and the figures. The
/// figures are drawn from the files just written.
pub fn emit_report(report: &McReport, dir: impl AsRef<Path>) -> Result<PlotSet> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_csv(&dir.join(SUMMARY_CSV), &report.summary)?;
    write_csv(&dir.join(REPLICATES_CSV), &report.replicates)?;
    fs::write(dir.join(CONFIG_JSON), serde_json::to_string_pretty(&RunManifest::of(report))?)?;
    regenerate_plots(dir, dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Estimator, DgpSpec};

    fn fake_report() -> McReport {
        let truth = TrueValues {
            psi0: 0.5,
            efficiency_bound: 0.25,
        };
        let mut rows = Vec::new();
        for r in 0..5 {
            for (k, est) in [Estimator::Undersmoothed, Estimator::Cv].into_iter().enumerate() {
                let psi = 0.5 + 0.01 * (r as f64 - 2.0) + 0.003 * k as f64;
                rows.push(ReplicateRow {
                    n: 100,
                    replicate: r,
                    estimator: est,
                    status: "ok".into(),
                    psi: Some(psi),
                    se: Some(0.05),
                    ci_lo: Some(psi - 0.1),
                    ci_hi: Some(psi + 0.1),
                    c_cv: Some(1.0 / 3.0),
                    c_selected: Some(0.7),
                    sqrt_n_pn_dstar: Some(1e-3 * r as f64),
                    sqrt_n_pn_dstar_cv: Some(0.1),
                    sqrt_n_threshold: Some(0.05),
                    sqrt_n_min_active_pn_phi: if r == 3 { None } else { Some(0.2) },
                    not_met: if k == 0 { Some(false) } else { None },
                    shortfall: None,
                    active_count: Some(4),
                });
            }
        }
        let mut config = SimConfig::ate();
        config.dgp = DgpSpec::ate();
        config.n_grid = vec![100];
        config.replicates = 5;
        McReport {
            summary: summarize(&rows, &truth, &[100]),
            config,
            truth,
            replicates: rows,
            failure_fraction: 0.0,
            failed: false,
        }
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rep = fake_report();
        let first = emit_report(&rep, dir.path()).unwrap();
        assert_eq!(read_replicates(dir.path().join(REPLICATES_CSV)).unwrap(), rep.replicates);
        assert_eq!(read_summary(dir.path().join(SUMMARY_CSV)).unwrap(), rep.summary);
        assert_eq!(read_manifest(dir.path().join(CONFIG_JSON)).unwrap(), RunManifest::of(&rep));
        let other = dir.path().join("again");
        let second = regenerate_plots(dir.path(), &other).unwrap();
        assert_eq!(first, second);
        for (name, svg) in &first.files {
            assert_eq!(&fs::read_to_string(other.join(name)).unwrap(), svg);
            assert_eq!(&fs::read_to_string(dir.path().join(name)).unwrap(), svg);
        }
    }
}
