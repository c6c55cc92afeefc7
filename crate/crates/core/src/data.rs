//! Columnar observations and CSV ingestion.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HalError, Result};

/// Per-column summary used for the coordinate shift and for binary handling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub min: f64,
    pub max: f64,
    /// Exactly two distinct observed values.
    pub is_binary: bool,
}

/// Observations `O_i = (X_i, A_i, Y_i)`, stored column by column.
///
/// `weights` are frequency weights: row `i` stands for `weights[i]` observations.
/// They default to one and are how cross-validation folds and aggregated
/// (long-format) hazard data are expressed without copying the design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    columns: Vec<Vec<f64>>,
    y: Vec<f64>,
    treatment: Option<Vec<f64>>,
    weights: Option<Vec<f64>>,
    column_meta: Vec<ColumnMeta>,
}

impl Dataset {
    /// Builds a dataset from row-major covariates.
    pub fn from_rows(rows: &[Vec<f64>], y: Vec<f64>, treatment: Option<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(HalError::EmptyDataset);
        }
        let k = rows[0].len();
        let mut columns = vec![Vec::with_capacity(n); k];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(HalError::Dimension(format!(
                    "row {i} has {} covariates, expected {k}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                columns[j].push(v);
            }
        }
        Self::from_columns(columns, y, treatment)
    }

    pub fn from_columns(
        columns: Vec<Vec<f64>>,
        y: Vec<f64>,
        treatment: Option<Vec<f64>>,
    ) -> Result<Self> {
        let names = (0..columns.len()).map(|j| format!("x{}", j + 1)).collect();
        Self::with_names(columns, names, y, treatment)
    }

    pub fn with_names(
        columns: Vec<Vec<f64>>,
        names: Vec<String>,
        y: Vec<f64>,
        treatment: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(HalError::EmptyDataset);
        }
        if names.len() != columns.len() {
            return Err(HalError::Dimension("one name per column required".into()));
        }
        let mut column_meta = Vec::with_capacity(columns.len());
        for (col, name) in columns.iter().zip(names) {
            if col.len() != n {
                return Err(HalError::Dimension(format!(
                    "column {name} has length {}, outcome has {n}",
                    col.len()
                )));
            }
            column_meta.push(column_summary(col, name)?);
        }
        if let Some(v) = y.iter().find(|v| !v.is_finite()) {
            return Err(HalError::NonFinite(format!("outcome value {v}")));
        }
        if let Some(a) = &treatment {
            if a.len() != n {
                return Err(HalError::Dimension("treatment length differs from outcome".into()));
            }
            if let Some(v) = a.iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(HalError::InvalidInput(format!("treatment value {v} not in {{0,1}}")));
            }
        }
        Ok(Self {
            columns,
            y,
            treatment,
            weights: None,
            column_meta,
        })
    }

    /// Replaces the frequency weights. Column metadata is left untouched so
    /// that fold views keep the basis origin of the generating data.
    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.n() {
            return Err(HalError::Dimension("weights length differs from row count".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(HalError::InvalidInput("weights must be finite and nonnegative".into()));
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(HalError::InvalidInput("weights sum to zero".into()));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    /// Same covariates with a different outcome vector (and weights).
    pub fn with_outcome(&self, y: Vec<f64>, weights: Option<Vec<f64>>) -> Result<Self> {
        if y.len() != self.n() {
            return Err(HalError::Dimension("outcome length differs from row count".into()));
        }
        let mut out = Self {
            columns: self.columns.clone(),
            y,
            treatment: self.treatment.clone(),
            weights: None,
            column_meta: self.column_meta.clone(),
        };
        if let Some(w) = weights {
            out = out.with_weights(w)?;
        }
        Ok(out)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn k(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn treatment(&self) -> Option<&[f64]> {
        self.treatment.as_deref()
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    /// Frequency weight of row `i` (one when unweighted).
    pub fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    /// Total frequency mass, the normalizer of every empirical mean.
    pub fn total_weight(&self) -> f64 {
        self.weights.as_ref().map_or(self.n() as f64, |w| w.iter().sum())
    }

    pub fn column_meta(&self) -> &[ColumnMeta] {
        &self.column_meta
    }

    /// Row subset, recomputing nothing: metadata stays that of the parent.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(HalError::EmptyDataset);
        }
        let pick = |v: &Vec<f64>| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Ok(Self {
            columns: self.columns.iter().map(pick).collect(),
            y: pick(&self.y),
            treatment: self.treatment.as_ref().map(pick),
            weights: self.weights.as_ref().map(pick),
            column_meta: self.column_meta.clone(),
        })
    }
}

fn column_summary(col: &[f64], name: String) -> Result<ColumnMeta> {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in col {
        if !v.is_finite() {
            return Err(HalError::NonFinite(format!("covariate {name} value {v}")));
        }
        min = min.min(v);
        max = max.max(v);
    }
    let is_binary = min < max && col.iter().all(|&v| v == min || v == max);
    Ok(ColumnMeta {
        name,
        min,
        max,
        is_binary,
    })
}

/// Column roles for CSV ingestion.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnRoles {
    pub outcome: String,
    #[serde(default)]
    pub treatment: Option<String>,
    /// Covariate columns; empty means every column not used as outcome/treatment.
    #[serde(default)]
    pub covariates: Vec<String>,
}

/// Reads a CSV file with a header row.
pub fn read_csv(path: impl AsRef<Path>, roles: &ColumnRoles) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| HalError::InvalidInput(format!("column `{name}` not found in header")))
    };
    let outcome = find(&roles.outcome)?;
    let treatment = roles.treatment.as_deref().map(find).transpose()?;
    let covariates: Vec<usize> = if roles.covariates.is_empty() {
        (0..headers.len())
            .filter(|&j| j != outcome && Some(j) != treatment)
            .collect()
    } else {
        roles.covariates.iter().map(|c| find(c)).collect::<Result<_>>()?
    };

    let mut cols = vec![Vec::new(); covariates.len()];
    let mut y = Vec::new();
    let mut a = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |j: usize| -> Result<f64> {
            let raw = record.get(j).unwrap_or("").trim();
            raw.parse::<f64>().map_err(|_| {
                HalError::InvalidInput(format!("row {}: cannot parse `{raw}` as a number", line + 1))
            })
        };
        for (c, &j) in cols.iter_mut().zip(&covariates) {
            c.push(parse(j)?);
        }
        y.push(parse(outcome)?);
        if let Some(t) = treatment {
            a.push(parse(t)?);
        }
    }
    let names = covariates.iter().map(|&j| headers[j].clone()).collect();
    Dataset::with_names(cols, names, y, treatment.map(|_| a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn metadata_flags_binary_columns() {
        let d = Dataset::from_columns(
            vec![vec![0.5, 0.1, 0.9], vec![1.0, 0.0, 1.0], vec![2.0, 2.0, 2.0]],
            vec![0.0; 3],
            None,
        )
        .unwrap();
        let m = d.column_meta();
        assert_eq!((m[0].min, m[0].max, m[0].is_binary), (0.1, 0.9, false));
        assert!(m[1].is_binary);
        assert!(!m[2].is_binary);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            Dataset::from_columns(vec![], vec![], None),
            Err(HalError::EmptyDataset)
        ));
        assert!(Dataset::from_columns(vec![vec![f64::NAN]], vec![1.0], None).is_err());
        assert!(Dataset::from_columns(vec![vec![1.0]], vec![1.0], Some(vec![0.5])).is_err());
        assert!(Dataset::from_columns(vec![vec![1.0, 2.0]], vec![1.0], None).is_err());
    }

    #[test]
    fn csv_roles() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "w1,a,y,w2").unwrap();
        writeln!(f, "0.5,1,2.0,0").unwrap();
        writeln!(f, "-0.5,0,1.0,1").unwrap();
        let roles = ColumnRoles {
            outcome: "y".into(),
            treatment: Some("a".into()),
            covariates: vec![],
        };
        let d = read_csv(f.path(), &roles).unwrap();
        assert_eq!(d.k(), 2);
        assert_eq!(d.column_meta()[1].name, "w2");
        assert_eq!(d.treatment().unwrap(), &[1.0, 0.0]);
        assert_eq!(d.y(), &[2.0, 1.0]);
    }
}
