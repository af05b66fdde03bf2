//! Aligned text tables and CSV export for fitted estimates.

use std::fmt;
use std::path::Path;

use serde::Serialize;

use crate::scalar::Real;
use crate::storage::{csv_writer, StorageError};

use super::{CREstimate, GroupCREstimate, LogitRegressionResult};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateRow {
    pub parameter: String,
    pub estimate: f64,
    pub std_error: Option<f64>,
    /// Empty, `separated`, `derived` or `diagnostic`.
    pub flag: String,
}

impl EstimateRow {
    fn new(parameter: &str, estimate: f64, std_error: Option<f64>, flag: &str) -> Self {
        EstimateRow {
            parameter: parameter.to_string(),
            estimate,
            std_error,
            flag: flag.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateTable {
    pub title: String,
    pub rows: Vec<EstimateRow>,
}

impl EstimateTable {
    pub fn from_cr<T: Real>(title: &str, e: &CREstimate<T>) -> Self {
        let se = e.std_errors.map(|s| s.map(|v| v.as_f64()));
        let pick = |i: usize| se.map(|s| s[i]);
        EstimateTable {
            title: title.to_string(),
            rows: vec![
                EstimateRow::new("rho", e.rho.as_f64(), pick(0), ""),
                EstimateRow::new("sigma", e.sigma.as_f64(), pick(1), ""),
                EstimateRow::new("gamma", e.gamma.as_f64(), pick(2), ""),
                EstimateRow::new("loglik", e.loglik.as_f64(), None, "diagnostic"),
                EstimateRow::new("n_obs", e.n_obs as f64, None, "diagnostic"),
                EstimateRow::new("converged", f64::from(u8::from(e.converged)), None, "diagnostic"),
            ],
        }
    }

    pub fn from_group<T: Real>(title: &str, e: &GroupCREstimate<T>) -> Self {
        let se = e.std_errors.as_ref();
        let s = |f: fn(&super::GroupStdErrors<T>) -> T| se.map(|x| f(x).as_f64());
        EstimateTable {
            title: title.to_string(),
            rows: vec![
                EstimateRow::new("rho_in", e.rho_in.as_f64(), s(|x| x.rho_in), ""),
                EstimateRow::new("rho_out", e.rho_out.as_f64(), s(|x| x.rho_out), ""),
                EstimateRow::new("sigma_in", e.sigma_in.as_f64(), s(|x| x.sigma_in), ""),
                EstimateRow::new("sigma_out", e.sigma_out.as_f64(), s(|x| x.sigma_out), ""),
                EstimateRow::new("gamma", e.gamma.as_f64(), s(|x| x.gamma), ""),
                EstimateRow::new("a", e.a.as_f64(), s(|x| x.a), "derived"),
                EstimateRow::new("b", e.b.as_f64(), s(|x| x.b), "derived"),
                EstimateRow::new("a_alt", e.a_alt.as_f64(), None, "derived"),
                EstimateRow::new("b_alt", e.b_alt.as_f64(), None, "derived"),
                EstimateRow::new("loglik", e.loglik.as_f64(), None, "diagnostic"),
                EstimateRow::new("n_obs", e.n_obs as f64, None, "diagnostic"),
                EstimateRow::new("converged", f64::from(u8::from(e.converged)), None, "diagnostic"),
            ],
        }
    }

    pub fn from_logit<T: Real>(title: &str, r: &LogitRegressionResult<T>) -> Self {
        let mut rows: Vec<EstimateRow> = r
            .names
            .iter()
            .enumerate()
            .map(|(j, name)| {
                EstimateRow::new(
                    name,
                    r.coefficients[j].as_f64(),
                    r.std_errors[j].map(|v| v.as_f64()),
                    if r.separated[j] { "separated" } else { "" },
                )
            })
            .collect();
        rows.push(EstimateRow::new("n_obs", r.n_obs as f64, None, "diagnostic"));
        rows.push(EstimateRow::new("loglik", r.loglik.as_f64(), None, "diagnostic"));
        rows.push(EstimateRow::new("aic", r.aic.as_f64(), None, "diagnostic"));
        EstimateTable {
            title: title.to_string(),
            rows,
        }
    }

    pub fn get(&self, parameter: &str) -> Option<&EstimateRow> {
        self.rows.iter().find(|r| r.parameter == parameter)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), StorageError> {
        let mut w = csv_writer(path)?;
        w.write_record(["parameter", "estimate", "std_error", "flag"])
            .map_err(|e| StorageError::csv(path, e))?;
        for r in &self.rows {
            let se = r.std_error.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([r.parameter.as_str(), &r.estimate.to_string(), &se, &r.flag])
                .map_err(|e| StorageError::csv(path, e))?;
        }
        w.flush().map_err(|e| StorageError::io(path, e))
    }
}

impl fmt::Display for EstimateTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.parameter.len()).max().unwrap_or(9).max(9);
        writeln!(f, "{}", self.title)?;
        writeln!(f, "{:<width$}  {:>14}  {:>12}  flag", "parameter", "estimate", "std_error")?;
        for r in &self.rows {
            let se = match r.std_error {
                Some(v) => format!("{v:>12.4}"),
                None => format!("{:>12}", ""),
            };
            writeln!(f, "{:<width$}  {:>14.4}  {se}  {}", r.parameter, r.estimate, r.flag)?;
        }
        Ok(())
    }
}
