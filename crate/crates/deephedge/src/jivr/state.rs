//! Market state, state pools of initial conditions, and the pool CSV format.

use crate::error::{Error, Result};
use crate::surface::SurfaceCoeffs;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// One time-step of the joint market state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketState {
    /// Index level.
    pub s: f64,
    pub beta: SurfaceCoeffs,
    /// Previous-day beta_2 (second lag in the beta_2 equation).
    pub beta2_lag: f64,
    /// Conditional variance of the return, per year.
    pub h_r: f64,
    /// Conditional variances of the five factors, per year.
    pub h: [f64; 5],
}

impl MarketState {
    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0) {
            return Err(Error::state(format!("index level must be > 0, got {}", self.s)));
        }
        if !(self.h_r > 0.0) || !self.h_r.is_finite() {
            return Err(Error::state(format!("h_R must be > 0 and finite, got {}", self.h_r)));
        }
        for (i, &hi) in self.h.iter().enumerate() {
            if !(hi > 0.0) || !hi.is_finite() {
                return Err(Error::state(format!("h_{} must be > 0 and finite, got {hi}", i + 1)));
            }
        }
        if self.beta.beta.iter().any(|b| !b.is_finite()) || !self.beta2_lag.is_finite() {
            return Err(Error::state("beta coefficients must be finite"));
        }
        Ok(())
    }
}

/// One historical or synthetic joint state used as a simulation seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolRow {
    pub date: String,
    pub beta: [f64; 5],
    pub beta2_lag: f64,
    pub h_r: f64,
    pub h: [f64; 5],
    /// Optional period tag for cluster-stratified experiments.
    pub cluster: Option<String>,
}

impl PoolRow {
    /// Expands a pool row into a market state with the index normalized to 100.
    pub fn to_state(&self) -> MarketState {
        MarketState {
            s: 100.0,
            beta: SurfaceCoeffs { beta: self.beta },
            beta2_lag: self.beta2_lag,
            h_r: self.h_r,
            h: self.h,
        }
    }
}

/// Pool of initial conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePool {
    pub rows: Vec<PoolRow>,
}

const POOL_COLUMNS: [&str; 13] = [
    "date", "beta1", "beta2", "beta3", "beta4", "beta5", "beta2_lag", "h_R", "h1", "h2", "h3",
    "h4", "h5",
];

impl StatePool {
    pub fn new(rows: Vec<PoolRow>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            row.to_state()
                .validate()
                .map_err(|e| Error::format(format!("pool row {} ({}): {e}", i + 1, row.date)))?;
        }
        Ok(StatePool { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows matching a cluster tag, as a new pool.
    pub fn filter_cluster(&self, cluster: &str) -> Result<StatePool> {
        let rows: Vec<PoolRow> = self
            .rows
            .iter()
            .filter(|r| r.cluster.as_deref() == Some(cluster))
            .cloned()
            .collect();
        if rows.is_empty() {
            return Err(Error::config(format!("no pool rows tagged with cluster '{cluster}'")));
        }
        Ok(StatePool { rows })
    }

    pub fn load_csv(path: &Path) -> Result<StatePool> {
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .from_path(path)
            .map_err(|e| Error::config(format!("cannot open pool file {}: {e}", path.display())))?;
        let headers = reader.headers()?.clone();
        for (i, expected) in POOL_COLUMNS.iter().enumerate() {
            match headers.get(i) {
                Some(h) if h == *expected => {}
                other => {
                    return Err(Error::format(format!(
                        "pool file {}: column {} should be '{expected}', found {:?}",
                        path.display(),
                        i + 1,
                        other
                    )))
                }
            }
        }
        let has_cluster = headers.get(13) == Some("cluster");
        let mut rows = Vec::new();
        for (idx, record) in reader.records().enumerate() {
            let record = record?;
            let row_no = idx + 1;
            let parse = |col: usize| -> Result<f64> {
                record
                    .get(col)
                    .ok_or_else(|| Error::format(format!("row {row_no}: missing column {}", POOL_COLUMNS[col])))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| {
                        Error::format(format!("row {row_no}: column {} not a number: {e}", POOL_COLUMNS[col]))
                    })
            };
            let row = PoolRow {
                date: record.get(0).unwrap_or("").to_string(),
                beta: [parse(1)?, parse(2)?, parse(3)?, parse(4)?, parse(5)?],
                beta2_lag: parse(6)?,
                h_r: parse(7)?,
                h: [parse(8)?, parse(9)?, parse(10)?, parse(11)?, parse(12)?],
                cluster: if has_cluster {
                    record.get(13).map(|s| s.to_string()).filter(|s| !s.is_empty())
                } else {
                    None
                },
            };
            row.to_state()
                .validate()
                .map_err(|e| Error::format(format!("pool row {row_no} ({}): {e}", row.date)))?;
            rows.push(row);
        }
        Ok(StatePool { rows })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        let has_cluster = self.rows.iter().any(|r| r.cluster.is_some());
        let mut header = POOL_COLUMNS.join(",");
        if has_cluster {
            header.push_str(",cluster");
        }
        writeln!(file, "{header}")?;
        for row in &self.rows {
            let mut line = format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                row.date,
                row.beta[0],
                row.beta[1],
                row.beta[2],
                row.beta[3],
                row.beta[4],
                row.beta2_lag,
                row.h_r,
                row.h[0],
                row.h[1],
                row.h[2],
                row.h[3],
                row.h[4],
            );
            if has_cluster {
                line.push(',');
                if let Some(c) = &row.cluster {
                    line.push_str(c);
                }
            }
            writeln!(file, "{line}")?;
        }
        Ok(())
    }
}
