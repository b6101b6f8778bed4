//! Verifier reports in the shared JSON schema
//! `{name, max_residual, per_node_percentiles, grid, h}`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::GridSpec;
use crate::scalar::{to_f64, Real};
use crate::system::ResidualField;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub max_residual: f64,
    pub per_node_percentiles: Percentiles,
    pub grid: GridSpec,
    pub h: Vec<f64>,
}

impl Report {
    /// Summarizes a residual field over the nodes where `keep` holds.
    pub fn from_field<T: Real>(name: &str, grid: &GridSpec, field: &ResidualField<T>, keep: impl Fn(usize) -> bool) -> Self {
        let values: Vec<T> = field.values.iter().enumerate().filter(|(i, _)| keep(*i)).map(|(_, v)| *v).collect();
        let sub = ResidualField { values };
        let p = sub.percentiles(&[50.0, 90.0, 99.0, 100.0]);
        Self {
            name: name.to_string(),
            max_residual: to_f64(sub.max()),
            per_node_percentiles: Percentiles { p50: p[0], p90: p[1], p99: p[2], max: p[3] },
            grid: grid.clone(),
            h: (0..grid.dim()).map(|a| grid.h(a)).collect(),
        }
    }

    /// A single scalar measurement with no per-node structure.
    pub fn scalar(name: &str, grid: &GridSpec, value: f64) -> Self {
        Self {
            name: name.to_string(),
            max_residual: value,
            per_node_percentiles: Percentiles { p50: value, p90: value, p99: value, max: value },
            grid: grid.clone(),
            h: (0..grid.dim()).map(|a| grid.h(a)).collect(),
        }
    }

    pub fn passes(&self, budget: f64) -> bool {
        self.max_residual <= budget
    }
}

pub fn write_reports<W: Write>(reports: &[Report], mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, reports).map_err(std::io::Error::other)?;
    writeln!(out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_fields() {
        let grid = GridSpec::cube(2, 1.0, 5).unwrap();
        let field = ResidualField { values: (0..25).map(|i| i as f64).collect() };
        let r = Report::from_field("diag", &grid, &field, |i| i != 24);
        assert_eq!(r.max_residual, 23.0);
        assert_eq!(r.h, vec![0.5, 0.5]);
        let json = serde_json::to_value(&r).unwrap();
        for key in ["name", "max_residual", "per_node_percentiles", "grid", "h"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        let back: Report = serde_json::from_value(json).unwrap();
        assert_eq!(back, r);
    }
}
