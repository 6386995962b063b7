//! Nodal scalar fields on the uniform fine grid.

use crate::error::{Error, Result};
use crate::mesh::FineGrid;
use std::io::Write;
use std::path::Path;

/// Nodal values over the `(m+1) x (m+1)` fine-grid nodes, row-major with x
/// fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    m: usize,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(m: usize) -> Self {
        ScalarField { m, values: vec![0.0; (m + 1) * (m + 1)] }
    }

    pub fn from_values(m: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != (m + 1) * (m + 1) {
            return Err(Error::InvalidParameter(format!(
                "field length {} does not match grid m = {m}",
                values.len()
            )));
        }
        Ok(ScalarField { m, values })
    }

    /// Sample an analytic function at the grid nodes.
    pub fn from_fn(m: usize, f: impl Fn(f64, f64) -> f64) -> Self {
        let h = 1.0 / m as f64;
        let mut values = Vec::with_capacity((m + 1) * (m + 1));
        for j in 0..=m {
            for i in 0..=m {
                values.push(f(i as f64 * h, j as f64 * h));
            }
        }
        ScalarField { m, values }
    }

    pub fn m_per_side(&self) -> usize {
        self.m
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i + j * (self.m + 1)]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i + j * (self.m + 1)] = v;
    }

    /// Largest absolute nodal value.
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    /// Largest absolute value over the corner nodes of perforated cells.
    pub fn max_abs_perforated(&self, grid: &FineGrid) -> f64 {
        let m = grid.m_per_side();
        let mut sup = 0.0f64;
        for cy in 0..m {
            for cx in 0..m {
                if grid.cell_perforated(grid.cell_index(cx, cy)) {
                    for idx in grid.cell_nodes(cx, cy) {
                        sup = sup.max(self.values[idx].abs());
                    }
                }
            }
        }
        sup
    }

    /// Write `x,y,value` rows for every grid node.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "x,y,value")?;
        let h = 1.0 / self.m as f64;
        for j in 0..=self.m {
            for i in 0..=self.m {
                writeln!(out, "{},{},{:.12e}", i as f64 * h, j as f64 * h, self.at(i, j))?;
            }
        }
        Ok(())
    }
}
