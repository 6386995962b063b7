//! Assembly and solution of the coarse Galerkin system over a multiscale
//! basis set, plus the fine-grid reconstruction of the coarse solution.
//!
//! The coarse stiffness uses the same penalized fine-grid quadrature as the
//! basis construction (including the sigma mass term), so the discrete
//! problem is a true Galerkin projection of the penalized fine problem.

use crate::error::{Error, Result};
use crate::fine_fem::{patch_load, q1_mass, Q1_STIFFNESS};
use crate::linalg::{cg_solve, LinOp, SparseSym};
use crate::mesh::{FineGrid, Patch};
use crate::msfem_basis::MsBasisSet;
use rayon::prelude::*;

/// Relative CG tolerance for the coarse solve.
pub const COARSE_TOL: f64 = 1e-12;

/// Assembled coarse Galerkin system.
pub struct CoarseSystem {
    pub matrix: SparseSym,
    pub load: Vec<f64>,
}

/// Coarse solution: dof coefficients plus the per-element fine-grid
/// reconstruction. Fields are stored per element to preserve the
/// inter-element jumps of the nonconforming families.
pub struct CoarseSolution {
    pub coeffs: Vec<f64>,
    pub element_fields: Vec<Vec<f64>>,
}

/// Penalized element bilinear form of two local fields.
pub fn patch_bilinear(grid: &FineGrid, patch: &Patch, u: &[f64], v: &[f64]) -> f64 {
    let mass = q1_mass(grid.h());
    let mut acc = 0.0;
    for cj in 0..patch.ny {
        for ci in 0..patch.nx {
            let cell = patch.global_cell(ci, cj);
            let nu = grid.nu(cell);
            let sigma = grid.sigma(cell);
            let nodes = patch.cell_local_nodes(ci, cj);
            for a in 0..4 {
                let ua = u[nodes[a]];
                if ua == 0.0 {
                    continue;
                }
                for b in 0..4 {
                    acc += ua * (nu * Q1_STIFFNESS[a][b] + sigma * mass[a][b]) * v[nodes[b]];
                }
            }
        }
    }
    acc
}

/// Assemble `a_H(b_i, b_j)` and the load `int f b_i` element by element.
pub fn assemble_coarse(
    basis: &MsBasisSet,
    f: impl Fn(f64, f64) -> f64 + Sync,
) -> Result<CoarseSystem> {
    let n_dofs = basis.n_dofs();
    if n_dofs == 0 {
        return Err(Error::Config("no live degrees of freedom".to_string()));
    }
    let grid = &basis.grid;
    let h = grid.h();
    let per_element: Vec<(Vec<(usize, usize, f64)>, Vec<(usize, f64)>)> = (0..basis
        .mesh
        .n_elements())
        .into_par_iter()
        .map(|e| {
            let fields = &basis.element_fields[e];
            let patch = basis.element_patch(e);
            let mut triplets = Vec::with_capacity(fields.len() * fields.len());
            for (a, (dof_a, field_a)) in fields.iter().enumerate() {
                for (dof_b, field_b) in fields.iter().skip(a) {
                    let v = patch_bilinear(grid, &patch, field_a, field_b);
                    triplets.push((*dof_a, *dof_b, v));
                    if dof_a != dof_b {
                        triplets.push((*dof_b, *dof_a, v));
                    }
                }
            }
            // Load with nodal f samples and Q1 mass quadrature.
            let mut f_local = Vec::with_capacity(patch.n_nodes());
            for lj in 0..=patch.ny {
                for li in 0..=patch.nx {
                    let x = (patch.i0 + li) as f64 * h;
                    let y = (patch.j0 + lj) as f64 * h;
                    f_local.push(f(x, y));
                }
            }
            let weights = patch_load(grid, &patch, &f_local);
            let loads: Vec<(usize, f64)> = fields
                .iter()
                .map(|(dof, field)| {
                    (*dof, field.iter().zip(&weights).map(|(a, b)| a * b).sum())
                })
                .collect();
            (triplets, loads)
        })
        .collect();
    // Deterministic reduction in element order.
    let mut triplets = Vec::new();
    let mut load = vec![0.0; n_dofs];
    for (t, loads) in per_element {
        triplets.extend(t);
        for (dof, v) in loads {
            load[dof] += v;
        }
    }
    let matrix = SparseSym::from_triplets(n_dofs, &mut triplets);
    Ok(CoarseSystem { matrix, load })
}

/// Solve the coarse system and reconstruct the solution element by element.
pub fn solve_coarse(basis: &MsBasisSet, system: &CoarseSystem) -> Result<CoarseSolution> {
    let n = basis.n_dofs();
    let max_iter = 60 * n + 2000;
    let coeffs = cg_solve(&system.matrix, &system.load, COARSE_TOL, max_iter)?;
    let element_fields = reconstruct(basis, &coeffs);
    Ok(CoarseSolution { coeffs, element_fields })
}

/// Exact linear combination of the stored basis fields, per element.
pub fn reconstruct(basis: &MsBasisSet, coeffs: &[f64]) -> Vec<Vec<f64>> {
    (0..basis.mesh.n_elements())
        .map(|e| {
            let patch = basis.element_patch(e);
            let mut field = vec![0.0; patch.n_nodes()];
            for (dof, b) in &basis.element_fields[e] {
                let c = coeffs[*dof];
                if c != 0.0 {
                    for (dst, src) in field.iter_mut().zip(b) {
                        *dst += c * src;
                    }
                }
            }
            field
        })
        .collect()
}

/// Number of live degrees of freedom.
pub fn dof_count(basis: &MsBasisSet) -> usize {
    basis.n_dofs()
}

impl CoarseSolution {
    /// Galerkin energy `a_H(u_H, u_H)` from the assembled system.
    pub fn energy(&self, system: &CoarseSystem) -> f64 {
        let mut ax = vec![0.0; self.coeffs.len()];
        system.matrix.apply(&self.coeffs, &mut ax);
        self.coeffs.iter().zip(&ax).map(|(a, b)| a * b).sum()
    }

    /// Work of the load `int f u_H` from the assembled system.
    pub fn work(&self, system: &CoarseSystem) -> f64 {
        self.coeffs.iter().zip(&system.load).map(|(a, b)| a * b).sum()
    }

    /// Write per-element `element_id,x,y,value` blocks, preserving the
    /// inter-element jumps.
    pub fn write_csv(&self, basis: &MsBasisSet, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "element_id,x,y,value")?;
        let h = basis.grid.h();
        for (e, field) in self.element_fields.iter().enumerate() {
            let patch = basis.element_patch(e);
            for lj in 0..=patch.ny {
                for li in 0..=patch.nx {
                    let x = (patch.i0 + li) as f64 * h;
                    let y = (patch.j0 + lj) as f64 * h;
                    writeln!(out, "{e},{x},{y},{:.12e}", field[patch.local_node(li, lj)])?;
                }
            }
        }
        Ok(())
    }
}
