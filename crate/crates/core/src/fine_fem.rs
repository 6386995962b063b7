//! Q1 assembly on the fine grid for the penalized problem
//! `-div(nu grad u) + sigma u = f` with homogeneous Dirichlet data on the
//! outer boundary, plus the periodic unit-cell problem and the two-scale
//! reconstruction built from its solution.

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::geometry::PerforationSet;
use crate::linalg::{cg_solve, SparseSym};
use crate::mesh::{FineGrid, Patch};

/// Default relative tolerance for basis, corrector and reference solves. The
/// discretization error dominates every comparison made here, so solver error
/// is kept far below it.
pub const SOLVER_TOL: f64 = 1e-10;

/// Q1 stiffness matrix of a square cell (scale free in 2D). Local node order
/// is SW, SE, NE, NW.
pub const Q1_STIFFNESS: [[f64; 4]; 4] = [
    [4.0 / 6.0, -1.0 / 6.0, -2.0 / 6.0, -1.0 / 6.0],
    [-1.0 / 6.0, 4.0 / 6.0, -1.0 / 6.0, -2.0 / 6.0],
    [-2.0 / 6.0, -1.0 / 6.0, 4.0 / 6.0, -1.0 / 6.0],
    [-1.0 / 6.0, -2.0 / 6.0, -1.0 / 6.0, 4.0 / 6.0],
];

/// Q1 mass matrix of a square cell of side `h`.
pub fn q1_mass(h: f64) -> [[f64; 4]; 4] {
    let s = h * h / 36.0;
    [
        [4.0 * s, 2.0 * s, 1.0 * s, 2.0 * s],
        [2.0 * s, 4.0 * s, 2.0 * s, 1.0 * s],
        [1.0 * s, 2.0 * s, 4.0 * s, 2.0 * s],
        [2.0 * s, 1.0 * s, 2.0 * s, 4.0 * s],
    ]
}

/// Exact integral of `|grad u|^2` over one cell for Q1 nodal values
/// (SW, SE, NE, NW order).
pub fn cell_energy(corner_values: [f64; 4]) -> f64 {
    let mut acc = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            acc += corner_values[i] * Q1_STIFFNESS[i][j] * corner_values[j];
        }
    }
    acc
}

/// Exact integral of `u^2` over one cell of side `h` for Q1 nodal values.
pub fn cell_mass(corner_values: [f64; 4], h: f64) -> f64 {
    let m = q1_mass(h);
    let mut acc = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            acc += corner_values[i] * m[i][j] * corner_values[j];
        }
    }
    acc
}

/// Assembled penalized bilinear form on a fine sub-grid, with a caller-chosen
/// set of Dirichlet (eliminated) nodes.
pub struct PatchSystem {
    /// Interior dof for each patch-local node, `None` on Dirichlet nodes.
    pub reduced_of_local: Vec<Option<usize>>,
    /// Patch-local node of each interior dof.
    pub local_of_reduced: Vec<usize>,
    /// Operator on the interior dofs.
    pub matrix: SparseSym,
    /// Coupling triplets (interior dof, Dirichlet-local node, value) for
    /// lifting non-zero boundary data.
    pub coupling: Vec<(usize, usize, f64)>,
}

impl PatchSystem {
    pub fn n_dofs(&self) -> usize {
        self.local_of_reduced.len()
    }

    /// Right-hand side contribution `-A_ib u_b` of Dirichlet data given on
    /// patch-local nodes.
    pub fn lift_boundary(&self, boundary_values: &[f64]) -> Vec<f64> {
        let mut rhs = vec![0.0; self.n_dofs()];
        for &(dof, bnode, v) in &self.coupling {
            rhs[dof] -= v * boundary_values[bnode];
        }
        rhs
    }

    /// Scatter interior dof values (plus Dirichlet data) to patch-local nodes.
    pub fn expand(&self, interior: &[f64], boundary_values: &[f64]) -> Vec<f64> {
        self.reduced_of_local
            .iter()
            .enumerate()
            .map(|(local, red)| match red {
                Some(d) => interior[*d],
                None => boundary_values[local],
            })
            .collect()
    }
}

/// Assemble `sum_cells nu int grad u . grad v + sigma int u v` over a patch.
/// `dirichlet(local_node)` marks eliminated nodes.
pub fn assemble_patch(
    grid: &FineGrid,
    patch: &Patch,
    dirichlet: impl Fn(usize, usize) -> bool,
) -> PatchSystem {
    let n_local = patch.n_nodes();
    let mut reduced_of_local = vec![None; n_local];
    let mut local_of_reduced = Vec::new();
    for lj in 0..=patch.ny {
        for li in 0..=patch.nx {
            let local = patch.local_node(li, lj);
            if !dirichlet(li, lj) {
                reduced_of_local[local] = Some(local_of_reduced.len());
                local_of_reduced.push(local);
            }
        }
    }
    let h = grid.h();
    let mass = q1_mass(h);
    let mut triplets = Vec::new();
    let mut coupling = Vec::new();
    for cj in 0..patch.ny {
        for ci in 0..patch.nx {
            let cell = patch.global_cell(ci, cj);
            let nu = grid.nu(cell);
            let sigma = grid.sigma(cell);
            let locals = patch.cell_local_nodes(ci, cj);
            for a in 0..4 {
                let Some(row) = reduced_of_local[locals[a]] else { continue };
                for b in 0..4 {
                    let v = nu * Q1_STIFFNESS[a][b] + sigma * mass[a][b];
                    match reduced_of_local[locals[b]] {
                        Some(col) => triplets.push((row, col, v)),
                        None => coupling.push((row, locals[b], v)),
                    }
                }
            }
        }
    }
    let matrix = SparseSym::from_triplets(local_of_reduced.len(), &mut triplets);
    PatchSystem { reduced_of_local, local_of_reduced, matrix, coupling }
}

/// Unweighted load `int f v` over all patch-local nodes, with `f` given by
/// its nodal values on the patch.
pub fn patch_load(grid: &FineGrid, patch: &Patch, f_local: &[f64]) -> Vec<f64> {
    let mass = q1_mass(grid.h());
    let mut load = vec![0.0; patch.n_nodes()];
    for cj in 0..patch.ny {
        for ci in 0..patch.nx {
            let locals = patch.cell_local_nodes(ci, cj);
            for a in 0..4 {
                let mut acc = 0.0;
                for b in 0..4 {
                    acc += mass[a][b] * f_local[locals[b]];
                }
                load[locals[a]] += acc;
            }
        }
    }
    load
}

/// Penalized operator on the whole domain with boundary rows eliminated.
pub struct PenalizedOperator {
    m: usize,
    patch: Patch,
    system: PatchSystem,
}

/// Assemble the global penalized operator on `grid`, eliminating the nodes of
/// the outer boundary.
pub fn assemble(grid: &FineGrid) -> PenalizedOperator {
    let m = grid.m_per_side();
    let patch = Patch::new(0, 0, m, m, grid);
    let system = assemble_patch(grid, &patch, |li, lj| {
        li == 0 || lj == 0 || li == m || lj == m
    });
    PenalizedOperator { m, patch, system }
}

impl PenalizedOperator {
    pub fn matrix(&self) -> &SparseSym {
        &self.system.matrix
    }

    pub fn n_dofs(&self) -> usize {
        self.system.n_dofs()
    }

    /// Interior load vector `int f v` for nodal samples of `f`.
    pub fn load(&self, grid: &FineGrid, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let h = 1.0 / self.m as f64;
        let mut f_local = Vec::with_capacity(self.patch.n_nodes());
        for lj in 0..=self.m {
            for li in 0..=self.m {
                f_local.push(f(li as f64 * h, lj as f64 * h));
            }
        }
        let full = patch_load(grid, &self.patch, &f_local);
        self.system.local_of_reduced.iter().map(|&l| full[l]).collect()
    }

    /// Solve for interior values and scatter to a full field (zero on the
    /// boundary).
    pub fn solve(&self, rhs: &[f64], tol: f64) -> Result<ScalarField> {
        let max_iter = 40 * self.system.n_dofs() + 1000;
        let x = cg_solve(&self.system.matrix, rhs, tol, max_iter)?;
        let zeros = vec![0.0; self.patch.n_nodes()];
        let values = self.system.expand(&x, &zeros);
        ScalarField::from_values(self.m, values)
    }
}

/// Penalized reference solve of the perforated Poisson problem on an
/// `m x m` grid.
pub fn solve_reference(
    perf: &PerforationSet,
    f: impl Fn(f64, f64) -> f64,
    m: usize,
    tol: f64,
) -> Result<ScalarField> {
    let grid = FineGrid::build(m, perf, 1.0 / m as f64)?;
    solve_reference_on(&grid, f, tol)
}

/// Same as [`solve_reference`] for a grid built by the caller.
pub fn solve_reference_on(
    grid: &FineGrid,
    f: impl Fn(f64, f64) -> f64,
    tol: f64,
) -> Result<ScalarField> {
    let op = assemble(grid);
    let rhs = op.load(grid, f);
    op.solve(&rhs, tol)
}

/// Periodic corrector solution on the unit cell.
pub struct CellProblemResult {
    /// Corrector values on the `(m+1)^2` cell grid; the right and top rows
    /// repeat the left and bottom ones (periodic identification).
    pub w: ScalarField,
    pub m_cell: usize,
}

/// Solve the periodic cell problem: unit load outside the perforation,
/// penalized to zero inside it, periodic boundary identification. The
/// zero-mean ambiguity of the pure periodic operator is removed by the
/// penalization mass term, so an empty perforation is a degenerate
/// configuration.
pub fn solve_cell_problem(perf_unit: &PerforationSet, m_cell: usize, tol: f64) -> Result<CellProblemResult> {
    let grid = FineGrid::build(m_cell, perf_unit, 1.0 / m_cell as f64)?;
    let m = m_cell;
    if (0..grid.n_cells()).all(|c| !grid.cell_perforated(c)) {
        return Err(Error::Degenerate(
            "periodic cell problem without perforation is singular (constants)".to_string(),
        ));
    }
    let h = grid.h();
    let mass = q1_mass(h);
    let wrap = |i: usize, j: usize| (i % m) + (j % m) * m;
    let mut triplets = Vec::new();
    let mut rhs = vec![0.0; m * m];
    for cj in 0..m {
        for ci in 0..m {
            let cell = grid.cell_index(ci, cj);
            let nu = grid.nu(cell);
            let sigma = grid.sigma(cell);
            let nodes = [
                wrap(ci, cj),
                wrap(ci + 1, cj),
                wrap(ci + 1, cj + 1),
                wrap(ci, cj + 1),
            ];
            for a in 0..4 {
                for b in 0..4 {
                    triplets.push((nodes[a], nodes[b], nu * Q1_STIFFNESS[a][b] + sigma * mass[a][b]));
                }
                // Unit load everywhere: row sum of the mass matrix.
                rhs[nodes[a]] += h * h / 4.0;
            }
        }
    }
    let matrix = SparseSym::from_triplets(m * m, &mut triplets);
    let x = cg_solve(&matrix, &rhs, tol, 40 * m * m + 1000)?;
    let mut w = ScalarField::zeros(m);
    for j in 0..=m {
        for i in 0..=m {
            w.set(i, j, x[wrap(i, j)]);
        }
    }
    Ok(CellProblemResult { w, m_cell })
}

impl CellProblemResult {
    /// Periodic bilinear interpolation of the corrector at cell coordinates
    /// `(tx, ty)` in `[0, 1)^2`.
    pub fn interpolate(&self, tx: f64, ty: f64) -> f64 {
        let m = self.m_cell as f64;
        let fx = (tx.rem_euclid(1.0)) * m;
        let fy = (ty.rem_euclid(1.0)) * m;
        let i = (fx.floor() as usize).min(self.m_cell - 1);
        let j = (fy.floor() as usize).min(self.m_cell - 1);
        let ax = fx - i as f64;
        let ay = fy - j as f64;
        let w = &self.w;
        (1.0 - ax) * (1.0 - ay) * w.at(i, j)
            + ax * (1.0 - ay) * w.at(i + 1, j)
            + ax * ay * w.at(i + 1, j + 1)
            + (1.0 - ax) * ay * w.at(i, j + 1)
    }
}

/// Leading-order two-scale field `eps^2 w(x / eps) f(x)` sampled on the fine
/// grid nodes.
pub fn two_scale_reconstruction(
    cell: &CellProblemResult,
    eps: f64,
    f: impl Fn(f64, f64) -> f64,
    grid: &FineGrid,
) -> ScalarField {
    let m = grid.m_per_side();
    let h = grid.h();
    let mut out = ScalarField::zeros(m);
    for j in 0..=m {
        for i in 0..=m {
            let (x, y) = (i as f64 * h, j as f64 * h);
            let w = cell.interpolate(x / eps, y / eps);
            out.set(i, j, eps * eps * w * f(x, y));
        }
    }
    out
}
