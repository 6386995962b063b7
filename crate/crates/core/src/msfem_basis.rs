//! Multiscale basis families on the shared fine grid.
//!
//! Every method stores, per coarse element, the fine-grid restriction of each
//! of its live basis functions. The Crouzeix-Raviart family imposes
//! edge-average constraints through local saddle-point problems; the nodal
//! families (linear, oscillatory and oversampling boundary conditions) solve
//! local Dirichlet problems with the global penalization. Edges or elements
//! entirely inside the perforations carry dead degrees of freedom whose
//! fields are identically zero and are dropped from the coarse system.

use crate::error::{Error, Result};
use crate::fine_fem::{assemble_patch, patch_load, SOLVER_TOL};
use crate::geometry::Point2;
use crate::linalg::{cg_solve, ConstraintRow, SaddleSolver};
use crate::mesh::{restrict_to_element, CoarseMesh, FineGrid, Orientation, Patch};
use rayon::prelude::*;
use std::fmt;
use std::sync::Arc;

/// Basis family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Standard bilinear elements on the coarse mesh.
    Q1,
    /// MsFEM with linear (bilinear-trace) boundary conditions.
    MsLin,
    /// MsFEM with oscillatory edge boundary conditions.
    MsOsc,
    /// MsFEM with oversampling; the patch is `ratio * H` wide.
    MsOs,
    /// MsFEM of Crouzeix-Raviart type (edge averages).
    Cr,
}

impl Method {
    pub fn parse(s: &str) -> Result<Method> {
        match s.to_ascii_lowercase().as_str() {
            "q1" | "fem" => Ok(Method::Q1),
            "mslin" | "lin" => Ok(Method::MsLin),
            "msosc" | "osc" => Ok(Method::MsOsc),
            "msos" | "os" => Ok(Method::MsOs),
            "cr" => Ok(Method::Cr),
            other => Err(Error::InvalidParameter(format!("unknown method '{other}'"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Method::Q1 => "q1",
            Method::MsLin => "mslin",
            Method::MsOsc => "msosc",
            Method::MsOs => "msos",
            Method::Cr => "cr",
        };
        write!(f, "{name}")
    }
}

/// A live degree of freedom of the coarse space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DofKey {
    /// Internal coarse edge (Crouzeix-Raviart family).
    Edge(usize),
    /// Interior coarse node (nodal families).
    Node(usize),
    /// Element bubble.
    Bubble(usize),
}

/// Trapezoid quadrature along one coarse edge on the fine nodes it contains.
#[derive(Debug, Clone)]
pub struct EdgeAverageRule {
    pub edge: usize,
    /// Global fine-node indices along the edge.
    pub nodes: Vec<usize>,
    /// Trapezoid weights; they sum to the edge length `H`.
    pub weights: Vec<f64>,
}

/// Fine nodes of a coarse edge as `(i, j)` fine-grid coordinates.
pub fn edge_fine_nodes(mesh: &CoarseMesh, grid: &FineGrid, edge_id: usize) -> Vec<(usize, usize)> {
    let m = grid.m_per_side();
    let n = mesh.n_per_side();
    debug_assert_eq!(m % n, 0);
    let ml = m / n;
    let edge = mesh.edge(edge_id);
    let h = grid.h();
    let to_idx = |coord: f64| (coord / h).round() as usize;
    match edge.orientation {
        Orientation::Vertical => {
            let i = to_idx(edge.start.x);
            let j0 = to_idx(edge.start.y);
            (0..=ml).map(|k| (i, j0 + k)).collect()
        }
        Orientation::Horizontal => {
            let j = to_idx(edge.start.y);
            let i0 = to_idx(edge.start.x);
            (0..=ml).map(|k| (i0 + k, j)).collect()
        }
    }
}

/// Trapezoid rule for `int_E u` on the fine nodes of edge `edge_id`. Exact
/// for traces that are piecewise linear between fine nodes.
pub fn edge_average_rule(mesh: &CoarseMesh, grid: &FineGrid, edge_id: usize) -> EdgeAverageRule {
    let h = grid.h();
    let nodes_ij = edge_fine_nodes(mesh, grid, edge_id);
    let last = nodes_ij.len() - 1;
    let nodes: Vec<usize> = nodes_ij.iter().map(|&(i, j)| grid.node_index(i, j)).collect();
    let weights: Vec<f64> = (0..=last)
        .map(|k| if k == 0 || k == last { 0.5 * h } else { h })
        .collect();
    EdgeAverageRule { edge: edge_id, nodes, weights }
}

/// An edge is dead when every fine node on it lies inside the closed
/// perforation set.
pub fn edge_is_live(mesh: &CoarseMesh, grid: &FineGrid, edge_id: usize) -> bool {
    let h = grid.h();
    let perf = grid.perforation();
    edge_fine_nodes(mesh, grid, edge_id)
        .iter()
        .any(|&(i, j)| !perf.is_perforated(Point2::new(i as f64 * h, j as f64 * h)))
}

/// A bubble is live when its element contains at least one unperforated
/// fine cell.
pub fn bubble_is_live(mesh: &CoarseMesh, grid: &FineGrid, element: usize) -> bool {
    let patch = match restrict_to_element(grid, mesh, element) {
        Ok(p) => p,
        Err(_) => return false,
    };
    for cj in 0..patch.ny {
        for ci in 0..patch.nx {
            if !grid.cell_perforated(patch.global_cell(ci, cj)) {
                return true;
            }
        }
    }
    false
}

/// Per element: live basis functions as (global dof, local field over the
/// element patch nodes).
pub type ElementFields = Vec<(usize, Vec<f64>)>;

/// A complete multiscale basis on (mesh, grid).
pub struct MsBasisSet {
    pub method: Method,
    pub with_bubbles: bool,
    /// Oversampling patch ratio (only meaningful for [`Method::MsOs`]).
    pub os_ratio: f64,
    pub mesh: Arc<CoarseMesh>,
    pub grid: Arc<FineGrid>,
    /// Live dofs in a fixed order: edges, then nodes, then bubbles.
    pub dofs: Vec<DofKey>,
    /// Dof index per coarse edge id (None when dead or not applicable).
    pub edge_dof: Vec<Option<usize>>,
    /// Dof index per coarse node id.
    pub node_dof: Vec<Option<usize>>,
    /// Dof index per element bubble.
    pub bubble_dof: Vec<Option<usize>>,
    /// Per element, live (dof, field) pairs.
    pub element_fields: Vec<ElementFields>,
    /// Elements where the oversampling recombination fell back to a
    /// regularized pseudo-inverse.
    pub degenerate_elements: Vec<usize>,
}

impl MsBasisSet {
    pub fn n_dofs(&self) -> usize {
        self.dofs.len()
    }

    pub fn element_patch(&self, element: usize) -> Patch {
        restrict_to_element(&self.grid, &self.mesh, element).expect("nested by construction")
    }

    /// Human-readable method tag, e.g. `msos3` for oversampling ratio 3.
    pub fn method_tag(&self) -> String {
        match self.method {
            Method::MsOs => format!("msos{}", self.os_ratio as usize),
            m => m.to_string(),
        }
    }
}

/// Coarse node id for node grid coordinates `(ix, iy)`, `0..=n` each.
fn coarse_node_id(n: usize, ix: usize, iy: usize) -> usize {
    ix + iy * (n + 1)
}

fn coarse_node_interior(n: usize, node: usize) -> bool {
    let ix = node % (n + 1);
    let iy = node / (n + 1);
    ix > 0 && ix < n && iy > 0 && iy < n
}

/// Corner node ids of an element in the order SW, SE, NE, NW.
fn element_corner_nodes(mesh: &CoarseMesh, element: usize) -> [usize; 4] {
    let n = mesh.n_per_side();
    let (ex, ey) = mesh.element_coords(element);
    [
        coarse_node_id(n, ex, ey),
        coarse_node_id(n, ex + 1, ey),
        coarse_node_id(n, ex + 1, ey + 1),
        coarse_node_id(n, ex, ey + 1),
    ]
}

/// Corner positions (local patch node coordinates) in the order SW, SE, NE,
/// NW.
fn corner_local_coords(ml: usize) -> [(usize, usize); 4] {
    [(0, 0), (ml, 0), (ml, ml), (0, ml)]
}

struct DofTable {
    dofs: Vec<DofKey>,
    edge_dof: Vec<Option<usize>>,
    node_dof: Vec<Option<usize>>,
    bubble_dof: Vec<Option<usize>>,
}

fn build_dof_table(
    mesh: &CoarseMesh,
    grid: &FineGrid,
    method: Method,
    with_bubbles: bool,
) -> DofTable {
    let n = mesh.n_per_side();
    let mut dofs = Vec::new();
    let mut edge_dof = vec![None; mesh.edges().len()];
    let mut node_dof = vec![None; (n + 1) * (n + 1)];
    let mut bubble_dof = vec![None; mesh.n_elements()];
    if method == Method::Cr {
        for (id, edge) in mesh.edges().iter().enumerate() {
            if edge.is_internal() && edge_is_live(mesh, grid, id) {
                edge_dof[id] = Some(dofs.len());
                dofs.push(DofKey::Edge(id));
            }
        }
    } else {
        for node in 0..(n + 1) * (n + 1) {
            if coarse_node_interior(n, node) {
                node_dof[node] = Some(dofs.len());
                dofs.push(DofKey::Node(node));
            }
        }
    }
    if with_bubbles {
        for e in 0..mesh.n_elements() {
            if bubble_is_live(mesh, grid, e) {
                bubble_dof[e] = Some(dofs.len());
                dofs.push(DofKey::Bubble(e));
            }
        }
    }
    DofTable { dofs, edge_dof, node_dof, bubble_dof }
}

/// Constraint row of one edge over the reduced dofs of an element system.
fn edge_constraint_row(
    mesh: &CoarseMesh,
    grid: &FineGrid,
    patch: &Patch,
    reduced_of_local: &[Option<usize>],
    edge_id: usize,
) -> ConstraintRow {
    let h = grid.h();
    let nodes = edge_fine_nodes(mesh, grid, edge_id);
    let last = nodes.len() - 1;
    let mut entries = Vec::with_capacity(nodes.len());
    for (k, &(i, j)) in nodes.iter().enumerate() {
        let w = if k == 0 || k == last { 0.5 * h } else { h };
        let li = i - patch.i0;
        let lj = j - patch.j0;
        // Nodes eliminated by the outer Dirichlet condition carry u = 0 and
        // drop out of the rule.
        if let Some(dof) = reduced_of_local[patch.local_node(li, lj)] {
            entries.push((dof, w));
        }
    }
    ConstraintRow { entries }
}

/// Build the Crouzeix-Raviart basis: per element, four edge-average problems
/// and one unit-load bubble problem solved against the penalized local form.
pub fn build_cr_basis(
    mesh: &Arc<CoarseMesh>,
    grid: &Arc<FineGrid>,
    with_bubbles: bool,
) -> Result<MsBasisSet> {
    let table = build_dof_table(mesh, grid, Method::Cr, with_bubbles);
    let results: Vec<Result<ElementFields>> = (0..mesh.n_elements())
        .into_par_iter()
        .map(|e| cr_element_fields(mesh, grid, &table, with_bubbles, e))
        .collect();
    let mut element_fields = Vec::with_capacity(results.len());
    for r in results {
        element_fields.push(r?);
    }
    Ok(MsBasisSet {
        method: Method::Cr,
        with_bubbles,
        os_ratio: 0.0,
        mesh: Arc::clone(mesh),
        grid: Arc::clone(grid),
        dofs: table.dofs,
        edge_dof: table.edge_dof,
        node_dof: table.node_dof,
        bubble_dof: table.bubble_dof,
        element_fields,
        degenerate_elements: Vec::new(),
    })
}

fn cr_element_fields(
    mesh: &CoarseMesh,
    grid: &FineGrid,
    table: &DofTable,
    with_bubbles: bool,
    element: usize,
) -> Result<ElementFields> {
    let patch = restrict_to_element(grid, mesh, element)?;
    let live_edges: Vec<usize> = mesh
        .element_edges(element)
        .into_iter()
        .filter(|&id| table.edge_dof[id].is_some())
        .collect();
    let bubble = with_bubbles && table.bubble_dof[element].is_some();
    if live_edges.is_empty() && !bubble {
        return Ok(Vec::new());
    }
    let system = assemble_patch(grid, &patch, |li, lj| patch.on_domain_boundary(li, lj));
    let constraints: Vec<ConstraintRow> = live_edges
        .iter()
        .map(|&id| edge_constraint_row(mesh, grid, &patch, &system.reduced_of_local, id))
        .collect();
    let max_iter = 40 * system.n_dofs() + 1000;
    let solver = SaddleSolver::new(&system.matrix, &constraints, SOLVER_TOL, max_iter)?;
    let zeros_local = vec![0.0; patch.n_nodes()];
    let zero_rhs = vec![0.0; system.n_dofs()];
    let mut fields: ElementFields = Vec::new();
    for (k, &edge_id) in live_edges.iter().enumerate() {
        let mut g = vec![0.0; constraints.len()];
        g[k] = 1.0;
        let (x, _) = solver.solve(&zero_rhs, &g)?;
        let field = system.expand(&x, &zeros_local);
        fields.push((table.edge_dof[edge_id].unwrap(), field));
    }
    if bubble {
        let ones = vec![1.0; patch.n_nodes()];
        let full_load = patch_load(grid, &patch, &ones);
        let f: Vec<f64> = system.local_of_reduced.iter().map(|&l| full_load[l]).collect();
        let g = vec![0.0; constraints.len()];
        let (x, _) = solver.solve(&f, &g)?;
        let field = system.expand(&x, &zeros_local);
        fields.push((table.bubble_dof[element].unwrap(), field));
    }
    Ok(fields)
}

/// Bilinear trace of the hat function of corner `c` on the boundary of a
/// `nx x ny` patch (values at all patch nodes; only boundary values are used
/// as Dirichlet data).
fn patch_bilinear_hat(nx: usize, ny: usize, c: usize) -> Vec<f64> {
    let mut vals = Vec::with_capacity((nx + 1) * (ny + 1));
    for lj in 0..=ny {
        for li in 0..=nx {
            let tx = li as f64 / nx as f64;
            let ty = lj as f64 / ny as f64;
            let v = match c {
                0 => (1.0 - tx) * (1.0 - ty),
                1 => tx * (1.0 - ty),
                2 => tx * ty,
                _ => (1.0 - tx) * ty,
            };
            vals.push(v);
        }
    }
    vals
}

/// Oscillatory edge profile from 0 at the first fine node to 1 at the last:
/// the solution of `-(nu_E phi')' = 0` along the edge, i.e.
/// `phi(s) = int_0^s 1/nu_E / int_0^|E| 1/nu_E` with the penalized `nu`
/// sampled at the fine segment midpoints.
fn oscillatory_profile(mesh: &CoarseMesh, grid: &FineGrid, edge_id: usize) -> Vec<f64> {
    let nodes = edge_fine_nodes(mesh, grid, edge_id);
    let perf = grid.perforation();
    let h = grid.h();
    let nu_inv: Vec<f64> = nodes
        .windows(2)
        .map(|pair| {
            let (i0, j0) = pair[0];
            let (i1, j1) = pair[1];
            let mid = Point2::new((i0 + i1) as f64 * 0.5 * h, (j0 + j1) as f64 * 0.5 * h);
            if perf.is_perforated(mid) {
                grid.penal_h()
            } else {
                1.0
            }
        })
        .collect();
    let total: f64 = nu_inv.iter().sum();
    let mut profile = Vec::with_capacity(nodes.len());
    let mut acc = 0.0;
    profile.push(0.0);
    for v in &nu_inv {
        acc += v;
        profile.push(acc / total);
    }
    // Endpoints are exact by construction.
    let last = profile.len() - 1;
    profile[last] = 1.0;
    profile
}

/// Dirichlet data on the element boundary for the nodal function of corner
/// `c`, either with linear (bilinear-trace) or oscillatory edge profiles.
fn nodal_boundary_data(
    mesh: &CoarseMesh,
    grid: &FineGrid,
    patch: &Patch,
    element: usize,
    c: usize,
    oscillatory: bool,
) -> Vec<f64> {
    let ml = patch.nx;
    if !oscillatory {
        return patch_bilinear_hat(ml, ml, c);
    }
    let mut data = vec![0.0; patch.n_nodes()];
    let corners = corner_local_coords(ml);
    let (cx, cy) = corners[c];
    data[patch.local_node(cx, cy)] = 1.0;
    // Edges in the order south, east, north, west; corner pairs along each.
    let edge_ids = mesh.element_edges(element);
    let along: [( (usize, usize), (usize, usize), usize); 4] = [
        ((0, 0), (ml, 0), edge_ids[0]),
        ((ml, 0), (ml, ml), edge_ids[1]),
        ((0, ml), (ml, ml), edge_ids[2]),
        ((0, 0), (0, ml), edge_ids[3]),
    ];
    for &(from, to, edge_id) in &along {
        let v_from = if from == (cx, cy) { 1.0 } else { 0.0 };
        let v_to = if to == (cx, cy) { 1.0 } else { 0.0 };
        if v_from == 0.0 && v_to == 0.0 {
            continue;
        }
        let profile = oscillatory_profile(mesh, grid, edge_id);
        for (k, t) in profile.iter().enumerate() {
            let (li, lj) = if from.0 == to.0 {
                (from.0, from.1 + k)
            } else {
                (from.0 + k, from.1)
            };
            data[patch.local_node(li, lj)] = v_from * (1.0 - t) + v_to * t;
        }
    }
    data
}

/// Solve the penalized local Dirichlet problem on `patch` with the given
/// boundary data (and optional unit volume load), returning the full local
/// field.
fn dirichlet_patch_solve(
    grid: &FineGrid,
    patch: &Patch,
    boundary_data: &[f64],
    unit_load: bool,
) -> Result<Vec<f64>> {
    let system = assemble_patch(grid, patch, |li, lj| patch.on_patch_boundary(li, lj));
    let mut rhs = system.lift_boundary(boundary_data);
    if unit_load {
        let ones = vec![1.0; patch.n_nodes()];
        let full = patch_load(grid, patch, &ones);
        for (dof, &local) in system.local_of_reduced.iter().enumerate() {
            rhs[dof] += full[local];
        }
    }
    let max_iter = 40 * system.n_dofs().max(1) + 1000;
    let x = if system.n_dofs() == 0 {
        Vec::new()
    } else {
        cg_solve(&system.matrix, &rhs, SOLVER_TOL, max_iter)?
    };
    Ok(system.expand(&x, boundary_data))
}

/// Per-element bubbles for the non-CR families: penalized solve with unit
/// load and zero Dirichlet trace on the element boundary. Dead elements give
/// `None`.
pub fn build_variant_bubbles(
    mesh: &Arc<CoarseMesh>,
    grid: &Arc<FineGrid>,
) -> Result<Vec<Option<Vec<f64>>>> {
    let results: Vec<Result<Option<Vec<f64>>>> = (0..mesh.n_elements())
        .into_par_iter()
        .map(|e| {
            if !bubble_is_live(mesh, grid, e) {
                return Ok(None);
            }
            let patch = restrict_to_element(grid, mesh, e)?;
            let zeros = vec![0.0; patch.n_nodes()];
            dirichlet_patch_solve(grid, &patch, &zeros, true).map(Some)
        })
        .collect();
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        out.push(r?);
    }
    Ok(out)
}

/// Shared scaffolding of the nodal families: per element, compute the four
/// corner fields with `corner_fields`, attach bubbles when requested.
fn build_nodal_basis(
    mesh: &Arc<CoarseMesh>,
    grid: &Arc<FineGrid>,
    method: Method,
    with_bubbles: bool,
    os_ratio: f64,
    corner_fields: impl Fn(usize) -> Result<([Vec<f64>; 4], bool)> + Sync,
) -> Result<MsBasisSet> {
    let table = build_dof_table(mesh, grid, method, with_bubbles);
    let bubbles = if with_bubbles {
        build_variant_bubbles(mesh, grid)?
    } else {
        vec![None; mesh.n_elements()]
    };
    let results: Vec<Result<(ElementFields, bool)>> = (0..mesh.n_elements())
        .into_par_iter()
        .map(|e| {
            let (corners, degenerate) = corner_fields(e)?;
            let corner_ids = element_corner_nodes(mesh, e);
            let mut fields: ElementFields = Vec::new();
            for (c, field) in corners.into_iter().enumerate() {
                if let Some(dof) = table.node_dof[corner_ids[c]] {
                    fields.push((dof, field));
                }
            }
            if let (true, Some(dof)) = (with_bubbles, table.bubble_dof[e]) {
                if let Some(b) = &bubbles[e] {
                    fields.push((dof, b.clone()));
                }
            }
            Ok((fields, degenerate))
        })
        .collect();
    let mut element_fields = Vec::with_capacity(results.len());
    let mut degenerate_elements = Vec::new();
    for (e, r) in results.into_iter().enumerate() {
        let (fields, degenerate) = r?;
        if degenerate {
            degenerate_elements.push(e);
        }
        element_fields.push(fields);
    }
    Ok(MsBasisSet {
        method,
        with_bubbles,
        os_ratio,
        mesh: Arc::clone(mesh),
        grid: Arc::clone(grid),
        dofs: table.dofs,
        edge_dof: table.edge_dof,
        node_dof: table.node_dof,
        bubble_dof: table.bubble_dof,
        element_fields,
        degenerate_elements,
    })
}

/// Plain coarse Q1 basis: bilinear hats sampled on the fine nodes.
pub fn build_q1_basis(
    mesh: &Arc<CoarseMesh>,
    grid: &Arc<FineGrid>,
    with_bubbles: bool,
) -> Result<MsBasisSet> {
    let ml = grid.m_per_side() / mesh.n_per_side();
    build_nodal_basis(mesh, grid, Method::Q1, with_bubbles, 0.0, |_e| {
        Ok((
            [
                patch_bilinear_hat(ml, ml, 0),
                patch_bilinear_hat(ml, ml, 1),
                patch_bilinear_hat(ml, ml, 2),
                patch_bilinear_hat(ml, ml, 3),
            ],
            false,
        ))
    })
}

/// MsFEM with bilinear Dirichlet data on each element boundary.
pub fn build_mslin_basis(
    mesh: &Arc<CoarseMesh>,
    grid: &Arc<FineGrid>,
    with_bubbles: bool,
) -> Result<MsBasisSet> {
    build_nodal_basis(mesh, grid, Method::MsLin, with_bubbles, 0.0, |e| {
        let patch = restrict_to_element(grid, mesh, e)?;
        let mut corners: [Vec<f64>; 4] = Default::default();
        for c in 0..4 {
            let data = nodal_boundary_data(mesh, grid, &patch, e, c, false);
            corners[c] = dirichlet_patch_solve(grid, &patch, &data, false)?;
        }
        Ok((corners, false))
    })
}

/// MsFEM with oscillatory edge boundary conditions.
pub fn build_msosc_basis(
    mesh: &Arc<CoarseMesh>,
    grid: &Arc<FineGrid>,
    with_bubbles: bool,
) -> Result<MsBasisSet> {
    build_nodal_basis(mesh, grid, Method::MsOsc, with_bubbles, 0.0, |e| {
        let patch = restrict_to_element(grid, mesh, e)?;
        let mut corners: [Vec<f64>; 4] = Default::default();
        for c in 0..4 {
            let data = nodal_boundary_data(mesh, grid, &patch, e, c, true);
            corners[c] = dirichlet_patch_solve(grid, &patch, &data, false)?;
        }
        Ok((corners, false))
    })
}

/// 4x4 dense solve used by the oversampling recombination; falls back to a
/// regularized pseudo-inverse on (near) singular corner matrices.
fn recombine(matrix: [[f64; 4]; 4], restrictions: &[Vec<f64>; 4]) -> ([Vec<f64>; 4], bool) {
    // Solve M alpha_c = e_c where M[c'][k] = restriction_k(corner_c').
    let scale = matrix
        .iter()
        .flat_map(|row| row.iter().map(|v| v.abs()))
        .fold(0.0f64, f64::max)
        .max(1e-300);
    let solve = |rhs: [f64; 4]| -> Option<[f64; 4]> {
        let mut a = matrix;
        let mut b = rhs;
        for col in 0..4 {
            let (p, pv) = (col..4)
                .map(|r| (r, a[r][col].abs()))
                .max_by(|x, y| x.1.total_cmp(&y.1))
                .unwrap();
            if pv <= 1e-10 * scale {
                return None;
            }
            a.swap(col, p);
            b.swap(col, p);
            for r in col + 1..4 {
                let f = a[r][col] / a[col][col];
                for c in col..4 {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
        for col in (0..4).rev() {
            b[col] /= a[col][col];
            for r in 0..col {
                b[r] -= a[r][col] * b[col];
            }
        }
        Some(b)
    };
    let mut degenerate = false;
    let mut coeffs = [[0.0f64; 4]; 4];
    for c in 0..4 {
        let mut e = [0.0; 4];
        e[c] = 1.0;
        match solve(e) {
            Some(alpha) => coeffs[c] = alpha,
            None => {
                degenerate = true;
                // Regularized normal equations (M^T M + reg I) alpha = M^T e_c.
                let mut mtm = [[0.0f64; 4]; 4];
                let mut mte = [0.0f64; 4];
                for i in 0..4 {
                    for j in 0..4 {
                        for r in 0..4 {
                            mtm[i][j] += matrix[r][i] * matrix[r][j];
                        }
                    }
                    mte[i] = matrix[c][i];
                    mtm[i][i] += 1e-10 * scale * scale;
                }
                // Tiny SPD system: plain Gaussian elimination cannot fail.
                let mut a = mtm;
                let mut b = mte;
                for col in 0..4 {
                    for r in col + 1..4 {
                        let f = a[r][col] / a[col][col];
                        for cc in col..4 {
                            a[r][cc] -= f * a[col][cc];
                        }
                        b[r] -= f * b[col];
                    }
                }
                for col in (0..4).rev() {
                    b[col] /= a[col][col];
                    for r in 0..col {
                        b[r] -= a[r][col] * b[col];
                    }
                }
                coeffs[c] = b;
            }
        }
    }
    let n = restrictions[0].len();
    let mut out: [Vec<f64>; 4] = Default::default();
    for c in 0..4 {
        let mut field = vec![0.0; n];
        for k in 0..4 {
            let a = coeffs[c][k];
            if a != 0.0 {
                for (dst, src) in field.iter_mut().zip(&restrictions[k]) {
                    *dst += a * src;
                }
            }
        }
        out[c] = field;
    }
    (out, degenerate)
}

/// Oversampling MsFEM: local problems on a `ratio * H` patch (clipped to the
/// domain), restricted to the element and recombined to match nodal values
/// at the element corners.
pub fn build_msos_basis(
    mesh: &Arc<CoarseMesh>,
    grid: &Arc<FineGrid>,
    ratio: f64,
    with_bubbles: bool,
) -> Result<MsBasisSet> {
    if ratio != 2.0 && ratio != 3.0 {
        return Err(Error::InvalidParameter(format!(
            "oversampling ratio must be 2 or 3, got {ratio}"
        )));
    }
    let m = grid.m_per_side();
    let n = mesh.n_per_side();
    if m % n != 0 {
        return Err(Error::Config(format!("fine grid m = {m} not nested in n = {n}")));
    }
    let ml = m / n;
    let ext = (((ratio - 1.0) / 2.0) * ml as f64).round() as usize;
    build_nodal_basis(mesh, grid, Method::MsOs, with_bubbles, ratio, |e| {
        let (ex, ey) = mesh.element_coords(e);
        let (i_lo, i_hi) = ((ex * ml).saturating_sub(ext), ((ex + 1) * ml + ext).min(m));
        let (j_lo, j_hi) = ((ey * ml).saturating_sub(ext), ((ey + 1) * ml + ext).min(m));
        let patch = Patch::new(i_lo, j_lo, i_hi - i_lo, j_hi - j_lo, grid);
        let mut restrictions: [Vec<f64>; 4] = Default::default();
        for c in 0..4 {
            let data = patch_bilinear_hat(patch.nx, patch.ny, c);
            let solved = dirichlet_patch_solve(grid, &patch, &data, false)?;
            // Restrict the patch field to the element sub-patch.
            let (di, dj) = (ex * ml - i_lo, ey * ml - j_lo);
            let mut local = Vec::with_capacity((ml + 1) * (ml + 1));
            for lj in 0..=ml {
                for li in 0..=ml {
                    local.push(solved[patch.local_node(di + li, dj + lj)]);
                }
            }
            restrictions[c] = local;
        }
        let corners = corner_local_coords(ml);
        let elem_patch = restrict_to_element(grid, mesh, e)?;
        let mut matrix = [[0.0f64; 4]; 4];
        for (cp, &(ci, cj)) in corners.iter().enumerate() {
            for k in 0..4 {
                matrix[cp][k] = restrictions[k][elem_patch.local_node(ci, cj)];
            }
        }
        let (fields, degenerate) = recombine(matrix, &restrictions);
        Ok((fields, degenerate))
    })
}

/// Build a basis set for any method.
pub fn build_basis(
    mesh: &Arc<CoarseMesh>,
    grid: &Arc<FineGrid>,
    method: Method,
    with_bubbles: bool,
    os_ratio: f64,
) -> Result<MsBasisSet> {
    match method {
        Method::Q1 => build_q1_basis(mesh, grid, with_bubbles),
        Method::MsLin => build_mslin_basis(mesh, grid, with_bubbles),
        Method::MsOsc => build_msosc_basis(mesh, grid, with_bubbles),
        Method::MsOs => build_msos_basis(mesh, grid, os_ratio, with_bubbles),
        Method::Cr => build_cr_basis(mesh, grid, with_bubbles),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coarse_solver::patch_bilinear;
    use crate::fine_fem::patch_load;
    use crate::geometry::{PerforationSet, Rect};
    use crate::rng::Lcg64;

    fn setup(n: usize, m: usize, perf: PerforationSet) -> (Arc<CoarseMesh>, Arc<FineGrid>) {
        let mesh = Arc::new(CoarseMesh::build(n).unwrap());
        let grid = Arc::new(FineGrid::build(m, &perf, 1.0 / m as f64).unwrap());
        (mesh, grid)
    }

    /// Integral of a local field over an edge of its element.
    fn edge_integral(
        mesh: &CoarseMesh,
        grid: &FineGrid,
        patch: &Patch,
        field: &[f64],
        edge_id: usize,
    ) -> f64 {
        let rule = edge_average_rule(mesh, grid, edge_id);
        rule.nodes
            .iter()
            .zip(&rule.weights)
            .map(|(&g, &w)| {
                let i = g % (grid.m_per_side() + 1) - patch.i0;
                let j = g / (grid.m_per_side() + 1) - patch.j0;
                w * field[patch.local_node(i, j)]
            })
            .sum()
    }

    #[test]
    fn edge_rule_weights_sum_to_edge_length() {
        let (mesh, grid) = setup(4, 16, PerforationSet::none());
        for (id, edge) in mesh.edges().iter().enumerate() {
            if edge.is_internal() {
                let rule = edge_average_rule(&mesh, &grid, id);
                let total: f64 = rule.weights.iter().sum();
                assert!((total - 0.25).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cr_edge_averages_are_exact() {
        let (mesh, grid) = setup(2, 16, PerforationSet::none());
        let basis = build_cr_basis(&mesh, &grid, true).unwrap();
        for e in 0..mesh.n_elements() {
            let patch = basis.element_patch(e);
            for (dof, field) in &basis.element_fields[e] {
                for edge_id in mesh.element_edges(e) {
                    if !mesh.edge(edge_id).is_internal() {
                        continue;
                    }
                    let integral = edge_integral(&mesh, &grid, &patch, field, edge_id);
                    let expected = match basis.dofs[*dof] {
                        DofKey::Edge(own) if own == edge_id => 1.0,
                        _ => 0.0,
                    };
                    assert!(
                        (integral - expected).abs() < 1e-8,
                        "edge {edge_id} of element {e}: {integral} vs {expected}"
                    );
                }
            }
        }
    }

    #[test]
    fn cr_bubble_energy_identity() {
        // With zero edge averages the bubble satisfies a_T(psi, psi) = int_T psi.
        let (mesh, grid) = setup(2, 32, PerforationSet::none());
        let basis = build_cr_basis(&mesh, &grid, true).unwrap();
        for e in 0..mesh.n_elements() {
            let patch = basis.element_patch(e);
            for (dof, field) in &basis.element_fields[e] {
                if !matches!(basis.dofs[*dof], DofKey::Bubble(_)) {
                    continue;
                }
                let energy = patch_bilinear(&grid, &patch, field, field);
                let ones = vec![1.0; patch.n_nodes()];
                let load = patch_load(&grid, &patch, &ones);
                let integral: f64 = field.iter().zip(&load).map(|(a, b)| a * b).sum();
                assert!(
                    (energy - integral).abs() < 1e-8 * integral.abs().max(1e-10),
                    "element {e}: energy {energy} vs load {integral}"
                );
            }
        }
    }

    #[test]
    fn dead_edges_and_bubbles_are_dropped() {
        // A rectangle covering the whole vertical line x = 0.5 kills both
        // internal vertical edges; the south-west quadrant block kills
        // element (0,0) entirely.
        let rects = vec![
            Rect { x_min: 0.45, x_max: 0.55, y_min: 0.0, y_max: 1.0 },
            Rect { x_min: 0.0, x_max: 0.5, y_min: 0.0, y_max: 0.5 },
        ];
        let perf = PerforationSet::from_rects(rects);
        let (mesh, grid) = setup(2, 32, perf);
        let basis = build_cr_basis(&mesh, &grid, true).unwrap();
        for (id, edge) in mesh.edges().iter().enumerate() {
            if !edge.is_internal() {
                continue;
            }
            if edge.orientation == Orientation::Vertical {
                assert!(basis.edge_dof[id].is_none(), "vertical edge {id} should be dead");
            }
        }
        // Element (0,0) is fully perforated: no bubble, and its fields are
        // only those of live edges (none touch it: south/west are boundary,
        // east is dead, north is live from the neighbour side).
        assert!(basis.bubble_dof[0].is_none());
        assert!(basis.bubble_dof[3].is_some());
        // Element (1,1) keeps its horizontal internal edge and bubble.
        let e = mesh.element_index(1, 1);
        assert!(!basis.element_fields[e].is_empty());
    }

    #[test]
    fn mslin_recovers_q1_hats_without_perforations() {
        let (mesh, grid) = setup(2, 16, PerforationSet::none());
        let mslin = build_mslin_basis(&mesh, &grid, false).unwrap();
        let q1 = build_q1_basis(&mesh, &grid, false).unwrap();
        for e in 0..mesh.n_elements() {
            for ((da, fa), (db, fb)) in mslin.element_fields[e].iter().zip(&q1.element_fields[e]) {
                assert_eq!(da, db);
                for (x, y) in fa.iter().zip(fb) {
                    assert!((x - y).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn mslin_partition_of_unity_on_inner_element() {
        let (mesh, grid) = setup(4, 32, PerforationSet::none());
        let basis = build_mslin_basis(&mesh, &grid, false).unwrap();
        let e = mesh.element_index(1, 1);
        assert_eq!(basis.element_fields[e].len(), 4);
        let n_nodes = basis.element_fields[e][0].1.len();
        for k in 0..n_nodes {
            let total: f64 = basis.element_fields[e].iter().map(|(_, f)| f[k]).sum();
            assert!((total - 1.0).abs() < 1e-8, "partition of unity off: {total}");
        }
    }

    #[test]
    fn oscillatory_profile_matches_linear_on_clean_edges() {
        let (mesh, grid) = setup(2, 16, PerforationSet::none());
        let edge_id = mesh.element_edges(0)[1]; // internal vertical edge
        let profile = oscillatory_profile(&mesh, &grid, edge_id);
        for (k, v) in profile.iter().enumerate() {
            let expected = k as f64 / (profile.len() - 1) as f64;
            assert!((v - expected).abs() < 1e-12);
        }
        assert_eq!(profile[0], 0.0);
        assert_eq!(*profile.last().unwrap(), 1.0);
    }

    #[test]
    fn oscillatory_profile_is_flat_across_perforations() {
        // Perforation crossing the east edge of element (0,0) between
        // y = 0.2 and y = 0.3.
        let rect = Rect { x_min: 0.4, x_max: 0.6, y_min: 0.2, y_max: 0.3 };
        let perf = PerforationSet::from_rects(vec![rect]);
        let (mesh, grid) = setup(2, 40, perf);
        let edge_id = mesh.element_edges(0)[1];
        let profile = oscillatory_profile(&mesh, &grid, edge_id);
        // Fine nodes on the edge sit at y = k/40; the perforated stretch is
        // k = 8..=12. Each perforated segment contributes penal_h = 1/40
        // of the conductance of a clean segment.
        let increment_perforated = profile[11] - profile[10];
        let increment_clean = profile[3] - profile[2];
        assert!(increment_perforated < 0.05 * increment_clean);
        assert_eq!(profile[0], 0.0);
        assert_eq!(*profile.last().unwrap(), 1.0);
        // Monotone data.
        for pair in profile.windows(2) {
            assert!(pair[1] >= pair[0]);
        }
    }

    #[test]
    fn msosc_equals_mslin_without_perforations() {
        let (mesh, grid) = setup(2, 16, PerforationSet::none());
        let osc = build_msosc_basis(&mesh, &grid, false).unwrap();
        let lin = build_mslin_basis(&mesh, &grid, false).unwrap();
        for e in 0..mesh.n_elements() {
            for ((da, fa), (db, fb)) in osc.element_fields[e].iter().zip(&lin.element_fields[e]) {
                assert_eq!(da, db);
                for (x, y) in fa.iter().zip(fb) {
                    assert!((x - y).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn oversampling_recovers_q1_hats_without_perforations() {
        for ratio in [2.0, 3.0] {
            let (mesh, grid) = setup(4, 32, PerforationSet::none());
            let os = build_msos_basis(&mesh, &grid, ratio, false).unwrap();
            assert!(os.degenerate_elements.is_empty());
            let q1 = build_q1_basis(&mesh, &grid, false).unwrap();
            for e in 0..mesh.n_elements() {
                for ((da, fa), (db, fb)) in os.element_fields[e].iter().zip(&q1.element_fields[e]) {
                    assert_eq!(da, db);
                    for (x, y) in fa.iter().zip(fb) {
                        assert!((x - y).abs() < 1e-7);
                    }
                }
            }
        }
        assert!(build_msos_basis(
            &Arc::new(CoarseMesh::build(4).unwrap()),
            &Arc::new(FineGrid::unperforated(32)),
            1.5,
            false
        )
        .is_err());
    }

    #[test]
    fn variant_bubble_matches_unit_square_scaling() {
        // On an unperforated element of side H the Dirichlet bubble peaks at
        // about 0.0736713 H^2 (value of the unit-square torsion solution).
        let (mesh, grid) = setup(2, 128, PerforationSet::none());
        let bubbles = build_variant_bubbles(&mesh, &grid).unwrap();
        let patch = restrict_to_element(&grid, &mesh, 0).unwrap();
        let field = bubbles[0].as_ref().unwrap();
        let center = field[patch.local_node(32, 32)];
        let expected = 0.0736713 * 0.25;
        assert!((center - expected).abs() < 0.01 * expected, "center {center} vs {expected}");
        // Discrete maximum principle keeps bubbles nonnegative.
        for b in bubbles.iter().flatten() {
            assert!(b.iter().all(|&v| v >= -1e-8));
        }
    }

    #[test]
    fn fully_perforated_element_has_no_bubble() {
        let rect = Rect { x_min: 0.0, x_max: 0.5, y_min: 0.0, y_max: 0.5 };
        let perf = PerforationSet::from_rects(vec![rect]);
        let (mesh, grid) = setup(2, 16, perf);
        let bubbles = build_variant_bubbles(&mesh, &grid).unwrap();
        assert!(bubbles[0].is_none());
        assert!(bubbles[1].is_some());
    }

    /// Random sample of the orthogonality test space: zero on the outer
    /// boundary and on perforated nodes, zero average on each live edge and
    /// zero element mean.
    fn sample_test_function(
        mesh: &CoarseMesh,
        grid: &FineGrid,
        patch: &Patch,
        element: usize,
        rng: &mut Lcg64,
    ) -> Vec<f64> {
        let perf = grid.perforation();
        let h = grid.h();
        let mut v: Vec<f64> = (0..patch.n_nodes()).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut keep = vec![true; patch.n_nodes()];
        for lj in 0..=patch.ny {
            for li in 0..=patch.nx {
                let l = patch.local_node(li, lj);
                let node_perforated = perf.is_perforated(crate::geometry::Point2::new(
                    (patch.i0 + li) as f64 * h,
                    (patch.j0 + lj) as f64 * h,
                ));
                if patch.on_domain_boundary(li, lj) || node_perforated {
                    v[l] = 0.0;
                    keep[l] = false;
                }
            }
        }
        // Correction bumps: interior nodes of each live edge, then an
        // interior blob for the element mean.
        let ml = patch.nx;
        for edge_id in mesh.element_edges(element) {
            if !edge_is_live(mesh, grid, edge_id) {
                continue;
            }
            let rule_nodes = edge_fine_nodes(mesh, grid, edge_id);
            let mut bump = vec![0.0; patch.n_nodes()];
            let mut have = false;
            for &(i, j) in &rule_nodes[1..rule_nodes.len() - 1] {
                let l = patch.local_node(i - patch.i0, j - patch.j0);
                if keep[l] {
                    bump[l] = 1.0;
                    have = true;
                }
            }
            if !have {
                continue;
            }
            let row = edge_constraint_row(
                mesh,
                grid,
                patch,
                &(0..patch.n_nodes()).map(Some).collect::<Vec<_>>(),
                edge_id,
            );
            let cv = row.dot(&v);
            let cb = row.dot(&bump);
            if cb.abs() > 1e-14 {
                for (dst, src) in v.iter_mut().zip(&bump) {
                    *dst -= cv / cb * src;
                }
            }
        }
        // Element mean through an interior bump (does not touch the edges).
        let ones = vec![1.0; patch.n_nodes()];
        let mass = patch_load(grid, patch, &ones);
        let mut bump = vec![0.0; patch.n_nodes()];
        let mut have = false;
        for lj in 2..ml - 1 {
            for li in 2..ml - 1 {
                let l = patch.local_node(li, lj);
                if keep[l] {
                    bump[l] = 1.0;
                    have = true;
                }
            }
        }
        if have {
            let mean_v: f64 = v.iter().zip(&mass).map(|(a, b)| a * b).sum();
            let mean_b: f64 = bump.iter().zip(&mass).map(|(a, b)| a * b).sum();
            if mean_b.abs() > 1e-14 {
                for (dst, src) in v.iter_mut().zip(&bump) {
                    *dst -= mean_v / mean_b * src;
                }
            }
        }
        v
    }

    #[test]
    fn cr_basis_is_orthogonal_to_sampled_test_space() {
        let perf = PerforationSet::periodic_discs(0.25, 0.3, (0.0, 0.0)).unwrap();
        let (mesh, grid) = setup(2, 32, perf);
        let basis = build_cr_basis(&mesh, &grid, true).unwrap();
        let mut rng = Lcg64::new(2024);
        for e in 0..mesh.n_elements() {
            let patch = basis.element_patch(e);
            for trial in 0..20 {
                let v = sample_test_function(&mesh, &grid, &patch, e, &mut rng);
                let v_energy = patch_bilinear(&grid, &patch, &v, &v).sqrt();
                if v_energy < 1e-12 {
                    continue;
                }
                for (dof, field) in &basis.element_fields[e] {
                    let b_energy = patch_bilinear(&grid, &patch, field, field).sqrt();
                    let inner = patch_bilinear(&grid, &patch, field, &v);
                    assert!(
                        inner.abs() <= 1e-6 * b_energy * v_energy,
                        "element {e} trial {trial} dof {dof}: {inner} vs {}",
                        b_energy * v_energy
                    );
                }
            }
        }
    }

    #[test]
    fn cr_flux_is_nearly_constant_along_edges() {
        // Discrete normal flux of an edge function along the middle half of
        // its own edge (the pointwise flux does not converge at the corners,
        // where the exact normal derivative jumps between edges); the
        // variation halves with resolution.
        let mut variations = Vec::new();
        for m in [64usize, 128] {
            let (mesh, grid) = setup(2, m, PerforationSet::none());
            let basis = build_cr_basis(&mesh, &grid, false).unwrap();
            let e = 0usize;
            let patch = basis.element_patch(e);
            let ml = patch.nx;
            let east = mesh.element_edges(e)[1];
            let (_, field) = basis.element_fields[e]
                .iter()
                .find(|(d, _)| basis.dofs[*d] == DofKey::Edge(east))
                .expect("east edge dof");
            let h = grid.h();
            let mut fluxes = Vec::new();
            for j in ml / 4..3 * ml / 4 {
                let u = |li: usize, lj: usize| field[patch.local_node(li, lj)];
                let dudx = ((u(ml, j) - u(ml - 1, j)) + (u(ml, j + 1) - u(ml - 1, j + 1)))
                    / (2.0 * h);
                fluxes.push(dudx);
            }
            let max = fluxes.iter().cloned().fold(f64::MIN, f64::max);
            let min = fluxes.iter().cloned().fold(f64::MAX, f64::min);
            let mean = fluxes.iter().sum::<f64>() / fluxes.len() as f64;
            variations.push((max - min) / mean.abs());
        }
        assert!(variations[0] <= 0.05, "variation at m/n = 32: {}", variations[0]);
        assert!(
            variations[1] <= 0.7 * variations[0],
            "variation should shrink with resolution: {variations:?}"
        );
    }

    #[test]
    fn no_dofs_on_boundary_edges() {
        let (mesh, grid) = setup(3, 12, PerforationSet::none());
        let basis = build_cr_basis(&mesh, &grid, true).unwrap();
        for (id, edge) in mesh.edges().iter().enumerate() {
            if !edge.is_internal() {
                assert!(basis.edge_dof[id].is_none());
            }
        }
    }
}
