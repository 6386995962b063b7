//! Coarse quadrangle mesh of the unit square and the shared uniform fine
//! grid.
//!
//! The coarse mesh `T_H` partitions `Omega = (0,1)^2` into `n x n` axis
//! aligned squares of side `H = 1/n`, with explicit edge incidence (every
//! internal edge is shared by exactly two elements). All fine-scale
//! computations (reference solve, basis problems, error norms) live on one
//! uniform `m x m` fine grid nested in every coarse mesh of the experiment,
//! which removes inter-grid interpolation from the error reports.

use crate::error::{Error, Result};
use crate::geometry::{PerforationSet, Point2};

/// Edge orientation in the axis-aligned mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// Constant-x segment.
    Vertical,
    /// Constant-y segment.
    Horizontal,
}

/// One mesh edge. For vertical edges `before` is the element on the west
/// side and `after` the element on the east side; for horizontal edges
/// `before` is south and `after` is north. `None` marks the domain boundary.
#[derive(Debug, Clone)]
pub struct Edge {
    pub orientation: Orientation,
    pub start: Point2,
    pub end: Point2,
    pub before: Option<usize>,
    pub after: Option<usize>,
}

impl Edge {
    pub fn is_internal(&self) -> bool {
        self.before.is_some() && self.after.is_some()
    }

    /// The one or two elements incident to this edge.
    pub fn elements(&self) -> impl Iterator<Item = usize> + '_ {
        self.before.iter().chain(self.after.iter()).copied()
    }
}

/// Per-element edge ids in the order south, east, north, west.
pub type ElementEdges = [usize; 4];

/// Uniform coarse quadrangle mesh of the unit square.
#[derive(Debug, Clone)]
pub struct CoarseMesh {
    n: usize,
    edges: Vec<Edge>,
    element_edges: Vec<ElementEdges>,
}

impl CoarseMesh {
    /// Build the `n x n` mesh, `n >= 2`.
    pub fn build(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidParameter(format!(
                "coarse mesh needs at least 2 elements per side, got {n}"
            )));
        }
        let h = 1.0 / n as f64;
        let mut edges = Vec::with_capacity(2 * n * (n + 1));
        // Vertical edges: column i in 0..=n, row ey in 0..n.
        for i in 0..=n {
            for ey in 0..n {
                let x = i as f64 * h;
                edges.push(Edge {
                    orientation: Orientation::Vertical,
                    start: Point2::new(x, ey as f64 * h),
                    end: Point2::new(x, (ey + 1) as f64 * h),
                    before: (i > 0).then(|| (i - 1) + ey * n),
                    after: (i < n).then(|| i + ey * n),
                });
            }
        }
        // Horizontal edges: row j in 0..=n, column ex in 0..n.
        for j in 0..=n {
            for ex in 0..n {
                let y = j as f64 * h;
                edges.push(Edge {
                    orientation: Orientation::Horizontal,
                    start: Point2::new(ex as f64 * h, y),
                    end: Point2::new((ex + 1) as f64 * h, y),
                    before: (j > 0).then(|| ex + (j - 1) * n),
                    after: (j < n).then(|| ex + j * n),
                });
            }
        }
        let v_id = |i: usize, ey: usize| i * n + ey;
        let h_id = |ex: usize, j: usize| (n + 1) * n + j * n + ex;
        let mut element_edges = Vec::with_capacity(n * n);
        for ey in 0..n {
            for ex in 0..n {
                element_edges.push([
                    h_id(ex, ey),     // south
                    v_id(ex + 1, ey), // east
                    h_id(ex, ey + 1), // north
                    v_id(ex, ey),     // west
                ]);
            }
        }
        Ok(CoarseMesh { n, edges, element_edges })
    }

    pub fn n_per_side(&self) -> usize {
        self.n
    }

    /// Coarse mesh size `H = 1/n`.
    pub fn h_coarse(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn n_elements(&self) -> usize {
        self.n * self.n
    }

    /// Element grid coordinates `(ex, ey)` of element `e = ex + ey * n`.
    pub fn element_coords(&self, e: usize) -> (usize, usize) {
        (e % self.n, e / self.n)
    }

    pub fn element_index(&self, ex: usize, ey: usize) -> usize {
        ex + ey * self.n
    }

    /// Lower-left and upper-right corners of element `e`.
    pub fn element_bounds(&self, e: usize) -> (Point2, Point2) {
        let (ex, ey) = self.element_coords(e);
        let h = self.h_coarse();
        (
            Point2::new(ex as f64 * h, ey as f64 * h),
            Point2::new((ex + 1) as f64 * h, (ey + 1) as f64 * h),
        )
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, id: usize) -> &Edge {
        &self.edges[id]
    }

    /// Edge ids of element `e` in the order south, east, north, west.
    pub fn element_edges(&self, e: usize) -> ElementEdges {
        self.element_edges[e]
    }

    pub fn n_internal_edges(&self) -> usize {
        self.edges.iter().filter(|e| e.is_internal()).count()
    }

    /// The neighbour of `e` across edge `edge_id`, if any.
    pub fn neighbor_across(&self, e: usize, edge_id: usize) -> Option<usize> {
        let edge = &self.edges[edge_id];
        match (edge.before, edge.after) {
            (Some(a), Some(b)) if a == e => Some(b),
            (Some(a), Some(b)) if b == e => Some(a),
            _ => None,
        }
    }
}

/// Uniform fine grid with per-cell penalization coefficients.
///
/// Cells inside the perforation set carry `nu = 1/penal_h` and
/// `sigma = 1/penal_h^3`; outside `nu = 1`, `sigma = 0`. Membership is
/// decided by the cell center, with the closed-set tie-break of the geometry
/// module.
#[derive(Debug, Clone)]
pub struct FineGrid {
    m: usize,
    penal_h: f64,
    perf: PerforationSet,
    nu: Vec<f64>,
    sigma: Vec<f64>,
}

impl FineGrid {
    pub fn build(m: usize, perf: &PerforationSet, penal_h: f64) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidParameter("fine grid needs m >= 1".to_string()));
        }
        if !(penal_h > 0.0) {
            return Err(Error::InvalidParameter("penal_h must be positive".to_string()));
        }
        let h = 1.0 / m as f64;
        let nu_in = 1.0 / penal_h;
        let sigma_in = 1.0 / (penal_h * penal_h * penal_h);
        let mut nu = vec![1.0; m * m];
        let mut sigma = vec![0.0; m * m];
        for cy in 0..m {
            for cx in 0..m {
                let center = Point2::new((cx as f64 + 0.5) * h, (cy as f64 + 0.5) * h);
                if perf.is_perforated(center) {
                    let c = cx + cy * m;
                    nu[c] = nu_in;
                    sigma[c] = sigma_in;
                }
            }
        }
        Ok(FineGrid { m, penal_h, perf: perf.clone(), nu, sigma })
    }

    /// Grid with `nu = 1`, `sigma = 0` everywhere.
    pub fn unperforated(m: usize) -> Self {
        FineGrid {
            m,
            penal_h: 1.0 / m as f64,
            perf: PerforationSet::none(),
            nu: vec![1.0; m * m],
            sigma: vec![0.0; m * m],
        }
    }

    pub fn m_per_side(&self) -> usize {
        self.m
    }

    /// The perforation set the grid was classified against.
    pub fn perforation(&self) -> &PerforationSet {
        &self.perf
    }

    /// Penalization length scale (`nu = 1/penal_h`, `sigma = 1/penal_h^3`
    /// inside perforations).
    pub fn penal_h(&self) -> f64 {
        self.penal_h
    }

    pub fn h(&self) -> f64 {
        1.0 / self.m as f64
    }

    pub fn n_nodes(&self) -> usize {
        (self.m + 1) * (self.m + 1)
    }

    pub fn n_cells(&self) -> usize {
        self.m * self.m
    }

    pub fn node_index(&self, i: usize, j: usize) -> usize {
        i + j * (self.m + 1)
    }

    pub fn node_coords(&self, idx: usize) -> Point2 {
        let i = idx % (self.m + 1);
        let j = idx / (self.m + 1);
        let h = self.h();
        Point2::new(i as f64 * h, j as f64 * h)
    }

    pub fn cell_index(&self, cx: usize, cy: usize) -> usize {
        cx + cy * self.m
    }

    pub fn nu(&self, cell: usize) -> f64 {
        self.nu[cell]
    }

    pub fn sigma(&self, cell: usize) -> f64 {
        self.sigma[cell]
    }

    /// True iff the cell was classified inside the perforation set.
    pub fn cell_perforated(&self, cell: usize) -> bool {
        self.sigma[cell] > 0.0
    }

    /// Node ids of cell `(cx, cy)` in the order SW, SE, NE, NW.
    pub fn cell_nodes(&self, cx: usize, cy: usize) -> [usize; 4] {
        let s = self.m + 1;
        [
            cx + cy * s,
            cx + 1 + cy * s,
            cx + 1 + (cy + 1) * s,
            cx + (cy + 1) * s,
        ]
    }

    pub fn boundary_node(&self, idx: usize) -> bool {
        let i = idx % (self.m + 1);
        let j = idx / (self.m + 1);
        i == 0 || j == 0 || i == self.m || j == self.m
    }
}

/// Rectangular fine sub-grid, `nx x ny` cells with lower-left fine node
/// `(i0, j0)`. Local nodes are indexed row-major over `(nx+1) x (ny+1)`.
#[derive(Debug, Clone, Copy)]
pub struct Patch {
    pub i0: usize,
    pub j0: usize,
    pub nx: usize,
    pub ny: usize,
    m: usize,
}

impl Patch {
    pub fn new(i0: usize, j0: usize, nx: usize, ny: usize, grid: &FineGrid) -> Self {
        debug_assert!(i0 + nx <= grid.m && j0 + ny <= grid.m);
        Patch { i0, j0, nx, ny, m: grid.m }
    }

    pub fn n_nodes(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn local_node(&self, li: usize, lj: usize) -> usize {
        li + lj * (self.nx + 1)
    }

    /// Global fine node of local node `(li, lj)`.
    pub fn global_node(&self, li: usize, lj: usize) -> usize {
        (self.i0 + li) + (self.j0 + lj) * (self.m + 1)
    }

    /// Global cell index of local cell `(ci, cj)`.
    pub fn global_cell(&self, ci: usize, cj: usize) -> usize {
        (self.i0 + ci) + (self.j0 + cj) * self.m
    }

    /// Local node ids of local cell `(ci, cj)`, order SW, SE, NE, NW.
    pub fn cell_local_nodes(&self, ci: usize, cj: usize) -> [usize; 4] {
        let s = self.nx + 1;
        [
            ci + cj * s,
            ci + 1 + cj * s,
            ci + 1 + (cj + 1) * s,
            ci + (cj + 1) * s,
        ]
    }

    /// True iff the local node lies on the global domain boundary.
    pub fn on_domain_boundary(&self, li: usize, lj: usize) -> bool {
        let i = self.i0 + li;
        let j = self.j0 + lj;
        i == 0 || j == 0 || i == self.m || j == self.m
    }

    /// True iff the local node lies on the patch boundary.
    pub fn on_patch_boundary(&self, li: usize, lj: usize) -> bool {
        li == 0 || lj == 0 || li == self.nx || lj == self.ny
    }
}

/// Map coarse element `t` onto its nested fine sub-grid.
///
/// Fails when the fine grid is not nested in the coarse mesh.
pub fn restrict_to_element(grid: &FineGrid, mesh: &CoarseMesh, t: usize) -> Result<Patch> {
    let n = mesh.n_per_side();
    let m = grid.m_per_side();
    if m % n != 0 {
        return Err(Error::Config(format!(
            "fine grid m = {m} is not nested in coarse mesh n = {n}"
        )));
    }
    let ml = m / n;
    let (ex, ey) = mesh.element_coords(t);
    Ok(Patch::new(ex * ml, ey * ml, ml, ml, grid))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn element_and_edge_counts() {
        let mesh = CoarseMesh::build(2).unwrap();
        assert_eq!(mesh.n_elements(), 4);
        assert_eq!(mesh.n_internal_edges(), 4);

        let mesh = CoarseMesh::build(8).unwrap();
        assert_eq!(mesh.n_elements(), 64);
        assert_eq!(mesh.n_internal_edges(), 112);

        assert!(CoarseMesh::build(1).is_err());
    }

    #[test]
    fn edge_between_first_two_elements() {
        // Elements (0,0) and (1,0) of the 5 x 5 mesh share the vertical
        // segment x = 0.2, y in [0, 0.2].
        let mesh = CoarseMesh::build(5).unwrap();
        let e0 = mesh.element_index(0, 0);
        let e1 = mesh.element_index(1, 0);
        let east = mesh.element_edges(e0)[1];
        let edge = mesh.edge(east);
        assert_eq!(edge.orientation, Orientation::Vertical);
        assert!((edge.start.x - 0.2).abs() < 1e-15);
        assert!((edge.start.y - 0.0).abs() < 1e-15);
        assert!((edge.end.y - 0.2).abs() < 1e-15);
        assert_eq!(edge.before, Some(e0));
        assert_eq!(edge.after, Some(e1));
        assert_eq!(mesh.neighbor_across(e0, east), Some(e1));
    }

    #[test]
    fn incidence_is_consistent() {
        let mesh = CoarseMesh::build(6).unwrap();
        // Count how often each edge appears in element incidence lists.
        let mut seen = vec![0usize; mesh.edges().len()];
        for e in 0..mesh.n_elements() {
            for id in mesh.element_edges(e) {
                seen[id] += 1;
            }
        }
        for (id, edge) in mesh.edges().iter().enumerate() {
            let expected = if edge.is_internal() { 2 } else { 1 };
            assert_eq!(seen[id], expected, "edge {id}");
        }
        // Element areas tile the unit square.
        let h = mesh.h_coarse();
        let total: f64 = (0..mesh.n_elements()).map(|_| h * h).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fine_grid_classification() {
        let perf = PerforationSet::none();
        let grid = FineGrid::build(10, &perf, 0.1).unwrap();
        assert!(grid.nu.iter().all(|&v| v == 1.0));
        assert!(grid.sigma.iter().all(|&v| v == 0.0));

        let perf = PerforationSet::periodic_discs(0.2, 0.3, (0.0, 0.0)).unwrap();
        let grid = FineGrid::build(100, &perf, 0.01).unwrap();
        // Cell containing the first disc center (0.1, 0.1): center of cell
        // (9,9) is (0.095, 0.095), inside the disc of radius 0.06.
        let c = grid.cell_index(9, 9);
        assert!((grid.nu(c) - 100.0).abs() < 1e-9);
        assert!((grid.sigma(c) - 1.0e6).abs() < 1e-3);
        assert!(grid.cell_perforated(c));
        let far = grid.cell_index(20, 20);
        assert_eq!(grid.nu(far), 1.0);
        assert_eq!(grid.sigma(far), 0.0);
    }

    #[test]
    fn restriction_maps_local_to_global() {
        let grid = FineGrid::unperforated(4);
        let mesh = CoarseMesh::build(2).unwrap();
        let patch = restrict_to_element(&grid, &mesh, 0).unwrap();
        assert_eq!(patch.n_nodes(), 9);
        let mut globals = Vec::new();
        for lj in 0..=2 {
            for li in 0..=2 {
                globals.push(patch.global_node(li, lj));
            }
        }
        assert_eq!(globals, vec![0, 1, 2, 5, 6, 7, 10, 11, 12]);

        let grid = FineGrid::unperforated(8);
        let mesh = CoarseMesh::build(4).unwrap();
        for t in 0..mesh.n_elements() {
            let patch = restrict_to_element(&grid, &mesh, t).unwrap();
            assert_eq!(patch.n_nodes(), 9);
        }

        let grid = FineGrid::unperforated(9);
        assert!(restrict_to_element(&grid, &mesh, 0).is_err());
    }
}
