//! One-dimensional multiscale elements on a perforated interval.
//!
//! Everything here is exact: the basis functions are piecewise polynomials
//! on the gaps between perforations (no fine grid, no penalization), the
//! stiffness entries are integrated in closed form, and the reference
//! solution comes from per-gap double quadrature. This gives a
//! penalization-free oracle for the multiscale construction itself.

use crate::error::{Error, Result};
use crate::linalg::dense_solve;
use crate::rng::Lcg64;

/// 16-point Gauss-Legendre nodes/weights on [-1, 1].
const GAUSS_X: [f64; 8] = [
    0.0950125098376374,
    0.2816035507792589,
    0.4580167776572274,
    0.6178762444026438,
    0.7554044083550030,
    0.8656312023878318,
    0.9445750230732326,
    0.9894009349916499,
];
const GAUSS_W: [f64; 8] = [
    0.1894506104550685,
    0.1826034150449236,
    0.1691565193950025,
    0.1495959888165767,
    0.1246289712555339,
    0.0951585116824928,
    0.0622535239386479,
    0.0271524594117541,
];

/// 16-point Gauss-Legendre quadrature of `f` over `[a, b]`.
pub fn gauss(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut acc = 0.0;
    for k in 0..8 {
        acc += GAUSS_W[k] * (f(mid + half * GAUSS_X[k]) + f(mid - half * GAUSS_X[k]));
    }
    acc * half
}

/// Piecewise quadratic supported on a list of disjoint intervals; the value
/// is zero outside them. Coefficients are in the local coordinate `x - l`.
#[derive(Debug, Clone, Default)]
pub struct Piecewise {
    /// (l, r, [c0, c1, c2]): `c0 + c1 (x-l) + c2 (x-l)^2` on `[l, r]`.
    pub segments: Vec<(f64, f64, [f64; 3])>,
}

impl Piecewise {
    pub fn eval(&self, x: f64) -> f64 {
        for &(l, r, c) in &self.segments {
            if x >= l && x <= r {
                let t = x - l;
                return c[0] + c[1] * t + c[2] * t * t;
            }
        }
        0.0
    }

    pub fn eval_deriv(&self, x: f64) -> f64 {
        for &(l, r, c) in &self.segments {
            if x >= l && x <= r {
                return c[1] + 2.0 * c[2] * (x - l);
            }
        }
        0.0
    }

    pub fn is_zero(&self) -> bool {
        self.segments.is_empty()
    }

    /// Exact `int u' v'`. The derivative of each segment polynomial is
    /// evaluated directly (not looked up by position), so shared segment
    /// endpoints pick the correct one-sided slope; Simpson is exact for the
    /// quadratic integrand.
    pub fn stiffness_inner(&self, other: &Piecewise) -> f64 {
        let mut acc = 0.0;
        for &(al, ar, ca) in &self.segments {
            for &(bl, br, cb) in &other.segments {
                let lo = al.max(bl);
                let hi = ar.min(br);
                if hi <= lo {
                    continue;
                }
                let g = |x: f64| {
                    (ca[1] + 2.0 * ca[2] * (x - al)) * (cb[1] + 2.0 * cb[2] * (x - bl))
                };
                let mid = 0.5 * (lo + hi);
                acc += (hi - lo) / 6.0 * (g(lo) + 4.0 * g(mid) + g(hi));
            }
        }
        acc
    }

    /// `int f v` by per-segment Gauss quadrature.
    pub fn load_inner(&self, f: &impl Fn(f64) -> f64) -> f64 {
        self.segments
            .iter()
            .map(|&(l, r, c)| {
                gauss(
                    |x| {
                        let t = x - l;
                        f(x) * (c[0] + c[1] * t + c[2] * t * t)
                    },
                    l,
                    r,
                )
            })
            .sum()
    }
}

/// Maximal unperforated subintervals of `[lo, hi]`.
fn components_in(lo: f64, hi: f64, perforations: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut cursor = lo;
    for &(a, b) in perforations {
        if b <= lo {
            continue;
        }
        if a >= hi {
            break;
        }
        if a > cursor {
            out.push((cursor, a.min(hi)));
        }
        cursor = cursor.max(b);
        if cursor >= hi {
            break;
        }
    }
    if cursor < hi {
        out.push((cursor, hi));
    }
    // Slivers below 1e-12 carry no usable degrees of freedom.
    out.retain(|&(a, b)| b - a > 1e-12);
    out
}

fn is_perforated_1d(x: f64, perforations: &[(f64, f64)]) -> bool {
    perforations.iter().any(|&(a, b)| x >= a && x <= b)
}

/// Uniform 1D mesh of `[0, 1]` with a perforation list.
#[derive(Debug, Clone)]
pub struct Mesh1D {
    pub nodes: Vec<f64>,
    pub perforations: Vec<(f64, f64)>,
}

impl Mesh1D {
    pub fn uniform(n_segments: usize, perforations: Vec<(f64, f64)>) -> Result<Self> {
        if n_segments < 1 {
            return Err(Error::InvalidParameter("need at least one segment".to_string()));
        }
        let mut prev = 0.0;
        for &(a, b) in &perforations {
            if !(a > prev && b > a && b < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "perforations must be increasing and inside (0,1): ({a}, {b})"
                )));
            }
            prev = b;
        }
        let nodes = (0..=n_segments).map(|i| i as f64 / n_segments as f64).collect();
        Ok(Mesh1D { nodes, perforations })
    }

    pub fn n_segments(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Domain gaps: maximal unperforated intervals of `[0, 1]`.
    pub fn gaps(&self) -> Vec<(f64, f64)> {
        components_in(0.0, 1.0, &self.perforations)
    }
}

/// Node functions and segment bubbles spanning the 1D multiscale space.
#[derive(Debug, Clone)]
pub struct Basis1D {
    /// One per internal node; identically zero when the node is perforated.
    pub phis: Vec<Piecewise>,
    /// One per segment; `-psi'' = 1` on each unperforated component with
    /// zero component-endpoint values.
    pub psis: Vec<Piecewise>,
}

/// Build the basis: `phi_i` is piecewise linear on the component of each
/// adjacent segment that touches node `x_i` (zero elsewhere); `psi_i` is the
/// parabola `(x - l)(r - x)/2` on every component of segment `i`.
pub fn build_basis_1d(mesh: &Mesh1D) -> Basis1D {
    let n = mesh.n_segments();
    let mut phis = Vec::with_capacity(n.saturating_sub(1));
    for i in 1..n {
        let xi = mesh.nodes[i];
        let mut phi = Piecewise::default();
        if !is_perforated_1d(xi, &mesh.perforations) {
            // Left side: component ending at x_i, rising 0 -> 1.
            for (l, r) in components_in(mesh.nodes[i - 1], xi, &mesh.perforations) {
                if (r - xi).abs() < 1e-14 {
                    let len = r - l;
                    phi.segments.push((l, r, [0.0, 1.0 / len, 0.0]));
                }
            }
            // Right side: component starting at x_i, falling 1 -> 0.
            for (l, r) in components_in(xi, mesh.nodes[i + 1], &mesh.perforations) {
                if (l - xi).abs() < 1e-14 {
                    let len = r - l;
                    phi.segments.push((l, r, [1.0, -1.0 / len, 0.0]));
                }
            }
        }
        phis.push(phi);
    }
    let mut psis = Vec::with_capacity(n);
    for i in 0..n {
        let mut psi = Piecewise::default();
        for (l, r) in components_in(mesh.nodes[i], mesh.nodes[i + 1], &mesh.perforations) {
            let len = r - l;
            psi.segments.push((l, r, [0.0, 0.5 * len, -0.5]));
        }
        psis.push(psi);
    }
    Basis1D { phis, psis }
}

/// Galerkin solution in the 1D multiscale space.
#[derive(Debug, Clone)]
pub struct Solution1D {
    pub basis: Basis1D,
    /// Coefficients matching `live` order.
    pub coeffs: Vec<f64>,
    /// Live basis functions as indices: phis first, then psis.
    pub live_phis: Vec<usize>,
    pub live_psis: Vec<usize>,
    /// True when every degree of freedom was dead (fully perforated mesh).
    pub degenerate: bool,
}

impl Solution1D {
    fn functions(&self) -> impl Iterator<Item = (&Piecewise, f64)> {
        let phi_iter = self
            .live_phis
            .iter()
            .enumerate()
            .map(move |(k, &i)| (&self.basis.phis[i], self.coeffs[k]));
        let off = self.live_phis.len();
        let psi_iter = self
            .live_psis
            .iter()
            .enumerate()
            .map(move |(k, &i)| (&self.basis.psis[i], self.coeffs[off + k]));
        phi_iter.chain(psi_iter)
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.functions().map(|(b, c)| c * b.eval(x)).sum()
    }

    pub fn eval_deriv(&self, x: f64) -> f64 {
        self.functions().map(|(b, c)| c * b.eval_deriv(x)).sum()
    }
}

/// Assemble and solve the 1D Galerkin system over the multiscale space.
pub fn solve_msfem_1d(mesh: &Mesh1D, f: impl Fn(f64) -> f64) -> Result<Solution1D> {
    let basis = build_basis_1d(mesh);
    let live_phis: Vec<usize> =
        (0..basis.phis.len()).filter(|&i| !basis.phis[i].is_zero()).collect();
    let live_psis: Vec<usize> =
        (0..basis.psis.len()).filter(|&i| !basis.psis[i].is_zero()).collect();
    let live: Vec<&Piecewise> = live_phis
        .iter()
        .map(|&i| &basis.phis[i])
        .chain(live_psis.iter().map(|&i| &basis.psis[i]))
        .collect();
    if live.is_empty() {
        return Ok(Solution1D {
            basis,
            coeffs: Vec::new(),
            live_phis,
            live_psis,
            degenerate: true,
        });
    }
    let k = live.len();
    let mut a = vec![vec![0.0; k]; k];
    let mut rhs = vec![0.0; k];
    for i in 0..k {
        for j in i..k {
            let v = live[i].stiffness_inner(live[j]);
            a[i][j] = v;
            a[j][i] = v;
        }
        rhs[i] = live[i].load_inner(&f);
    }
    let coeffs = dense_solve(a, rhs)?;
    Ok(Solution1D { basis, coeffs, live_phis, live_psis, degenerate: false })
}

/// Exact solution evaluated per domain gap by double quadrature:
/// on a gap `(l, r)`, `u(x) = A (x - l) - int_l^x (x - t) f(t) dt` with
/// `A` fixed by `u(r) = 0`.
pub struct ExactSolution1D {
    gaps: Vec<(f64, f64, f64)>, // (l, r, A)
    f: Box<dyn Fn(f64) -> f64 + Sync>,
}

pub fn exact_solution_1d(
    mesh: &Mesh1D,
    f: impl Fn(f64) -> f64 + Clone + Sync + 'static,
) -> ExactSolution1D {
    let gaps = mesh
        .gaps()
        .into_iter()
        .map(|(l, r)| {
            let ff = f.clone();
            let a = gauss(move |t| (r - t) * ff(t), l, r) / (r - l);
            (l, r, a)
        })
        .collect();
    ExactSolution1D { gaps, f: Box::new(f) }
}

impl ExactSolution1D {
    pub fn eval(&self, x: f64) -> f64 {
        for &(l, r, a) in &self.gaps {
            if x >= l && x <= r {
                return a * (x - l) - gauss(|t| (x - t) * (self.f)(t), l, x);
            }
        }
        0.0
    }

    pub fn eval_deriv(&self, x: f64) -> f64 {
        for &(l, r, a) in &self.gaps {
            if x >= l && x <= r {
                return a - gauss(|t| (self.f)(t), l, x);
            }
        }
        0.0
    }
}

/// `|u - u_H|_{H^1}` by composite Gauss over the gaps, split at the mesh
/// nodes so every sub-integrand is smooth.
pub fn h1_error_1d(mesh: &Mesh1D, exact: &ExactSolution1D, solution: &Solution1D) -> f64 {
    let mut acc = 0.0;
    for &(l, r, _) in &exact.gaps {
        let mut cuts: Vec<f64> = vec![l];
        for &x in &mesh.nodes {
            if x > l && x < r {
                cuts.push(x);
            }
        }
        cuts.push(r);
        for pair in cuts.windows(2) {
            let g = |x: f64| {
                let d = exact.eval_deriv(x) - solution.eval_deriv(x);
                d * d
            };
            acc += gauss(g, pair[0], pair[1]);
        }
    }
    acc.sqrt()
}

/// Random perforations with every unperforated gap of length at most `eps`:
/// alternate gap lengths `U(0.5 eps, eps)` and hole lengths
/// `U(0.1 eps, 0.3 eps)` from the seeded LCG stream.
pub fn random_perforations_1d(eps: f64, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = Lcg64::new(seed);
    let mut out = Vec::new();
    let mut x = 0.0;
    loop {
        x += rng.uniform(0.5 * eps, eps);
        if x >= 1.0 {
            break;
        }
        let hole = rng.uniform(0.1 * eps, 0.3 * eps);
        let b = (x + hole).min(1.0 - 1e-9);
        if b <= x {
            break;
        }
        out.push((x, b));
        x = b;
    }
    out
}

/// One row of the 1D rate table.
#[derive(Debug, Clone)]
pub struct RateRow1D {
    pub eps: f64,
    pub h_coarse: f64,
    pub h1_err: f64,
    /// `e / (eps * H * ||f'||_{L2})`.
    pub normalized: f64,
}

/// H1 errors of the 1D method against the quadrature oracle over a grid of
/// `(eps, H)`, with the normalization used by the rate checks.
pub fn verify_estimate_1d(
    eps_list: &[f64],
    n_list: &[usize],
    f: impl Fn(f64) -> f64 + Clone + Sync + 'static,
    f_prime_l2: f64,
    seed: u64,
) -> Result<Vec<RateRow1D>> {
    let mut rows = Vec::new();
    for &eps in eps_list {
        let perforations = random_perforations_1d(eps, seed);
        for &n in n_list {
            let mesh = Mesh1D::uniform(n, perforations.clone())?;
            let solution = solve_msfem_1d(&mesh, f.clone())?;
            let exact = exact_solution_1d(&mesh, f.clone());
            let err = h1_error_1d(&mesh, &exact, &solution);
            let h = 1.0 / n as f64;
            rows.push(RateRow1D {
                eps,
                h_coarse: h,
                h1_err: err,
                normalized: err / (eps * h * f_prime_l2),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_solution_closed_forms() {
        // Single gap (0, g) with f = 1: u(x) = x (g - x) / 2, max g^2 / 8.
        let mesh = Mesh1D::uniform(4, vec![(0.5, 1.0 - 1e-9)]).unwrap();
        let exact = exact_solution_1d(&mesh, |_| 1.0);
        let g = 0.5;
        for &x in &[0.1, 0.25, 0.4] {
            assert!((exact.eval(x) - x * (g - x) / 2.0).abs() < 1e-12);
        }
        assert!((exact.eval(0.25) - g * g / 8.0).abs() < 1e-12);

        // No perforations: u(0.5) = 0.125.
        let mesh = Mesh1D::uniform(4, vec![]).unwrap();
        let exact = exact_solution_1d(&mesh, |_| 1.0);
        assert!((exact.eval(0.5) - 0.125).abs() < 1e-12);

        // f = 0 gives u = 0.
        let exact = exact_solution_1d(&mesh, |_| 0.0);
        assert!(exact.eval(0.3).abs() < 1e-14);
    }

    #[test]
    fn unperforated_solution_is_exact() {
        // With f = 1 the space contains the exact parabola.
        let mesh = Mesh1D::uniform(8, vec![]).unwrap();
        let solution = solve_msfem_1d(&mesh, |_| 1.0).unwrap();
        let exact = exact_solution_1d(&mesh, |_| 1.0);
        let err = h1_error_1d(&mesh, &exact, &solution);
        assert!(err < 1e-10, "error {err}");
        assert!((solution.eval(0.5) - 0.125).abs() < 1e-10);
    }

    #[test]
    fn zero_load_gives_zero_solution() {
        let mesh = Mesh1D::uniform(8, vec![(0.3, 0.4)]).unwrap();
        let solution = solve_msfem_1d(&mesh, |_| 0.0).unwrap();
        for k in 0..=20 {
            assert!(solution.eval(k as f64 / 20.0).abs() < 1e-12);
        }
    }

    #[test]
    fn node_inside_perforation_keeps_problem_solvable() {
        // Node x = 0.5 sits inside (0.45, 0.55): its phi vanishes but the
        // segment bubbles keep the solution nontrivial.
        let mesh = Mesh1D::uniform(2, vec![(0.45, 0.55)]).unwrap();
        let basis = build_basis_1d(&mesh);
        assert!(basis.phis[0].is_zero());
        assert!(!basis.psis[0].is_zero() && !basis.psis[1].is_zero());
        let solution = solve_msfem_1d(&mesh, |_| 1.0).unwrap();
        assert!(!solution.degenerate);
        assert!(solution.eval(0.2) > 0.0);
        // Zero on the perforation itself.
        assert!(solution.eval(0.5).abs() < 1e-14);
    }

    #[test]
    fn dimension_is_at_most_2n_minus_1() {
        let mesh = Mesh1D::uniform(6, vec![(0.3, 0.35), (0.7, 0.72)]).unwrap();
        let solution = solve_msfem_1d(&mesh, |x| x).unwrap();
        assert!(solution.coeffs.len() <= 2 * 6 - 1);
    }

    #[test]
    fn solution_vanishes_on_perforations() {
        let mesh = Mesh1D::uniform(8, vec![(0.22, 0.3), (0.61, 0.66)]).unwrap();
        let solution = solve_msfem_1d(&mesh, |x| (3.0 * x).sin()).unwrap();
        for &x in &[0.23, 0.25, 0.29, 0.62, 0.65] {
            assert_eq!(solution.eval(x), 0.0);
        }
    }

    #[test]
    fn galerkin_orthogonality() {
        let mesh = Mesh1D::uniform(8, vec![(0.22, 0.3), (0.61, 0.66)]).unwrap();
        let f = |x: f64| (3.0 * x).sin();
        let solution = solve_msfem_1d(&mesh, f).unwrap();
        let exact = exact_solution_1d(&mesh, f);
        // a(u - u_H, b) = 0 for every live basis function b.
        let basis = build_basis_1d(&mesh);
        let mut scale = 0.0f64;
        let mut worst = 0.0f64;
        for b in basis.phis.iter().chain(basis.psis.iter()) {
            if b.is_zero() {
                continue;
            }
            let mut acc = 0.0;
            for &(l, r, _) in &b.segments {
                acc += gauss(
                    |x| (exact.eval_deriv(x) - solution.eval_deriv(x)) * b.eval_deriv(x),
                    l,
                    r,
                );
            }
            worst = worst.max(acc.abs());
            scale = scale.max(b.stiffness_inner(b).sqrt());
        }
        assert!(worst <= 1e-9 * scale.max(1.0), "orthogonality defect {worst}");
    }

    #[test]
    fn disjoint_bubbles_are_a_orthogonal() {
        let mesh = Mesh1D::uniform(6, vec![]).unwrap();
        let basis = build_basis_1d(&mesh);
        // psi_0 and phi_3 have disjoint supports.
        let v = basis.psis[0].stiffness_inner(&basis.phis[2]);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn fully_perforated_mesh_is_degenerate() {
        let mesh = Mesh1D::uniform(2, vec![(1e-13, 1.0 - 1e-13)]).unwrap();
        let solution = solve_msfem_1d(&mesh, |_| 1.0).unwrap();
        assert!(solution.degenerate);
        assert_eq!(solution.eval(0.5), 0.0);
    }

    #[test]
    fn random_perforations_respect_gap_bound() {
        for seed in [1, 2, 3] {
            let eps = 0.05;
            let perfs = random_perforations_1d(eps, seed);
            assert!(!perfs.is_empty());
            let mut prev_end = 0.0;
            for &(a, b) in &perfs {
                assert!(a > prev_end && b > a && b < 1.0);
                assert!(a - prev_end <= eps + 1e-12, "gap too long");
                prev_end = b;
            }
            assert!(1.0 - prev_end <= eps + 1e-12, "trailing gap too long");
        }
    }
}
