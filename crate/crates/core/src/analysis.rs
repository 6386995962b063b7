//! Error norms, scaling checks and the experiment harness.
//!
//! Relative errors are measured against the penalized fine-grid reference on
//! the same grid, with both numerator and denominator restricted to the
//! unperforated (`nu = 1`) fine cells, which makes them insensitive to the
//! penalization leakage inside the perforations.

use crate::coarse_solver::{assemble_coarse, solve_coarse, CoarseSolution};
use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::fine_fem::{
    cell_energy, cell_mass, solve_cell_problem, solve_reference_on, two_scale_reconstruction,
    SOLVER_TOL,
};
use crate::geometry::PerforationSet;
use crate::mesh::{CoarseMesh, FineGrid};
use crate::msfem_basis::{build_basis, Method, MsBasisSet};
use crate::rng::Lcg64;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

/// Named analytic right-hand sides used by the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FSpec {
    /// `f = 1`.
    One,
    /// `f = sin(pi x / 2) sin(pi y / 2)`.
    SinPiHalf,
    /// `f = sin(pi x) sin(pi y)`.
    SinPi,
}

impl FSpec {
    pub fn parse(s: &str) -> Result<FSpec> {
        match s.to_ascii_lowercase().as_str() {
            "one" => Ok(FSpec::One),
            "sin_pi_half" => Ok(FSpec::SinPiHalf),
            "sin_pi" => Ok(FSpec::SinPi),
            other => Err(Error::InvalidParameter(format!("unknown f '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FSpec::One => "one",
            FSpec::SinPiHalf => "sin_pi_half",
            FSpec::SinPi => "sin_pi",
        }
    }

    pub fn eval(self, x: f64, y: f64) -> f64 {
        use std::f64::consts::PI;
        match self {
            FSpec::One => 1.0,
            FSpec::SinPiHalf => (PI * x / 2.0).sin() * (PI * y / 2.0).sin(),
            FSpec::SinPi => (PI * x).sin() * (PI * y).sin(),
        }
    }

    /// True when `f` vanishes on the whole outer boundary.
    pub fn vanishes_on_boundary(self) -> bool {
        matches!(self, FSpec::SinPi)
    }
}

/// Geometry descriptor used by run configs.
#[derive(Debug, Clone, PartialEq)]
pub enum GeometrySpec {
    None,
    PeriodicDiscs { eps: f64, ratio: f64, shift: (f64, f64) },
    RandomRects { count: usize, w_range: (f64, f64), h_range: (f64, f64), seed: u64 },
}

impl GeometrySpec {
    pub fn build(&self) -> Result<PerforationSet> {
        match *self {
            GeometrySpec::None => Ok(PerforationSet::none()),
            GeometrySpec::PeriodicDiscs { eps, ratio, shift } => {
                PerforationSet::periodic_discs(eps, ratio, shift)
            }
            GeometrySpec::RandomRects { count, w_range, h_range, seed } => {
                PerforationSet::random_rects(count, w_range, h_range, seed)
            }
        }
    }

    pub fn eps(&self) -> Option<f64> {
        match self {
            GeometrySpec::PeriodicDiscs { eps, .. } => Some(*eps),
            _ => None,
        }
    }
}

/// Relative errors, DOF count and timing of one coarse run.
#[derive(Debug, Clone)]
pub struct ErrorReport {
    pub method: String,
    pub bubbles: bool,
    pub h_coarse: f64,
    pub eps: f64,
    pub geometry: String,
    pub l2_rel: f64,
    pub h1_broken_rel: f64,
    pub dof: usize,
    pub wall_s: f64,
}

impl ErrorReport {
    pub fn csv_header() -> &'static str {
        "method,bubbles,H,eps,geometry,l2_rel,h1_rel,dof,wall_s"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6e},{:.6e},{},{:.3}",
            self.method,
            self.bubbles,
            self.h_coarse,
            self.eps,
            self.geometry.replace(',', ";"),
            self.l2_rel,
            self.h1_broken_rel,
            self.dof,
            self.wall_s
        )
    }
}

/// Sum of `|grad v|^2` (and of `v^2`) over the unperforated cells, where `v`
/// is the difference between the reference field and the element-local
/// reconstruction; plus the matching reference integrals.
struct NormAccumulator {
    num_h1: f64,
    num_l2: f64,
    den_h1: f64,
    den_l2: f64,
}

fn accumulate_norms(
    u_ref: &ScalarField,
    solution: &CoarseSolution,
    basis: &MsBasisSet,
) -> NormAccumulator {
    let grid = &basis.grid;
    let h = grid.h();
    let mut acc = NormAccumulator { num_h1: 0.0, num_l2: 0.0, den_h1: 0.0, den_l2: 0.0 };
    for e in 0..basis.mesh.n_elements() {
        let patch = basis.element_patch(e);
        let field = &solution.element_fields[e];
        for cj in 0..patch.ny {
            for ci in 0..patch.nx {
                if grid.cell_perforated(patch.global_cell(ci, cj)) {
                    continue;
                }
                let locals = patch.cell_local_nodes(ci, cj);
                let mut diff = [0.0f64; 4];
                let mut refc = [0.0f64; 4];
                for (k, &l) in locals.iter().enumerate() {
                    let gi = patch.i0 + (l % (patch.nx + 1));
                    let gj = patch.j0 + (l / (patch.nx + 1));
                    let r = u_ref.at(gi, gj);
                    refc[k] = r;
                    diff[k] = r - field[l];
                }
                acc.num_h1 += cell_energy(diff);
                acc.num_l2 += cell_mass(diff, h);
                acc.den_h1 += cell_energy(refc);
                acc.den_l2 += cell_mass(refc, h);
            }
        }
    }
    acc
}

/// Relative broken H1 error of a coarse solution against the reference.
pub fn broken_h1_error(
    u_ref: &ScalarField,
    solution: &CoarseSolution,
    basis: &MsBasisSet,
) -> Result<f64> {
    let acc = accumulate_norms(u_ref, solution, basis);
    if acc.den_h1 <= 0.0 {
        return Err(Error::Degenerate("reference H1 seminorm vanishes".to_string()));
    }
    Ok((acc.num_h1 / acc.den_h1).sqrt())
}

/// Relative L2 error of a coarse solution against the reference.
pub fn l2_error(
    u_ref: &ScalarField,
    solution: &CoarseSolution,
    basis: &MsBasisSet,
) -> Result<f64> {
    let acc = accumulate_norms(u_ref, solution, basis);
    if acc.den_l2 <= 0.0 {
        return Err(Error::Degenerate("reference L2 norm vanishes".to_string()));
    }
    Ok((acc.num_l2 / acc.den_l2).sqrt())
}

/// `int |grad v|^2` of a nodal field over the unperforated cells.
pub fn h1_seminorm_sq(grid: &FineGrid, field: &ScalarField) -> f64 {
    let m = grid.m_per_side();
    let mut acc = 0.0;
    for cj in 0..m {
        for ci in 0..m {
            if grid.cell_perforated(grid.cell_index(ci, cj)) {
                continue;
            }
            let corners = [
                field.at(ci, cj),
                field.at(ci + 1, cj),
                field.at(ci + 1, cj + 1),
                field.at(ci, cj + 1),
            ];
            acc += cell_energy(corners);
        }
    }
    acc
}

/// `int v^2` of a nodal field over the unperforated cells.
pub fn l2_norm_sq(grid: &FineGrid, field: &ScalarField) -> f64 {
    let m = grid.m_per_side();
    let h = grid.h();
    let mut acc = 0.0;
    for cj in 0..m {
        for ci in 0..m {
            if grid.cell_perforated(grid.cell_index(ci, cj)) {
                continue;
            }
            let corners = [
                field.at(ci, cj),
                field.at(ci + 1, cj),
                field.at(ci + 1, cj + 1),
                field.at(ci, cj + 1),
            ];
            acc += cell_mass(corners, h);
        }
    }
    acc
}

fn field_difference(a: &ScalarField, b: &ScalarField) -> ScalarField {
    let mut out = a.clone();
    for (dst, src) in out.values_mut().iter_mut().zip(b.values()) {
        *dst -= src;
    }
    out
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

/// Smooth random right-hand side: a low-frequency sine series with
/// coefficients drawn from the deterministic LCG stream.
fn random_smooth_f(rng: &mut Lcg64) -> impl Fn(f64, f64) -> f64 {
    use std::f64::consts::PI;
    let coeffs: Vec<f64> = (0..9).map(|_| rng.uniform(-1.0, 1.0)).collect();
    move |x, y| {
        let mut acc = 0.0;
        for p in 0..3 {
            for q in 0..3 {
                acc += coeffs[p * 3 + q]
                    * ((p + 1) as f64 * PI * x).sin()
                    * ((q + 1) as f64 * PI * y).sin();
            }
        }
        acc
    }
}

/// For each `eps`, the mean ratio `||phi||_L2 / |phi|_H1` over `trials`
/// penalized solves with random right-hand sides (all norms over the
/// unperforated cells).
pub fn poincare_ratio(
    eps_list: &[f64],
    radius_ratio: f64,
    m: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(eps_list.len());
    for (k, &eps) in eps_list.iter().enumerate() {
        let perf = PerforationSet::periodic_discs(eps, radius_ratio, (0.0, 0.0))?;
        let grid = FineGrid::build(m, &perf, 1.0 / m as f64)?;
        let mut acc = 0.0;
        for t in 0..trials {
            let mut rng = Lcg64::new(seed ^ ((k as u64) << 32) ^ t as u64);
            let f = random_smooth_f(&mut rng);
            let phi = solve_reference_on(&grid, f, SOLVER_TOL)?;
            let l2 = l2_norm_sq(&grid, &phi).sqrt();
            let h1 = h1_seminorm_sq(&grid, &phi).sqrt();
            if h1 == 0.0 {
                return Err(Error::Degenerate("zero random solution".to_string()));
            }
            acc += l2 / h1;
        }
        out.push((eps, acc / trials as f64));
    }
    Ok(out)
}

/// One row of the homogenization scaling table.
#[derive(Debug, Clone)]
pub struct HomogenizationRow {
    pub eps: f64,
    /// `|u_ref - eps^2 w(./eps) f|_H1` over unperforated cells.
    pub e_h1: f64,
    pub e_over_eps2: f64,
    pub e_over_eps32: f64,
    /// `|u_ref|_H1` over unperforated cells.
    pub u_h1: f64,
    pub u_h1_over_eps: f64,
}

/// Compare the penalized reference against the two-scale reconstruction for
/// a list of `eps` values (periodic discs of the given radius ratio).
pub fn homogenization_check(
    radius_ratio: f64,
    f: FSpec,
    eps_list: &[f64],
    m: usize,
    m_cell: usize,
) -> Result<Vec<HomogenizationRow>> {
    let unit_perf = PerforationSet::periodic_discs(1.0, radius_ratio, (0.0, 0.0))?;
    let cell = solve_cell_problem(&unit_perf, m_cell, SOLVER_TOL)?;
    let mut rows = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let perf = PerforationSet::periodic_discs(eps, radius_ratio, (0.0, 0.0))?;
        let grid = FineGrid::build(m, &perf, 1.0 / m as f64)?;
        let u_ref = solve_reference_on(&grid, |x, y| f.eval(x, y), SOLVER_TOL)?;
        let recon = two_scale_reconstruction(&cell, eps, |x, y| f.eval(x, y), &grid);
        let diff = field_difference(&u_ref, &recon);
        let e_h1 = h1_seminorm_sq(&grid, &diff).sqrt();
        let u_h1 = h1_seminorm_sq(&grid, &u_ref).sqrt();
        rows.push(HomogenizationRow {
            eps,
            e_h1,
            e_over_eps2: e_h1 / (eps * eps),
            e_over_eps32: e_h1 / eps.powf(1.5),
            u_h1,
            u_h1_over_eps: u_h1 / eps,
        });
    }
    Ok(rows)
}

/// Full configuration of a sweep over (method, bubbles, H).
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub geometry: GeometrySpec,
    pub f: FSpec,
    /// (method, with_bubbles) rows to run.
    pub methods: Vec<(Method, bool)>,
    /// Coarse resolutions `n` (H = 1/n).
    pub n_list: Vec<usize>,
    /// Shared fine grid resolution (basis solves, reference and norms).
    pub m: usize,
    pub os_ratio: f64,
    /// Report zero wall times, for byte-reproducible output.
    pub zero_timings: bool,
}

impl SweepConfig {
    /// Nesting and resolution checks shared by the CLI and the harness.
    pub fn validate(&self) -> Result<()> {
        if self.n_list.is_empty() {
            return Err(Error::Config("empty H list".to_string()));
        }
        for &n in &self.n_list {
            if n < 2 {
                return Err(Error::Config(format!("coarse n = {n} must be >= 2")));
            }
            if self.m % n != 0 {
                return Err(Error::Config(format!(
                    "fine grid m = {} not nested in coarse n = {n}",
                    self.m
                )));
            }
        }
        if let Some(eps) = self.geometry.eps() {
            let h = 1.0 / self.m as f64;
            if h > eps / 10.0 + 1e-12 {
                return Err(Error::Config(format!(
                    "fine mesh h = {h} violates h <= eps/10 for eps = {eps}"
                )));
            }
        }
        Ok(())
    }
}

/// Rows of a sweep, sorted by (method, bubbles, H).
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub rows: Vec<ErrorReport>,
}

/// Run one coarse configuration against a precomputed reference.
pub fn run_single(
    mesh: &Arc<CoarseMesh>,
    grid: &Arc<FineGrid>,
    u_ref: &ScalarField,
    method: Method,
    with_bubbles: bool,
    os_ratio: f64,
    f: FSpec,
    geometry_tag: &str,
    eps: f64,
    zero_timing: bool,
) -> Result<ErrorReport> {
    let start = Instant::now();
    let basis = build_basis(mesh, grid, method, with_bubbles, os_ratio)?;
    let system = assemble_coarse(&basis, |x, y| f.eval(x, y))?;
    let solution = solve_coarse(&basis, &system)?;
    let l2 = l2_error(u_ref, &solution, &basis)?;
    let h1 = broken_h1_error(u_ref, &solution, &basis)?;
    let wall = if zero_timing { 0.0 } else { start.elapsed().as_secs_f64() };
    Ok(ErrorReport {
        method: basis.method_tag(),
        bubbles: with_bubbles,
        h_coarse: mesh.h_coarse(),
        eps,
        geometry: geometry_tag.to_string(),
        l2_rel: l2,
        h1_broken_rel: h1,
        dof: basis.n_dofs(),
        wall_s: wall,
    })
}

/// Run the whole sweep: one row per (method, bubbles, H). Failures of
/// individual rows are recorded (as NaN errors) and the sweep continues.
pub fn run_sweep(config: &SweepConfig) -> Result<(SweepResult, Vec<(String, String)>)> {
    config.validate()?;
    let perf = config.geometry.build()?;
    let m = config.m;
    let grid = Arc::new(FineGrid::build(m, &perf, 1.0 / m as f64)?);
    let u_ref = solve_reference_on(&grid, |x, y| config.f.eval(x, y), SOLVER_TOL)?;
    let eps = config.geometry.eps().unwrap_or(0.0);
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &(method, bubbles) in &config.methods {
        for &n in &config.n_list {
            let mesh = Arc::new(CoarseMesh::build(n)?);
            let label = format!("{method}{} bubbles={bubbles} n={n}", if method == Method::MsOs {
                format!("{}", config.os_ratio as usize)
            } else {
                String::new()
            });
            match run_single(
                &mesh,
                &grid,
                &u_ref,
                method,
                bubbles,
                config.os_ratio,
                config.f,
                perf.tag(),
                eps,
                config.zero_timings,
            ) {
                Ok(report) => rows.push(report),
                Err(err) => failures.push((label, err.to_string())),
            }
        }
    }
    rows.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.bubbles.cmp(&b.bubbles))
            .then(b.h_coarse.total_cmp(&a.h_coarse))
    });
    Ok((SweepResult { rows }, failures))
}

impl SweepResult {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "{}", ErrorReport::csv_header())?;
        for row in &self.rows {
            writeln!(out, "{}", row.csv_row())?;
        }
        Ok(())
    }

    /// CSV bytes (used for reproducibility checks).
    pub fn csv_string(&self) -> String {
        let mut s = String::from(ErrorReport::csv_header());
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.csv_row());
            s.push('\n');
        }
        s
    }

    /// One polyline per (method, bubbles), log-log axes; one file per norm.
    pub fn write_svg_charts(&self, dir: &Path) -> Result<()> {
        for (norm, file) in [("l2", "sweep_l2.svg"), ("h1", "sweep_h1.svg")] {
            let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
            for row in &self.rows {
                let label = format!(
                    "{}{}",
                    row.method,
                    if row.bubbles { "+bubbles" } else { "" }
                );
                let y = if norm == "l2" { row.l2_rel } else { row.h1_broken_rel };
                if !y.is_finite() || y <= 0.0 {
                    continue;
                }
                match series.iter_mut().find(|(l, _)| *l == label) {
                    Some((_, pts)) => pts.push((row.h_coarse, y)),
                    None => series.push((label, vec![(row.h_coarse, y)])),
                }
            }
            let title = format!("relative {} error", if norm == "l2" { "L2" } else { "broken H1" });
            write_svg_chart(&dir.join(file), &title, "H", &series)?;
        }
        Ok(())
    }
}

/// Minimal log-log SVG line chart writer.
pub fn write_svg_chart(
    path: &Path,
    title: &str,
    x_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const MARGIN: f64 = 60.0;
    const COLORS: [&str; 10] = [
        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
        "#bcbd22", "#17becf",
    ];
    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    if points.is_empty() {
        return Err(Error::Config("no data points for chart".to_string()));
    }
    let log = |v: f64| v.log10();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &points {
        x0 = x0.min(log(x));
        x1 = x1.max(log(x));
        y0 = y0.min(log(y));
        y1 = y1.max(log(y));
    }
    if x1 - x0 < 1e-9 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-9 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| MARGIN + (log(x) - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (log(y) - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n<text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{title}</text>\n",
        W / 2.0
    ));
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{x_label} (log)</text>\n",
        W / 2.0,
        H - 20.0
    ));
    for (k, (label, pts)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut sorted = pts.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path_d: Vec<String> = sorted
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path_d.join(" ")
        ));
        for &(x, y) in &sorted {
            svg.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{color}\"/>\n",
                sx(x),
                sy(y)
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{label}</text>\n",
            W - MARGIN + 5.0,
            MARGIN + 14.0 * k as f64
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}
