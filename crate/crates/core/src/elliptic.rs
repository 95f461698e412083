//! Finite-difference solves of the screened problem `(Δ - τ^α(x)) w = 0` on a box.
//!
//! Unknowns live on the interior nodes of a node-based grid; Dirichlet data sit
//! on the boundary nodes. The operator `A = -Δ_h + diag(τ^α)` is symmetric,
//! positive definite and an M-matrix, and is inverted by Jacobi-preconditioned CG.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{config, Error, Result};
use crate::field::ScalarField3D;
use crate::geometry::{order_field, BoxDomain, Point, ProbeConfig, ProblemConfig};
use crate::special::{Background, SpecialSolutionParams};

/// Marker for nodes that carry no unknown.
pub const BOUNDARY: usize = usize::MAX;

const ROW_CHUNK: usize = 4096;

/// One side of the box: `axis` and whether it is the upper end.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Side {
    pub axis: usize,
    pub upper: bool,
}

impl Side {
    pub const ALL: [Side; 6] = [
        Side { axis: 0, upper: false },
        Side { axis: 0, upper: true },
        Side { axis: 1, upper: false },
        Side { axis: 1, upper: true },
        Side { axis: 2, upper: false },
        Side { axis: 2, upper: true },
    ];

    pub fn normal(&self) -> Point {
        let mut n = [0.0; 3];
        n[self.axis] = if self.upper { 1.0 } else { -1.0 };
        n
    }

    /// The two tangential axes in increasing order.
    pub fn tangents(&self) -> [usize; 2] {
        match self.axis {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        }
    }
}

/// An `h × h` square of the boundary between four boundary nodes.
///
/// Corners are ordered `(0,0), (1,0), (0,1), (1,1)` in the tangential axes.
#[derive(Clone, Copy, Debug)]
pub struct BoundaryFace {
    pub side: Side,
    pub corners: [usize; 4],
    pub origin: Point,
    pub edges: [f64; 2],
}

impl BoundaryFace {
    pub fn normal(&self) -> Point {
        self.side.normal()
    }

    pub fn area(&self) -> f64 {
        self.edges[0] * self.edges[1]
    }

    /// Point at local coordinates `(u, v) ∈ [0,1]²`.
    pub fn point_at(&self, u: f64, v: f64) -> Point {
        let [a, b] = self.side.tangents();
        let mut x = self.origin;
        x[a] += u * self.edges[0];
        x[b] += v * self.edges[1];
        x
    }

    pub fn center(&self) -> Point {
        self.point_at(0.5, 0.5)
    }
}

/// Symmetric sparse matrix in compressed-row form.
#[derive(Clone, Debug)]
pub struct CsrMatrix {
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    pub fn rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()]
            .iter()
            .zip(&self.vals[r])
            .map(|(&c, &v)| (c as usize, v))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows())
            .map(|i| self.row(i).find(|&(c, _)| c == i).map_or(0.0, |(_, v)| v))
            .collect()
    }

    /// `y = M x`, parallel over row blocks.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.par_chunks_mut(ROW_CHUNK).enumerate().for_each(|(b, ys)| {
            for (o, yi) in ys.iter_mut().enumerate() {
                let i = b * ROW_CHUNK + o;
                let mut acc = 0.0;
                for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                    acc += self.vals[p] * x[self.cols[p] as usize];
                }
                *yi = acc;
            }
        });
    }

    /// Row-wise `y = M x` for any scalar type closed under real scaling.
    pub fn apply_generic<T>(&self, x: &[T], y: &mut [T])
    where
        T: Copy + Send + Sync + Default + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T>,
    {
        y.par_chunks_mut(ROW_CHUNK).enumerate().for_each(|(b, ys)| {
            for (o, yi) in ys.iter_mut().enumerate() {
                let i = b * ROW_CHUNK + o;
                let mut acc = T::default();
                for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                    acc = acc + x[self.cols[p] as usize] * self.vals[p];
                }
                *yi = acc;
            }
        });
    }
}

/// Node-based grid on a box with interior/boundary index maps and boundary faces.
#[derive(Clone, Debug)]
pub struct Grid {
    domain: BoxDomain,
    dims: [usize; 3],
    spacing: [f64; 3],
    unknown_of_node: Vec<usize>,
    interior: Vec<usize>,
    boundary: Vec<usize>,
    faces: Vec<BoundaryFace>,
    laplacian: Arc<CsrMatrix>,
}

impl Grid {
    pub fn new(domain: &BoxDomain) -> Self {
        let n = domain.intervals();
        let dims = [n[0] + 1, n[1] + 1, n[2] + 1];
        let spacing = domain.spacing();
        let total = dims[0] * dims[1] * dims[2];
        let mut unknown_of_node = vec![BOUNDARY; total];
        let mut interior = Vec::new();
        let mut boundary = Vec::new();
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    let idx = (i * dims[1] + j) * dims[2] + k;
                    let inner = i > 0 && i < n[0] && j > 0 && j < n[1] && k > 0 && k < n[2];
                    if inner {
                        unknown_of_node[idx] = interior.len();
                        interior.push(idx);
                    } else {
                        boundary.push(idx);
                    }
                }
            }
        }
        let mut grid = Self {
            domain: domain.clone(),
            dims,
            spacing,
            unknown_of_node,
            interior,
            boundary,
            faces: Vec::new(),
            laplacian: Arc::new(CsrMatrix {
                row_ptr: vec![0],
                cols: Vec::new(),
                vals: Vec::new(),
            }),
        };
        grid.faces = grid.build_faces();
        grid.laplacian = Arc::new(grid.build_laplacian());
        grid
    }

    fn build_faces(&self) -> Vec<BoundaryFace> {
        let n = self.domain.intervals();
        let lo = self.domain.lo();
        let mut faces = Vec::new();
        for side in Side::ALL {
            let [a, b] = side.tangents();
            let fixed = if side.upper { n[side.axis] } else { 0 };
            for p in 0..n[a] {
                for q in 0..n[b] {
                    let mut corners = [0; 4];
                    for (c, (dp, dq)) in [(0, 0), (1, 0), (0, 1), (1, 1)].into_iter().enumerate() {
                        let mut ijk = [0; 3];
                        ijk[side.axis] = fixed;
                        ijk[a] = p + dp;
                        ijk[b] = q + dq;
                        corners[c] = self.node_index(ijk[0], ijk[1], ijk[2]);
                    }
                    let mut origin = lo;
                    origin[side.axis] = lo[side.axis] + fixed as f64 * self.spacing[side.axis];
                    origin[a] = lo[a] + p as f64 * self.spacing[a];
                    origin[b] = lo[b] + q as f64 * self.spacing[b];
                    faces.push(BoundaryFace {
                        side,
                        corners,
                        origin,
                        edges: [self.spacing[a], self.spacing[b]],
                    });
                }
            }
        }
        faces
    }

    fn build_laplacian(&self) -> CsrMatrix {
        let inv_h2 = self.spacing.map(|h| 1.0 / (h * h));
        let diag = 2.0 * (inv_h2[0] + inv_h2[1] + inv_h2[2]);
        let mut row_ptr = Vec::with_capacity(self.interior.len() + 1);
        let mut cols = Vec::with_capacity(7 * self.interior.len());
        let mut vals = Vec::with_capacity(7 * self.interior.len());
        row_ptr.push(0);
        for (row, &node) in self.interior.iter().enumerate() {
            let mut entries: Vec<(u32, f64)> = Vec::with_capacity(7);
            entries.push((row as u32, diag));
            for (nb, axis) in self.neighbors(node) {
                let u = self.unknown_of_node[nb];
                if u != BOUNDARY {
                    entries.push((u as u32, -inv_h2[axis]));
                }
            }
            entries.sort_by_key(|e| e.0);
            for (c, v) in entries {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        CsrMatrix { row_ptr, cols, vals }
    }

    /// The six stencil neighbours of an interior node, with their axis.
    fn neighbors(&self, node: usize) -> [(usize, usize); 6] {
        let stride = [self.dims[1] * self.dims[2], self.dims[2], 1];
        [
            (node - stride[0], 0),
            (node + stride[0], 0),
            (node - stride[1], 1),
            (node + stride[1], 1),
            (node - stride[2], 2),
            (node + stride[2], 2),
        ]
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    #[inline]
    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn node_coords(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.dims[2];
        let j = (idx / self.dims[2]) % self.dims[1];
        let i = idx / (self.dims[1] * self.dims[2]);
        [i, j, k]
    }

    pub fn node_point(&self, idx: usize) -> Point {
        let [i, j, k] = self.node_coords(idx);
        let lo = self.domain.lo();
        [
            lo[0] + i as f64 * self.spacing[0],
            lo[1] + j as f64 * self.spacing[1],
            lo[2] + k as f64 * self.spacing[2],
        ]
    }

    pub fn unknowns(&self) -> usize {
        self.interior.len()
    }

    pub fn interior_nodes(&self) -> &[usize] {
        &self.interior
    }

    pub fn boundary_nodes(&self) -> &[usize] {
        &self.boundary
    }

    pub fn unknown_of(&self, node: usize) -> Option<usize> {
        let u = self.unknown_of_node[node];
        (u != BOUNDARY).then_some(u)
    }

    pub fn faces(&self) -> &[BoundaryFace] {
        &self.faces
    }

    /// `-Δ_h` on the interior unknowns (boundary couplings dropped).
    pub fn laplacian(&self) -> &Arc<CsrMatrix> {
        &self.laplacian
    }

    /// Contribution of Dirichlet values `g` (boundary nodes of a field) to the right-hand side.
    pub fn dirichlet_rhs(&self, g: &[f64]) -> Vec<f64> {
        let inv_h2 = self.spacing.map(|h| 1.0 / (h * h));
        self.interior
            .iter()
            .map(|&node| {
                self.neighbors(node)
                    .iter()
                    .filter(|(nb, _)| self.unknown_of_node[*nb] == BOUNDARY)
                    .map(|&(nb, axis)| g[nb] * inv_h2[axis])
                    .sum()
            })
            .collect()
    }

    /// Scatters interior unknowns into a full node array (boundary entries untouched).
    pub fn scatter(&self, x: &[f64], out: &mut [f64]) {
        for (u, &node) in self.interior.iter().enumerate() {
            out[node] = x[u];
        }
    }
}

/// `A = -Δ_h + diag(shift)` on the interior unknowns.
#[derive(Clone, Debug)]
pub struct SparseOperator {
    laplacian: Arc<CsrMatrix>,
    shift: Vec<f64>,
    diag: Vec<f64>,
}

impl SparseOperator {
    pub fn new(laplacian: Arc<CsrMatrix>, shift: Vec<f64>) -> Self {
        assert_eq!(laplacian.rows(), shift.len());
        let diag = laplacian.diagonal().iter().zip(&shift).map(|(a, b)| a + b).collect();
        Self {
            laplacian,
            shift,
            diag,
        }
    }

    pub fn rows(&self) -> usize {
        self.shift.len()
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }

    pub fn laplacian(&self) -> &CsrMatrix {
        &self.laplacian
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.laplacian.apply(x, y);
        for ((yi, xi), s) in y.iter_mut().zip(x).zip(&self.shift) {
            *yi += s * xi;
        }
    }

    /// Heuristic spectral condition number used for the iteration cap.
    pub fn condition_estimate(&self, grid: &Grid) -> f64 {
        let h = grid.spacing();
        let n = grid.domain().intervals();
        let (smin, smax) = self
            .shift
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(a, b), &s| (a.min(s), b.max(s)));
        let hi: f64 = h.iter().map(|h| 4.0 / (h * h)).sum::<f64>() + smax;
        let lo: f64 = (0..3)
            .map(|a| {
                let l = h[a] * n[a] as f64;
                std::f64::consts::PI.powi(2) / (l * l)
            })
            .sum::<f64>()
            + smin;
        hi / lo
    }

    /// Iteration cap `20 N^(1/3) sqrt(kappa)`.
    pub fn iteration_cap(&self, grid: &Grid) -> usize {
        let n = self.rows() as f64;
        (20.0 * n.cbrt() * self.condition_estimate(grid).sqrt()).ceil() as usize + 10
    }
}

/// `-Δ_h + diag(τ^α(x))` with `α` sampled on the grid nodes.
pub fn assemble(grid: &Grid, alpha: &ScalarField3D, tau: f64) -> Result<SparseOperator> {
    if !(tau > 1.0) {
        return Err(Error::Domain(format!("tau must exceed 1 (got {tau})")));
    }
    if alpha.dims() != grid.dims() {
        return config("order field and grid dimensions differ");
    }
    let ln_tau = tau.ln();
    let mut shift = Vec::with_capacity(grid.unknowns());
    for &node in grid.interior_nodes() {
        let a = alpha.values()[node];
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::Domain(format!("order value {a} outside (0,1)")));
        }
        shift.push((a * ln_tau).exp());
    }
    Ok(SparseOperator::new(grid.laplacian().clone(), shift))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    /// True relative residual `|b - A x| / |b|` at exit.
    pub residual: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct SolveOptions {
    pub rel_tol: f64,
    /// Overrides the heuristic iteration cap.
    pub max_iter: Option<usize>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            max_iter: None,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned conjugate gradients from a zero initial guess.
pub fn pcg(op: &SparseOperator, b: &[f64], rel_tol: f64, max_iter: usize) -> Result<(Vec<f64>, SolveStats)> {
    let n = op.rows();
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok((
            x,
            SolveStats {
                iterations: 0,
                residual: 0.0,
            },
        ));
    }
    let inv_diag: Vec<f64> = op.diagonal().iter().map(|d| 1.0 / d).collect();
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut iterations = 0;
    let mut rel = 1.0;
    while iterations < max_iter {
        op.apply(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        iterations += 1;
        rel = dot(&r, &r).sqrt() / bnorm;
        if rel <= rel_tol {
            break;
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    // Report the true residual rather than the recursively updated one.
    op.apply(&x, &mut ap);
    let true_rel = b
        .iter()
        .zip(&ap)
        .map(|(b, a)| (b - a) * (b - a))
        .sum::<f64>()
        .sqrt()
        / bnorm;
    if rel > rel_tol && true_rel > rel_tol {
        return Err(Error::NotConverged {
            what: "conjugate gradients",
            iterations,
            residual: true_rel,
        });
    }
    Ok((
        x,
        SolveStats {
            iterations,
            residual: true_rel,
        },
    ))
}

/// Analytic background `w0(·, τ)` on every grid node, normalized by its maximum
/// (the maximum's log is the field's log scale).
pub fn background_field(grid: &Grid, probe: &ProbeConfig, alpha0: f64, tau: f64) -> Result<ScalarField3D> {
    probe.validate_against(grid.domain())?;
    let bg = Background::new(SpecialSolutionParams::new(*probe, tau, alpha0)?)?;
    let mut field = ScalarField3D::zeros(grid.domain());
    let dims = grid.dims();
    let lns: Vec<f64> = (0..dims[0] * dims[1] * dims[2])
        .into_par_iter()
        .with_min_len(ROW_CHUNK)
        .map(|idx| bg.ln_w0_unchecked(grid.node_point(idx)))
        .collect();
    let top = lns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for (v, l) in field.values_mut().iter_mut().zip(&lns) {
        *v = (l - top).exp();
    }
    field.set_log_scale(top);
    Ok(field)
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub field: ScalarField3D,
    pub stats: SolveStats,
}

fn check_grid(grid: &Grid, problem: &ProblemConfig) -> Result<()> {
    if grid.domain() != &problem.domain {
        return config("grid and problem domain differ");
    }
    Ok(())
}

/// Scattered field `z = w - w0`: `(Δ - τ^α) z = (τ^α - τ^α₀) w0` with zero
/// Dirichlet data, given a precomputed background field.
pub fn solve_scattered_with(
    grid: &Grid,
    problem: &ProblemConfig,
    w0: &ScalarField3D,
    tau: f64,
    opts: &SolveOptions,
) -> Result<Solution> {
    check_grid(grid, problem)?;
    let alpha = order_field(problem)?;
    let op = assemble(grid, &alpha, tau)?;
    let ln_tau = tau.ln();
    // A z = -(τ^α - τ^α₀) w0 = -τ^α₀ expm1(h ln τ) w0
    let mut rhs: Vec<f64> = grid
        .interior_nodes()
        .iter()
        .map(|&node| {
            let h = problem.jump_at(grid.node_point(node));
            -(h * ln_tau).exp_m1() * w0.values()[node]
        })
        .collect();
    let peak = rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut field = ScalarField3D::zeros(grid.domain());
    if peak == 0.0 {
        field.set_log_scale(w0.log_scale());
        return Ok(Solution {
            field,
            stats: SolveStats {
                iterations: 0,
                residual: 0.0,
            },
        });
    }
    rhs.iter_mut().for_each(|v| *v /= peak);
    let cap = opts.max_iter.unwrap_or_else(|| op.iteration_cap(grid));
    let (x, stats) = pcg(&op, &rhs, opts.rel_tol, cap)?;
    grid.scatter(&x, field.values_mut());
    field.set_log_scale(w0.log_scale() + problem.alpha0 * ln_tau + peak.ln());
    Ok(Solution { field, stats })
}

pub fn solve_scattered(
    grid: &Grid,
    problem: &ProblemConfig,
    probe: &ProbeConfig,
    tau: f64,
    opts: &SolveOptions,
) -> Result<Solution> {
    let w0 = background_field(grid, probe, problem.alpha0, tau)?;
    solve_scattered_with(grid, problem, &w0, tau, opts)
}

/// Total field `w` with Dirichlet data `w0` on the boundary.
pub fn solve_total(
    grid: &Grid,
    problem: &ProblemConfig,
    probe: &ProbeConfig,
    tau: f64,
    opts: &SolveOptions,
) -> Result<Solution> {
    check_grid(grid, problem)?;
    let w0 = background_field(grid, probe, problem.alpha0, tau)?;
    let alpha = order_field(problem)?;
    let op = assemble(grid, &alpha, tau)?;
    let rhs = grid.dirichlet_rhs(w0.values());
    let cap = opts.max_iter.unwrap_or_else(|| op.iteration_cap(grid));
    let (x, stats) = pcg(&op, &rhs, opts.rel_tol, cap)?;
    let mut field = w0.clone();
    grid.scatter(&x, field.values_mut());
    Ok(Solution { field, stats })
}

/// Per-face Neumann data: the trace at each of the four face corners, in the
/// units of `exp(log_scale)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryField {
    log_scale: f64,
    corners: Vec<[f64; 4]>,
}

impl BoundaryField {
    pub fn new(log_scale: f64, corners: Vec<[f64; 4]>) -> Self {
        Self { log_scale, corners }
    }

    pub fn len(&self) -> usize {
        self.corners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corners.is_empty()
    }

    pub fn log_scale(&self) -> f64 {
        self.log_scale
    }

    pub fn corners(&self) -> &[[f64; 4]] {
        &self.corners
    }

    /// Bilinear interpolation at local coordinates `(u, v)` of face `f`.
    pub fn at(&self, f: usize, u: f64, v: f64) -> f64 {
        let c = &self.corners[f];
        (1.0 - u) * (1.0 - v) * c[0] + u * (1.0 - v) * c[1] + (1.0 - u) * v * c[2] + u * v * c[3]
    }

    /// Value at the face midpoint (mean of the corners).
    pub fn face_value(&self, f: usize) -> f64 {
        let c = &self.corners[f];
        0.25 * (c[0] + c[1] + c[2] + c[3])
    }

    pub fn is_finite(&self) -> bool {
        self.log_scale.is_finite() && self.corners.iter().flatten().all(|v| v.is_finite())
    }
}

/// Outward normal derivative of a node field at every boundary face corner,
/// by a one-sided difference of order 1 or 2.
pub fn neumann_trace(field: &ScalarField3D, grid: &Grid, order: u8) -> Result<BoundaryField> {
    if field.dims() != grid.dims() {
        return config("field and grid dimensions differ");
    }
    let need = match order {
        1 => 2,
        2 => 3,
        _ => return config(format!("Neumann trace order must be 1 or 2 (got {order})")),
    };
    if grid.dims().iter().any(|&d| d < need) {
        return config(format!("grid too coarse for an order-{order} one-sided stencil"));
    }
    let dims = grid.dims();
    let stride = [dims[1] * dims[2], dims[2], 1];
    let h = grid.spacing();
    let u = field.values();
    let corners = grid
        .faces()
        .iter()
        .map(|face| {
            let a = face.side.axis;
            // step one node inward along the normal axis
            let inward = |node: usize, k: usize| {
                if face.side.upper {
                    node - k * stride[a]
                } else {
                    node + k * stride[a]
                }
            };
            face.corners.map(|node| match order {
                1 => (u[node] - u[inward(node, 1)]) / h[a],
                _ => (3.0 * u[node] - 4.0 * u[inward(node, 1)] + u[inward(node, 2)]) / (2.0 * h[a]),
            })
        })
        .collect();
    Ok(BoundaryField::new(field.log_scale(), corners))
}
