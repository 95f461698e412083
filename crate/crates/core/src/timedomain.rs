//! Measurement side: probe synthesis along the line `Re τ = 1`, simulated
//! Neumann data from complex-shifted elliptic solves, numerical Laplace
//! transforms and the data-side indicator.
//!
//! Everything here works with plain `f64`/`Complex64` values; the module is
//! only meant for small `|τ|` where nothing over- or underflows.

use std::f64::consts::PI;
use std::io::Write;

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::elliptic::{neumann_trace, CsrMatrix, Grid, SolveStats};
use crate::enclosure::fingerprint;
use crate::error::{Error, Result};
use crate::field::ScalarField3D;
use crate::geometry::{dot, norm, order_field, sub, Point, ProbeConfig, ProbeShape, ProblemConfig};
use crate::quadrature::GaussLegendre;
use crate::scaled::ScaledValue;

/// Spectral weight exponent of the probe, `(1+is)^{-5}`.
pub const PROBE_WEIGHT_EXPONENT: i32 = 5;

type C64 = Complex64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeDomainSettings {
    pub t_max: f64,
    pub dt: f64,
    /// Truncation `S` of the spectral integral.
    pub s_max: f64,
    /// Gauss points per spectral panel.
    pub n_quad: usize,
    /// Relative tolerance of the complex solves.
    pub solve_tol: f64,
    /// Admissible truncation bound relative to the spectral L1 mass.
    pub truncation_tol: f64,
    /// Admissible Laplace tail bound relative to the transformed value.
    pub tail_tol: f64,
}

impl Default for TimeDomainSettings {
    fn default() -> Self {
        Self {
            t_max: 25.0,
            dt: 0.025,
            s_max: 30.0,
            n_quad: 6,
            solve_tol: 1e-8,
            truncation_tol: 1e-4,
            tail_tol: 1e-6,
        }
    }
}

impl TimeDomainSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_max > 0.0 && self.dt > 0.0 && self.dt < self.t_max) {
            return Err(Error::Parameter(format!(
                "time grid needs 0 < dt < t_max (dt = {}, t_max = {})",
                self.dt, self.t_max
            )));
        }
        if !(self.s_max > 0.0) || self.n_quad == 0 {
            return Err(Error::Parameter("spectral truncation and n_quad must be positive".into()));
        }
        Ok(())
    }

    /// Uniform grid `0, dt, ..., t_max` (the last step is rounded to fit).
    pub fn time_grid(&self) -> Vec<f64> {
        let steps = (self.t_max / self.dt).round().max(2.0) as usize;
        let dt = self.t_max / steps as f64;
        (0..=steps).map(|i| i as f64 * dt).collect()
    }
}

/// Composite Gauss rule on `[0, S]` with panels no wider than `π / t_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl SpectralRule {
    pub fn new(s_max: f64, t_max: f64, n_quad: usize) -> Result<Self> {
        if !(s_max > 0.0 && t_max > 0.0) || n_quad == 0 {
            return Err(Error::Parameter("spectral rule needs S > 0, T > 0, n_quad > 0".into()));
        }
        let panels = (s_max * t_max / PI).ceil().max(1.0) as usize;
        Ok(Self::on(0.0, s_max, panels, n_quad))
    }

    fn on(a: f64, b: f64, panels: usize, n_quad: usize) -> Self {
        let gl = GaussLegendre::new(n_quad);
        let width = (b - a) / panels as f64;
        let mut nodes = Vec::with_capacity(panels * n_quad);
        let mut weights = Vec::with_capacity(panels * n_quad);
        for k in 0..panels {
            let lo = a + width * k as f64;
            for (x, w) in gl.mapped(lo, lo + width) {
                nodes.push(x);
                weights.push(w);
            }
        }
        Self { nodes, weights }
    }

    /// The same panels mirrored onto `[-S, S]`.
    pub fn symmetric(&self) -> Self {
        let mut nodes: Vec<f64> = self.nodes.iter().rev().map(|s| -s).collect();
        let mut weights: Vec<f64> = self.weights.iter().rev().cloned().collect();
        nodes.extend_from_slice(&self.nodes);
        weights.extend_from_slice(&self.weights);
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn s_max(&self) -> f64 {
        self.nodes.last().copied().unwrap_or(0.0)
    }
}

/// `τ^a` on the principal branch.
pub fn complex_pow(tau: C64, a: f64) -> C64 {
    (tau.ln() * a).exp()
}

/// `exp(z) - 1` without cancellation for small `|z|`.
pub fn expm1_c(z: C64) -> C64 {
    let (s, c) = (0.5 * z.im).sin_cos();
    C64::new(z.re.exp_m1() * z.im.cos() - 2.0 * s * s, z.re.exp() * 2.0 * s * c)
}

/// Background solution at a complex spectral parameter.
#[derive(Clone, Copy, Debug)]
pub struct ComplexBackground {
    probe: ProbeConfig,
    tau: C64,
    k: C64,
    coeff: C64,
    w0_factor: C64,
}

const COEFF_PANELS: usize = 8;
const COEFF_POINTS: usize = 16;

impl ComplexBackground {
    pub fn new(probe: ProbeConfig, alpha0: f64, tau: C64) -> Result<Self> {
        if !(tau.re > 0.0) {
            return Err(Error::Parameter(format!("complex background needs Re τ > 0 (got {tau})")));
        }
        if !(alpha0 > 0.0 && alpha0 < 1.0) {
            return Err(Error::Parameter(format!("α₀ must lie in (0,1) (got {alpha0})")));
        }
        let k = complex_pow(tau, alpha0 / 2.0);
        let m = probe.m as i32;
        let gl = GaussLegendre::new(COEFF_POINTS);
        let coeff = match probe.shape {
            ProbeShape::Exterior { eta } => {
                let a = gl.composite(0.0, 1.0, COEFF_PANELS, |s| {
                    (eta * s * k).sinh() * (s * (1.0 - s * s).powi(m))
                });
                a / k * eta.powi(2 * (m + 1))
            }
            ProbeShape::Interior { r1, r2 } => {
                let b = gl.composite(r1, r2, COEFF_PANELS, |s| {
                    (-s * k).exp() * (s * ((r2 * r2 - s * s) * (s * s - r1 * r1)).powi(m))
                });
                b / k
            }
        };
        Ok(Self {
            probe,
            tau,
            k,
            coeff,
            w0_factor: complex_pow(tau, alpha0 - 1.0),
        })
    }

    pub fn tau(&self) -> C64 {
        self.tau
    }

    pub fn k(&self) -> C64 {
        self.k
    }

    fn v_radial(&self, r: f64) -> C64 {
        let z = self.k * r;
        match self.probe.shape {
            ProbeShape::Exterior { .. } => self.coeff * (-z).exp() / r,
            ProbeShape::Interior { .. } => {
                if z.norm() < 1e-3 {
                    self.coeff * self.k * (1.0 + z * z / 6.0)
                } else {
                    self.coeff * z.sinh() / r
                }
            }
        }
    }

    fn dv_dr(&self, r: f64) -> C64 {
        let z = self.k * r;
        match self.probe.shape {
            ProbeShape::Exterior { .. } => -self.coeff * (z + 1.0) * (-z).exp() / (r * r),
            ProbeShape::Interior { .. } => {
                let num = if z.norm() < 1.0 {
                    let mut term = z * z * z / 3.0;
                    let mut sum = term;
                    for k in 2..16 {
                        let kf = k as f64;
                        term = term * z * z * (kf / ((kf - 1.0) * (2.0 * kf) * (2.0 * kf + 1.0)));
                        sum += term;
                    }
                    sum
                } else {
                    z * z.cosh() - z.sinh()
                };
                self.coeff * num / (r * r)
            }
        }
    }

    pub fn w0(&self, x: Point) -> C64 {
        self.w0_factor * self.v_radial(norm(sub(x, self.probe.center)))
    }

    pub fn w0_normal_derivative(&self, x: Point, normal: Point) -> C64 {
        let d = sub(x, self.probe.center);
        let r = norm(d);
        self.w0_factor * self.dv_dr(r) * (dot(d, normal) / r)
    }
}

/// Values on boundary faces at a fixed spectral parameter `1 + is`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexFieldSlice {
    pub s: f64,
    pub values: Vec<C64>,
}

impl ComplexFieldSlice {
    /// The slice at `1 - is` of a problem with real data.
    pub fn conjugate(&self) -> Self {
        Self {
            s: -self.s,
            values: self.values.iter().map(|v| v.conj()).collect(),
        }
    }
}

/// Deflated samples `f = e^{-rate t} g` on a uniform time grid, one row per
/// sample point.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    pub times: Vec<f64>,
    pub values: Array2<f64>,
    pub envelope_rate: f64,
    /// Per-point bound on the error of truncating the spectral integral.
    pub truncation_bound: Vec<f64>,
}

impl TimeSeries {
    pub fn new(times: Vec<f64>, values: Array2<f64>, envelope_rate: f64) -> Result<Self> {
        if times.len() < 3 || values.ncols() != times.len() {
            return Err(Error::Parameter("time series needs at least 3 samples per point".into()));
        }
        let dt = times[1] - times[0];
        let uniform = times
            .windows(2)
            .all(|w| ((w[1] - w[0]) - dt).abs() <= 1e-9 * dt.abs().max(1.0));
        if !(dt > 0.0) || !uniform {
            return Err(Error::Parameter("time grid must be uniform and ascending".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("time series contains non-finite values".into()));
        }
        let points = values.nrows();
        Ok(Self {
            times,
            values,
            envelope_rate,
            truncation_bound: vec![0.0; points],
        })
    }

    pub fn points(&self) -> usize {
        self.values.nrows()
    }

    pub fn dt(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    pub fn t_max(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Undeflated sample `g(t_i)` of point `p`.
    pub fn value(&self, p: usize, i: usize) -> f64 {
        (self.envelope_rate * self.times[i]).exp() * self.values[[p, i]]
    }
}

/// Inverse-Fourier synthesis `f(t) = (1/π) Re Σ_j w_j e^{i t s_j} F_j` over the
/// half rule, for every row of `spectra` (rows are points, columns nodes).
fn synthesize(spectra_re: &Array2<f64>, spectra_im: &Array2<f64>, rule: &SpectralRule, times: &[f64]) -> Array2<f64> {
    let nodes = rule.len();
    let mut c = Array2::<f64>::zeros((nodes, times.len()));
    let mut s = Array2::<f64>::zeros((nodes, times.len()));
    for j in 0..nodes {
        let w = rule.weights[j] / PI;
        for (i, &t) in times.iter().enumerate() {
            let (sn, cs) = (t * rule.nodes[j]).sin_cos();
            c[[j, i]] = w * cs;
            s[[j, i]] = w * sn;
        }
    }
    spectra_re.dot(&c) - spectra_im.dot(&s)
}

fn split(spectra: &[Vec<C64>], points: usize) -> (Array2<f64>, Array2<f64>) {
    let nodes = spectra.len();
    let mut re = Array2::<f64>::zeros((points, nodes));
    let mut im = Array2::<f64>::zeros((points, nodes));
    for (j, col) in spectra.iter().enumerate() {
        for (p, v) in col.iter().enumerate() {
            re[[p, j]] = v.re;
            im[[p, j]] = v.im;
        }
    }
    (re, im)
}

/// Tail of `∫_S^∞ |F|` for `|F(s)| ~ |F(S)| (s/S)^{α₀-6}`, as an error bound on `f`.
fn truncation_bound(f_at_s: f64, s_max: f64, alpha0: f64) -> f64 {
    f_at_s * s_max / (5.0 - alpha0) / PI
}

fn check_truncation(spectra: &[Vec<C64>], rule: &SpectralRule, alpha0: f64, tol: f64) -> Result<Vec<f64>> {
    let points = spectra.first().map_or(0, |c| c.len());
    let last = spectra.last().unwrap();
    let mut bounds = Vec::with_capacity(points);
    for p in 0..points {
        let mass: f64 = spectra
            .iter()
            .zip(&rule.weights)
            .map(|(c, w)| c[p].norm() * w)
            .sum::<f64>()
            / PI;
        let bound = truncation_bound(last[p].norm(), rule.s_max(), alpha0);
        if bound > tol * mass && bound > 0.0 {
            return Err(Error::Parameter(format!(
                "spectral truncation S = {} too small: tail bound {bound:.3e} vs mass {mass:.3e}; increase s_max",
                rule.s_max()
            )));
        }
        bounds.push(bound);
    }
    Ok(bounds)
}

/// Probe `g(x, t)` at the given boundary points.
pub fn synthesize_probe(
    points: &[Point],
    probe: &ProbeConfig,
    alpha0: f64,
    settings: &TimeDomainSettings,
) -> Result<TimeSeries> {
    settings.validate()?;
    let rule = SpectralRule::new(settings.s_max, settings.t_max, settings.n_quad)?;
    let spectra = probe_spectra(points, probe, alpha0, &rule)?;
    let bounds = check_truncation(&spectra, &rule, alpha0, settings.truncation_tol)?;
    let times = settings.time_grid();
    let (re, im) = split(&spectra, points.len());
    let mut series = TimeSeries::new(times.clone(), synthesize(&re, &im, &rule, &times), 1.0)?;
    series.truncation_bound = bounds;
    Ok(series)
}

/// `(1+is)^{-5} w0(x, 1+is)` at every node of `rule`, one column per node.
pub fn probe_spectra(points: &[Point], probe: &ProbeConfig, alpha0: f64, rule: &SpectralRule) -> Result<Vec<Vec<C64>>> {
    rule.nodes
        .iter()
        .map(|&s| {
            let tau = C64::new(1.0, s);
            let bg = ComplexBackground::new(*probe, alpha0, tau)?;
            let weight = tau.powi(-PROBE_WEIGHT_EXPONENT);
            Ok(points.iter().map(|&x| weight * bg.w0(x)).collect())
        })
        .collect()
}

/// Laplace transform with its tail bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LaplaceValue {
    pub value: f64,
    pub tail_bound: f64,
}

/// `∫_0^∞ e^{-τt} g(t) dt` per point: composite Simpson over the grid plus a
/// tail bound assuming at most sixth-power growth of the deflated series.
pub fn laplace_with_bounds(series: &TimeSeries, tau: f64) -> Result<Vec<LaplaceValue>> {
    let lambda = tau - series.envelope_rate;
    let t_max = series.t_max();
    if !(tau > 1.0) {
        return Err(Error::Parameter(format!("Laplace transform needs τ > 1 (got {tau})")));
    }
    if !(lambda > 6.0 / t_max) {
        return Err(Error::Parameter(format!(
            "τ = {tau} too close to the envelope rate {} for t_max = {t_max}; increase t_max",
            series.envelope_rate
        )));
    }
    let n = series.times.len() - 1;
    let dt = series.dt();
    // Simpson weights; an odd interval count ends with a 3/8 rule.
    let mut w = vec![0.0; n + 1];
    let simpson_end = if n.is_multiple_of(2) { n } else { n - 3 };
    for i in (0..simpson_end).step_by(2) {
        w[i] += dt / 3.0;
        w[i + 1] += 4.0 * dt / 3.0;
        w[i + 2] += dt / 3.0;
    }
    if simpson_end < n {
        let c = 3.0 * dt / 8.0;
        w[n - 3] += c;
        w[n - 2] += 3.0 * c;
        w[n - 1] += 3.0 * c;
        w[n] += c;
    }
    let kernel: Vec<f64> = series
        .times
        .iter()
        .zip(&w)
        .map(|(t, w)| w * (-lambda * t).exp())
        .collect();
    let tail_factor = (-lambda * t_max).exp() / (lambda - 6.0 / t_max);
    Ok(series
        .values
        .outer_iter()
        .map(|row| LaplaceValue {
            value: row.iter().zip(&kernel).map(|(v, k)| v * k).sum(),
            tail_bound: row[n].abs() * tail_factor,
        })
        .collect())
}

/// Laplace transform of every point of `series` at `tau`; fails when the tail
/// bound exceeds `tail_tol` relative to the value.
pub fn laplace_transform(series: &TimeSeries, tau: f64, tail_tol: f64) -> Result<Vec<ScaledValue>> {
    laplace_with_bounds(series, tau)?
        .into_iter()
        .map(|l| {
            if l.tail_bound > tail_tol * l.value.abs() && l.tail_bound > 0.0 {
                Err(Error::Parameter(format!(
                    "Laplace tail bound {:.3e} exceeds tolerance for value {:.3e}; increase t_max",
                    l.tail_bound, l.value
                )))
            } else {
                Ok(ScaledValue::from_f64(l.value))
            }
        })
        .collect()
}

/// Diagonal-shifted complex symmetric system `(L + diag(shift)) x = b`.
struct ComplexOperator<'a> {
    laplacian: &'a CsrMatrix,
    shift: Vec<C64>,
    diag: Vec<C64>,
}

impl ComplexOperator<'_> {
    fn apply(&self, x: &[C64], y: &mut [C64]) {
        self.laplacian.apply_generic(x, y);
        for ((y, s), x) in y.iter_mut().zip(&self.shift).zip(x) {
            *y += s * x;
        }
    }

    /// `A^H x = conj(A conj(x))` for complex symmetric `A`.
    fn apply_adjoint(&self, x: &[C64], y: &mut [C64]) {
        let xc: Vec<C64> = x.iter().map(|v| v.conj()).collect();
        self.apply(&xc, y);
        y.iter_mut().for_each(|v| *v = v.conj());
    }
}

fn udot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[C64]) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

fn true_residual(op: &ComplexOperator, x: &[C64], b: &[C64]) -> f64 {
    let mut ax = vec![C64::default(); x.len()];
    op.apply(x, &mut ax);
    let r: f64 = b.iter().zip(&ax).map(|(b, a)| (b - a).norm_sqr()).sum::<f64>().sqrt();
    r / norm2(b)
}

/// Jacobi-preconditioned conjugate orthogonal conjugate gradients.
fn cocg(op: &ComplexOperator, b: &[C64], tol: f64, max_iter: usize) -> Option<(Vec<C64>, SolveStats)> {
    let n = b.len();
    let bnorm = norm2(b);
    let inv: Vec<C64> = op.diag.iter().map(|d| 1.0 / d).collect();
    let mut x = vec![C64::default(); n];
    let mut r = b.to_vec();
    let mut z: Vec<C64> = r.iter().zip(&inv).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut q = vec![C64::default(); n];
    let mut rho = udot(&r, &z);
    for it in 1..=max_iter {
        op.apply(&p, &mut q);
        let mu = udot(&p, &q);
        if mu.norm() <= 1e-300 || !mu.is_finite() {
            return None;
        }
        let a = rho / mu;
        for i in 0..n {
            x[i] += a * p[i];
            r[i] -= a * q[i];
        }
        if norm2(&r) <= tol * bnorm {
            let residual = true_residual(op, &x, b);
            return (residual <= 10.0 * tol).then_some((x, SolveStats { iterations: it, residual }));
        }
        for i in 0..n {
            z[i] = r[i] * inv[i];
        }
        let rho_new = udot(&r, &z);
        if rho.norm() <= 1e-300 {
            return None;
        }
        let beta = rho_new / rho;
        rho = rho_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    None
}

/// Conjugate gradients on `A^H A x = A^H b`.
fn cgnr(op: &ComplexOperator, b: &[C64], tol: f64, max_iter: usize) -> Result<(Vec<C64>, SolveStats)> {
    let n = b.len();
    let bnorm = norm2(b);
    let mut x = vec![C64::default(); n];
    let mut r = b.to_vec();
    let mut z = vec![C64::default(); n];
    op.apply_adjoint(&r, &mut z);
    let mut p = z.clone();
    let mut w = vec![C64::default(); n];
    let mut zz = norm2(&z).powi(2);
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        op.apply(&p, &mut w);
        let a = zz / norm2(&w).powi(2);
        for i in 0..n {
            x[i] += a * p[i];
            r[i] -= a * w[i];
        }
        if norm2(&r) <= tol * bnorm {
            break;
        }
        op.apply_adjoint(&r, &mut z);
        let zz_new = norm2(&z).powi(2);
        let beta = zz_new / zz;
        zz = zz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let residual = true_residual(op, &x, b);
    if residual > 10.0 * tol {
        return Err(Error::NotConverged {
            what: "complex normal-equation CG",
            iterations,
            residual,
        });
    }
    Ok((x, SolveStats { iterations, residual }))
}

/// Solves `(L + diag(shift)) x = b` by COCG, falling back to CGNR.
pub fn solve_complex(laplacian: &CsrMatrix, shift: Vec<C64>, b: &[C64], tol: f64, max_iter: usize) -> Result<(Vec<C64>, SolveStats)> {
    if norm2(b) == 0.0 {
        return Ok((vec![C64::default(); b.len()], SolveStats { iterations: 0, residual: 0.0 }));
    }
    let diag = laplacian
        .diagonal()
        .iter()
        .zip(&shift)
        .map(|(d, s)| s + d)
        .collect();
    let op = ComplexOperator { laplacian, shift, diag };
    if let Some(out) = cocg(&op, b, tol, max_iter) {
        return Ok(out);
    }
    log::debug!("COCG failed; falling back to normal equations");
    cgnr(&op, b, tol, 20 * max_iter)
}

/// Neumann data `∂ν v(x, 1+is)` on every boundary face, where `v` solves the
/// complex-shifted problem with Dirichlet data `ĝ(·, 1+is)`.
pub fn neumann_slice(grid: &Grid, problem: &ProblemConfig, probe: &ProbeConfig, alpha: &ScalarField3D, s: f64, tol: f64) -> Result<(ComplexFieldSlice, SolveStats)> {
    let tau = C64::new(1.0, s);
    let bg = ComplexBackground::new(*probe, problem.alpha0, tau)?;
    let ln_tau = tau.ln();
    let tau_a0 = complex_pow(tau, problem.alpha0);
    let interior = grid.interior_nodes();
    let mut shift = Vec::with_capacity(interior.len());
    let mut rhs = Vec::with_capacity(interior.len());
    for &node in interior {
        let x = grid.node_point(node);
        shift.push((ln_tau * alpha.values()[node]).exp());
        let h = problem.jump_at(x);
        // v = τ^{-5}(w0 + z), (Δ - τ^α) z = (τ^α - τ^α₀) w0
        rhs.push(if h == 0.0 {
            C64::default()
        } else {
            -tau_a0 * expm1_c(ln_tau * h) * bg.w0(x)
        });
    }
    let unknowns = grid.unknowns() as f64;
    let cap = (40.0 * unknowns.cbrt()) as usize + 200;
    let (zsol, stats) = solve_complex(grid.laplacian(), shift, &rhs, tol, cap)?;
    let mut re = vec![0.0; alpha.values().len()];
    let mut im = vec![0.0; alpha.values().len()];
    for (u, &node) in interior.iter().enumerate() {
        re[node] = zsol[u].re;
        im[node] = zsol[u].im;
    }
    let dims = grid.dims();
    let domain = grid.domain();
    let tr_re = neumann_trace(&ScalarField3D::from_parts(dims, domain.lo(), domain.spacing(), 0.0, re), grid, 2)?;
    let tr_im = neumann_trace(&ScalarField3D::from_parts(dims, domain.lo(), domain.spacing(), 0.0, im), grid, 2)?;
    let weight = tau.powi(-PROBE_WEIGHT_EXPONENT);
    let values = grid
        .faces()
        .iter()
        .enumerate()
        .map(|(f, face)| {
            let dz = C64::new(tr_re.face_value(f), tr_im.face_value(f));
            weight * (bg.w0_normal_derivative(face.center(), face.normal()) + dz)
        })
        .collect();
    Ok((ComplexFieldSlice { s, values }, stats))
}

/// Simulated Neumann measurement on every boundary face.
#[derive(Clone, Debug)]
pub struct Measurement {
    pub grid: Grid,
    pub series: TimeSeries,
    pub rule: SpectralRule,
    pub fingerprint: String,
    pub max_iterations: usize,
    pub max_residual: f64,
}

pub fn grid_fingerprint(grid: &Grid) -> String {
    let d = grid.domain();
    fingerprint(&format!("{:?}|{:?}|{:?}", d.lo(), d.hi(), d.intervals()))
}

/// Boundary data `∂ν u(x, t)` obtained by synthesizing complex Laplace-domain
/// solves along `Re τ = 1`.
pub fn simulate_measurement(problem: &ProblemConfig, probe: &ProbeConfig, settings: &TimeDomainSettings) -> Result<Measurement> {
    settings.validate()?;
    problem.validate()?;
    probe.validate_against(&problem.domain)?;
    let grid = Grid::new(&problem.domain);
    let alpha = order_field(problem)?;
    let rule = SpectralRule::new(settings.s_max, settings.t_max, settings.n_quad)?;
    let slices: Vec<(ComplexFieldSlice, SolveStats)> = rule
        .nodes
        .par_iter()
        .enumerate()
        .map(|(j, &s)| {
            neumann_slice(&grid, problem, probe, &alpha, s, settings.solve_tol).map_err(|e| Error::Spectral {
                node: j,
                s,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let max_iterations = slices.iter().map(|(_, st)| st.iterations).max().unwrap_or(0);
    let max_residual = slices.iter().map(|(_, st)| st.residual).fold(0.0, f64::max);
    let spectra: Vec<Vec<C64>> = slices.into_iter().map(|(sl, _)| sl.values).collect();
    let bounds = check_truncation(&spectra, &rule, problem.alpha0, settings.truncation_tol)?;
    let times = settings.time_grid();
    let (re, im) = split(&spectra, grid.faces().len());
    let mut series = TimeSeries::new(times.clone(), synthesize(&re, &im, &rule, &times), 1.0)?;
    series.truncation_bound = bounds;
    let fingerprint = grid_fingerprint(&grid);
    Ok(Measurement {
        grid,
        series,
        rule,
        fingerprint,
        max_iterations,
        max_residual,
    })
}

/// Data-side indicator and its two constituent boundary integrals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataIndicator {
    pub tau: f64,
    pub value: ScaledValue,
    /// `∫ L[∂ν u] τ⁵ w0 dS`.
    pub data_term: f64,
    /// `∫ ∂ν w0 w0 dS`.
    pub background_term: f64,
}

/// `∫_∂Ω (L[∂ν u](τ) - τ^{-5} ∂ν w0) τ⁵ w0 dS` by the face-midpoint rule.
pub fn indicator_from_data(measurement: &Measurement, tau: f64, probe: &ProbeConfig, alpha0: f64, tail_tol: f64) -> Result<DataIndicator> {
    let lap = laplace_transform(&measurement.series, tau, tail_tol)?;
    let bg = ComplexBackground::new(*probe, alpha0, C64::new(tau, 0.0))?;
    let t5 = tau.powi(PROBE_WEIGHT_EXPONENT);
    let mut data_term = 0.0;
    let mut background_term = 0.0;
    for (face, l) in measurement.grid.faces().iter().zip(&lap) {
        let c = face.center();
        let w0 = bg.w0(c).re;
        let dw0 = bg.w0_normal_derivative(c, face.normal()).re;
        data_term += l.to_f64() * t5 * w0 * face.area();
        background_term += dw0 * w0 * face.area();
    }
    Ok(DataIndicator {
        tau,
        value: ScaledValue::from_f64(data_term - background_term),
        data_term,
        background_term,
    })
}

/// Writes `face_id,t,value` rows (undeflated values), every `stride`-th time.
pub fn write_measurement_csv<W: Write>(m: &Measurement, mut w: W, stride: usize) -> Result<()> {
    let stride = stride.max(1);
    writeln!(
        w,
        "# measurement grid={} faces={} times={} stride={}",
        m.fingerprint,
        m.series.points(),
        m.series.times.len(),
        stride
    )?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["face_id", "t", "value"])?;
    for p in 0..m.series.points() {
        for i in (0..m.series.times.len()).step_by(stride) {
            csv.write_record([
                p.to_string(),
                format!("{:e}", m.series.times[i]),
                format!("{:e}", m.series.value(p, i)),
            ])?;
        }
    }
    csv.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BoxDomain, JumpProfile, Obstacle};
    use crate::special::{Background, SpecialSolutionParams};

    fn ext_probe() -> ProbeConfig {
        ProbeConfig::exterior([2.0, 0.0, 0.0], 0.5, 0).unwrap()
    }

    fn boundary_points() -> Vec<Point> {
        vec![[1.0, 0.0, 0.0], [1.0, 0.5, -0.3], [-1.0, 0.2, 0.1], [0.3, 1.0, 0.9], [0.0, 0.0, -1.0]]
    }

    #[test]
    fn complex_branch_matches_real_path() {
        for probe in [ext_probe(), ProbeConfig::interior([0.0; 3], 2.0, 2.5, 1).unwrap()] {
            for tau in [1.5, 3.0, 7.0] {
                let cb = ComplexBackground::new(probe, 0.5, C64::new(tau, 0.0)).unwrap();
                let rb = Background::new(SpecialSolutionParams::new(probe, tau, 0.5).unwrap()).unwrap();
                for x in boundary_points() {
                    let c = cb.w0(x);
                    let r = rb.w0(x).unwrap().to_f64();
                    assert!(c.im.abs() < 1e-14 * r.abs());
                    assert!((c.re - r).abs() < 1e-11 * r.abs(), "{tau} {x:?}: {c} vs {r}");
                    let n = [1.0, 0.0, 0.0];
                    let dc = cb.w0_normal_derivative(x, n).re;
                    let dr = rb.w0_normal_derivative(x, n).unwrap().to_f64();
                    assert!((dc - dr).abs() < 1e-10 * dr.abs().max(1e-300), "{dc} vs {dr}");
                }
            }
        }
    }

    #[test]
    fn conjugate_symmetry_of_background() {
        let p = ext_probe();
        let a = ComplexBackground::new(p, 0.4, C64::new(1.0, 3.0)).unwrap();
        let b = ComplexBackground::new(p, 0.4, C64::new(1.0, -3.0)).unwrap();
        let x = [0.5, 0.2, 0.1];
        assert!((a.w0(x) - b.w0(x).conj()).norm() < 1e-15 * a.w0(x).norm());
    }

    #[test]
    fn expm1_is_accurate_for_small_arguments() {
        let z = C64::new(1e-12, -2e-12);
        let e = expm1_c(z);
        assert!((e - z).norm() < 1e-23);
        let big = C64::new(0.7, 1.3);
        assert!((expm1_c(big) - (big.exp() - 1.0)).norm() < 1e-15);
    }

    #[test]
    fn laplace_of_exponential_series() {
        let times: Vec<f64> = (0..=2000).map(|i| i as f64 * 0.01).collect();
        let a = 0.5;
        let values = Array2::from_shape_fn((1, times.len()), |(_, i)| (a * times[i]).exp());
        let series = TimeSeries::new(times, values, 0.0).unwrap();
        let tau = 3.0;
        let l = laplace_transform(&series, tau, 1e-6).unwrap();
        assert!((l[0].to_f64() - 1.0 / (tau - a)).abs() < 1e-8);
        // odd interval count takes the 3/8 branch
        let times: Vec<f64> = (0..=2001).map(|i| i as f64 * 0.01).collect();
        let values = Array2::from_shape_fn((1, times.len()), |(_, i)| (a * times[i]).exp());
        let series = TimeSeries::new(times, values, 0.0).unwrap();
        assert!((laplace_transform(&series, tau, 1e-6).unwrap()[0].to_f64() - 0.4).abs() < 1e-8);
    }

    #[test]
    fn zero_series_transforms_to_zero() {
        let times: Vec<f64> = (0..=100).map(|i| i as f64 * 0.2).collect();
        let series = TimeSeries::new(times, Array2::zeros((2, 101)), 1.0).unwrap();
        for v in laplace_transform(&series, 3.0, 1e-6).unwrap() {
            assert!(v.is_zero());
        }
    }

    #[test]
    fn short_series_is_rejected() {
        let times: Vec<f64> = (0..=10).map(|i| i as f64 * 0.1).collect();
        let values = Array2::from_elem((1, 11), 1.0);
        let series = TimeSeries::new(times, values, 1.0).unwrap();
        assert!(matches!(laplace_transform(&series, 2.0, 1e-6), Err(Error::Parameter(_))));
    }

    #[test]
    fn probe_laplace_identity() {
        let settings = TimeDomainSettings::default();
        let pts = boundary_points();
        let series = synthesize_probe(&pts, &ext_probe(), 0.5, &settings).unwrap();
        for tau in [2.0, 3.0, 5.0] {
            let l = laplace_transform(&series, tau, 1e-6).unwrap();
            let bg = Background::new(SpecialSolutionParams::new(ext_probe(), tau, 0.5).unwrap()).unwrap();
            for (x, v) in pts.iter().zip(&l) {
                let exact = tau.powi(-5) * bg.w0(*x).unwrap().to_f64();
                let rel = (v.to_f64() - exact).abs() / exact;
                assert!(rel < 1e-3, "τ={tau} x={x:?}: rel {rel:e}");
            }
        }
    }

    #[test]
    fn probe_vanishes_at_time_zero() {
        let pts = [[1.0, 0.0, 0.0]];
        let mut prev = f64::INFINITY;
        for s_max in [10.0, 20.0, 40.0] {
            let settings = TimeDomainSettings {
                s_max,
                truncation_tol: 1.0,
                ..Default::default()
            };
            let series = synthesize_probe(&pts, &ext_probe(), 0.5, &settings).unwrap();
            let peak = series.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let at0 = series.values[[0, 0]].abs() / peak;
            assert!(at0 < prev);
            prev = at0;
        }
        assert!(prev < 1e-4, "{prev}");
    }

    #[test]
    fn half_rule_matches_full_rule() {
        let pts = boundary_points();
        let rule = SpectralRule::new(20.0, 10.0, 4).unwrap();
        let full = rule.symmetric();
        let times: Vec<f64> = (0..=50).map(|i| i as f64 * 0.2).collect();
        let half = probe_spectra(&pts, &ext_probe(), 0.5, &rule).unwrap();
        let (re, im) = split(&half, pts.len());
        let f_half = synthesize(&re, &im, &rule, &times);
        let all = probe_spectra(&pts, &ext_probe(), 0.5, &full).unwrap();
        for p in 0..pts.len() {
            for (i, &t) in times.iter().enumerate() {
                let z: C64 = all
                    .iter()
                    .zip(&full.nodes)
                    .zip(&full.weights)
                    .map(|((c, s), w)| c[p] * C64::from_polar(1.0, t * s) * *w)
                    .sum::<C64>()
                    / (2.0 * PI);
                let scale = f_half.row(p).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!((z.re - f_half[[p, i]]).abs() <= 1e-12 * scale);
                assert!(z.im.abs() <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn truncation_too_small_is_reported() {
        let settings = TimeDomainSettings {
            s_max: 0.5,
            ..Default::default()
        };
        let err = synthesize_probe(&boundary_points(), &ext_probe(), 0.5, &settings).unwrap_err();
        assert!(err.to_string().contains("increase s_max"));
    }

    fn coarse_problem(amp: f64) -> ProblemConfig {
        ProblemConfig::new(
            0.5,
            BoxDomain::cube(1.0, 8).unwrap(),
            Obstacle::ball([0.0; 3], 0.3).unwrap(),
            JumpProfile::constant(amp),
        )
        .unwrap()
    }

    #[test]
    fn complex_solver_matches_real_solver_on_real_axis() {
        use crate::elliptic::{assemble, pcg};
        let problem = coarse_problem(0.3);
        let grid = Grid::new(&problem.domain);
        let alpha = order_field(&problem).unwrap();
        let op = assemble(&grid, &alpha, 4.0).unwrap();
        let b: Vec<f64> = (0..grid.unknowns()).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let (xr, _) = pcg(&op, &b, 1e-12, 1000).unwrap();
        let shift: Vec<C64> = op.shift().iter().map(|&s| C64::new(s, 0.0)).collect();
        let bc: Vec<C64> = b.iter().map(|&v| C64::new(v, 0.0)).collect();
        let (xc, _) = solve_complex(grid.laplacian(), shift, &bc, 1e-12, 1000).unwrap();
        for (a, c) in xr.iter().zip(&xc) {
            assert!((a - c.re).abs() < 1e-9 && c.im.abs() < 1e-9);
        }
    }

    #[test]
    fn normal_equations_fallback_converges() {
        let problem = coarse_problem(0.3);
        let grid = Grid::new(&problem.domain);
        let shift = vec![C64::new(1.0, 5.0); grid.unknowns()];
        let b = vec![C64::new(1.0, -1.0); grid.unknowns()];
        let diag = grid.laplacian().diagonal().iter().zip(&shift).map(|(d, s)| s + d).collect();
        let op = ComplexOperator {
            laplacian: grid.laplacian(),
            shift: shift.clone(),
            diag,
        };
        let (x, stats) = cgnr(&op, &b, 1e-10, 5000).unwrap();
        assert!(stats.residual < 1e-9);
        let (y, _) = solve_complex(grid.laplacian(), shift, &b, 1e-10, 1000).unwrap();
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).norm() < 1e-7));
    }

    #[test]
    fn null_obstacle_measures_background_only() {
        let problem = coarse_problem(0.0);
        let grid = Grid::new(&problem.domain);
        let alpha = order_field(&problem).unwrap();
        let (slice, stats) = neumann_slice(&grid, &problem, &ext_probe(), &alpha, 2.5, 1e-8).unwrap();
        assert_eq!(stats.iterations, 0);
        let tau = C64::new(1.0, 2.5);
        let bg = ComplexBackground::new(ext_probe(), 0.5, tau).unwrap();
        for (face, v) in grid.faces().iter().zip(&slice.values) {
            let expect = tau.powi(-5) * bg.w0_normal_derivative(face.center(), face.normal());
            assert_eq!(*v, expect);
        }
    }

    #[test]
    fn slices_are_conjugate_symmetric() {
        let problem = coarse_problem(0.3);
        let grid = Grid::new(&problem.domain);
        let alpha = order_field(&problem).unwrap();
        let (a, _) = neumann_slice(&grid, &problem, &ext_probe(), &alpha, 1.7, 1e-12).unwrap();
        let (b, _) = neumann_slice(&grid, &problem, &ext_probe(), &alpha, -1.7, 1e-12).unwrap();
        let c = b.conjugate();
        let scale = a.values.iter().fold(0.0f64, |m, v| m.max(v.norm()));
        for (x, y) in a.values.iter().zip(&c.values) {
            assert!((x - y).norm() < 1e-9 * scale);
        }
    }

    #[test]
    fn data_term_is_linear_in_the_measurement() {
        let problem = coarse_problem(0.0);
        let settings = TimeDomainSettings {
            t_max: 20.0,
            dt: 0.05,
            s_max: 20.0,
            n_quad: 4,
            truncation_tol: 1e-3,
            ..Default::default()
        };
        let mut m = simulate_measurement(&problem, &ext_probe(), &settings).unwrap();
        let d1 = indicator_from_data(&m, 3.0, &ext_probe(), 0.5, 1e-6).unwrap();
        // null obstacle: the data reproduce the background integral
        assert!(d1.value.to_f64().abs() < 1e-3 * d1.background_term.abs());
        m.series.values.mapv_inplace(|v| 2.0 * v);
        let d2 = indicator_from_data(&m, 3.0, &ext_probe(), 0.5, 1e-6).unwrap();
        assert!((d2.data_term - 2.0 * d1.data_term).abs() < 1e-12 * d1.data_term.abs());
        assert_eq!(d2.background_term, d1.background_term);
    }

    #[test]
    fn measurement_csv_has_header_and_rows() {
        let problem = coarse_problem(0.0);
        let settings = TimeDomainSettings {
            t_max: 10.0,
            dt: 0.5,
            s_max: 10.0,
            n_quad: 2,
            truncation_tol: 1.0,
            ..Default::default()
        };
        let m = simulate_measurement(&problem, &ext_probe(), &settings).unwrap();
        let mut buf = Vec::new();
        write_measurement_csv(&m, &mut buf, 5).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# measurement grid="));
        assert_eq!(lines.next().unwrap(), "face_id,t,value");
        assert_eq!(lines.count(), m.series.points() * 5);
    }
}
