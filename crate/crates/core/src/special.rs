//! Background solutions of the screened problem driven by the probe sources.
//!
//! For a probe centred at `p` with source moment `Psi` the background field is
//! `w0(x, tau) = tau^(beta - 1) v(x; beta)` where `v` is the Yukawa potential of
//! `Psi` with screening rate `ttilde = tau^(beta/2)`. Outside the source ball and
//! inside the source shell `v` is radial about `p` with closed forms
//!
//! * exterior: `eta^(2(m+1)) exp(-ttilde r) / r * a_m(ttilde)`
//! * interior: `sinh(ttilde r) / r * b_m(ttilde)`
//!
//! where `r = |x - p|`. All values are returned as [`ScaledValue`]s.

use crate::error::{Error, Result};
use crate::geometry::{dot, norm, sub, Point, ProbeConfig, ProbeShape};
use crate::quadrature::{integrate_adaptive, AdaptiveOptions};
use crate::scaled::ScaledValue;

/// Relative accuracy requested from the coefficient integrals.
pub const COEFF_REL_TOL: f64 = 1e-11;

/// Below this argument `sinh(z)/z` is evaluated by its series.
const SINHC_SERIES_LIMIT: f64 = 1e-4;

/// Non-negative probe source moment at `x`.
pub fn psi_eval(x: Point, probe: &ProbeConfig) -> f64 {
    let r2 = {
        let d = sub(x, probe.center);
        dot(d, d)
    };
    let m = probe.m as i32;
    match probe.shape {
        ProbeShape::Exterior { eta } => {
            if r2 < eta * eta {
                (eta * eta - r2).powi(m)
            } else {
                0.0
            }
        }
        ProbeShape::Interior { r1, r2: outer } => {
            if r2 > r1 * r1 && r2 < outer * outer {
                ((outer * outer - r2) * (r2 - r1 * r1)).powi(m)
            } else {
                0.0
            }
        }
    }
}

fn ln_factorial(m: u32) -> f64 {
    (1..=m).map(|k| (k as f64).ln()).sum()
}

/// `a_m(ttilde) = (1/ttilde) ∫_0^1 s (1-s^2)^m sinh(eta ttilde s) ds`.
pub fn coeff_a(m: u32, eta: f64, ttilde: f64) -> Result<ScaledValue> {
    if !(ttilde > 0.0) || !(eta > 0.0) {
        return Err(Error::Domain(format!(
            "coeff_a needs eta > 0 and ttilde > 0 (got eta={eta}, ttilde={ttilde})"
        )));
    }
    let k = eta * ttilde;
    let mi = m as i32;
    // sinh(k s) = exp(k) * exp(-k (1-s)) * (1 - exp(-2 k s)) / 2
    let f = |s: f64| {
        let u = 1.0 - s;
        s * (u * (1.0 + s)).powi(mi) * (-k * u).exp() * (-(-2.0 * k * s).exp_m1()) * 0.5
    };
    let opts = AdaptiveOptions {
        abs_tol: 0.0,
        rel_tol: COEFF_REL_TOL,
        max_intervals: 4000,
    };
    let layer = (40.0 + 4.0 * m as f64) / k;
    let integral = if layer < 1.0 {
        integrate_adaptive(f, 0.0, 1.0 - layer, opts)?.value
            + integrate_adaptive(f, 1.0 - layer, 1.0, opts)?.value
    } else {
        integrate_adaptive(f, 0.0, 1.0, opts)?.value
    };
    Ok(ScaledValue::new(integral, k - ttilde.ln()))
}

/// `b_m(ttilde) = (1/ttilde) ∫_{R1}^{R2} s (R2^2-s^2)^m (s^2-R1^2)^m exp(-s ttilde) ds`.
pub fn coeff_b(m: u32, r1: f64, r2: f64, ttilde: f64) -> Result<ScaledValue> {
    if !(ttilde > 0.0) || !(r1 > 0.0 && r1 < r2) {
        return Err(Error::Domain(format!(
            "coeff_b needs 0 < R1 < R2 and ttilde > 0 (got R1={r1}, R2={r2}, ttilde={ttilde})"
        )));
    }
    let mi = m as i32;
    let f = |s: f64| s * ((r2 * r2 - s * s) * (s * s - r1 * r1)).powi(mi) * (-(s - r1) * ttilde).exp();
    let opts = AdaptiveOptions {
        abs_tol: 0.0,
        rel_tol: COEFF_REL_TOL,
        max_intervals: 4000,
    };
    let layer = (40.0 + 4.0 * m as f64) / ttilde;
    let integral = if r1 + layer < r2 {
        integrate_adaptive(f, r1, r1 + layer, opts)?.value
            + integrate_adaptive(f, r1 + layer, r2, opts)?.value
    } else {
        integrate_adaptive(f, r1, r2, opts)?.value
    };
    Ok(ScaledValue::new(integral, -r1 * ttilde - ttilde.ln()))
}

/// Large-`ttilde` form `eta 2^(m-1) m! exp(ttilde eta) / (ttilde eta)^(m+2)`.
pub fn coeff_a_asymptote(m: u32, eta: f64, ttilde: f64) -> ScaledValue {
    let k = eta * ttilde;
    let ln = eta.ln() + (m as f64 - 1.0) * std::f64::consts::LN_2 + ln_factorial(m) + k
        - (m as f64 + 2.0) * k.ln();
    ScaledValue::from_ln(ln, false)
}

/// Large-`ttilde` form `2^m m! R1^(m+1) (R2^2-R1^2)^m exp(-R1 ttilde) / ttilde^(m+2)`.
pub fn coeff_b_asymptote(m: u32, r1: f64, r2: f64, ttilde: f64) -> ScaledValue {
    let mf = m as f64;
    let ln = mf * std::f64::consts::LN_2 + ln_factorial(m) + (mf + 1.0) * r1.ln()
        + mf * (r2 * r2 - r1 * r1).ln()
        - r1 * ttilde
        - (mf + 2.0) * ttilde.ln();
    ScaledValue::from_ln(ln, false)
}

/// Probe, spectral parameter `tau` and order exponent `beta`; `ttilde = tau^(beta/2)`.
#[derive(Clone, Copy, Debug)]
pub struct SpecialSolutionParams {
    pub probe: ProbeConfig,
    pub tau: f64,
    pub beta: f64,
}

impl SpecialSolutionParams {
    pub fn new(probe: ProbeConfig, tau: f64, beta: f64) -> Result<Self> {
        if !(tau > 1.0) {
            return Err(Error::Domain(format!("tau must exceed 1 (got {tau})")));
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::Domain(format!("beta must lie in (0,1) (got {beta})")));
        }
        Ok(Self { probe, tau, beta })
    }

    pub fn ttilde(&self) -> f64 {
        self.tau.powf(self.beta / 2.0)
    }
}

/// Background solution with its coefficient integral evaluated once, for
/// repeated evaluation at many points.
#[derive(Clone, Copy, Debug)]
pub struct Background {
    params: SpecialSolutionParams,
    ttilde: f64,
    /// ln of the radial-profile prefactor (`eta^(2(m+1)) a_m` or `b_m`).
    ln_coeff: f64,
    /// ln of `tau^(beta-1)`, the factor taking `v` to `w0`.
    ln_w0_factor: f64,
}

impl Background {
    pub fn new(params: SpecialSolutionParams) -> Result<Self> {
        let ttilde = params.ttilde();
        let m = params.probe.m;
        let ln_coeff = match params.probe.shape {
            ProbeShape::Exterior { eta } => {
                2.0 * (m as f64 + 1.0) * eta.ln() + coeff_a(m, eta, ttilde)?.ln_abs()
            }
            ProbeShape::Interior { r1, r2 } => coeff_b(m, r1, r2, ttilde)?.ln_abs(),
        };
        Ok(Self {
            params,
            ttilde,
            ln_coeff,
            ln_w0_factor: (params.beta - 1.0) * params.tau.ln(),
        })
    }

    pub fn params(&self) -> &SpecialSolutionParams {
        &self.params
    }

    pub fn ttilde(&self) -> f64 {
        self.ttilde
    }

    fn check_radius(&self, r: f64) -> Result<()> {
        match self.params.probe.shape {
            ProbeShape::Exterior { eta } if r <= eta => Err(Error::Domain(format!(
                "exterior closed form needs |x-p| > eta (|x-p| = {r}, eta = {eta})"
            ))),
            ProbeShape::Interior { r1, .. } if r >= r1 => Err(Error::Domain(format!(
                "interior closed form needs |x-p| < R1 (|x-p| = {r}, R1 = {r1})"
            ))),
            _ => Ok(()),
        }
    }

    /// ln v at radius `r` (v is positive). The caller guarantees the radius is admissible.
    pub fn ln_v_radial(&self, r: f64) -> f64 {
        let t = self.ttilde;
        match self.params.probe.shape {
            ProbeShape::Exterior { .. } => self.ln_coeff - t * r - r.ln(),
            ProbeShape::Interior { .. } => self.ln_coeff + ln_sinh_over_r(t, r),
        }
    }

    /// Signed radial derivative `dv/dr`.
    pub fn dv_dr(&self, r: f64) -> ScaledValue {
        let t = self.ttilde;
        match self.params.probe.shape {
            ProbeShape::Exterior { .. } => {
                let ln = self.ln_coeff - t * r + (t * r).ln_1p() - 2.0 * r.ln();
                ScaledValue::from_ln(ln, true)
            }
            ProbeShape::Interior { .. } => {
                let z = t * r;
                let ln = if z < 1.0 {
                    // z cosh z - sinh z = sum_k 2k z^(2k+1) / (2k+1)!
                    let mut term = z * z * z / 3.0;
                    let mut sum = term;
                    for k in 2..12 {
                        let kf = k as f64;
                        term *= z * z * kf / ((kf - 1.0) * (2.0 * kf) * (2.0 * kf + 1.0));
                        sum += term;
                    }
                    sum.ln()
                } else {
                    let e = (-2.0 * z).exp();
                    z - std::f64::consts::LN_2 + (z * (1.0 + e) - (1.0 - e)).ln()
                };
                ScaledValue::from_ln(self.ln_coeff + ln - 2.0 * r.ln(), false)
            }
        }
    }

    pub fn v(&self, x: Point) -> Result<ScaledValue> {
        let r = norm(sub(x, self.params.probe.center));
        self.check_radius(r)?;
        Ok(ScaledValue::from_ln(self.ln_v_radial(r), false))
    }

    /// ln w0 at `x`; no admissibility check.
    #[inline]
    pub fn ln_w0_unchecked(&self, x: Point) -> f64 {
        let r = norm(sub(x, self.params.probe.center));
        self.ln_w0_factor + self.ln_v_radial(r)
    }

    pub fn w0(&self, x: Point) -> Result<ScaledValue> {
        Ok(self.v(x)?.mul_exp(self.ln_w0_factor))
    }

    /// `∂w0/∂n` for the unit vector `normal` at `x`.
    pub fn w0_normal_derivative(&self, x: Point, normal: Point) -> Result<ScaledValue> {
        let d = sub(x, self.params.probe.center);
        let r = norm(d);
        self.check_radius(r)?;
        let cos = dot(d, normal) / r;
        Ok((self.dv_dr(r) * cos).mul_exp(self.ln_w0_factor))
    }
}

/// ln(sinh(t r) / r), with the series near the removable singularity.
fn ln_sinh_over_r(t: f64, r: f64) -> f64 {
    let z = t * r;
    if z < SINHC_SERIES_LIMIT {
        t.ln() + (z * z / 6.0).ln_1p()
    } else {
        z + (-(-2.0 * z).exp_m1() * 0.5).ln() - r.ln()
    }
}

pub fn v_exterior(x: Point, params: &SpecialSolutionParams) -> Result<ScaledValue> {
    if params.probe.flavor() != crate::geometry::ProbeFlavor::Ext {
        return Err(Error::Domain("v_exterior called with an interior probe".into()));
    }
    Background::new(*params)?.v(x)
}

pub fn v_interior(x: Point, params: &SpecialSolutionParams) -> Result<ScaledValue> {
    if params.probe.flavor() != crate::geometry::ProbeFlavor::Int {
        return Err(Error::Domain("v_interior called with an exterior probe".into()));
    }
    Background::new(*params)?.v(x)
}

/// `w0(x, tau) = tau^(beta-1) v(x; beta)`.
pub fn w0_eval(x: Point, params: &SpecialSolutionParams) -> Result<ScaledValue> {
    Background::new(*params)?.w0(x)
}

pub fn w0_normal_derivative(
    x: Point,
    normal: Point,
    params: &SpecialSolutionParams,
) -> Result<ScaledValue> {
    Background::new(*params)?.w0_normal_derivative(x, normal)
}

/// Brute-force references for the closed forms above. None of these routines
/// calls into the closed-form path.
pub mod oracle {
    use super::*;
    use crate::geometry::BoxDomain;
    use crate::quadrature::GaussLegendre;

    /// `a_0` from the antiderivative of `s sinh(k s)`.
    pub fn coeff_a0_closed_form(eta: f64, ttilde: f64) -> f64 {
        let k = eta * ttilde;
        (k.cosh() / k - k.sinh() / (k * k)) / ttilde
    }

    /// `b_0` from the antiderivative of `s exp(-t s)`.
    pub fn coeff_b0_closed_form(r1: f64, r2: f64, ttilde: f64) -> f64 {
        let t = ttilde;
        let anti = |s: f64| -(-t * s).exp() * (s / t + 1.0 / (t * t));
        (anti(r2) - anti(r1)) / t
    }

    /// `(1/4π) ∫ Psi(y) exp(-ttilde |x-y|) / |x-y| dy` by a tensor Gauss rule in
    /// spherical coordinates about `p` (fixed polar axis `e_z`).
    pub fn v_by_quadrature(x: Point, probe: &ProbeConfig, ttilde: f64, order: usize) -> f64 {
        let (rho_lo, rho_hi) = match probe.shape {
            ProbeShape::Exterior { eta } => (0.0, eta),
            ProbeShape::Interior { r1, r2 } => (r1, r2),
        };
        let gl = GaussLegendre::new(order);
        let n_phi = 8 * order;
        let p = probe.center;
        let radial: f64 = gl.composite(rho_lo, rho_hi, 3, |rho| {
            let polar: f64 = gl.composite(0.0, std::f64::consts::PI, 6, |theta| {
                let (st, ct) = theta.sin_cos();
                let mut acc = 0.0;
                for j in 0..n_phi {
                    let phi = 2.0 * std::f64::consts::PI * (j as f64 + 0.5) / n_phi as f64;
                    let (sp, cp) = phi.sin_cos();
                    let y = [
                        p[0] + rho * st * cp,
                        p[1] + rho * st * sp,
                        p[2] + rho * ct,
                    ];
                    let d = norm(sub(x, y));
                    acc += (-ttilde * d).exp() / d;
                }
                acc * 2.0 * std::f64::consts::PI / n_phi as f64 * st
            });
            let y = [p[0] + rho, p[1], p[2]];
            psi_eval(y, probe) * rho * rho * polar
        });
        radial / (4.0 * std::f64::consts::PI)
    }

    /// Max relative residual of the 7-point `(Δ_h - tau^beta) w0` over every
    /// `stride`-th interior node of `domain`, relative to `max |tau^beta w0|`.
    pub fn pde_residual(
        domain: &BoxDomain,
        params: &SpecialSolutionParams,
        stride: usize,
    ) -> Result<f64> {
        let bg = Background::new(*params)?;
        let n = domain.intervals();
        let h = domain.spacing();
        let lo = domain.lo();
        let shift = params.tau.powf(params.beta);
        let node = |i: usize, j: usize, k: usize| {
            [
                lo[0] + i as f64 * h[0],
                lo[1] + j as f64 * h[1],
                lo[2] + k as f64 * h[2],
            ]
        };
        let mut ref_ln = f64::NEG_INFINITY;
        for i in 0..=n[0] {
            for j in 0..=n[1] {
                for k in 0..=n[2] {
                    ref_ln = ref_ln.max(bg.ln_w0_unchecked(node(i, j, k)));
                }
            }
        }
        let w = |i: usize, j: usize, k: usize| (bg.ln_w0_unchecked(node(i, j, k)) - ref_ln).exp();
        let mut worst: f64 = 0.0;
        for i in (stride..n[0]).step_by(stride) {
            for j in (stride..n[1]).step_by(stride) {
                for k in (stride..n[2]).step_by(stride) {
                    let c = w(i, j, k);
                    let lap = (w(i + 1, j, k) - 2.0 * c + w(i - 1, j, k)) / (h[0] * h[0])
                        + (w(i, j + 1, k) - 2.0 * c + w(i, j - 1, k)) / (h[1] * h[1])
                        + (w(i, j, k + 1) - 2.0 * c + w(i, j, k - 1)) / (h[2] * h[2]);
                    worst = worst.max((lap - shift * c).abs());
                }
            }
        }
        Ok(worst / shift)
    }

    /// Observed convergence orders of the PDE residual over successive refinements,
    /// sampled on the interior nodes of the coarsest level so the points stay fixed.
    pub fn pde_residual_orders(
        domain: &BoxDomain,
        params: &SpecialSolutionParams,
        levels: &[usize],
    ) -> Result<Vec<f64>> {
        let res = levels
            .iter()
            .map(|&n| pde_residual(&domain.with_intervals([n, n, n])?, params, n / levels[0]))
            .collect::<Result<Vec<_>>>()?;
        Ok(res
            .windows(2)
            .zip(levels.windows(2))
            .map(|(r, n)| (r[0] / r[1]).ln() / (n[1] as f64 / n[0] as f64).ln())
            .collect())
    }
}
