//! The indicator functional `I(τ) = ∫_∂Ω ∂_ν z · w0 dS` and the volume integrals
//! that bracket it.

use crate::elliptic::{
    background_field, neumann_trace, solve_scattered_with, Grid, SolveOptions, SolveStats,
};
use crate::error::{config, Result};
use crate::field::ScalarField3D;
use crate::geometry::{norm, probe_distance, sub, ProbeConfig, ProblemConfig};
use crate::quadrature::GaussLegendre;
use crate::scaled::ScaledValue;
use crate::special::{Background, SpecialSolutionParams};

/// Samples whose `|I|` falls below this multiple of `residual × scale` are noise.
pub const NOISE_FACTOR: f64 = 1e3;

/// Largest `τ̃ · h` for which the boundary layer of the scattered field is
/// considered resolved; beyond it the trace error can flip the sign of `I`.
pub const RESOLUTION_LIMIT: f64 = 1.0;

#[derive(Clone, Copy, Debug)]
pub struct IndicatorSettings {
    pub solve: SolveOptions,
    /// One-sided stencil order for the Neumann trace.
    pub trace_order: u8,
}

impl Default for IndicatorSettings {
    fn default() -> Self {
        Self {
            solve: SolveOptions::default(),
            trace_order: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IndicatorSample {
    pub tau: f64,
    /// Boundary form with face-midpoint quadrature.
    pub value: ScaledValue,
    /// `τ^(-α₀/2) ln |I|`.
    pub scaled_log: f64,
    /// Same boundary integral with a 2×2 Gauss rule per face.
    pub value_gauss: ScaledValue,
    /// `∫_D (τ^α - τ^α₀)(w0 + z) w0`, equal to `I` by Green's identity.
    pub value_volume: ScaledValue,
    pub lower_bound: ScaledValue,
    pub upper_bound: ScaledValue,
    pub coarse_bound: ScaledValue,
    pub noise_floor: ScaledValue,
    pub solver_residual: f64,
    pub iterations: usize,
    /// `τ̃ · h` with the largest grid spacing.
    pub resolution: f64,
}

impl IndicatorSample {
    pub fn above_noise(&self) -> bool {
        self.value.abs() > self.noise_floor
    }

    pub fn resolved(&self) -> bool {
        self.resolution <= RESOLUTION_LIMIT
    }

    /// Above the noise floor and resolved by the grid.
    pub fn usable(&self) -> bool {
        self.above_noise() && self.resolved()
    }

    /// `ln |I| + 2 τ̃ d`, the decay-compensated magnitude.
    pub fn compensated_log(&self, alpha0: f64, distance: f64) -> f64 {
        self.value.ln_abs() + 2.0 * self.tau.powf(alpha0 / 2.0) * distance
    }
}

/// Precomputed grid and settings for repeated indicator evaluations.
#[derive(Clone, Debug)]
pub struct IndicatorEngine {
    grid: Grid,
    problem: ProblemConfig,
    probe: ProbeConfig,
    settings: IndicatorSettings,
}

impl IndicatorEngine {
    pub fn new(problem: &ProblemConfig, probe: &ProbeConfig, settings: IndicatorSettings) -> Result<Self> {
        problem.validate()?;
        probe.validate_against(&problem.domain)?;
        Ok(Self {
            grid: Grid::new(&problem.domain),
            problem: problem.clone(),
            probe: *probe,
            settings,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn problem(&self) -> &ProblemConfig {
        &self.problem
    }

    pub fn probe(&self) -> &ProbeConfig {
        &self.probe
    }

    fn background(&self, tau: f64) -> Result<Background> {
        Background::new(SpecialSolutionParams::new(self.probe, tau, self.problem.alpha0)?)
    }

    pub fn sample(&self, tau: f64) -> Result<IndicatorSample> {
        let bg = self.background(tau)?;
        let w0 = background_field(&self.grid, &self.probe, self.problem.alpha0, tau)?;
        let sol = solve_scattered_with(&self.grid, &self.problem, &w0, tau, &self.settings.solve)?;
        let (value, value_gauss) = self.boundary_integrals(&bg, &sol.field, w0.log_scale())?;
        let value_volume = self.volume_form(&sol.field, &w0, tau);
        let (lower_bound, upper_bound) = self.sandwich(&w0, tau);
        let coarse_bound = self.coarse(&w0, tau);
        let noise_floor = self.noise_floor(&w0, tau, &sol.stats);
        let scaled_log = if value.is_zero() {
            f64::NEG_INFINITY
        } else {
            value.ln_abs() * tau.powf(-self.problem.alpha0 / 2.0)
        };
        Ok(IndicatorSample {
            tau,
            value,
            scaled_log,
            value_gauss,
            value_volume,
            lower_bound,
            upper_bound,
            coarse_bound,
            noise_floor,
            solver_residual: sol.stats.residual,
            iterations: sol.stats.iterations,
            resolution: bg.ttilde() * self.grid.spacing().iter().cloned().fold(0.0, f64::max),
        })
    }

    fn boundary_integrals(
        &self,
        bg: &Background,
        z: &ScalarField3D,
        w0_scale: f64,
    ) -> Result<(ScaledValue, ScaledValue)> {
        let trace = neumann_trace(z, &self.grid, self.settings.trace_order)?;
        let w0_rel = |x| (bg.ln_w0_unchecked(x) - w0_scale).exp();
        let g = 0.5 / 3f64.sqrt();
        let gauss_pts = [0.5 - g, 0.5 + g];
        let mut mid = 0.0;
        let mut gauss = 0.0;
        for (f, face) in self.grid.faces().iter().enumerate() {
            let area = face.area();
            mid += trace.face_value(f) * w0_rel(face.center()) * area;
            let mut acc = 0.0;
            for u in gauss_pts {
                for v in gauss_pts {
                    acc += trace.at(f, u, v) * w0_rel(face.point_at(u, v));
                }
            }
            gauss += 0.25 * acc * area;
        }
        let ls = trace.log_scale() + w0_scale;
        Ok((ScaledValue::new(mid, ls), ScaledValue::new(gauss, ls)))
    }

    fn cell_volume(&self) -> f64 {
        self.grid.spacing().iter().product()
    }

    /// Nodes inside D with their jump values.
    fn obstacle_nodes(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.grid.interior_nodes().iter().filter_map(|&node| {
            let x = self.grid.node_point(node);
            self.problem.obstacle.contains(x).then(|| (node, self.problem.jump_at(x)))
        })
    }

    fn volume_form(&self, z: &ScalarField3D, w0: &ScalarField3D, tau: f64) -> ScaledValue {
        let ln_tau = tau.ln();
        let zf = (z.log_scale() - w0.log_scale()).exp();
        let sum: f64 = self
            .obstacle_nodes()
            .map(|(node, h)| {
                let w = w0.values()[node];
                (h * ln_tau).exp_m1() * (w + z.values()[node] * zf) * w
            })
            .sum();
        ScaledValue::new(sum * self.cell_volume(), self.problem.alpha0 * ln_tau + 2.0 * w0.log_scale())
    }

    fn sandwich(&self, w0: &ScalarField3D, tau: f64) -> (ScaledValue, ScaledValue) {
        let ln_tau = tau.ln();
        let (mut lo, mut hi) = (0.0, 0.0);
        for (node, h) in self.obstacle_nodes() {
            let w2 = w0.values()[node].powi(2);
            lo += -(-h * ln_tau).exp_m1() * w2;
            hi += (h * ln_tau).exp_m1() * w2;
        }
        let ls = self.problem.alpha0 * ln_tau + 2.0 * w0.log_scale();
        let v = self.cell_volume();
        (ScaledValue::new(lo * v, ls), ScaledValue::new(hi * v, ls))
    }

    fn coarse(&self, w0: &ScalarField3D, tau: f64) -> ScaledValue {
        let sup = self.problem.jump.sup_abs(&self.problem.obstacle);
        let sum: f64 = self
            .grid
            .interior_nodes()
            .iter()
            .filter(|&&node| self.problem.obstacle.contains(self.grid.node_point(node)))
            .map(|&node| w0.values()[node].powi(2))
            .sum();
        let ln_tau = tau.ln();
        let factor = (sup * ln_tau).exp() + 1.0;
        ScaledValue::new(
            factor * sum * self.cell_volume(),
            self.problem.alpha0 * ln_tau + 2.0 * w0.log_scale(),
        )
    }

    /// `10³ · max(residual, ε) · |b| |w0| h³`.
    ///
    /// By the discrete Green identity a residual `r` in `A z = b` perturbs `I` by
    /// about `Σ r_i w0_i h³`, which Cauchy-Schwarz bounds by `|r| |w0| h³`.
    fn noise_floor(&self, w0: &ScalarField3D, tau: f64, stats: &SolveStats) -> ScaledValue {
        let ln_tau = tau.ln();
        let b2: f64 = self
            .obstacle_nodes()
            .map(|(node, h)| ((h * ln_tau).exp_m1() * w0.values()[node]).powi(2))
            .sum();
        let w2: f64 = self
            .grid
            .interior_nodes()
            .iter()
            .map(|&node| w0.values()[node].powi(2))
            .sum();
        let eps = stats.residual.max(f64::EPSILON);
        ScaledValue::new(
            NOISE_FACTOR * eps * (b2 * w2).sqrt() * self.cell_volume(),
            self.problem.alpha0 * ln_tau + 2.0 * w0.log_scale(),
        )
    }
}

/// One-shot evaluation of the indicator at `tau`.
pub fn indicator_boundary(
    tau: f64,
    problem: &ProblemConfig,
    probe: &ProbeConfig,
    settings: IndicatorSettings,
) -> Result<IndicatorSample> {
    IndicatorEngine::new(problem, probe, settings)?.sample(tau)
}

/// The two volume integrals bracketing `I(τ)`.
pub fn sandwich_bounds(tau: f64, problem: &ProblemConfig, probe: &ProbeConfig) -> Result<(ScaledValue, ScaledValue)> {
    let engine = IndicatorEngine::new(problem, probe, IndicatorSettings::default())?;
    let w0 = background_field(&engine.grid, probe, problem.alpha0, tau)?;
    Ok(engine.sandwich(&w0, tau))
}

/// `τ^α₀ (τ^‖h‖ + 1) ∫_D w0²`.
pub fn coarse_bound_estimate(tau: f64, problem: &ProblemConfig, probe: &ProbeConfig) -> Result<ScaledValue> {
    let engine = IndicatorEngine::new(problem, probe, IndicatorSettings::default())?;
    let w0 = background_field(&engine.grid, probe, problem.alpha0, tau)?;
    Ok(engine.coarse(&w0, tau))
}

/// Panels and points per panel for the obstacle integrals of the scaling check.
const BALL_PANELS: usize = 24;
const BALL_POINTS: usize = 8;

/// `∫_D weight(depth) v(x;β)² dx` with `β = α₀`, by a Gauss rule in spherical
/// coordinates about each ball centre (polar axis towards the probe centre).
/// `weight` receives the depth `dist(x, ∂D)` and returns a [`ScaledValue`] factor.
fn obstacle_integral<F: Fn(f64) -> f64>(
    problem: &ProblemConfig,
    bg: &Background,
    weight: F,
) -> ScaledValue {
    let gl = GaussLegendre::new(BALL_POINTS);
    let p = bg.params().probe.center;
    let mut terms: Vec<(f64, f64)> = Vec::new();
    for ball in problem.obstacle.balls() {
        let l = norm(sub(ball.center, p));
        let r_ball = ball.radius;
        let dr = r_ball / BALL_PANELS as f64;
        let dt = std::f64::consts::PI / BALL_PANELS as f64;
        for pr in 0..BALL_PANELS {
            for (rho, wr) in gl.mapped(pr as f64 * dr, (pr + 1) as f64 * dr) {
                let depth = r_ball - rho;
                let wt = weight(depth);
                if wt == 0.0 {
                    continue;
                }
                for pt in 0..BALL_PANELS {
                    for (theta, wth) in gl.mapped(pt as f64 * dt, (pt + 1) as f64 * dt) {
                        let r = (rho * rho + l * l - 2.0 * rho * l * theta.cos()).max(0.0).sqrt();
                        let ln_v = bg.ln_v_radial(r);
                        let w = wr * wth * 2.0 * std::f64::consts::PI * rho * rho * theta.sin() * wt;
                        terms.push((2.0 * ln_v, w));
                    }
                }
            }
        }
    }
    let top = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|(l, w)| (l - top).exp() * w).sum();
    ScaledValue::new(sum, top)
}

/// `J(τ) = ∫_D (τ^(C dist(x,∂D)^γ) - 1) v(x;β)² dx` with `C = |amplitude|`.
pub fn layer_integral(problem: &ProblemConfig, probe: &ProbeConfig, tau: f64) -> Result<ScaledValue> {
    let bg = Background::new(SpecialSolutionParams::new(*probe, tau, problem.alpha0)?)?;
    let c = problem.jump.amplitude.abs();
    let gamma = problem.jump.gamma();
    let ln_tau = tau.ln();
    Ok(obstacle_integral(problem, &bg, |depth| {
        let d = if gamma == 0.0 { 1.0 } else { depth.powf(gamma) };
        (c * d * ln_tau).exp_m1()
    }))
}

/// `∫_D v(x;β)² dx`.
pub fn obstacle_energy(problem: &ProblemConfig, probe: &ProbeConfig, tau: f64) -> Result<ScaledValue> {
    let bg = Background::new(SpecialSolutionParams::new(*probe, tau, problem.alpha0)?)?;
    Ok(obstacle_integral(problem, &bg, |_| 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerScalingReport {
    pub taus: Vec<f64>,
    /// `ln J(τ) + 2 τ̃ d`.
    pub compensated: Vec<f64>,
    /// Fitted exponent `c` in `c ln τ + b`.
    pub slope: f64,
    pub intercept: f64,
    /// Largest absolute deviation from the fitted line.
    pub residual: f64,
    /// `∫_D v² · τ^(β(m+2)) e^(2τ̃d)` per τ.
    pub envelope_ratios: Vec<f64>,
    /// Envelope constant fitted on the first half of the sweep.
    pub envelope_constant: f64,
    /// Whether the second half stays below the fitted constant.
    pub envelope_holds: bool,
}

/// Least-squares line `y = a x + b`; returns `(a, b, max |residual|)`.
pub fn line_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let a = sxy / sxx;
    let b = my - a * mx;
    let res = x.iter().zip(y).map(|(u, v)| (v - a * u - b).abs()).fold(0.0, f64::max);
    (a, b, res)
}

/// Scaling check of `J(τ)` and of the `∫_D v²` envelope over a τ list.
pub fn layer_scaling_check(problem: &ProblemConfig, probe: &ProbeConfig, taus: &[f64]) -> Result<LayerScalingReport> {
    if taus.len() < 4 {
        return config(format!("scaling check needs at least 4 tau values (got {})", taus.len()));
    }
    let d = probe_distance(probe, problem.obstacle.balls())?;
    let beta = problem.alpha0;
    let m = probe.m as f64;
    let mut compensated = Vec::with_capacity(taus.len());
    let mut envelope_ratios = Vec::with_capacity(taus.len());
    for &tau in taus {
        let tt = tau.powf(beta / 2.0);
        let j = layer_integral(problem, probe, tau)?;
        compensated.push(j.ln_abs() + 2.0 * tt * d);
        let e = obstacle_energy(problem, probe, tau)?;
        envelope_ratios.push((e.ln_abs() + beta * (m + 2.0) * tau.ln() + 2.0 * tt * d).exp());
    }
    let logs: Vec<f64> = taus.iter().map(|t| t.ln()).collect();
    let (slope, intercept, residual) = line_fit(&logs, &compensated);
    let half = taus.len() / 2;
    let envelope_constant = envelope_ratios[..half].iter().cloned().fold(0.0, f64::max);
    let envelope_holds = envelope_ratios[half..].iter().all(|&r| r <= envelope_constant);
    Ok(LayerScalingReport {
        taus: taus.to_vec(),
        compensated,
        slope,
        intercept,
        residual,
        envelope_ratios,
        envelope_constant,
        envelope_holds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BoxDomain, JumpProfile, Obstacle};

    fn ext_problem(n: usize, jump: JumpProfile) -> ProblemConfig {
        ProblemConfig::new(
            0.5,
            BoxDomain::cube(1.0, n).unwrap(),
            Obstacle::ball([0.0; 3], 0.3).unwrap(),
            jump,
        )
        .unwrap()
    }

    fn ext_probe() -> ProbeConfig {
        ProbeConfig::exterior([2.0, 0.0, 0.0], 0.5, 0).unwrap()
    }

    fn tight() -> IndicatorSettings {
        IndicatorSettings {
            solve: SolveOptions {
                rel_tol: 1e-12,
                max_iter: None,
            },
            trace_order: 2,
        }
    }

    #[test]
    fn null_obstacle_gives_zero() {
        let s = indicator_boundary(30.0, &ext_problem(16, JumpProfile::none()), &ext_probe(), tight()).unwrap();
        assert!(s.value.is_zero());
        assert!(s.lower_bound.is_zero() && s.upper_bound.is_zero());
        assert!(s.coarse_bound > ScaledValue::ZERO);
        assert!(!s.above_noise());
    }

    #[test]
    fn resolution_guard_drops_unresolved_samples() {
        let e = IndicatorEngine::new(&ext_problem(16, JumpProfile::constant(0.3)), &ext_probe(), tight()).unwrap();
        // h = 1/8: τ̃ = 3 is resolved, τ̃ = 10 is not
        let s = e.sample(81.0).unwrap();
        assert!((s.resolution - 3.0 / 8.0).abs() < 1e-12);
        assert!(s.resolved() && s.usable());
        let s = e.sample(1e4).unwrap();
        assert!(!s.resolved() && !s.usable());
    }

    #[test]
    fn sign_follows_the_jump() {
        for (amp, sign) in [(0.3, 1.0), (-0.3, -1.0)] {
            let e = IndicatorEngine::new(&ext_problem(16, JumpProfile::constant(amp)), &ext_probe(), tight()).unwrap();
            for tau in [4.0, 30.0, 200.0] {
                let s = e.sample(tau).unwrap();
                assert_eq!(s.value.signum(), sign, "amp={amp} tau={tau}");
                assert!(s.above_noise());
            }
        }
    }

    #[test]
    fn boundary_and_volume_forms_agree() {
        let e = IndicatorEngine::new(&ext_problem(24, JumpProfile::constant(0.3)), &ext_probe(), tight()).unwrap();
        let s = e.sample(20.0).unwrap();
        let r = (s.value / s.value_volume).to_f64();
        assert!((r - 1.0).abs() < 0.05, "ratio {r}");
        let g = (s.value / s.value_gauss).to_f64();
        assert!((g - 1.0).abs() < 0.01, "gauss ratio {g}");
    }

    #[test]
    fn sandwich_holds_and_orders_bounds() {
        for amp in [0.3, -0.3] {
            let e = IndicatorEngine::new(&ext_problem(24, JumpProfile::constant(amp)), &ext_probe(), tight()).unwrap();
            let s = e.sample(50.0).unwrap();
            assert!(s.lower_bound < s.upper_bound);
            assert!(s.lower_bound <= s.value_volume && s.value_volume <= s.upper_bound);
            if amp > 0.0 {
                assert!(s.lower_bound > ScaledValue::ZERO);
                assert!(s.coarse_bound >= s.upper_bound);
            } else {
                assert!(s.coarse_bound >= s.lower_bound.abs());
            }
        }
    }

    #[test]
    fn coarse_bound_decays_like_the_indicator() {
        let p = ext_problem(16, JumpProfile::constant(0.3));
        let d = 1.2;
        let vals: Vec<f64> = [100.0, 1000.0, 10000.0]
            .iter()
            .map(|&tau: &f64| {
                let b = coarse_bound_estimate(tau, &p, &ext_probe()).unwrap();
                b.ln_abs() + 2.0 * tau.powf(0.25) * d
            })
            .collect();
        // polynomially bounded: compensated log grows at most like a few ln τ
        for w in vals.windows(2) {
            assert!((w[1] - w[0]).abs() < 5.0 * 10f64.ln(), "{vals:?}");
        }
    }

    #[test]
    fn one_shot_helpers_match_engine() {
        let p = ext_problem(12, JumpProfile::constant(0.2));
        let e = IndicatorEngine::new(&p, &ext_probe(), IndicatorSettings::default()).unwrap();
        let s = e.sample(9.0).unwrap();
        let (lo, hi) = sandwich_bounds(9.0, &p, &ext_probe()).unwrap();
        assert_eq!((lo, hi), (s.lower_bound, s.upper_bound));
        assert_eq!(coarse_bound_estimate(9.0, &p, &ext_probe()).unwrap(), s.coarse_bound);
    }

    #[test]
    fn scaling_integral_examples() {
        let p = ext_problem(16, JumpProfile::constant(0.3));
        let j0 = layer_integral(&p, &ext_probe(), 100.0).unwrap();
        let probe2 = ProbeConfig::exterior([2.0, 0.0, 0.0], 0.5, 2).unwrap();
        let j2 = layer_integral(&p, &probe2, 100.0).unwrap();
        assert!(j0 > j2 && j2 > ScaledValue::ZERO);

        let tiny = ProblemConfig::new(
            0.5,
            BoxDomain::cube(1.0, 16).unwrap(),
            Obstacle::ball([0.0; 3], 1e-4).unwrap(),
            JumpProfile::constant(0.3),
        )
        .unwrap();
        let jt = layer_integral(&tiny, &ext_probe(), 100.0).unwrap();
        assert!((jt / j0).to_f64() < 1e-9);
        assert!(layer_scaling_check(&p, &ext_probe(), &[10.0, 20.0, 30.0]).is_err());
    }

    #[test]
    fn scaling_integral_matches_closed_form_for_constant_weight() {
        // For γ = 0, J = (τ^C - 1) ∫_D v²; check ∫_D v² against a direct 3D sum
        let p = ext_problem(16, JumpProfile::constant(0.3));
        let tau = 16.0;
        let bg = Background::new(SpecialSolutionParams::new(ext_probe(), tau, 0.5).unwrap()).unwrap();
        let e = obstacle_energy(&p, &ext_probe(), tau).unwrap();
        let n = 160;
        let h = 0.6 / n as f64;
        let mut acc = 0.0;
        let top = e.log_scale();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let x = [-0.3 + (i as f64 + 0.5) * h, -0.3 + (j as f64 + 0.5) * h, -0.3 + (k as f64 + 0.5) * h];
                    if norm(x) < 0.3 {
                        acc += (2.0 * bg.ln_w0_unchecked(x) - 2.0 * (-0.5 * tau.ln()) - top).exp() * h * h * h;
                    }
                }
            }
        }
        let brute = ScaledValue::new(acc, top);
        assert!(((brute / e).to_f64() - 1.0).abs() < 5e-3);
        let j = layer_integral(&p, &ext_probe(), tau).unwrap();
        assert!(((j / e).to_f64() - (tau.powf(0.3) - 1.0)).abs() < 1e-10);
    }

    #[test]
    fn line_fit_recovers_exact_line() {
        let x = [0.0, 1.0, 2.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.0).collect();
        let (a, b, r) = line_fit(&x, &y);
        assert!((a - 3.0).abs() < 1e-12 && (b + 1.0).abs() < 1e-12 && r < 1e-12);
    }
}
