//! Sweep-level invariants of the reconstruction on coarse grids.

use fracdetect::elliptic::SolveOptions;
use fracdetect::enclosure::{extract_distance, geometric_schedule, run_sweep, SweepResult};
use fracdetect::geometry::{dist_point_to_set, probe_distance, BoxDomain, JumpProfile, Obstacle, ProbeConfig, ProblemConfig};
use fracdetect::indicator::{IndicatorEngine, IndicatorSettings};

const N: usize = 32;

fn settings() -> IndicatorSettings {
    IndicatorSettings {
        solve: SolveOptions {
            rel_tol: 1e-13,
            max_iter: None,
        },
        trace_order: 2,
    }
}

fn problem(amp: f64) -> ProblemConfig {
    problem_on(amp, N)
}

fn problem_on(amp: f64, n: usize) -> ProblemConfig {
    ProblemConfig::new(
        0.5,
        BoxDomain::cube(1.0, n).unwrap(),
        Obstacle::ball([0.0; 3], 0.3).unwrap(),
        JumpProfile::constant(amp),
    )
    .unwrap()
}

fn sweep(problem: &ProblemConfig, probe: &ProbeConfig, schedule: &[f64]) -> SweepResult {
    let engine = IndicatorEngine::new(problem, probe, settings()).unwrap();
    run_sweep(&engine, schedule, true).unwrap()
}

fn ext_probe() -> ProbeConfig {
    ProbeConfig::exterior([2.0, 0.0, 0.0], 0.5, 0).unwrap()
}

fn schedule() -> Vec<f64> {
    geometric_schedule(81.0, 8.1e5, 10).unwrap()
}

#[test]
fn indicator_sign_follows_the_jump() {
    for amp in [0.3, -0.3] {
        let s = sweep(&problem(amp), &ext_probe(), &schedule());
        let fit = extract_distance(&s).unwrap();
        for smp in s.usable().iter().filter(|x| x.tau >= fit.tau0_empirical) {
            assert_eq!(smp.value.signum(), amp.signum(), "tau = {}", smp.tau);
        }
        assert!(fit.sign_stable);
    }
}

#[test]
fn face_quadrature_refinement_changes_little() {
    let s = sweep(&problem(0.3), &ext_probe(), &schedule());
    for smp in s.usable() {
        let rel = ((smp.value_gauss - smp.value) / smp.value).to_f64().abs();
        assert!(rel <= 0.01, "tau = {}: {rel}", smp.tau);
    }
}

#[test]
fn upward_schedule_extension_does_not_hurt() {
    let p = problem(0.3);
    let full = sweep(&p, &ext_probe(), &schedule());
    let mut short = full.clone();
    short.samples.truncate(7);
    let f_full = extract_distance(&full).unwrap();
    let f_short = extract_distance(&short).unwrap();
    let exact = 1.2;
    assert!(
        (f_full.distance_estimate - exact).abs()
            <= (f_short.distance_estimate - exact).abs() + f_full.fit_residual,
        "{} vs {}",
        f_full.distance_estimate,
        f_short.distance_estimate
    );
}

#[test]
fn geometry_scaling_scales_the_distance() {
    let p = problem(0.3);
    let base = extract_distance(&sweep(&p, &ext_probe(), &schedule())).unwrap();
    // lengths x2 with τ̃ halved keeps τ̃ · dist on the same range
    let k = 2.0;
    let scaled_problem = p.scaled(k).unwrap();
    let scaled_probe = ext_probe().scaled(k);
    let taus: Vec<f64> = schedule().iter().map(|t| t / k.powi(4)).collect();
    let scaled = extract_distance(&sweep(&scaled_problem, &scaled_probe, &taus)).unwrap();
    let exact = probe_distance(&scaled_probe, scaled_problem.obstacle.balls()).unwrap();
    assert!((exact - k * 1.2).abs() < 1e-12);
    let gap = (scaled.distance_estimate / k - base.distance_estimate).abs();
    assert!(
        gap <= base.fit_residual.max(scaled.fit_residual),
        "{} vs {} (gap {gap})",
        scaled.distance_estimate,
        base.distance_estimate
    );
}

#[test]
fn exterior_probes_from_different_sides_agree_on_the_obstacle() {
    // the top of the schedule needs h <= 1/30 to stay resolved
    let p = problem_on(0.3, 64);
    let eta = 0.5;
    for center in [[2.0, 0.0, 0.0], [0.0, -1.8, 0.3], [1.4, 1.4, 0.0]] {
        let probe = ProbeConfig::exterior(center, eta, 0).unwrap();
        let fit = extract_distance(&sweep(&p, &probe, &schedule())).unwrap();
        let sphere = fit.distance_estimate + eta;
        let true_reach = dist_point_to_set(center, p.obstacle.balls()).unwrap();
        // the recovered sphere about p may not cut D by more than the fit tolerance
        let exact = true_reach - eta;
        assert!(
            sphere <= true_reach + 0.1 * exact,
            "p = {center:?}: sphere radius {sphere} vs dist(p, D) {true_reach}"
        );
        assert!(sphere >= true_reach - 0.1 * exact);
    }
}
