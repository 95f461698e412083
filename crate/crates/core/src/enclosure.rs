//! τ sweeps of the indicator, the decay-rate fit that recovers the probe
//! distance, and the threshold classification of `e^(τ̃ T) I(τ)`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config, Error, Result};
use crate::geometry::probe_distance;
use crate::indicator::{line_fit, IndicatorEngine, IndicatorSample};

/// Largest admissible exponent `2 τ̃ d` in a schedule.
pub const OVERFLOW_GUARD: f64 = 600.0;

/// Relative half-width of the band around `2d` where the threshold test abstains.
pub const THRESHOLD_BAND: f64 = 0.05;

/// Residual floor in the fit weights `1 / max(residual, floor)`.
pub const WEIGHT_FLOOR: f64 = 1e-14;

/// `count` geometrically spaced values from `lo` to `hi` inclusive.
pub fn geometric_schedule(lo: f64, hi: f64, count: usize) -> Result<Vec<f64>> {
    if !(lo > 1.0 && hi >= lo) || count == 0 {
        return config(format!("invalid tau schedule [{lo}, {hi}] x {count}"));
    }
    if count == 1 {
        return Ok(vec![lo]);
    }
    let r = (hi / lo).ln() / (count - 1) as f64;
    Ok((0..count)
        .map(|k| if k + 1 == count { hi } else { lo * (r * k as f64).exp() })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleFailure {
    pub tau: f64,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub alpha0: f64,
    pub samples: Vec<IndicatorSample>,
    pub failures: Vec<SampleFailure>,
    /// SHA-256 of the canonical configuration text.
    pub fingerprint: String,
}

impl SweepResult {
    pub fn ttilde(&self, tau: f64) -> f64 {
        tau.powf(self.alpha0 / 2.0)
    }

    pub fn usable(&self) -> Vec<&IndicatorSample> {
        self.samples.iter().filter(|s| s.usable()).collect()
    }
}

/// Hex SHA-256 of `text`.
pub fn fingerprint(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Evaluates the indicator over `schedule` (strictly increasing), in parallel
/// when `parallel` is set. Per-τ failures are recorded, not fatal.
pub fn run_sweep(engine: &IndicatorEngine, schedule: &[f64], parallel: bool) -> Result<SweepResult> {
    if schedule.windows(2).any(|w| !(w[1] > w[0])) {
        return config("tau schedule must be strictly increasing");
    }
    let alpha0 = engine.problem().alpha0;
    let d = probe_distance(engine.probe(), engine.problem().obstacle.balls())?;
    if let Some(&bad) = schedule.iter().find(|&&t| 2.0 * t.powf(alpha0 / 2.0) * d > OVERFLOW_GUARD) {
        return Err(Error::Parameter(format!(
            "tau = {bad} breaks the overflow guard 2 τ̃ d <= {OVERFLOW_GUARD}"
        )));
    }
    let run = |&tau: &f64| (tau, engine.sample(tau));
    let outcomes: Vec<_> = if parallel {
        schedule.par_iter().map(run).collect()
    } else {
        schedule.iter().map(run).collect()
    };
    let mut samples = Vec::new();
    let mut failures = Vec::new();
    for (tau, r) in outcomes {
        match r {
            Ok(s) => samples.push(s),
            Err(e) => {
                log::warn!("indicator at tau = {tau} failed: {e}");
                failures.push(SampleFailure {
                    tau,
                    message: e.to_string(),
                })
            }
        }
    }
    if samples.is_empty() && !schedule.is_empty() {
        return Err(Error::Fit(format!("all {} sweep samples failed", failures.len())));
    }
    let fingerprint = fingerprint(&format!(
        "{:?}|{:?}|{:?}",
        engine.problem(),
        engine.probe(),
        schedule
    ));
    Ok(SweepResult {
        alpha0,
        samples,
        failures,
        fingerprint,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JumpSign {
    Positive,
    Negative,
    None,
}

impl fmt::Display for JumpSign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JumpSign::Positive => "positive",
            JumpSign::Negative => "negative",
            JumpSign::None => "none",
        })
    }
}

/// Sign of the indicator at the largest usable τ; `None` when nothing clears the noise floor.
pub fn jump_sign(sweep: &SweepResult) -> JumpSign {
    match sweep.usable().last() {
        None => JumpSign::None,
        Some(s) if s.value.signum() > 0.0 => JumpSign::Positive,
        Some(_) => JumpSign::Negative,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepFit {
    pub distance_estimate: f64,
    pub jump_sign: JumpSign,
    /// Fitted `c` in `ln|I| = s τ̃ + c ln τ + b`.
    pub prefactor_exponent: f64,
    pub intercept: f64,
    /// Root-mean-square deviation of `ln|I|` from the fitted model.
    pub fit_residual: f64,
    /// Smallest sampled τ from which every sample above the noise floor has the final sign.
    pub tau0_empirical: f64,
    pub used_samples: usize,
    pub sign_stable: bool,
    pub warning: Option<String>,
}

/// Weighted least squares of `ln|I| = s τ̃ + c ln τ + b`; distance `max(0, -s/2)`.
pub fn extract_distance(sweep: &SweepResult) -> Result<SweepFit> {
    let usable = sweep.usable();
    if usable.len() < 4 {
        return Err(Error::Fit(format!(
            "need at least 4 usable samples (above the noise floor and resolved; have {})",
            usable.len()
        )));
    }
    let n = usable.len();
    let mut a = DMatrix::<f64>::zeros(n, 3);
    let mut y = DVector::<f64>::zeros(n);
    for (i, s) in usable.iter().enumerate() {
        let w = (1.0 / s.solver_residual.max(WEIGHT_FLOOR)).sqrt();
        a[(i, 0)] = w * sweep.ttilde(s.tau);
        a[(i, 1)] = w * s.tau.ln();
        a[(i, 2)] = w;
        y[i] = w * s.value.ln_abs();
    }
    // Column equilibration keeps the SVD well scaled.
    let norms: Vec<f64> = (0..3).map(|j| a.column(j).norm()).collect();
    for (j, &c) in norms.iter().enumerate() {
        a.column_mut(j).scale_mut(1.0 / c);
    }
    let svd = a.svd(true, true);
    let coef = svd
        .solve(&y, 1e-12)
        .map_err(|e| Error::Fit(format!("least-squares solve failed: {e}")))?;
    let (s, c, b) = (coef[0] / norms[0], coef[1] / norms[1], coef[2] / norms[2]);
    let fit_residual = (usable
        .iter()
        .map(|smp| {
            let pred = s * sweep.ttilde(smp.tau) + c * smp.tau.ln() + b;
            (smp.value.ln_abs() - pred).powi(2)
        })
        .sum::<f64>()
        / n as f64)
        .sqrt();

    let sign = jump_sign(sweep);
    let target = if sign == JumpSign::Positive { 1.0 } else { -1.0 };
    let upper = &usable[n / 2..];
    let sign_stable = upper.iter().all(|s| s.value.signum() == target);
    let warning = (!sign_stable).then(|| "indicator sign changes across the upper half of the sweep".to_string());
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    let mut tau0 = usable[n - 1].tau;
    for s in usable.iter().rev() {
        if s.value.signum() != target {
            break;
        }
        tau0 = s.tau;
    }
    Ok(SweepFit {
        distance_estimate: (-s / 2.0).max(0.0),
        jump_sign: sign,
        prefactor_exponent: c,
        intercept: b,
        fit_residual,
        tau0_empirical: tau0,
        used_samples: n,
        sign_stable,
        warning,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdOutcome {
    TendsToZero,
    TendsToPlusInf,
    TendsToMinusInf,
    IndeterminateNearThreshold,
}

impl fmt::Display for ThresholdOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThresholdOutcome::TendsToZero => "tends_to_zero",
            ThresholdOutcome::TendsToPlusInf => "tends_to_plus_inf",
            ThresholdOutcome::TendsToMinusInf => "tends_to_minus_inf",
            ThresholdOutcome::IndeterminateNearThreshold => "indeterminate_near_threshold",
        })
    }
}

/// Limit of `e^(τ̃ T) I(τ)` predicted from a distance and jump sign.
pub fn classify_analytic(t: f64, distance: f64, sign: JumpSign) -> ThresholdOutcome {
    if t < 2.0 * distance {
        ThresholdOutcome::TendsToZero
    } else {
        match sign {
            JumpSign::Negative => ThresholdOutcome::TendsToMinusInf,
            _ => ThresholdOutcome::TendsToPlusInf,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdReport {
    pub t: f64,
    pub outcome: ThresholdOutcome,
    /// Slope in τ̃ of `ln|I| + τ̃ T - c ln τ` over the top half of the sweep.
    pub trend_slope: f64,
    /// Branch predicted from the fitted distance.
    pub analytic: ThresholdOutcome,
    pub consistent: bool,
}

/// Empirical trend of `e^(τ̃ T) I(τ)` over the upper half of the usable samples.
pub fn threshold_test(sweep: &SweepResult, fit: &SweepFit, t: f64) -> Result<ThresholdReport> {
    if !(t >= 0.0) {
        return config(format!("threshold parameter T must be non-negative (got {t})"));
    }
    let usable = sweep.usable();
    let upper = &usable[usable.len() / 2..];
    if upper.len() < 2 {
        return Err(Error::Fit("too few usable samples for a trend".into()));
    }
    let x: Vec<f64> = upper.iter().map(|s| sweep.ttilde(s.tau)).collect();
    let y: Vec<f64> = upper
        .iter()
        .zip(&x)
        .map(|(s, tt)| s.value.ln_abs() + tt * t - fit.prefactor_exponent * s.tau.ln())
        .collect();
    let (slope, _, _) = line_fit(&x, &y);
    let two_d = 2.0 * fit.distance_estimate;
    let analytic = classify_analytic(t, fit.distance_estimate, fit.jump_sign);
    let outcome = if (t - two_d).abs() < THRESHOLD_BAND * two_d {
        ThresholdOutcome::IndeterminateNearThreshold
    } else if slope < 0.0 {
        ThresholdOutcome::TendsToZero
    } else {
        classify_analytic(f64::INFINITY, 0.0, fit.jump_sign)
    };
    Ok(ThresholdReport {
        t,
        outcome,
        trend_slope: slope,
        analytic,
        consistent: outcome == analytic || outcome == ThresholdOutcome::IndeterminateNearThreshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scaled::ScaledValue;

    /// Synthetic sweep following `sign · τ^c · e^(-2 d τ̃)` exactly.
    fn synthetic(d: f64, c: f64, sign: f64, taus: &[f64]) -> SweepResult {
        let samples = taus
            .iter()
            .map(|&tau| {
                let tt = tau.powf(0.25);
                let ln = -2.0 * d * tt + c * tau.ln() + 0.3;
                let value = ScaledValue::from_ln(ln, sign < 0.0);
                IndicatorSample {
                    tau,
                    value,
                    scaled_log: ln / tt,
                    value_gauss: value,
                    value_volume: value,
                    lower_bound: value,
                    upper_bound: value,
                    coarse_bound: value.abs(),
                    noise_floor: ScaledValue::from_ln(ln - 20.0, false),
                    solver_residual: 1e-12,
                    iterations: 1,
                    resolution: 0.1,
                }
            })
            .collect();
        SweepResult {
            alpha0: 0.5,
            samples,
            failures: Vec::new(),
            fingerprint: String::new(),
        }
    }

    #[test]
    fn schedule_is_geometric_and_exact_at_ends() {
        let s = geometric_schedule(10.0, 1e4, 4).unwrap();
        assert_eq!(s[0], 10.0);
        assert_eq!(s[3], 1e4);
        assert!((s[1] - 100.0).abs() < 1e-9 && (s[2] - 1000.0).abs() < 1e-9);
        assert_eq!(geometric_schedule(5.0, 5.0, 1).unwrap(), vec![5.0]);
        assert!(geometric_schedule(0.5, 5.0, 3).is_err());
    }

    #[test]
    fn exact_model_is_recovered() {
        let taus = geometric_schedule(50.0, 1e6, 10).unwrap();
        let fit = extract_distance(&synthetic(1.2, -1.5, 1.0, &taus)).unwrap();
        assert!((fit.distance_estimate - 1.2).abs() < 1e-8);
        assert!((fit.prefactor_exponent + 1.5).abs() < 1e-7);
        assert!(fit.fit_residual < 1e-8);
        assert_eq!(fit.jump_sign, JumpSign::Positive);
        assert_eq!(fit.tau0_empirical, 50.0);
        assert!(fit.sign_stable);
    }

    #[test]
    fn fit_refused_with_few_samples() {
        let sweep = synthetic(1.0, 0.0, 1.0, &[10.0, 20.0, 30.0]);
        assert!(matches!(extract_distance(&sweep), Err(Error::Fit(_))));
    }

    #[test]
    fn noise_only_sweep_has_no_sign() {
        let mut sweep = synthetic(1.0, 0.0, 1.0, &[10.0, 20.0, 30.0, 40.0]);
        for s in &mut sweep.samples {
            s.value = ScaledValue::ZERO;
        }
        assert_eq!(jump_sign(&sweep), JumpSign::None);
        assert!(extract_distance(&sweep).is_err());
    }

    #[test]
    fn tau0_skips_early_sign_flips() {
        let taus = geometric_schedule(50.0, 1e6, 10).unwrap();
        let mut sweep = synthetic(0.5, 0.0, -1.0, &taus);
        sweep.samples[1].value = -sweep.samples[1].value;
        let fit = extract_distance(&sweep).unwrap();
        assert_eq!(fit.jump_sign, JumpSign::Negative);
        assert_eq!(fit.tau0_empirical, taus[2]);
        assert!(fit.sign_stable);
    }

    #[test]
    fn trichotomy_branches() {
        let taus = geometric_schedule(50.0, 1e6, 10).unwrap();
        for (sign, inf) in [
            (1.0, ThresholdOutcome::TendsToPlusInf),
            (-1.0, ThresholdOutcome::TendsToMinusInf),
        ] {
            let sweep = synthetic(0.8, -1.0, sign, &taus);
            let fit = extract_distance(&sweep).unwrap();
            let low = threshold_test(&sweep, &fit, 0.8).unwrap();
            assert_eq!(low.outcome, ThresholdOutcome::TendsToZero);
            assert!(low.consistent);
            let high = threshold_test(&sweep, &fit, 2.4).unwrap();
            assert_eq!(high.outcome, inf);
            assert!(high.consistent);
            let near = threshold_test(&sweep, &fit, 1.61).unwrap();
            assert_eq!(near.outcome, ThresholdOutcome::IndeterminateNearThreshold);
        }
    }

    #[test]
    fn fingerprints_are_stable_hex() {
        let a = fingerprint("abc");
        assert_eq!(a, "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert_ne!(a, fingerprint("abd"));
    }
}
