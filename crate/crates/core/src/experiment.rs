//! Experiment configuration (TOML) and the pipelines driven by the CLI.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::elliptic::SolveOptions;
use crate::enclosure::{
    extract_distance, fingerprint, geometric_schedule, run_sweep, threshold_test, SweepFit, SweepResult,
    ThresholdReport, OVERFLOW_GUARD,
};
use crate::error::{config, Error, Result};
use crate::geometry::{
    probe_distance, BallRegion, BoxDomain, JumpProfile, Obstacle, Point, ProbeConfig, ProbeShape, ProblemConfig,
};
use crate::indicator::{IndicatorEngine, IndicatorSettings};
use crate::scaled::ScaledValue;
use crate::special::{coeff_a, coeff_a_asymptote, coeff_b, coeff_b_asymptote, oracle, Background, SpecialSolutionParams};
use crate::timedomain::{indicator_from_data, simulate_measurement, write_measurement_csv, TimeDomainSettings};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    problem: RawProblem,
    domain: RawDomain,
    obstacle: RawObstacle,
    jump: RawJump,
    probe: RawProbe,
    schedule: RawSchedule,
    #[serde(default)]
    threshold: RawThreshold,
    #[serde(default)]
    solver: RawSolver,
    #[serde(default)]
    timedomain: RawTimeDomain,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProblem {
    alpha0: f64,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Intervals {
    Uniform(usize),
    PerAxis([usize; 3]),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDomain {
    lo: Point,
    hi: Point,
    n: Intervals,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBall {
    center: Point,
    radius: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObstacle {
    balls: Vec<RawBall>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawJump {
    kind: String,
    amplitude: f64,
    gamma: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProbe {
    kind: String,
    center: Point,
    #[serde(default)]
    m: u32,
    eta: Option<f64>,
    r1: Option<f64>,
    r2: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    tau: Option<Vec<f64>>,
    tau_min: Option<f64>,
    tau_max: Option<f64>,
    count: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawThreshold {
    #[serde(default)]
    t: Vec<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    rel_tol: Option<f64>,
    max_iter: Option<usize>,
    trace_order: Option<u8>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTimeDomain {
    n: Option<usize>,
    tau: Option<Vec<f64>>,
    t_max: Option<f64>,
    dt: Option<f64>,
    s_max: Option<f64>,
    n_quad: Option<usize>,
    solve_tol: Option<f64>,
    truncation_tol: Option<f64>,
    tail_tol: Option<f64>,
    write_measurement: Option<bool>,
    measurement_stride: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
}

/// Settings for the measurement round trip.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundtripSettings {
    /// Grid intervals per axis for the simulation (defaults to the sweep grid).
    pub intervals: Option<usize>,
    pub taus: Vec<f64>,
    pub settings: TimeDomainSettings,
    pub write_measurement: bool,
    pub measurement_stride: usize,
}

/// Fully validated experiment description.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub probe: ProbeConfig,
    pub tau_schedule: Vec<f64>,
    pub t_values: Vec<f64>,
    pub indicator: IndicatorSettings,
    pub roundtrip: RoundtripSettings,
    pub output_dir: Option<PathBuf>,
    /// SHA-256 of the configuration text.
    pub fingerprint: String,
}

impl ExperimentConfig {
    /// `dist(K, D)` from the configured geometry.
    pub fn exact_distance(&self) -> Result<f64> {
        probe_distance(&self.probe, self.problem.obstacle.balls())
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
    let n = match raw.domain.n {
        Intervals::Uniform(n) => [n; 3],
        Intervals::PerAxis(n) => n,
    };
    let domain = BoxDomain::new(raw.domain.lo, raw.domain.hi, n)?;
    let balls = raw
        .obstacle
        .balls
        .iter()
        .map(|b| BallRegion::new(b.center, b.radius))
        .collect::<Result<Vec<_>>>()?;
    let obstacle = Obstacle::new(balls)?;
    let jump = match (raw.jump.kind.as_str(), raw.jump.gamma) {
        ("constant", None) => JumpProfile::constant(raw.jump.amplitude),
        ("power", Some(g)) => JumpProfile::power(raw.jump.amplitude, g),
        ("constant", Some(_)) => return config("jump.gamma is only valid for kind = \"power\""),
        ("power", None) => return config("jump kind \"power\" needs jump.gamma"),
        (k, _) => return config(format!("unknown jump kind \"{k}\" (expected \"constant\" or \"power\")")),
    };
    let problem = ProblemConfig::new(raw.problem.alpha0, domain, obstacle, jump)?;

    let p = &raw.probe;
    let probe = match (p.kind.as_str(), p.eta, p.r1, p.r2) {
        ("exterior", Some(eta), None, None) => ProbeConfig::exterior(p.center, eta, p.m)?,
        ("interior", None, Some(r1), Some(r2)) => ProbeConfig::interior(p.center, r1, r2, p.m)?,
        ("exterior", ..) => return config("exterior probe takes eta (and no r1/r2)"),
        ("interior", ..) => return config("interior probe takes r1 and r2 (and no eta)"),
        (k, ..) => return config(format!("unknown probe kind \"{k}\" (expected \"exterior\" or \"interior\")")),
    };
    probe.validate_against(&problem.domain)?;
    let distance = probe_distance(&probe, problem.obstacle.balls())?;

    let s = &raw.schedule;
    let tau_schedule = match (&s.tau, s.tau_min, s.tau_max, s.count) {
        (Some(list), None, None, None) => list.clone(),
        (None, Some(lo), Some(hi), Some(count)) => geometric_schedule(lo, hi, count)?,
        _ => return config("schedule needs either tau = [...] or tau_min, tau_max and count"),
    };
    if tau_schedule.iter().any(|&t| !(t > 1.0)) {
        return config("every tau in the schedule must exceed 1");
    }
    if tau_schedule.windows(2).any(|w| !(w[1] > w[0])) {
        return config("tau schedule must be strictly increasing");
    }
    if let Some(&bad) = tau_schedule
        .iter()
        .find(|&&t| 2.0 * t.powf(problem.alpha0 / 2.0) * distance > OVERFLOW_GUARD)
    {
        return config(format!("tau = {bad} breaks the overflow guard 2 τ̃ dist <= {OVERFLOW_GUARD}"));
    }
    if raw.threshold.t.iter().any(|&t| !(t >= 0.0)) {
        return config("threshold values T must be non-negative");
    }

    let defaults = SolveOptions::default();
    let indicator = IndicatorSettings {
        solve: SolveOptions {
            rel_tol: raw.solver.rel_tol.unwrap_or(defaults.rel_tol),
            max_iter: raw.solver.max_iter,
        },
        trace_order: raw.solver.trace_order.unwrap_or(2),
    };
    if !(indicator.solve.rel_tol > 0.0) || !matches!(indicator.trace_order, 1 | 2) {
        return config("solver.rel_tol must be positive and solver.trace_order 1 or 2");
    }

    let td = &raw.timedomain;
    let base = TimeDomainSettings::default();
    let settings = TimeDomainSettings {
        t_max: td.t_max.unwrap_or(base.t_max),
        dt: td.dt.unwrap_or(base.dt),
        s_max: td.s_max.unwrap_or(base.s_max),
        n_quad: td.n_quad.unwrap_or(base.n_quad),
        solve_tol: td.solve_tol.unwrap_or(base.solve_tol),
        truncation_tol: td.truncation_tol.unwrap_or(base.truncation_tol),
        tail_tol: td.tail_tol.unwrap_or(base.tail_tol),
    };
    settings.validate().map_err(|e| Error::Config(e.to_string()))?;
    let rt_taus = td.tau.clone().unwrap_or_else(|| vec![2.0, 3.0, 5.0]);
    if rt_taus.iter().any(|&t| !(t > 1.0)) {
        return config("timedomain.tau values must exceed 1");
    }
    if let Some(n) = td.n {
        problem.with_intervals(n)?;
    }

    Ok(ExperimentConfig {
        problem,
        probe,
        tau_schedule,
        t_values: raw.threshold.t.clone(),
        indicator,
        roundtrip: RoundtripSettings {
            intervals: td.n,
            taus: rt_taus,
            settings,
            write_measurement: td.write_measurement.unwrap_or(false),
            measurement_stride: td.measurement_stride.unwrap_or(10).max(1),
        },
        output_dir: raw.output.dir,
        fingerprint: fingerprint(text),
    })
}

/// Deterministic number formatting for every emitted CSV value.
pub fn fmt_num(x: f64) -> String {
    format!("{x:e}")
}

/// In-memory CSV table with a column dictionary.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<(&'static str, &'static str)>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, columns: &[(&'static str, &'static str)]) -> Self {
        Self {
            name: name.to_string(),
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let idx = self.columns.iter().position(|(c, _)| *c == name)?;
        Some(self.rows.iter().map(|r| r[idx].as_str()).collect())
    }

    /// Writes `<name>.csv` and `<name>.columns.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(dir.join(format!("{}.csv", self.name)))?;
        w.write_record(self.columns.iter().map(|(c, _)| *c))?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        let mut d = csv::Writer::from_path(dir.join(format!("{}.columns.csv", self.name)))?;
        d.write_record(["column", "description"])?;
        for (c, desc) in &self.columns {
            d.write_record([*c, *desc])?;
        }
        d.flush()?;
        Ok(())
    }
}

fn scaled_cols(v: ScaledValue) -> [String; 2] {
    [fmt_num(v.mantissa()), fmt_num(v.log_scale())]
}

const SAMPLE_COLUMNS: &[(&str, &str)] = &[
    ("tau", "Laplace parameter"),
    ("ttilde", "tau^(alpha0/2)"),
    ("I_mantissa", "indicator I(tau) = I_mantissa * exp(I_log_scale)"),
    ("I_log_scale", "natural-log scale of I"),
    ("scaled_log", "ln|I| / ttilde"),
    ("I_gauss_mantissa", "I with a 2x2 Gauss rule per face, mantissa"),
    ("I_gauss_log_scale", "I with a 2x2 Gauss rule per face, log scale"),
    ("I_volume_mantissa", "volume form of I over the obstacle, mantissa"),
    ("I_volume_log_scale", "volume form of I over the obstacle, log scale"),
    ("lower_mantissa", "lower sandwich bound, mantissa"),
    ("lower_log_scale", "lower sandwich bound, log scale"),
    ("upper_mantissa", "upper sandwich bound, mantissa"),
    ("upper_log_scale", "upper sandwich bound, log scale"),
    ("noise_floor_mantissa", "discretization/solver noise floor, mantissa"),
    ("noise_floor_log_scale", "discretization/solver noise floor, log scale"),
    ("above_noise", "1 if |I| exceeds the noise floor"),
    ("resolution", "ttilde times the grid spacing"),
    ("usable", "1 if above the noise floor and ttilde h <= 1; only these enter fits"),
    ("residual", "true relative residual of the scattered-field solve"),
    ("iterations", "conjugate-gradient iterations"),
];

pub fn samples_table(sweep: &SweepResult) -> Table {
    let mut t = Table::new("samples", SAMPLE_COLUMNS);
    for s in &sweep.samples {
        let mut row = vec![fmt_num(s.tau), fmt_num(sweep.ttilde(s.tau))];
        row.extend(scaled_cols(s.value));
        row.push(fmt_num(s.scaled_log));
        for v in [s.value_gauss, s.value_volume, s.lower_bound, s.upper_bound, s.noise_floor] {
            row.extend(scaled_cols(v));
        }
        row.push(u8::from(s.above_noise()).to_string());
        row.push(fmt_num(s.resolution));
        row.push(u8::from(s.usable()).to_string());
        row.push(fmt_num(s.solver_residual));
        row.push(s.iterations.to_string());
        t.push(row);
    }
    t
}

fn failures_table(sweep: &SweepResult) -> Table {
    let mut t = Table::new(
        "failures",
        &[("tau", "Laplace parameter of the failed sample"), ("message", "error report")],
    );
    for f in &sweep.failures {
        t.push(vec![fmt_num(f.tau), f.message.clone()]);
    }
    t
}

const FIT_COLUMNS: &[(&str, &str)] = &[
    ("status", "ok, or refused when too few samples clear the noise floor"),
    ("distance_estimate", "fitted dist(K, D)"),
    ("exact_distance", "dist(K, D) from the configured geometry"),
    ("jump_sign", "positive, negative or none"),
    ("prefactor_exponent", "fitted c in ln|I| = -2 d ttilde + c ln tau + b"),
    ("intercept", "fitted b"),
    ("residual", "RMS deviation of ln|I| from the model"),
    ("tau0_empirical", "smallest tau from which every sample is usable with the final sign"),
    ("used_samples", "samples entering the fit"),
    ("sign_stable", "1 if every usable sample has the final sign"),
    ("warning", "fit diagnostics"),
    ("config_sha256", "fingerprint of the configuration text"),
];

fn fit_table(cfg: &ExperimentConfig, fit: &std::result::Result<SweepFit, String>) -> Result<Table> {
    let mut t = Table::new("fit", FIT_COLUMNS);
    let exact = fmt_num(cfg.exact_distance()?);
    let row = match fit {
        Ok(f) => vec![
            "ok".into(),
            fmt_num(f.distance_estimate),
            exact,
            f.jump_sign.to_string(),
            fmt_num(f.prefactor_exponent),
            fmt_num(f.intercept),
            fmt_num(f.fit_residual),
            fmt_num(f.tau0_empirical),
            f.used_samples.to_string(),
            u8::from(f.sign_stable).to_string(),
            f.warning.clone().unwrap_or_default(),
            cfg.fingerprint.clone(),
        ],
        Err(msg) => vec![
            "refused".into(),
            String::new(),
            exact,
            "none".into(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            "0".into(),
            String::new(),
            msg.clone(),
            cfg.fingerprint.clone(),
        ],
    };
    t.push(row);
    Ok(t)
}

fn threshold_table(reports: &[ThresholdReport]) -> Table {
    let mut t = Table::new(
        "thresholds",
        &[
            ("T", "threshold parameter"),
            ("outcome", "empirical limit of exp(ttilde T) I(tau)"),
            ("trend_slope", "slope in ttilde of ln|I| + ttilde T - c ln tau over the upper sweep"),
            ("analytic", "limit predicted from the fitted distance and sign"),
            ("consistent", "1 if outcome and prediction agree"),
        ],
    );
    for r in reports {
        t.push(vec![
            fmt_num(r.t),
            r.outcome.to_string(),
            fmt_num(r.trend_slope),
            r.analytic.to_string(),
            u8::from(r.consistent).to_string(),
        ]);
    }
    t
}

/// Pipeline output: tables plus a human-readable summary.
#[derive(Clone, Debug, Default)]
pub struct Artifacts {
    pub tables: Vec<Table>,
    pub summary: String,
}

impl Artifacts {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for t in &self.tables {
            t.write(dir)?;
        }
        Ok(())
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }
}

pub fn sweep(cfg: &ExperimentConfig, parallel: bool) -> Result<SweepResult> {
    let engine = IndicatorEngine::new(&cfg.problem, &cfg.probe, cfg.indicator)?;
    run_sweep(&engine, &cfg.tau_schedule, parallel)
}

fn sweep_tables(s: &SweepResult) -> Vec<Table> {
    let mut out = vec![samples_table(s)];
    if !s.failures.is_empty() {
        out.push(failures_table(s));
    }
    out
}

pub fn run_sweep_pipeline(cfg: &ExperimentConfig, parallel: bool) -> Result<Artifacts> {
    let s = sweep(cfg, parallel)?;
    let summary = format!(
        "{} samples ({} above noise, {} failed)\n",
        s.samples.len(),
        s.usable().len(),
        s.failures.len()
    );
    Ok(Artifacts {
        tables: sweep_tables(&s),
        summary,
    })
}

pub fn run_reconstruct(cfg: &ExperimentConfig, parallel: bool) -> Result<Artifacts> {
    let s = sweep(cfg, parallel)?;
    let fit = match extract_distance(&s) {
        Ok(f) => Ok(f),
        Err(Error::Fit(msg)) => Err(msg),
        Err(e) => return Err(e),
    };
    let summary = match &fit {
        Ok(f) => format!(
            "distance estimate {:.6} (exact {:.6}), jump sign {}, residual {:.3e}\n",
            f.distance_estimate,
            cfg.exact_distance()?,
            f.jump_sign,
            f.fit_residual
        ),
        Err(msg) => format!("distance fit refused: {msg}\n"),
    };
    let mut tables = sweep_tables(&s);
    tables.push(fit_table(cfg, &fit)?);
    Ok(Artifacts { tables, summary })
}

pub fn run_threshold(cfg: &ExperimentConfig, parallel: bool) -> Result<Artifacts> {
    if cfg.t_values.is_empty() {
        return config("threshold pipeline needs [threshold] t = [...]");
    }
    let s = sweep(cfg, parallel)?;
    let fit = extract_distance(&s)?;
    let reports = cfg
        .t_values
        .iter()
        .map(|&t| threshold_test(&s, &fit, t))
        .collect::<Result<Vec<_>>>()?;
    let mut summary = String::new();
    for r in &reports {
        let _ = writeln!(summary, "T = {:.4}: {} (predicted {})", r.t, r.outcome, r.analytic);
    }
    let mut tables = sweep_tables(&s);
    tables.push(fit_table(cfg, &Ok(fit))?);
    tables.push(threshold_table(&reports));
    Ok(Artifacts { tables, summary })
}

/// One line of the oracle suite.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleCheck {
    pub name: &'static str,
    pub value: f64,
    pub tolerance: f64,
    /// `value <= tolerance`, or `value >= tolerance` for lower bounds.
    pub lower_bound: bool,
}

impl OracleCheck {
    pub fn passed(&self) -> bool {
        if self.lower_bound {
            self.value >= self.tolerance
        } else {
            self.value <= self.tolerance
        }
    }
}

/// Closed-form coefficient ratio to its leading asymptote at `ttilde · L = kl`.
pub fn asymptotic_ratio_error(probe: &ProbeConfig, kl: f64) -> Result<f64> {
    let m = probe.m;
    let ratio = match probe.shape {
        ProbeShape::Exterior { eta } => {
            let t = kl / eta;
            coeff_a(m, eta, t)? / coeff_a_asymptote(m, eta, t)
        }
        ProbeShape::Interior { r1, r2 } => {
            let t = kl / r1;
            coeff_b(m, r1, r2, t)? / coeff_b_asymptote(m, r1, r2, t)
        }
    };
    Ok((ratio.to_f64() - 1.0).abs())
}

/// Max relative gap between the closed form and direct volume quadrature at
/// `count` random points of the domain.
pub fn closed_form_vs_quadrature(problem: &ProblemConfig, probe: &ProbeConfig, tau: f64, count: usize, seed: u64) -> Result<f64> {
    let params = SpecialSolutionParams::new(*probe, tau, problem.alpha0)?;
    let bg = Background::new(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (problem.domain.lo(), problem.domain.hi());
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let x: Point = std::array::from_fn(|a| rng.gen_range(lo[a]..=hi[a]));
        let closed = bg.v(x)?.to_f64();
        let brute = oracle::v_by_quadrature(x, probe, params.ttilde(), 12);
        worst = worst.max(((closed - brute) / brute).abs());
    }
    Ok(worst)
}

pub fn oracle_suite(problem: &ProblemConfig, probe: &ProbeConfig) -> Result<Vec<OracleCheck>> {
    let closed = closed_form_vs_quadrature(problem, probe, 30.0, 20, 7)?;
    let params = SpecialSolutionParams::new(*probe, 10.0, problem.alpha0)?;
    let orders = oracle::pde_residual_orders(&problem.domain.with_intervals([8, 8, 8])?, &params, &[8, 16, 32])?;
    let min_order = orders.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(vec![
        OracleCheck {
            name: "closed_form_vs_quadrature",
            value: closed,
            tolerance: 1e-6,
            lower_bound: false,
        },
        OracleCheck {
            name: "asymptotic_ratio_at_kl_30",
            value: asymptotic_ratio_error(probe, 30.0)?,
            tolerance: 0.02,
            lower_bound: false,
        },
        OracleCheck {
            name: "asymptotic_ratio_at_kl_1000",
            value: asymptotic_ratio_error(probe, 1000.0)?,
            tolerance: 0.02,
            lower_bound: false,
        },
        OracleCheck {
            name: "pde_residual_order",
            value: min_order,
            tolerance: 1.9,
            lower_bound: true,
        },
    ])
}

pub fn run_verify_oracles(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let checks = oracle_suite(&cfg.problem, &cfg.probe)?;
    let mut t = Table::new(
        "oracles",
        &[
            ("check", "oracle comparison"),
            ("value", "max relative error, or observed order"),
            ("tolerance", "acceptance threshold"),
            ("kind", "max (value must not exceed) or min (value must reach)"),
            ("passed", "1 if within tolerance"),
        ],
    );
    let mut summary = String::new();
    for c in &checks {
        t.push(vec![
            c.name.to_string(),
            fmt_num(c.value),
            fmt_num(c.tolerance),
            if c.lower_bound { "min" } else { "max" }.to_string(),
            u8::from(c.passed()).to_string(),
        ]);
        let _ = writeln!(
            summary,
            "{:<28} {:>12.4e}  (tol {:.1e})  {}",
            c.name,
            c.value,
            c.tolerance,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    Ok(Artifacts {
        tables: vec![t],
        summary,
    })
}

/// Data-side and analysis-side indicators at one τ.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundtripRow {
    pub tau: f64,
    pub analysis: ScaledValue,
    pub data: ScaledValue,
    pub rel_diff: f64,
}

/// Simulates a measurement and compares both indicator paths, writing the raw
/// measurement into `measurement_dir` when requested.
pub fn roundtrip(cfg: &ExperimentConfig, measurement_dir: Option<&Path>) -> Result<Vec<RoundtripRow>> {
    let rt = &cfg.roundtrip;
    let problem = match rt.intervals {
        Some(n) => cfg.problem.with_intervals(n)?,
        None => cfg.problem.clone(),
    };
    let m = simulate_measurement(&problem, &cfg.probe, &rt.settings)?;
    if let (true, Some(dir)) = (rt.write_measurement, measurement_dir) {
        fs::create_dir_all(dir)?;
        let f = fs::File::create(dir.join("measurement.csv"))?;
        write_measurement_csv(&m, std::io::BufWriter::new(f), rt.measurement_stride)?;
    }
    let engine = IndicatorEngine::new(&problem, &cfg.probe, cfg.indicator)?;
    rt.taus
        .iter()
        .map(|&tau| {
            let analysis = engine.sample(tau)?.value;
            let data = indicator_from_data(&m, tau, &cfg.probe, problem.alpha0, rt.settings.tail_tol)?.value;
            let a = analysis.to_f64();
            let d = data.to_f64();
            let rel_diff = if a == 0.0 { d.abs() } else { ((d - a) / a).abs() };
            Ok(RoundtripRow {
                tau,
                analysis,
                data,
                rel_diff,
            })
        })
        .collect()
}

pub fn run_roundtrip(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Artifacts> {
    let rows = roundtrip(cfg, out)?;
    let mut t = Table::new(
        "roundtrip",
        &[
            ("tau", "Laplace parameter"),
            ("analysis_mantissa", "indicator from the scattered-field solve, mantissa"),
            ("analysis_log_scale", "indicator from the scattered-field solve, log scale"),
            ("data_mantissa", "indicator from the simulated time-domain data, mantissa"),
            ("data_log_scale", "indicator from the simulated time-domain data, log scale"),
            ("rel_diff", "|data - analysis| / |analysis|"),
        ],
    );
    let mut summary = String::new();
    for r in &rows {
        let mut row = vec![fmt_num(r.tau)];
        row.extend(scaled_cols(r.analysis));
        row.extend(scaled_cols(r.data));
        row.push(fmt_num(r.rel_diff));
        t.push(row);
        let _ = writeln!(summary, "tau = {}: relative difference {:.3e}", r.tau, r.rel_diff);
    }
    Ok(Artifacts {
        tables: vec![t],
        summary,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pipeline {
    Sweep,
    Reconstruct,
    Threshold,
    VerifyOracles,
    Roundtrip,
}

/// Runs `pipeline` and writes its artifacts into `out`.
pub fn run(cfg: &ExperimentConfig, pipeline: Pipeline, out: &Path, parallel: bool) -> Result<Artifacts> {
    fs::create_dir_all(out)?;
    let art = match pipeline {
        Pipeline::Sweep => run_sweep_pipeline(cfg, parallel)?,
        Pipeline::Reconstruct => run_reconstruct(cfg, parallel)?,
        Pipeline::Threshold => run_threshold(cfg, parallel)?,
        Pipeline::VerifyOracles => run_verify_oracles(cfg)?,
        Pipeline::Roundtrip => run_roundtrip(cfg, Some(out))?,
    };
    art.write(out)?;
    Ok(art)
}
