//! Domain, obstacle and probe geometry together with the set distances that
//! the enclosure method recovers.

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::field::ScalarField3D;

pub type Point = [f64; 3];

pub fn norm(v: Point) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn distance(a: Point, b: Point) -> f64 {
    norm(sub(a, b))
}

/// Axis-aligned box `[lo, hi]` discretized by `n[axis]` uniform intervals per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    lo: Point,
    hi: Point,
    n: [usize; 3],
}

pub const MIN_INTERVALS: usize = 8;

impl BoxDomain {
    pub fn new(lo: Point, hi: Point, n: [usize; 3]) -> Result<Self> {
        for axis in 0..3 {
            if !(lo[axis] < hi[axis]) {
                return config(format!(
                    "box requires lo < hi on axis {axis} (got {} >= {})",
                    lo[axis], hi[axis]
                ));
            }
            if n[axis] < MIN_INTERVALS {
                return config(format!(
                    "box needs at least {MIN_INTERVALS} intervals per axis (axis {axis} has {})",
                    n[axis]
                ));
            }
        }
        Ok(Self { lo, hi, n })
    }

    pub fn cube(half_width: f64, n: usize) -> Result<Self> {
        let h = half_width;
        Self::new([-h, -h, -h], [h, h, h], [n, n, n])
    }

    pub fn lo(&self) -> Point {
        self.lo
    }

    pub fn hi(&self) -> Point {
        self.hi
    }

    pub fn intervals(&self) -> [usize; 3] {
        self.n
    }

    pub fn spacing(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| (self.hi[a] - self.lo[a]) / self.n[a] as f64)
    }

    /// Same box with a different resolution.
    pub fn with_intervals(&self, n: [usize; 3]) -> Result<Self> {
        Self::new(self.lo, self.hi, n)
    }

    pub fn contains_closed(&self, x: Point) -> bool {
        (0..3).all(|a| x[a] >= self.lo[a] && x[a] <= self.hi[a])
    }

    /// Euclidean distance from `x` to the closed box (zero inside).
    pub fn distance_to(&self, x: Point) -> f64 {
        let d = [0, 1, 2].map(|a| (self.lo[a] - x[a]).max(0.0).max(x[a] - self.hi[a]));
        norm(d)
    }

    /// Largest distance from `x` to a point of the box (attained at a corner).
    pub fn farthest_distance(&self, x: Point) -> f64 {
        let d = [0, 1, 2].map(|a| (x[a] - self.lo[a]).abs().max((self.hi[a] - x[a]).abs()));
        norm(d)
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::new(self.lo.map(|v| v * k), self.hi.map(|v| v * k), self.n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallRegion {
    pub center: Point,
    pub radius: f64,
}

impl BallRegion {
    pub fn new(center: Point, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return config(format!("ball radius must be positive (got {radius})"));
        }
        Ok(Self { center, radius })
    }

    pub fn contains(&self, x: Point) -> bool {
        distance(x, self.center) < self.radius
    }
}

/// The obstacle D: a nonempty union of balls with pairwise disjoint closures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    balls: Vec<BallRegion>,
}

impl Obstacle {
    pub fn new(balls: Vec<BallRegion>) -> Result<Self> {
        if balls.is_empty() {
            return config("obstacle D must contain at least one ball");
        }
        for (i, a) in balls.iter().enumerate() {
            for b in &balls[i + 1..] {
                if distance(a.center, b.center) <= a.radius + b.radius {
                    return config("obstacle balls must have disjoint closures");
                }
            }
        }
        Ok(Self { balls })
    }

    pub fn ball(center: Point, radius: f64) -> Result<Self> {
        Self::new(vec![BallRegion::new(center, radius)?])
    }

    pub fn balls(&self) -> &[BallRegion] {
        &self.balls
    }

    pub fn contains(&self, x: Point) -> bool {
        self.balls.iter().any(|b| b.contains(x))
    }

    pub fn max_radius(&self) -> f64 {
        self.balls.iter().map(|b| b.radius).fold(0.0, f64::max)
    }
}

/// `dist(p, D) = inf_{x in D} |x - p|`; zero when `p` lies inside a ball.
pub fn dist_point_to_set(p: Point, balls: &[BallRegion]) -> Result<f64> {
    if balls.is_empty() {
        return config("distance to an empty obstacle is undefined");
    }
    Ok(balls
        .iter()
        .map(|b| (distance(p, b.center) - b.radius).max(0.0))
        .fold(f64::INFINITY, f64::min))
}

/// `R_D(p) = sup_{x in D} |x - p|`.
pub fn radius_of_enclosure(p: Point, balls: &[BallRegion]) -> Result<f64> {
    if balls.is_empty() {
        return config("enclosing radius of an empty obstacle is undefined");
    }
    Ok(balls
        .iter()
        .map(|b| distance(p, b.center) + b.radius)
        .fold(0.0, f64::max))
}

/// Distance from `x` to the boundary of D for `x` in D, zero outside.
///
/// For disjoint balls the nearest boundary point of a point inside ball `i`
/// lies on ball `i` itself.
pub fn dist_to_boundary_of_d(x: Point, balls: &[BallRegion]) -> f64 {
    balls
        .iter()
        .map(|b| (b.radius - distance(x, b.center)).max(0.0))
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeFlavor {
    Ext,
    Int,
}

/// Probe source geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProbeShape {
    /// Ball `B_eta(p)` outside the closed domain.
    Exterior { eta: f64 },
    /// Shell `R1 < |x - p| < R2` enclosing the domain.
    Interior { r1: f64, r2: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub center: Point,
    pub m: u32,
    pub shape: ProbeShape,
}

impl ProbeConfig {
    pub fn exterior(center: Point, eta: f64, m: u32) -> Result<Self> {
        if !(eta > 0.0) {
            return config(format!("probe radius eta must be positive (got {eta})"));
        }
        Ok(Self {
            center,
            m,
            shape: ProbeShape::Exterior { eta },
        })
    }

    pub fn interior(center: Point, r1: f64, r2: f64, m: u32) -> Result<Self> {
        if !(r1 > 0.0 && r1 < r2) {
            return config(format!("interior probe needs 0 < R1 < R2 (got R1={r1}, R2={r2})"));
        }
        Ok(Self {
            center,
            m,
            shape: ProbeShape::Interior { r1, r2 },
        })
    }

    pub fn flavor(&self) -> ProbeFlavor {
        match self.shape {
            ProbeShape::Exterior { .. } => ProbeFlavor::Ext,
            ProbeShape::Interior { .. } => ProbeFlavor::Int,
        }
    }

    /// Checks the probe placement against the domain.
    pub fn validate_against(&self, domain: &BoxDomain) -> Result<()> {
        match self.shape {
            ProbeShape::Exterior { eta } => {
                if domain.distance_to(self.center) <= eta {
                    return config(format!(
                        "B̄_η ∩ Ω̄ = ∅ violated: probe ball of radius {eta} reaches the domain \
                         (distance from p to Ω is {})",
                        domain.distance_to(self.center)
                    ));
                }
            }
            ProbeShape::Interior { r1, .. } => {
                let far = domain.farthest_distance(self.center);
                if far >= r1 {
                    return config(format!(
                        "Ω ⊂ B_{{R₁}} violated: farthest point of Ω is {far} from p but R₁ = {r1}"
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        let shape = match self.shape {
            ProbeShape::Exterior { eta } => ProbeShape::Exterior { eta: eta * k },
            ProbeShape::Interior { r1, r2 } => ProbeShape::Interior {
                r1: r1 * k,
                r2: r2 * k,
            },
        };
        Self {
            center: self.center.map(|v| v * k),
            m: self.m,
            shape,
        }
    }
}

/// `dist(K, D)`: `dist(p, D) - eta` for exterior probes, `R1 - R_D(p)` for interior ones.
pub fn probe_distance(probe: &ProbeConfig, balls: &[BallRegion]) -> Result<f64> {
    match probe.shape {
        ProbeShape::Exterior { eta } => Ok((dist_point_to_set(probe.center, balls)? - eta).max(0.0)),
        ProbeShape::Interior { r1, .. } => {
            let rd = radius_of_enclosure(probe.center, balls)?;
            if rd >= r1 {
                return Err(Error::Domain(format!(
                    "obstacle not enclosed: R_D(p) = {rd} >= R1 = {r1}"
                )));
            }
            Ok(r1 - rd)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum JumpKind {
    /// `h = amplitude` on D.
    Constant,
    /// `h = amplitude * dist(x, ∂D)^gamma` on D.
    Power { gamma: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JumpProfile {
    pub kind: JumpKind,
    pub amplitude: f64,
}

impl JumpProfile {
    pub fn constant(amplitude: f64) -> Self {
        Self {
            kind: JumpKind::Constant,
            amplitude,
        }
    }

    pub fn power(amplitude: f64, gamma: f64) -> Self {
        Self {
            kind: JumpKind::Power { gamma },
            amplitude,
        }
    }

    pub fn none() -> Self {
        Self::constant(0.0)
    }

    /// Exponent gamma of the lower bound `|h| >= C dist(x, ∂D)^gamma`.
    pub fn gamma(&self) -> f64 {
        match self.kind {
            JumpKind::Constant => 0.0,
            JumpKind::Power { gamma } => gamma,
        }
    }

    pub fn is_null(&self) -> bool {
        self.amplitude == 0.0
    }

    /// Deviation `h(x)` for a point at depth `depth = dist(x, ∂D)` inside D.
    pub fn value_at_depth(&self, depth: f64) -> f64 {
        match self.kind {
            JumpKind::Constant => self.amplitude,
            JumpKind::Power { gamma } => self.amplitude * depth.powf(gamma),
        }
    }

    /// `sup_D |h|`.
    pub fn sup_abs(&self, obstacle: &Obstacle) -> f64 {
        match self.kind {
            JumpKind::Constant => self.amplitude.abs(),
            JumpKind::Power { gamma } => self.amplitude.abs() * obstacle.max_radius().powf(gamma),
        }
    }
}

/// Background order, domain, obstacle and jump profile.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemConfig {
    pub alpha0: f64,
    pub domain: BoxDomain,
    pub obstacle: Obstacle,
    pub jump: JumpProfile,
}

impl ProblemConfig {
    pub fn new(alpha0: f64, domain: BoxDomain, obstacle: Obstacle, jump: JumpProfile) -> Result<Self> {
        let cfg = Self {
            alpha0,
            domain,
            obstacle,
            jump,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha0 < 1.0) {
            return config(format!("background order α₀ must lie in (0,1) (got {})", self.alpha0));
        }
        if let JumpKind::Power { gamma } = self.jump.kind {
            if !(gamma >= 0.0) {
                return config(format!("jump exponent gamma must be >= 0 (got {gamma})"));
            }
        }
        let lo = self.alpha0 - self.jump.sup_abs(&self.obstacle);
        let hi = self.alpha0 + self.jump.sup_abs(&self.obstacle);
        let (lo, hi) = if self.jump.amplitude >= 0.0 {
            (self.alpha0, hi)
        } else {
            (lo, self.alpha0)
        };
        if !(lo > 0.0 && hi < 1.0) {
            return config(format!(
                "order α = α₀ + h leaves (0,1): range [{lo}, {hi}]"
            ));
        }
        for b in self.obstacle.balls() {
            for a in 0..3 {
                if !(b.center[a] - b.radius > self.domain.lo()[a]
                    && b.center[a] + b.radius < self.domain.hi()[a])
                {
                    return config(format!(
                        "D̄ ⊂ Ω violated: ball at {:?} with radius {} leaves the box",
                        b.center, b.radius
                    ));
                }
            }
        }
        Ok(())
    }

    /// Order `α(x)` at a point.
    pub fn alpha_at(&self, x: Point) -> f64 {
        if self.jump.is_null() {
            return self.alpha0;
        }
        let balls = self.obstacle.balls();
        if !self.obstacle.contains(x) {
            return self.alpha0;
        }
        self.alpha0 + self.jump.value_at_depth(dist_to_boundary_of_d(x, balls))
    }

    /// Jump `h(x) = α(x) - α₀`.
    pub fn jump_at(&self, x: Point) -> f64 {
        self.alpha_at(x) - self.alpha0
    }

    pub fn with_intervals(&self, n: usize) -> Result<Self> {
        let mut out = self.clone();
        out.domain = self.domain.with_intervals([n, n, n])?;
        Ok(out)
    }

    /// All lengths multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Result<Self> {
        let balls = self
            .obstacle
            .balls()
            .iter()
            .map(|b| BallRegion::new(b.center.map(|v| v * k), b.radius * k))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            self.alpha0,
            self.domain.scaled(k)?,
            Obstacle::new(balls)?,
            self.jump,
        )
    }
}

/// Order field sampled at the grid nodes (each node is the center of its dual cell).
pub fn order_field(problem: &ProblemConfig) -> Result<ScalarField3D> {
    problem.validate()?;
    let field = ScalarField3D::from_fn(&problem.domain, |x| problem.alpha_at(x));
    if let Some(bad) = field.values().iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
        return config(format!("order field value {bad} outside (0,1)"));
    }
    Ok(field)
}
