//! Numbers carried as `mantissa * exp(log_scale)`.
//!
//! The special solutions contain factors such as `exp(eta * ttilde)` that leave
//! the `f64` range long before the asymptotic regime of interest is reached.
//! Every such quantity is stored with an integer natural-log exponent and a
//! mantissa whose magnitude lies in `[1, e)`.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaledValue {
    mantissa: f64,
    log_scale: f64,
}

impl ScaledValue {
    pub const ZERO: ScaledValue = ScaledValue {
        mantissa: 0.0,
        log_scale: 0.0,
    };

    pub const ONE: ScaledValue = ScaledValue {
        mantissa: 1.0,
        log_scale: 0.0,
    };

    /// Builds `mantissa * exp(log_scale)` and renormalizes.
    pub fn new(mantissa: f64, log_scale: f64) -> Self {
        debug_assert!(mantissa.is_finite(), "non-finite mantissa {mantissa}");
        debug_assert!(!log_scale.is_nan());
        if mantissa == 0.0 || log_scale == f64::NEG_INFINITY {
            return Self::ZERO;
        }
        let shift = mantissa.abs().ln().floor();
        let mut out = if shift == 0.0 {
            Self {
                mantissa,
                log_scale,
            }
        } else {
            Self {
                mantissa: mantissa / shift.exp(),
                log_scale: log_scale + shift,
            }
        };
        // Integer exponent keeps products and quotients exact in log_scale.
        let frac = out.log_scale - out.log_scale.floor();
        if frac != 0.0 {
            out.mantissa *= frac.exp();
            out.log_scale = out.log_scale.floor();
        }
        out.fix_range();
        out
    }

    pub fn from_f64(x: f64) -> Self {
        debug_assert!(x.is_finite());
        if x == 0.0 {
            return Self::ZERO;
        }
        let log_scale = x.abs().ln().floor();
        let mut out = Self {
            mantissa: x / log_scale.exp(),
            log_scale,
        };
        out.fix_range();
        out
    }

    /// Value with natural log of its magnitude equal to `ln_abs`.
    pub fn from_ln(ln_abs: f64, negative: bool) -> Self {
        if ln_abs == f64::NEG_INFINITY {
            return Self::ZERO;
        }
        let log_scale = ln_abs.floor();
        let m = (ln_abs - log_scale).exp();
        let mut out = Self {
            mantissa: if negative { -m } else { m },
            log_scale,
        };
        out.fix_range();
        out
    }

    fn fix_range(&mut self) {
        let e = std::f64::consts::E;
        while self.mantissa.abs() >= e {
            self.mantissa /= e;
            self.log_scale += 1.0;
        }
        while self.mantissa != 0.0 && self.mantissa.abs() < 1.0 {
            self.mantissa *= e;
            self.log_scale -= 1.0;
        }
    }

    pub fn mantissa(&self) -> f64 {
        self.mantissa
    }

    pub fn log_scale(&self) -> f64 {
        self.log_scale
    }

    pub fn is_zero(&self) -> bool {
        self.mantissa == 0.0
    }

    /// -1, 0 or 1.
    pub fn signum(&self) -> f64 {
        if self.mantissa == 0.0 {
            0.0
        } else {
            self.mantissa.signum()
        }
    }

    pub fn abs(self) -> Self {
        Self {
            mantissa: self.mantissa.abs(),
            log_scale: self.log_scale,
        }
    }

    /// Natural log of the magnitude; `-inf` for zero.
    pub fn ln_abs(&self) -> f64 {
        if self.mantissa == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.mantissa.abs().ln() + self.log_scale
        }
    }

    /// Plain `f64`; overflows to infinity or underflows to zero when out of range.
    pub fn to_f64(&self) -> f64 {
        if self.mantissa == 0.0 {
            0.0
        } else {
            self.mantissa * self.log_scale.exp()
        }
    }

    /// The value divided by `exp(log_scale)`, as a plain `f64`.
    pub fn relative_to(&self, log_scale: f64) -> f64 {
        if self.mantissa == 0.0 {
            0.0
        } else {
            self.mantissa * (self.log_scale - log_scale).exp()
        }
    }

    /// Multiplies by `exp(l)`.
    pub fn mul_exp(self, l: f64) -> Self {
        if self.is_zero() {
            return self;
        }
        Self::new(self.mantissa, self.log_scale + l)
    }

    pub fn powf(self, p: f64) -> Self {
        assert!(self.mantissa >= 0.0, "powf of a negative scaled value");
        if self.is_zero() {
            return if p == 0.0 { Self::ONE } else { Self::ZERO };
        }
        Self::from_ln(p * self.ln_abs(), false)
    }
}

impl Default for ScaledValue {
    fn default() -> Self {
        Self::ZERO
    }
}

impl From<f64> for ScaledValue {
    fn from(x: f64) -> Self {
        Self::from_f64(x)
    }
}

impl Mul for ScaledValue {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        if self.is_zero() || rhs.is_zero() {
            return Self::ZERO;
        }
        let mut out = Self {
            mantissa: self.mantissa * rhs.mantissa,
            log_scale: self.log_scale + rhs.log_scale,
        };
        out.fix_range();
        out
    }
}

impl Mul<f64> for ScaledValue {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        self * Self::from_f64(rhs)
    }
}

impl Div for ScaledValue {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        assert!(!rhs.is_zero(), "division by a zero scaled value");
        if self.is_zero() {
            return Self::ZERO;
        }
        let mut out = Self {
            mantissa: self.mantissa / rhs.mantissa,
            log_scale: self.log_scale - rhs.log_scale,
        };
        out.fix_range();
        out
    }
}

impl Add for ScaledValue {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        if self.is_zero() {
            return rhs;
        }
        if rhs.is_zero() {
            return self;
        }
        let (big, small) = if self.log_scale >= rhs.log_scale {
            (self, rhs)
        } else {
            (rhs, self)
        };
        let m = big.mantissa + small.mantissa * (small.log_scale - big.log_scale).exp();
        Self::new(m, big.log_scale)
    }
}

impl Neg for ScaledValue {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            mantissa: -self.mantissa,
            log_scale: self.log_scale,
        }
    }
}

impl Sub for ScaledValue {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self + (-rhs)
    }
}

impl std::iter::Sum for ScaledValue {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::ZERO, |a, b| a + b)
    }
}

impl PartialOrd for ScaledValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        let (sa, sb) = (self.signum(), other.signum());
        if sa != sb {
            return sa.partial_cmp(&sb);
        }
        if sa == 0.0 {
            return Some(Ordering::Equal);
        }
        let mag = self.ln_abs().partial_cmp(&other.ln_abs())?;
        Some(if sa > 0.0 { mag } else { mag.reverse() })
    }
}

impl fmt::Display for ScaledValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}*e^{}", self.mantissa, self.log_scale)
    }
}
