//! The searchable function set and its protected scalar semantics.
//!
//! Every primitive maps any pair of finite reals to a finite real, except
//! where the result overflows `f64` (e.g. `sq(1e300)`); that is the closure
//! property the symbolic search relies on.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Offset used by the protected logarithm and square root.
pub const PROTECT_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    /// Analytical quotient `x1 / sqrt(1 + x2^2)`.
    Aq,
    Min,
    Max,
    Sign,
    Square,
    Abs,
    /// `ln(|x| + eps)`
    Log,
    /// `sqrt(|x| + eps)`
    Sqrt,
    Tanh,
}

impl Primitive {
    pub const ALL: [Primitive; 12] = [
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Aq,
        Primitive::Min,
        Primitive::Max,
        Primitive::Sign,
        Primitive::Square,
        Primitive::Abs,
        Primitive::Log,
        Primitive::Sqrt,
        Primitive::Tanh,
    ];

    pub const BINARY: [Primitive; 6] = [
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Aq,
        Primitive::Min,
        Primitive::Max,
    ];

    pub fn arity(self) -> usize {
        match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Aq | Primitive::Min | Primitive::Max => 2,
            _ => 1,
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Primitive::Add => "+",
            Primitive::Sub => "-",
            Primitive::Mul => "*",
            Primitive::Aq => "aq",
            Primitive::Min => "min",
            Primitive::Max => "max",
            Primitive::Sign => "sign",
            Primitive::Square => "sq",
            Primitive::Abs => "abs",
            Primitive::Log => "log",
            Primitive::Sqrt => "sqrt",
            Primitive::Tanh => "tanh",
        }
    }

    /// Scalar evaluation. Unary primitives ignore `x2`.
    #[inline]
    pub fn apply(self, x1: f64, x2: f64) -> f64 {
        match self {
            Primitive::Add => x1 + x2,
            Primitive::Sub => x1 - x2,
            Primitive::Mul => x1 * x2,
            Primitive::Aq => aq(x1, x2),
            Primitive::Min => {
                if x1 <= x2 {
                    x1
                } else {
                    x2
                }
            }
            Primitive::Max => {
                if x1 >= x2 {
                    x1
                } else {
                    x2
                }
            }
            Primitive::Sign => sign(x1),
            Primitive::Square => x1 * x1,
            Primitive::Abs => x1.abs(),
            Primitive::Log => protected_log(x1),
            Primitive::Sqrt => protected_sqrt(x1),
            Primitive::Tanh => x1.tanh(),
        }
    }
}

/// `x1 / sqrt(1 + x2^2)`, evaluated without overflowing for large `x2`.
#[inline]
pub fn aq(x1: f64, x2: f64) -> f64 {
    x1 / 1f64.hypot(x2)
}

/// Sign with `sign(0) = 0`.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
pub fn protected_log(x: f64) -> f64 {
    (x.abs() + PROTECT_EPS).ln()
}

#[inline]
pub fn protected_sqrt(x: f64) -> f64 {
    (x.abs() + PROTECT_EPS).sqrt()
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Primitive::ALL
            .iter()
            .copied()
            .find(|p| p.token() == s)
            .ok_or_else(|| Error::usage(format!("unknown primitive `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aq_at_unit_zero_is_one() {
        assert_eq!(Primitive::Aq.apply(1.0, 0.0), 1.0);
    }

    #[test]
    fn protected_log_of_zero() {
        let v = Primitive::Log.apply(0.0, 0.0);
        assert!((v - (1e-7f64).ln()).abs() < 1e-12);
        assert!((v + 16.1181).abs() < 1e-4);
    }

    #[test]
    fn aq_survives_huge_denominator() {
        let v = aq(1e300, 1e300);
        assert!(v.is_finite());
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn min_max_prefer_first_argument_on_ties() {
        // -0.0 == 0.0, so the first argument's sign bit identifies it.
        assert!(Primitive::Min.apply(-0.0, 0.0).is_sign_negative());
        assert!(Primitive::Max.apply(-0.0, 0.0).is_sign_negative());
    }

    #[test]
    fn tokens_parse_back() {
        for p in Primitive::ALL {
            assert_eq!(p.token().parse::<Primitive>().unwrap(), p);
        }
        assert!("div".parse::<Primitive>().is_err());
    }
}
