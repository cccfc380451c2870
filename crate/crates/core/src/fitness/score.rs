use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Lower-is-better fitness (error rate or MSE).
///
/// Non-finite values collapse to [`Fitness::WORST`], which orders after every
/// finite value.
#[derive(Clone, Copy, Serialize, Deserialize)]
#[serde(from = "Option<f64>", into = "Option<f64>")]
pub struct Fitness(f64);

impl Fitness {
    pub const WORST: Fitness = Fitness(f64::INFINITY);

    pub fn new(value: f64) -> Self {
        if value.is_nan() || value == f64::INFINITY {
            Self::WORST
        } else {
            Fitness(value)
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_worst(self) -> bool {
        self.0 == f64::INFINITY
    }
}

// JSON has no infinity; the worst sentinel is stored as null.
impl From<Option<f64>> for Fitness {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Self::WORST, Self::new)
    }
}

impl From<Fitness> for Option<f64> {
    fn from(f: Fitness) -> Self {
        (!f.is_worst()).then_some(f.0)
    }
}

impl PartialEq for Fitness {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Fitness {}

impl PartialOrd for Fitness {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Fitness {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl fmt::Debug for Fitness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_worst() {
            f.write_str("Fitness(worst)")
        } else {
            write!(f, "Fitness({})", self.0)
        }
    }
}

impl fmt::Display for Fitness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_worst() {
            f.write_str("worst")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worst_sorts_after_everything_finite() {
        for v in [0.0, 1.0, 1e300, f64::MAX, -5.0] {
            assert!(Fitness::new(v) < Fitness::WORST);
        }
        assert!(Fitness::new(f64::NAN).is_worst());
        assert_eq!(Fitness::new(f64::NAN), Fitness::WORST);
    }

    #[test]
    fn json_round_trip_keeps_the_sentinel() {
        let s = serde_json::to_string(&[Fitness::new(0.25), Fitness::WORST]).unwrap();
        assert_eq!(s, "[0.25,null]");
        let back: Vec<Fitness> = serde_json::from_str(&s).unwrap();
        assert_eq!(back, vec![Fitness::new(0.25), Fitness::WORST]);
    }
}
