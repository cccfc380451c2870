//! Losses over `(y, f)` pairs as graph builders.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, UnaryFn};
use crate::error::{Error, Result};
use crate::expr::ExprTree;

/// Anything that turns targets `y` and predictions `f` (same shape) into a
/// scalar loss node.
pub trait PredictionLoss: Sync {
    fn build(&self, g: &mut Graph, y: NodeId, f: NodeId) -> Result<NodeId>;
}

impl<L: PredictionLoss + ?Sized> PredictionLoss for &L {
    fn build(&self, g: &mut Graph, y: NodeId, f: NodeId) -> Result<NodeId> {
        (**self).build(g, y, f)
    }
}

pub(crate) fn check_same_shape(g: &Graph, y: NodeId, f: NodeId) -> Result<()> {
    if g.value(y).shape() != g.value(f).shape() {
        return Err(Error::usage(format!(
            "targets {:?} and predictions {:?} differ in shape",
            g.value(y).shape(),
            g.value(f).shape()
        )));
    }
    Ok(())
}

/// Hand-written losses, averaged over every element of the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BuiltinLoss {
    /// `mean((y - f)^2)`
    SquaredError,
    /// `mean(-y * log(|f| + eps))`, with the protected logarithm.
    CrossEntropy,
}

impl BuiltinLoss {
    /// The expression this loss coincides with at unit weights.
    pub fn tree(self) -> ExprTree {
        let text = match self {
            BuiltinLoss::SquaredError => "(sq (- y f))",
            BuiltinLoss::CrossEntropy => "(* -1 (* y (log f)))",
        };
        text.parse().expect("static expression")
    }

    pub fn name(self) -> &'static str {
        match self {
            BuiltinLoss::SquaredError => "squared-error",
            BuiltinLoss::CrossEntropy => "cross-entropy",
        }
    }
}

impl fmt::Display for BuiltinLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BuiltinLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared-error" | "mse" | "squared" => Ok(BuiltinLoss::SquaredError),
            "cross-entropy" | "ce" => Ok(BuiltinLoss::CrossEntropy),
            _ => Err(Error::usage(format!(
                "unknown built-in loss `{s}` (expected squared-error or cross-entropy)"
            ))),
        }
    }
}

impl PredictionLoss for BuiltinLoss {
    fn build(&self, g: &mut Graph, y: NodeId, f: NodeId) -> Result<NodeId> {
        check_same_shape(g, y, f)?;
        // Operation order mirrors the unit-weight network of `self.tree()`
        // so both produce bitwise-identical values and gradients.
        let per_elem = match self {
            BuiltinLoss::SquaredError => {
                let d = g.sub(y, f)?;
                g.square(d)
            }
            BuiltinLoss::CrossEntropy => {
                let minus_one = g.scalar(-1.0);
                let logf = g.unary(UnaryFn::PLog, f);
                let yl = g.mul(y, logf)?;
                g.mul(minus_one, yl)?
            }
        };
        g.mean(per_elem)
    }
}

/// `factor * inner`, with the factor applied outside the reduction.
#[derive(Clone, Debug)]
pub struct Scaled<L> {
    pub factor: f64,
    pub inner: L,
}

impl<L: PredictionLoss> PredictionLoss for Scaled<L> {
    fn build(&self, g: &mut Graph, y: NodeId, f: NodeId) -> Result<NodeId> {
        let l = self.inner.build(g, y, f)?;
        g.scale(l, self.factor)
    }
}
