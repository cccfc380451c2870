//! Edge-weighted differentiable form of an expression tree.
//!
//! Every parent-to-child link carries one weight. A child's value is
//! multiplied by its edge weight before the parent primitive consumes it, so
//! with all weights at 1 the network computes exactly the tree. Weights are
//! indexed by the child's prefix position minus one.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::expr::{ExprTree, Symbol};
use crate::losses::{check_same_shape, PredictionLoss};

pub const DOCUMENT_VERSION: u32 = 1;

/// Standard deviation of the initial weights around 1.
pub const INIT_WEIGHT_SD: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Identity,
    /// `ln(1 + e^x)`, keeping the loss non-negative.
    Softplus,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "softplus" => Ok(Activation::Softplus),
            _ => Err(Error::usage(format!("unknown activation `{s}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Identity => "identity",
            Activation::Softplus => "softplus",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaLossNetwork {
    tree: ExprTree,
    weights: Vec<f64>,
    activation: Activation,
}

impl MetaLossNetwork {
    /// Compiles `tree` with weights drawn from `N(1, 1e-3)`.
    pub fn compile<R: Rng + ?Sized>(tree: &ExprTree, activation: Activation, rng: &mut R) -> Result<Self> {
        if !tree.satisfies_constraint() {
            return Err(Error::usage(format!(
                "`{tree}` must contain both y and f to be compiled"
            )));
        }
        let normal = Normal::new(1.0, INIT_WEIGHT_SD).expect("valid normal");
        let weights = (0..tree.edge_count()).map(|_| normal.sample(rng)).collect();
        Ok(Self {
            tree: tree.clone(),
            weights,
            activation,
        })
    }

    /// Network with explicit weights; any tree is accepted.
    pub fn with_weights(tree: ExprTree, weights: Vec<f64>, activation: Activation) -> Result<Self> {
        if weights.len() != tree.edge_count() {
            return Err(Error::usage(format!(
                "`{tree}` has {} edges but {} weights were given",
                tree.edge_count(),
                weights.len()
            )));
        }
        Ok(Self {
            tree,
            weights,
            activation,
        })
    }

    /// All weights set to 1.
    pub fn unit(tree: ExprTree, activation: Activation) -> Self {
        let weights = vec![1.0; tree.edge_count()];
        Self {
            tree,
            weights,
            activation,
        }
    }

    pub fn tree(&self) -> &ExprTree {
        &self.tree
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn edge_count(&self) -> usize {
        self.weights.len()
    }

    /// Adds the weights to `g` as differentiable scalars.
    pub fn bind(&self, g: &mut Graph) -> BoundNetwork<'_> {
        let weights = self.weights.iter().map(|&w| g.variable(Tensor::scalar(w))).collect();
        BoundNetwork { net: self, weights }
    }

    /// Builds the loss using the given weight nodes (one scalar per edge).
    pub fn forward_with(&self, g: &mut Graph, weights: &[NodeId], y: NodeId, f: NodeId) -> Result<NodeId> {
        check_same_shape(g, y, f)?;
        if weights.len() != self.weights.len() {
            return Err(Error::usage("one weight node per edge is required"));
        }
        let symbols = self.tree.symbols();
        let mut stack: Vec<NodeId> = Vec::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate().rev() {
            let v = match *s {
                Symbol::Pred => f,
                Symbol::Target => y,
                Symbol::One => g.scalar(1.0),
                Symbol::NegOne => g.scalar(-1.0),
                Symbol::Op(p) => {
                    let args: Vec<NodeId> = (0..p.arity()).map(|_| stack.pop().expect("well-formed tree")).collect();
                    g.apply_primitive(p, &args)?
                }
            };
            let v = if i > 0 { g.mul(v, weights[i - 1])? } else { v };
            stack.push(v);
        }
        let mut out = stack.pop().expect("non-empty tree");
        if self.activation == Activation::Softplus {
            out = g.softplus(out);
        }
        g.mean(out)
    }

    pub fn to_document(&self, meta: serde_json::Value) -> LossDocument {
        LossDocument {
            version: DOCUMENT_VERSION,
            expression: self.tree.canonical_key(),
            weights: self.weights.clone(),
            activation: self.activation,
            meta,
        }
    }

    pub fn from_document(doc: &LossDocument) -> Result<Self> {
        if doc.version != DOCUMENT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: doc.version,
                expected: DOCUMENT_VERSION,
            });
        }
        let tree: ExprTree = doc.expression.parse()?;
        Self::with_weights(tree, doc.weights.clone(), doc.activation)
    }

    pub fn to_json(&self, meta: serde_json::Value) -> String {
        serde_json::to_string_pretty(&self.to_document(meta)).expect("document serializes")
    }

    /// Parses a loss document, returning the network and its metadata.
    pub fn from_json(text: &str) -> Result<(Self, serde_json::Value)> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| json_parse_error(text, &e))?;
        // Check the version before the schema so newer documents fail clearly.
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v != DOCUMENT_VERSION as u64 => {
                return Err(Error::UnsupportedVersion {
                    found: v.min(u32::MAX as u64) as u32,
                    expected: DOCUMENT_VERSION,
                })
            }
            _ => {}
        }
        let doc: LossDocument = serde_json::from_value(value).map_err(|e| Error::Parse {
            position: 0,
            message: e.to_string(),
        })?;
        let net = Self::from_document(&doc)?;
        Ok((net, doc.meta))
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        std::fs::write(path, self.to_json(meta)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

impl PredictionLoss for MetaLossNetwork {
    /// Uses the stored weights as constants.
    fn build(&self, g: &mut Graph, y: NodeId, f: NodeId) -> Result<NodeId> {
        let w: Vec<NodeId> = self.weights.iter().map(|&w| g.scalar(w)).collect();
        self.forward_with(g, &w, y, f)
    }
}

/// A network whose weights live in a particular graph.
pub struct BoundNetwork<'a> {
    pub net: &'a MetaLossNetwork,
    pub weights: Vec<NodeId>,
}

impl PredictionLoss for BoundNetwork<'_> {
    fn build(&self, g: &mut Graph, y: NodeId, f: NodeId) -> Result<NodeId> {
        self.net.forward_with(g, &self.weights, y, f)
    }
}

/// Serialized loss: `{version, expression, weights, activation, meta}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossDocument {
    pub version: u32,
    pub expression: String,
    pub weights: Vec<f64>,
    pub activation: Activation,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn json_parse_error(text: &str, e: &serde_json::Error) -> Error {
    // serde_json reports 1-based line/column; convert to a byte offset.
    let offset: usize = text
        .split_inclusive('\n')
        .take(e.line().saturating_sub(1))
        .map(str::len)
        .sum::<usize>()
        + e.column().saturating_sub(1);
    Error::Parse {
        position: offset,
        message: e.to_string(),
    }
}
