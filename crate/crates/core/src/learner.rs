//! Base learners: a trait over parameterized models and a small MLP.

use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::data::TaskKind;
use crate::error::{Error, Result};

/// A model `f_θ(x)` whose parameters are supplied as graph nodes, so the same
/// forward pass serves plain training and unrolled differentiation.
pub trait Model: Sync {
    fn init_params(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor>;

    /// Output for `x` (`[b, d]`): class probabilities or real predictions,
    /// shaped `[b, outputs]`.
    fn forward(&self, g: &mut Graph, params: &[NodeId], x: NodeId) -> Result<NodeId>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenActivation {
    #[default]
    Relu,
    Tanh,
}

impl FromStr for HiddenActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(HiddenActivation::Relu),
            "tanh" => Ok(HiddenActivation::Tanh),
            _ => Err(Error::usage(format!("unknown hidden activation `{s}`"))),
        }
    }
}

/// Architecture description; no hidden layers gives a logistic / linear model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerSpec {
    pub hidden: Vec<usize>,
    pub activation: HiddenActivation,
}

impl Default for LearnerSpec {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            activation: HiddenActivation::Relu,
        }
    }
}

impl LearnerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::config("learner.hidden", "layer widths must be positive"));
        }
        Ok(())
    }

    pub fn build(&self, inputs: usize, kind: TaskKind) -> Mlp {
        Mlp {
            inputs,
            hidden: self.hidden.clone(),
            activation: self.activation,
            kind,
        }
    }
}

/// Fully connected network with a softmax head for classification.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    inputs: usize,
    hidden: Vec<usize>,
    activation: HiddenActivation,
    kind: TaskKind,
}

impl Mlp {
    pub fn new(inputs: usize, hidden: Vec<usize>, activation: HiddenActivation, kind: TaskKind) -> Self {
        Self {
            inputs,
            hidden,
            activation,
            kind,
        }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.inputs];
        w.extend(&self.hidden);
        w.push(self.kind.outputs());
        w
    }

    pub fn parameter_count(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    /// Pre-softmax outputs.
    pub fn logits(&self, g: &mut Graph, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        let layers = self.widths().len() - 1;
        if params.len() != 2 * layers {
            return Err(Error::usage(format!(
                "expected {} parameter tensors, got {}",
                2 * layers,
                params.len()
            )));
        }
        let mut h = x;
        for l in 0..layers {
            h = g.matmul(h, params[2 * l])?;
            h = g.add_bias(h, params[2 * l + 1])?;
            if l + 1 < layers {
                h = match self.activation {
                    HiddenActivation::Relu => g.relu(h),
                    HiddenActivation::Tanh => g.tanh(h),
                };
            }
        }
        Ok(h)
    }
}

impl Model for Mlp {
    /// Uniform in `±1/sqrt(fan_in)` for weights and biases.
    fn init_params(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        let mut out = Vec::new();
        for p in self.widths().windows(2) {
            let (fan_in, fan_out) = (p[0], p[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            let b = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            out.push(Tensor::matrix(fan_in, fan_out, w).expect("shape"));
            out.push(Tensor::vector(b));
        }
        out
    }

    fn forward(&self, g: &mut Graph, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        let z = self.logits(g, params, x)?;
        match self.kind {
            TaskKind::Classification { .. } => g.softmax(z),
            TaskKind::Regression => Ok(z),
        }
    }
}
