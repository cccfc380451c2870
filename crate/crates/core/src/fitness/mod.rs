//! Candidate evaluation by partial training, plus the filters that skip or
//! short-circuit evaluations: a symbolic cache, a rejection protocol that
//! optimizes predictions directly, and a gradient-equivalence key.

mod score;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use score::Fitness;

use crate::autodiff::{Graph, Tensor};
use crate::data::{argmax, TaskDataset, TaskKind};
use crate::error::{Error, Result};
use crate::expr::ExprTree;
use crate::learner::Model;
use crate::losses::PredictionLoss;
use crate::network::MetaLossNetwork;
use crate::train::{predict, train_at_meta_test, BatchSampler, TrainConfig};

/// Per-sample performance measure used inside the rejection protocol.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeMetric {
    /// Error indicator (classification) or squared error (regression).
    #[default]
    Task,
    /// `-ln p_target`; squared error for regression.
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub probe_batch: usize,
    pub probe_steps: usize,
    pub probe_lr: f64,
    pub probe_metric: ProbeMetric,
    /// Significant digits kept in gradient-norm keys.
    pub sig_digits: usize,
    /// Training steps of a fitness evaluation.
    pub s_testing: usize,
    pub symbolic_cache: bool,
    pub rejection: bool,
    pub gradient_equivalence: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            probe_batch: 256,
            probe_steps: 50,
            probe_lr: 0.05,
            probe_metric: ProbeMetric::Task,
            sig_digits: 2,
            s_testing: 500,
            symbolic_cache: true,
            rejection: true,
            gradient_equivalence: true,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.probe_batch < 1 {
            return Err(Error::config("filters.probe_batch", "must be at least 1"));
        }
        if !(self.probe_lr > 0.0) {
            return Err(Error::config("filters.probe_lr", "must be positive"));
        }
        if self.sig_digits < 1 {
            return Err(Error::config("filters.sig_digits", "must be at least 1"));
        }
        if self.s_testing < 1 {
            return Err(Error::config("filters.s_testing", "must be at least 1"));
        }
        Ok(())
    }

    /// Same settings with every filter switched off.
    pub fn without_filters(&self) -> Self {
        Self {
            symbolic_cache: false,
            rejection: false,
            gradient_equivalence: false,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Disposition {
    Evaluated,
    CachedSymbolic,
    CachedGradient,
    Rejected,
    Diverged,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub tree: ExprTree,
    pub net: Option<MetaLossNetwork>,
    pub fitness: Fitness,
    pub disposition: Disposition,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheEntry {
    pub fitness: Fitness,
    pub net: Option<MetaLossNetwork>,
}

/// Structural-key archive of every tree seen so far.
#[derive(Clone, Debug, Default)]
pub struct SymbolicCache {
    map: HashMap<String, CacheEntry>,
}

impl SymbolicCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lookup(&self, tree: &ExprTree) -> Option<&CacheEntry> {
        self.map.get(&tree.canonical_key())
    }

    pub fn insert(&mut self, tree: &ExprTree, entry: CacheEntry) {
        self.map.insert(tree.canonical_key(), entry);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Fixed labelled samples with the predictions of an untrained learner.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSet {
    pub kind: TaskKind,
    /// Softmax rows (classification) or raw outputs, `[B, outputs]`.
    pub predictions: Tensor,
    /// One-hot rows or target values, `[B, outputs]`.
    pub targets: Tensor,
}

impl ProbeSet {
    /// Draws `size` training rows and predicts them with a model initialized
    /// from `seed`.
    pub fn draw<M: Model + ?Sized>(model: &M, task: &TaskDataset, size: usize, seed: u64) -> Result<Self> {
        let rows = BatchSampler::new(task.splits().train.clone(), seed).next_batch(size);
        if rows.is_empty() {
            return Err(Error::usage("probe needs a non-empty training split"));
        }
        let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(seed));
        let predictions = predict(model, &params, task, &rows)?;
        Ok(Self {
            kind: task.kind(),
            predictions,
            targets: task.target_matrix(&rows),
        })
    }

    pub fn len(&self) -> usize {
        self.predictions.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn per_sample_metric(&self, metric: ProbeMetric, pred: &Tensor) -> Vec<f64> {
        (0..self.len())
            .map(|i| {
                let (p, t) = (pred.row(i), self.targets.row(i));
                match self.kind {
                    TaskKind::Regression => (p[0] - t[0]).powi(2),
                    TaskKind::Classification { .. } => {
                        let target = argmax(t);
                        match metric {
                            ProbeMetric::Task => f64::from(argmax(p) != target),
                            ProbeMetric::CrossEntropy => -p[target].ln(),
                        }
                    }
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RejectionOutcome {
    /// `Σ_b [L_P(ŷ_b) - L_P(ŷ*_b)]`; NaN when the probe diverged.
    pub g: f64,
    pub accepted: bool,
}

/// Optimizes the probe predictions directly under `loss` and measures how
/// much the performance metric improved. Candidates with `g <= 0` are
/// rejected.
///
/// Classification optimizes logits initialized at `ln ŷ` (softmax re-applied
/// each step); regression optimizes the outputs themselves. Each step uses
/// the gradient of the batch-summed loss, `B · mean`.
pub fn rejection_protocol<L: PredictionLoss + ?Sized>(
    loss: &L,
    probe: &ProbeSet,
    cfg: &FilterConfig,
) -> Result<RejectionOutcome> {
    let b = probe.len() as f64;
    let classification = probe.kind.is_classification();
    let mut z = if classification {
        probe.predictions.map(f64::ln)
    } else {
        probe.predictions.clone()
    };
    let diverged = RejectionOutcome {
        g: f64::NAN,
        accepted: false,
    };
    for _ in 0..cfg.probe_steps {
        let mut g = Graph::new();
        let zn = g.variable(z.clone());
        let f = if classification { g.softmax(zn)? } else { zn };
        let y = g.constant(probe.targets.clone());
        let l = loss.build(&mut g, y, f)?;
        let grad = g.backward(l, &[zn], false)?.remove(0);
        if !g.value(l).item().is_finite() || !grad.is_finite() {
            return Ok(diverged);
        }
        for (zi, gi) in z.data_mut().iter_mut().zip(grad.data()) {
            *zi -= cfg.probe_lr * b * gi;
        }
        if !z.is_finite() {
            return Ok(diverged);
        }
    }
    let optimized = if classification {
        let mut g = Graph::new();
        let zn = g.constant(z);
        let s = g.softmax(zn)?;
        g.value(s).clone()
    } else {
        z
    };
    let before = probe.per_sample_metric(cfg.probe_metric, &probe.predictions);
    let after = probe.per_sample_metric(cfg.probe_metric, &optimized);
    let gain: f64 = before.iter().zip(&after).map(|(a, b)| a - b).sum();
    if !gain.is_finite() {
        return Ok(diverged);
    }
    Ok(RejectionOutcome {
        g: gain,
        accepted: gain > 0.0,
    })
}

/// Per-sample norms of `∇_ŷ` of the batch-summed loss at the probe
/// predictions, each rounded to `sig_digits` significant digits.
///
/// Returns `None` when any norm is non-finite.
pub fn gradient_equivalence_key<L: PredictionLoss + ?Sized>(
    loss: &L,
    probe: &ProbeSet,
    sig_digits: usize,
) -> Result<Option<String>> {
    let mut g = Graph::new();
    let f = g.variable(probe.predictions.clone());
    let y = g.constant(probe.targets.clone());
    let l = loss.build(&mut g, y, f)?;
    let grad = g.backward(l, &[f], false)?.remove(0);
    let b = probe.len() as f64;
    let precision = sig_digits.saturating_sub(1);
    let mut key = String::new();
    for i in 0..probe.len() {
        let norm = grad.row(i).iter().map(|v| (b * v).powi(2)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Ok(None);
        }
        if i > 0 {
            key.push(',');
        }
        key.push_str(&format!("{norm:.precision$e}"));
    }
    Ok(Some(key))
}

/// Validation metric of a fresh learner trained with `loss` for
/// `cfg.steps` steps; divergence maps to [`Fitness::WORST`].
pub fn evaluate_fitness<M: Model + ?Sized, L: PredictionLoss + ?Sized>(
    loss: &L,
    model: &M,
    task: &TaskDataset,
    cfg: &TrainConfig,
) -> Result<Fitness> {
    let report = train_at_meta_test(loss, model, task, cfg)?;
    if report.diverged() {
        return Ok(Fitness::WORST);
    }
    Ok(Fitness::new(report.val_metric))
}
