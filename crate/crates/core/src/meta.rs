//! Loss-weight optimization by differentiating through base-learner updates.
//!
//! Each meta step re-initializes the base learner for every task, takes
//! `s_base` recorded gradient steps under the meta-loss network, measures a
//! fixed task loss with the updated parameters and moves the network weights
//! down the gradient of the summed task losses.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::data::{TaskDataset, TaskKind};
use crate::error::{Error, Result};
use crate::learner::Model;
use crate::losses::{BuiltinLoss, PredictionLoss};
use crate::network::MetaLossNetwork;
use crate::train::BatchSampler;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaTrainConfig {
    pub s_meta: usize,
    pub s_base: usize,
    /// Base learning rate of the unrolled steps.
    pub alpha: f64,
    /// Meta learning rate.
    pub eta: f64,
    pub batch_size: usize,
    /// Defaults by task: cross-entropy for classification, squared error
    /// for regression.
    pub task_loss: Option<BuiltinLoss>,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            s_meta: 250,
            s_base: 1,
            alpha: 0.01,
            eta: 1e-3,
            batch_size: 64,
            task_loss: None,
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s_meta < 1 {
            return Err(Error::config("meta.s_meta", "must be at least 1"));
        }
        if self.s_base < 1 {
            return Err(Error::config("meta.s_base", "must be at least 1"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::config("meta.alpha", "must be positive"));
        }
        if !(self.eta > 0.0) {
            return Err(Error::config("meta.eta", "must be positive"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("meta.batch_size", "must be at least 1"));
        }
        Ok(())
    }

    pub fn task_loss_for(&self, kind: TaskKind) -> BuiltinLoss {
        self.task_loss.unwrap_or(match kind {
            TaskKind::Classification { .. } => BuiltinLoss::CrossEntropy,
            TaskKind::Regression => BuiltinLoss::SquaredError,
        })
    }
}

/// One recorded step `θ - α ∇_θ M(y, f_θ(x))`.
///
/// The gradient is seeded with `α` instead of being scaled afterwards, so a
/// loss `c·L` stepped with `α` performs the same floating-point operations as
/// `L` stepped with `α·c`. The returned parameters stay connected to every
/// variable `loss` depends on.
pub fn inner_step<M: Model + ?Sized, L: PredictionLoss + ?Sized>(
    g: &mut Graph,
    model: &M,
    theta: &[NodeId],
    loss: &L,
    x: NodeId,
    y: NodeId,
    alpha: f64,
) -> Result<Vec<NodeId>> {
    let f = model.forward(g, theta, x)?;
    let m = loss.build(g, y, f)?;
    if !g.value(m).item().is_finite() {
        return Err(Error::Divergence("non-finite meta-loss in the inner step".into()));
    }
    let seed = g.scalar(alpha);
    let grads = g.grad(m, theta, Some(seed))?;
    let mut out = Vec::with_capacity(theta.len());
    for (&t, &d) in theta.iter().zip(&grads) {
        if !g.value(d).is_finite() {
            return Err(Error::Divergence("non-finite base gradient".into()));
        }
        out.push(g.sub(t, d)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaStepRecord {
    /// Task loss per task; `None` where the task diverged and was skipped.
    pub task_losses: Vec<Option<f64>>,
    /// Summed meta-gradient, one entry per network weight.
    pub gradient: Vec<f64>,
}

/// Stateful driver for repeated meta steps over a fixed task list.
pub struct MetaTrainer<'a, M: Model + ?Sized> {
    model: &'a M,
    tasks: &'a [TaskDataset],
    cfg: MetaTrainConfig,
    samplers: Vec<BatchSampler>,
    seed: u64,
    step: usize,
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = a ^ b
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(a << 6)
        .wrapping_add(a >> 2);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic seed derived from a base seed and a path of indices.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(base, 0x6d65_7461), |acc, &p| mix(acc, p))
}

impl<'a, M: Model + ?Sized> MetaTrainer<'a, M> {
    pub fn new(model: &'a M, tasks: &'a [TaskDataset], cfg: &MetaTrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if tasks.is_empty() {
            return Err(Error::usage("meta-training needs at least one task"));
        }
        let samplers = tasks
            .iter()
            .enumerate()
            .map(|(j, t)| BatchSampler::new(t.splits().train.clone(), derive_seed(seed, &[1, j as u64])))
            .collect();
        Ok(Self {
            model,
            tasks,
            cfg: cfg.clone(),
            samplers,
            seed,
            step: 0,
        })
    }

    /// Meta-gradient of the summed task losses without updating `net`.
    pub fn meta_gradient(&mut self, net: &MetaLossNetwork) -> Result<MetaStepRecord> {
        let mut gradient = vec![0.0; net.edge_count()];
        let mut task_losses = Vec::with_capacity(self.tasks.len());
        for (j, task) in self.tasks.iter().enumerate() {
            let init_seed = derive_seed(self.seed, &[2, self.step as u64, j as u64]);
            match self.task_gradient(net, j, task, init_seed) {
                Ok((loss, grad)) => {
                    for (acc, g) in gradient.iter_mut().zip(grad) {
                        *acc += g;
                    }
                    task_losses.push(Some(loss));
                }
                Err(Error::Divergence(_)) => task_losses.push(None),
                Err(e) => return Err(e),
            }
        }
        self.step += 1;
        if task_losses.iter().all(Option::is_none) {
            return Err(Error::Divergence(format!(
                "every task diverged at meta step {}",
                self.step - 1
            )));
        }
        Ok(MetaStepRecord { task_losses, gradient })
    }

    fn task_gradient(
        &mut self,
        net: &MetaLossNetwork,
        j: usize,
        task: &TaskDataset,
        init_seed: u64,
    ) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let bound = net.bind(&mut g);
        let init = self.model.init_params(&mut ChaCha8Rng::seed_from_u64(init_seed));
        let mut theta: Vec<NodeId> = init.into_iter().map(|t| g.variable(t)).collect();
        for _ in 0..self.cfg.s_base {
            let rows = self.samplers[j].next_batch(self.cfg.batch_size);
            let (xb, yb) = task.batch(&rows);
            let x = g.constant(xb);
            let y = g.constant(yb);
            theta = inner_step(&mut g, self.model, &theta, &bound, x, y, self.cfg.alpha)?;
        }
        let rows = self.samplers[j].next_batch(self.cfg.batch_size);
        let (xb, yb) = task.batch(&rows);
        let x = g.constant(xb);
        let y = g.constant(yb);
        let f = self.model.forward(&mut g, &theta, x)?;
        let lt = self.cfg.task_loss_for(task.kind()).build(&mut g, y, f)?;
        let loss = g.value(lt).item();
        let grads = g.backward(lt, &bound.weights, false)?;
        let grad: Vec<f64> = grads.iter().map(|t| t.item()).collect();
        if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("task {j} produced non-finite values")));
        }
        Ok((loss, grad))
    }

    /// One update `φ ← φ - η ∇_φ Σ_j L_task_j`.
    pub fn meta_step(&mut self, net: &mut MetaLossNetwork) -> Result<MetaStepRecord> {
        let rec = self.meta_gradient(net)?;
        apply_meta_update(net, &rec.gradient, self.cfg.eta);
        Ok(rec)
    }
}

/// Plain gradient descent on the loss weights.
pub fn apply_meta_update(net: &mut MetaLossNetwork, gradient: &[f64], eta: f64) {
    for (w, g) in net.weights_mut().iter_mut().zip(gradient) {
        *w -= eta * g;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub task: usize,
    /// NaN marks a skipped (diverged) task.
    pub task_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
}

impl Trajectory {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "task", "task_loss"])?;
        for r in &self.rows {
            out.write_record([r.step.to_string(), r.task.to_string(), r.task_loss.to_string()])?;
        }
        out.flush().map_err(|e| Error::io("<trajectory>", e))?;
        Ok(())
    }
}

/// Runs `cfg.s_meta` meta steps and returns the final network.
///
/// A meta step in which every task diverges (or that leaves non-finite
/// weights) ends the run with [`Error::Divergence`] naming the step.
pub fn optimize_loss<M: Model + ?Sized>(
    net: &MetaLossNetwork,
    model: &M,
    tasks: &[TaskDataset],
    cfg: &MetaTrainConfig,
    seed: u64,
) -> Result<(MetaLossNetwork, Trajectory)> {
    let mut trainer = MetaTrainer::new(model, tasks, cfg, seed)?;
    let mut net = net.clone();
    let mut traj = Trajectory::default();
    for step in 0..cfg.s_meta {
        let rec = trainer.meta_step(&mut net).map_err(|e| match e {
            Error::Divergence(msg) => Error::Divergence(format!("meta step {step}: {msg}")),
            other => other,
        })?;
        for (task, l) in rec.task_losses.iter().enumerate() {
            traj.rows.push(TrajectoryRow {
                step,
                task,
                task_loss: l.unwrap_or(f64::NAN),
            });
        }
        if net.weights().iter().any(|w| !w.is_finite()) {
            return Err(Error::Divergence(format!("meta step {step}: non-finite loss weights")));
        }
    }
    Ok((net, traj))
}
