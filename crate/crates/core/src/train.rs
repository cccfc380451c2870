//! Conventional training: mini-batch sampling, SGD with momentum and the
//! meta-test training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::learner::Model;
use crate::losses::PredictionLoss;

/// Uniform sampling without replacement, reshuffled every epoch.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(pool: Vec<usize>, seed: u64) -> Self {
        let mut s = Self {
            order: pool.clone(),
            pool,
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    /// Next `size` indices; the whole pool when it is smaller than `size`.
    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        if size >= self.pool.len() {
            return self.pool.clone();
        }
        if self.pos + size > self.order.len() {
            self.order.clone_from(&self.pool);
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let batch = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        batch
    }
}

/// Heavy-ball SGD in the common `v = μv + g; θ -= lr·v` form.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.lr * *vi;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("{prefix}lr"), "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("{prefix}momentum"), "must lie in [0, 1)"));
        }
        if self.batch_size < 1 {
            return Err(Error::config(format!("{prefix}batch_size"), "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss of every completed step.
    pub train_losses: Vec<f64>,
    pub val_metric: f64,
    pub test_metric: f64,
    /// Step at which a non-finite value appeared, if any.
    pub diverged_at: Option<usize>,
    #[serde(skip)]
    pub params: Vec<Tensor>,
}

impl TrainReport {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }
}

/// Predictions of `model` for `rows`, evaluated without gradients.
pub fn predict<M: Model + ?Sized>(model: &M, params: &[Tensor], task: &TaskDataset, rows: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let p: Vec<_> = params.iter().map(|t| g.constant(t.clone())).collect();
    let x = g.constant(task.features_of(rows));
    let out = model.forward(&mut g, &p, x)?;
    Ok(g.value(out).clone())
}

/// Trains a freshly initialized `model` with `loss` for `cfg.steps` steps.
///
/// The initialization and batch order depend only on `cfg.seed`, so two
/// losses trained under the same seed see identical data.
pub fn train_at_meta_test<M: Model + ?Sized, L: PredictionLoss + ?Sized>(
    loss: &L,
    model: &M,
    task: &TaskDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate("")?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model.init_params(&mut init_rng);
    let mut sampler = BatchSampler::new(task.splits().train.clone(), cfg.seed ^ 0x5eed_ba7c);
    let mut opt = SgdMomentum::new(cfg.lr, cfg.momentum)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut diverged_at = None;
    for step in 0..cfg.steps {
        let rows = sampler.next_batch(cfg.batch_size);
        let (xb, yb) = task.batch(&rows);
        let mut g = Graph::new();
        let p: Vec<_> = params.iter().map(|t| g.variable(t.clone())).collect();
        let x = g.constant(xb);
        let y = g.constant(yb);
        let f = model.forward(&mut g, &p, x)?;
        let l = loss.build(&mut g, y, f)?;
        let value = g.value(l).item();
        let grads = g.backward(l, &p, false)?;
        if !value.is_finite() || grads.iter().any(|t| !t.is_finite()) {
            diverged_at = Some(step);
            break;
        }
        losses.push(value);
        opt.step(&mut params, &grads);
    }
    let metric = |rows: &[usize]| -> Result<f64> {
        let pred = predict(model, &params, task, rows)?;
        Ok(if pred.is_finite() {
            task.metric(rows, &pred)
        } else {
            f64::NAN
        })
    };
    Ok(TrainReport {
        train_losses: losses,
        val_metric: metric(&task.splits().val)?,
        test_metric: metric(&task.splits().test)?,
        diverged_at,
        params,
    })
}
