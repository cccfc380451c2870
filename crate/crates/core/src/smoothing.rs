//! Label-smoothing loss family: CE, LSR, ACE, sparse LSR, focal and
//! focal + sparse LSR.
//!
//! Each loss has a plain kernel over log-probability rows (used by the
//! benchmarks) and a graph builder (used for gradients and behaviour
//! analysis). The sparse losses read only the target slot of each row.

use std::fmt;
use std::hint::black_box;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor, UnaryFn};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothingParams {
    /// Smoothing coefficient in `[0, 1)`.
    pub xi: f64,
    pub classes: usize,
    /// Focusing exponent, `>= 0`.
    pub gamma: f64,
    pub phi0: f64,
    pub phi1: f64,
    /// Offset inside the logarithm of the redistributed term, and the
    /// protection of the ACE logarithm.
    pub eps: f64,
    /// Sparse variants drop the class-count constants:
    /// `-[f̃ + ξ·ln(1 - e^f̃ + ε)]`.
    pub relaxed: bool,
}

impl Default for SmoothingParams {
    fn default() -> Self {
        Self {
            xi: 0.1,
            classes: 10,
            gamma: 2.0,
            phi0: 1.0,
            phi1: 1.0,
            eps: 1e-7,
            relaxed: false,
        }
    }
}

impl SmoothingParams {
    /// Parses `xi=0.1,classes=10,phi1=1.5`; unspecified fields keep their
    /// defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let table = crate::config::key_value_table(text, &["xi", "gamma", "phi0", "phi1", "eps"])?;
        let p: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::usage(format!("smoothing parameters `{text}`: {}", e.message())))?;
        p.validate()?;
        Ok(p)
    }

    pub fn new(classes: usize, xi: f64) -> Self {
        Self {
            classes,
            xi,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.xi) {
            return Err(Error::config("xi", "must lie in [0, 1)"));
        }
        if self.classes < 2 {
            return Err(Error::config("classes", "must be at least 2"));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::config("gamma", "must be non-negative"));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::config("eps", "must be non-negative"));
        }
        if !self.phi0.is_finite() || !self.phi1.is_finite() {
            return Err(Error::config("phi", "must be finite"));
        }
        Ok(())
    }

    /// Weight of the target log-probability, `1 - ξ + ξ/C`.
    fn target_weight(&self) -> f64 {
        if self.relaxed {
            1.0
        } else {
            1.0 - self.xi + self.xi / self.classes as f64
        }
    }

    /// Weight of the redistributed non-target term, `ξ(C-1)/C`.
    fn spread_weight(&self) -> f64 {
        if self.relaxed {
            self.xi
        } else {
            self.xi * (self.classes - 1) as f64 / self.classes as f64
        }
    }

    /// `ln(C - 1)`, or zero for the relaxed form.
    fn spread_offset(&self) -> f64 {
        if self.relaxed {
            0.0
        } else {
            ((self.classes - 1) as f64).ln()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmoothingLoss {
    Ce,
    Lsr,
    Ace,
    SparseLsr,
    Focal,
    FocalSparseLsr,
}

impl SmoothingLoss {
    pub const ALL: [SmoothingLoss; 6] = [
        SmoothingLoss::Ce,
        SmoothingLoss::Lsr,
        SmoothingLoss::Ace,
        SmoothingLoss::SparseLsr,
        SmoothingLoss::Focal,
        SmoothingLoss::FocalSparseLsr,
    ];

    pub fn id(self) -> &'static str {
        match self {
            SmoothingLoss::Ce => "ce",
            SmoothingLoss::Lsr => "lsr",
            SmoothingLoss::Ace => "ace",
            SmoothingLoss::SparseLsr => "sparse-lsr",
            SmoothingLoss::Focal => "focal",
            SmoothingLoss::FocalSparseLsr => "focal-sparse-lsr",
        }
    }

    /// Whether the loss reads only the target slot of each row.
    pub fn is_sparse(self) -> bool {
        self != SmoothingLoss::Lsr
    }

    /// Loss of one row of log-probabilities.
    pub fn per_sample(self, logp: &[f64], target: usize, p: &SmoothingParams) -> Result<f64> {
        if target >= logp.len() {
            return Err(Error::usage(format!(
                "target {target} out of range for {} classes",
                logp.len()
            )));
        }
        let lt = logp[target];
        Ok(match self {
            SmoothingLoss::Ce => -lt,
            SmoothingLoss::Lsr => loss_lsr(logp, target, p)?,
            SmoothingLoss::Ace => loss_ace(lt.exp(), p),
            SmoothingLoss::SparseLsr => loss_sparse_lsr(lt, p),
            SmoothingLoss::Focal => loss_focal(lt, p),
            SmoothingLoss::FocalSparseLsr => loss_focal_sparse_lsr(lt, p),
        })
    }

    /// Mean loss over a row-major `[B, C]` block of log-probabilities.
    pub fn batch_mean(self, logp: &[f64], targets: &[usize], p: &SmoothingParams) -> Result<f64> {
        let c = p.classes;
        if targets.is_empty() || logp.len() != targets.len() * c {
            return Err(Error::usage("log-probabilities must be [batch, classes]"));
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            total += self.per_sample(&logp[i * c..(i + 1) * c], t, p)?;
        }
        Ok(total / targets.len() as f64)
    }

    /// Graph form over log-probabilities `[B, C]`, averaged over rows.
    pub fn build(self, g: &mut Graph, logp: NodeId, targets: &[usize], p: &SmoothingParams) -> Result<NodeId> {
        let (b, c) = g.value(logp).dims2()?;
        if c != p.classes || targets.len() != b || targets.iter().any(|&t| t >= c) {
            return Err(Error::usage("targets must be class indices, one per row"));
        }
        let idx: Arc<[usize]> = Arc::from(targets.to_vec());
        let per_row = match self {
            SmoothingLoss::Lsr => {
                let mut w = vec![p.xi / c as f64; b * c];
                for (i, &t) in targets.iter().enumerate() {
                    w[i * c + t] += 1.0 - p.xi;
                }
                let w = g.constant(Tensor::matrix(b, c, w)?);
                let wl = g.mul(w, logp)?;
                let s = g.sum_cols(wl)?;
                g.neg(s)
            }
            _ => {
                let lt = g.pick(logp, idx)?;
                self.build_target_term(g, lt, p)?
            }
        };
        g.mean(per_row)
    }

    /// Per-row loss from the target log-probability (sparse losses only).
    fn build_target_term(self, g: &mut Graph, lt: NodeId, p: &SmoothingParams) -> Result<NodeId> {
        Ok(match self {
            SmoothingLoss::Ce => g.neg(lt),
            SmoothingLoss::Lsr => unreachable!("non-sparse"),
            SmoothingLoss::Ace => {
                let f = g.exp(lt);
                let scaled = g.scale(f, p.phi1)?;
                let m = g.unary(UnaryFn::Abs, scaled);
                let m = g.add_scalar(m, p.eps)?;
                let l = g.ln(m);
                let a = g.unary(UnaryFn::Abs, l);
                g.scale(a, p.phi0)?
            }
            SmoothingLoss::SparseLsr => {
                let (t, s) = sparse_terms(g, lt, p)?;
                let sum = g.add(t, s)?;
                g.neg(sum)
            }
            SmoothingLoss::Focal => {
                let f = g.exp(lt);
                let one = g.scalar(1.0);
                let rest = g.sub(one, f)?;
                let w = g.pow_const(rest, p.gamma);
                let wl = g.mul(w, lt)?;
                g.neg(wl)
            }
            SmoothingLoss::FocalSparseLsr => {
                let (t, s) = sparse_terms(g, lt, p)?;
                let f = g.exp(lt);
                let one = g.scalar(1.0);
                let rest = g.sub(one, f)?;
                let wt = g.pow_const(rest, p.gamma);
                let ws = g.pow_const(f, p.gamma);
                let t = g.mul(wt, t)?;
                let s = g.mul(ws, s)?;
                let sum = g.add(t, s)?;
                g.neg(sum)
            }
        })
    }
}

/// `(a·f̃, b·ln((1 - e^f̃ + ε)/(C-1)))` as graph nodes.
fn sparse_terms(g: &mut Graph, lt: NodeId, p: &SmoothingParams) -> Result<(NodeId, NodeId)> {
    let t = g.scale(lt, p.target_weight())?;
    let f = g.exp(lt);
    let one = g.scalar(1.0);
    let rest = g.sub(one, f)?;
    let rest = g.add_scalar(rest, p.eps)?;
    let l = g.ln(rest);
    let l = g.add_scalar(l, -p.spread_offset())?;
    let s = g.scale(l, p.spread_weight())?;
    Ok((t, s))
}

impl fmt::Display for SmoothingLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for SmoothingLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.id() == s)
            .ok_or_else(|| Error::usage(format!("unknown loss `{s}`")))
    }
}

pub fn loss_ce(logp: &[f64], target: usize) -> Result<f64> {
    SmoothingLoss::Ce.per_sample(logp, target, &SmoothingParams::new(logp.len().max(2), 0.0))
}

/// `-Σ_i (y_i(1-ξ) + ξ/C) · logp_i`, touching every class.
pub fn loss_lsr(logp: &[f64], target: usize, p: &SmoothingParams) -> Result<f64> {
    if target >= logp.len() {
        return Err(Error::usage(format!(
            "target {target} out of range for {} classes",
            logp.len()
        )));
    }
    let base = p.xi / logp.len() as f64;
    let mut total = 0.0;
    for (i, &l) in logp.iter().enumerate() {
        let w = if i == target { 1.0 - p.xi + base } else { base };
        total += w * l;
    }
    Ok(-total)
}

/// `φ0 · |ln(φ1 · f_t + ε)|` from the target probability.
pub fn loss_ace(f_target: f64, p: &SmoothingParams) -> f64 {
    p.phi0 * ((p.phi1 * f_target).abs() + p.eps).ln().abs()
}

/// Log of the redistributed non-target mass, `ln((1 - e^f̃ + ε)/(C-1))`.
fn spread_log(lt: f64, p: &SmoothingParams) -> f64 {
    // -expm1 keeps 1 - e^f̃ accurate as f̃ -> 0.
    (-lt.exp_m1() + p.eps).ln() - p.spread_offset()
}

/// Sparse label smoothing from the target log-probability `f̃`.
pub fn loss_sparse_lsr(lt: f64, p: &SmoothingParams) -> f64 {
    -(p.target_weight() * lt + p.spread_weight() * spread_log(lt, p))
}

/// `-(1 - f_t)^γ · ln f_t`.
pub fn loss_focal(lt: f64, p: &SmoothingParams) -> f64 {
    let f = lt.exp();
    -((1.0 - f).powf(p.gamma) * lt)
}

/// Sparse LSR with the target term weighted by `(1-f_t)^γ` and the
/// redistributed term by `f_t^γ`.
pub fn loss_focal_sparse_lsr(lt: f64, p: &SmoothingParams) -> f64 {
    let f = lt.exp();
    -((1.0 - f).powf(p.gamma) * (p.target_weight() * lt) + f.powf(p.gamma) * (p.spread_weight() * spread_log(lt, p)))
}

/// Row-wise log-softmax of a row-major `[B, C]` block.
pub fn log_softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let lse = crate::autodiff::log_sum_exp(row);
        out.extend(row.iter().map(|z| z - lse));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Uniform predictions `f = 1/C`.
    NullEpoch,
    /// Predictions within `eps` of the one-hot target.
    ZeroError { eps: f64 },
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::NullEpoch => "null",
            Regime::ZeroError { .. } => "zero",
        }
    }
}

/// Negated loss derivative with respect to the target and a non-target
/// probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub target: f64,
    pub non_target: f64,
}

/// `δ = -∂L/∂f` at the regime's prediction, by automatic differentiation.
pub fn behavior_delta(loss: SmoothingLoss, regime: Regime, p: &SmoothingParams) -> Result<Delta> {
    p.validate()?;
    let c = p.classes;
    let f: Vec<f64> = match regime {
        Regime::NullEpoch => vec![1.0 / c as f64; c],
        Regime::ZeroError { eps } => {
            if !(eps > 0.0 && eps < 1.0 / c as f64) {
                return Err(Error::usage(format!("eps must lie in (0, 1/C), got {eps}")));
            }
            let mut f = vec![eps; c];
            f[0] = 1.0 - eps * (c - 1) as f64;
            f
        }
    };
    let mut g = Graph::new();
    let fv = g.variable(Tensor::matrix(1, c, f)?);
    let logp = g.ln(fv);
    let l = loss.build(&mut g, logp, &[0], p)?;
    let grad = g.backward(l, &[fv], false)?.remove(0);
    Ok(Delta {
        target: -grad.data()[0],
        non_target: -grad.data()[1],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub loss_id: String,
    #[serde(rename = "C")]
    pub classes: usize,
    pub batch: usize,
    pub with_logsoftmax: bool,
    pub median_ns: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub classes: Vec<usize>,
    pub batch: usize,
    /// Timed repetitions per point; one extra warm-up is discarded.
    pub reps: usize,
    pub with_logsoftmax: bool,
    pub seed: u64,
    /// Minimum wall time of one repetition; fast kernels are looped.
    pub min_rep_ns: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            classes: vec![10, 100, 1000, 10000],
            batch: 100,
            reps: 15,
            with_logsoftmax: false,
            seed: 0,
            min_rep_ns: 200_000,
        }
    }
}

/// Random logits and targets for one benchmark point.
pub fn bench_inputs(classes: usize, batch: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ classes as u64);
    let logits = (0..batch * classes).map(|_| rng.random_range(-5.0..5.0)).collect();
    let targets = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    (logits, targets)
}

/// Median wall time per batch-loss evaluation for each loss and class count.
pub fn bench_complexity(losses: &[SmoothingLoss], cfg: &BenchConfig, p: &SmoothingParams) -> Result<Vec<BenchRow>> {
    if cfg.classes.iter().any(|&c| c < 2) || cfg.batch < 1 || cfg.reps < 1 {
        return Err(Error::usage("benchmark needs classes >= 2, batch >= 1 and reps >= 1"));
    }
    let mut rows = Vec::new();
    for &c in &cfg.classes {
        let (logits, targets) = bench_inputs(c, cfg.batch, cfg.seed);
        let logp = log_softmax_rows(&logits, c);
        let params = SmoothingParams { classes: c, ..*p };
        for &loss in losses {
            let eval = || -> Result<f64> {
                if cfg.with_logsoftmax {
                    let lp = log_softmax_rows(black_box(&logits), c);
                    loss.batch_mean(&lp, black_box(&targets), &params)
                } else {
                    loss.batch_mean(black_box(&logp), black_box(&targets), &params)
                }
            };
            // Warm-up doubles as calibration of the inner loop length.
            let mut inner = 1u64;
            loop {
                let start = Instant::now();
                for _ in 0..inner {
                    black_box(eval()?);
                }
                if start.elapsed().as_nanos() as u64 >= cfg.min_rep_ns || inner >= 1 << 24 {
                    break;
                }
                inner *= 2;
            }
            let mut samples = Vec::with_capacity(cfg.reps);
            for _ in 0..cfg.reps {
                let start = Instant::now();
                for _ in 0..inner {
                    black_box(eval()?);
                }
                samples.push(start.elapsed().as_nanos() as f64 / inner as f64);
            }
            samples.sort_by(f64::total_cmp);
            rows.push(BenchRow {
                loss_id: loss.id().into(),
                classes: c,
                batch: cfg.batch,
                with_logsoftmax: cfg.with_logsoftmax,
                median_ns: samples[samples.len() / 2],
            });
        }
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], w: W) -> Result<()> {
    write_rows(rows, w)
}

pub fn write_delta_csv<W: Write>(rows: &[DeltaRow], w: W) -> Result<()> {
    write_rows(rows, w)
}

fn write_rows<T: Serialize, W: Write>(rows: &[T], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// One line of a δ report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub loss_id: String,
    pub regime: String,
    #[serde(rename = "C")]
    pub classes: usize,
    pub xi: f64,
    pub gamma: f64,
    pub phi0: f64,
    pub phi1: f64,
    pub target_delta: f64,
    pub non_target_delta: f64,
}

pub fn delta_row(loss: SmoothingLoss, regime: Regime, p: &SmoothingParams) -> Result<DeltaRow> {
    let d = behavior_delta(loss, regime, p)?;
    Ok(DeltaRow {
        loss_id: loss.id().into(),
        regime: regime.name().into(),
        classes: p.classes,
        xi: p.xi,
        gamma: p.gamma,
        phi0: p.phi0,
        phi1: p.phi1,
        // `+ 0.0` turns a negative zero into a plain one.
        target_delta: d.target + 0.0,
        non_target_delta: d.non_target + 0.0,
    })
}
