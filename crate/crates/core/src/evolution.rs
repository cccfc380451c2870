//! The outer search loop: initialize, filter, optimize, evaluate, breed.
//!
//! Within a generation, candidates are processed in stages separated by
//! barriers. Cache look-ups and leader assignment are sequential (so results
//! never depend on thread scheduling); optimization and evaluation run in
//! parallel.

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TaskDataset;
use crate::error::{Error, Result};
use crate::expr::ExprTree;
use crate::fitness::{
    evaluate_fitness, gradient_equivalence_key, rejection_protocol, CacheEntry, Candidate, Disposition, FilterConfig,
    Fitness, ProbeSet, SymbolicCache,
};
use crate::gp::{correct_constraints, crossover, mutate, random_tree, tournament_index, GpConfig};
use crate::learner::{LearnerSpec, Mlp};
use crate::meta::{derive_seed, optimize_loss, MetaTrainConfig};
use crate::network::{Activation, MetaLossNetwork};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionConfig {
    pub gp: GpConfig,
    pub meta: MetaTrainConfig,
    pub filters: FilterConfig,
    /// Optimizer settings of fitness evaluations (`steps` is taken from
    /// `filters.s_testing`).
    pub train: TrainConfig,
    pub learner: LearnerSpec,
    pub activation: Activation,
    /// `false` skips loss-weight optimization entirely.
    pub local_search: bool,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            gp: GpConfig::default(),
            meta: MetaTrainConfig::default(),
            filters: FilterConfig::default(),
            train: TrainConfig::default(),
            learner: LearnerSpec::default(),
            activation: Activation::Identity,
            local_search: true,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<()> {
        self.gp.validate()?;
        self.meta.validate()?;
        self.filters.validate()?;
        self.train.validate("train.")?;
        self.learner.validate()
    }

    pub fn mode_name(&self) -> &'static str {
        if self.local_search {
            "evomal"
        } else {
            "gp-lfl"
        }
    }

    fn fitness_training(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.filters.s_testing,
            seed,
            ..self.train.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub best_fitness: Fitness,
    /// Mean over candidates with finite fitness.
    pub mean_fitness: Option<f64>,
    pub best_expression: String,
    pub evaluated: usize,
    /// Includes elites carried over from the previous generation.
    pub cached_symbolic: usize,
    pub cached_gradient: usize,
    pub rejected: usize,
    pub diverged: usize,
    pub meta_optimizations: usize,
}

impl GenerationRecord {
    pub fn evaluated_fraction(&self) -> f64 {
        let total = self.evaluated + self.cached_symbolic + self.cached_gradient + self.rejected + self.diverged;
        self.evaluated as f64 / total.max(1) as f64
    }
}

/// One fully evaluated candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub generation: usize,
    pub index: usize,
    pub expression: String,
    pub fitness: Fitness,
}

#[derive(Clone, Debug)]
pub struct EvolutionRun {
    pub best: Candidate,
    pub history: Vec<GenerationRecord>,
    pub population: Vec<Candidate>,
    pub evaluations: Vec<EvaluationRecord>,
    pub meta_optimizations: usize,
    pub local_search: bool,
}

/// Result of the parallel stage for one candidate.
enum Prepared {
    Diverged(Option<MetaLossNetwork>),
    Rejected(MetaLossNetwork),
    Ready(MetaLossNetwork, Option<String>),
}

/// Shared, read-only evaluation context of one run.
pub struct Evaluator<'a> {
    cfg: &'a EvolutionConfig,
    tasks: &'a [TaskDataset],
    model: Mlp,
    probe: ProbeSet,
    seed: u64,
}

impl<'a> Evaluator<'a> {
    pub fn new(cfg: &'a EvolutionConfig, tasks: &'a [TaskDataset], seed: u64) -> Result<Self> {
        cfg.validate()?;
        let first = tasks
            .first()
            .ok_or_else(|| Error::usage("evolution needs at least one task"))?;
        if tasks
            .iter()
            .any(|t| t.kind() != first.kind() || t.features() != first.features())
        {
            return Err(Error::usage("all tasks must share the task kind and feature count"));
        }
        let model = cfg.learner.build(first.features(), first.kind());
        let probe = ProbeSet::draw(&model, first, cfg.filters.probe_batch, derive_seed(seed, &[6]))?;
        Ok(Self {
            cfg,
            tasks,
            model,
            probe,
            seed,
        })
    }

    pub fn model(&self) -> &Mlp {
        &self.model
    }

    pub fn probe(&self) -> &ProbeSet {
        &self.probe
    }

    /// Training settings shared by every fitness evaluation of the run.
    pub fn fitness_training(&self) -> TrainConfig {
        self.cfg.fitness_training(derive_seed(self.seed, &[5]))
    }

    /// Compiles, optionally optimizes, and runs the enabled pre-evaluation
    /// filters. The second value reports whether weight optimization ran.
    fn prepare(
        &self,
        tree: &ExprTree,
        generation: usize,
        index: usize,
        filters: &FilterConfig,
    ) -> Result<(Prepared, bool)> {
        let (g, i) = (generation as u64, index as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[3, g, i]));
        let mut net = MetaLossNetwork::compile(tree, self.cfg.activation, &mut rng)?;
        if self.cfg.local_search {
            match optimize_loss(
                &net,
                &self.model,
                self.tasks,
                &self.cfg.meta,
                derive_seed(self.seed, &[4, g, i]),
            ) {
                Ok((optimized, _)) => net = optimized,
                Err(Error::Divergence(_)) => return Ok((Prepared::Diverged(Some(net)), true)),
                Err(e) => return Err(e),
            }
        }
        let ran = self.cfg.local_search;
        if filters.rejection && !rejection_protocol(&net, &self.probe, filters)?.accepted {
            return Ok((Prepared::Rejected(net), ran));
        }
        if filters.gradient_equivalence {
            return Ok(match gradient_equivalence_key(&net, &self.probe, filters.sig_digits)? {
                Some(key) => (Prepared::Ready(net, Some(key)), ran),
                None => (Prepared::Diverged(Some(net)), ran),
            });
        }
        Ok((Prepared::Ready(net, None), ran))
    }

    /// Mean validation fitness over the tasks.
    pub fn evaluate(&self, net: &MetaLossNetwork) -> Result<Fitness> {
        let train = self.fitness_training();
        let mut total = 0.0;
        for task in self.tasks {
            let model = self.cfg.learner.build(task.features(), task.kind());
            let f = evaluate_fitness(net, &model, task, &train)?;
            if f.is_worst() {
                return Ok(Fitness::WORST);
            }
            total += f.value();
        }
        Ok(Fitness::new(total / self.tasks.len() as f64))
    }

    /// Full pipeline for one candidate with every filter disabled, using the
    /// same seeds the search would use at `(generation, index)`.
    pub fn assess_unfiltered(&self, tree: &ExprTree, generation: usize, index: usize) -> Result<Candidate> {
        let filters = self.cfg.filters.without_filters();
        let (prepared, _) = self.prepare(tree, generation, index, &filters)?;
        Ok(match prepared {
            Prepared::Diverged(net) => Candidate {
                tree: tree.clone(),
                net,
                fitness: Fitness::WORST,
                disposition: Disposition::Diverged,
            },
            Prepared::Rejected(_) => unreachable!("rejection is disabled"),
            Prepared::Ready(net, _) => {
                let fitness = self.evaluate(&net)?;
                Candidate {
                    tree: tree.clone(),
                    net: Some(net),
                    fitness,
                    disposition: Disposition::Evaluated,
                }
            }
        })
    }
}

/// Population member entering a generation.
#[derive(Clone, Debug)]
struct Slot {
    tree: ExprTree,
    /// Elites keep their network and fitness.
    carried: Option<Candidate>,
}

enum Plan {
    Done(Candidate),
    /// Copy the outcome of the candidate at this index (same tree).
    SameTree(usize),
    Lead,
}

fn rank_key(c: &Candidate, i: usize) -> (Fitness, usize, usize) {
    (c.fitness, c.tree.len(), i)
}

fn best_index(pop: &[Candidate]) -> usize {
    (0..pop.len())
        .min_by_key(|&i| rank_key(&pop[i], i))
        .expect("non-empty population")
}

/// Runs the search and returns the best candidate with the run history.
pub fn run(cfg: &EvolutionConfig, tasks: &[TaskDataset], seed: u64) -> Result<EvolutionRun> {
    let ev = Evaluator::new(cfg, tasks, seed)?;
    let gp = &cfg.gp;
    let filters = &cfg.filters;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0, cfg.gp.rng_seed]));
    let mut slots: Vec<Slot> = (0..gp.population_size)
        .map(|_| {
            let t = random_tree(gp, &mut rng);
            Slot {
                tree: correct_constraints(&t, gp.max_depth, &mut rng),
                carried: None,
            }
        })
        .collect();

    let mut archive = SymbolicCache::new();
    let mut gradient_map: HashMap<String, CacheEntry> = HashMap::new();
    let mut history = Vec::with_capacity(gp.generations);
    let mut evaluations = Vec::new();
    let mut meta_total = 0;
    let mut population: Vec<Candidate> = Vec::new();

    for generation in 0..gp.generations {
        // Stage 1: elites, archive hits and duplicate detection.
        let mut first_seen: HashMap<String, usize> = HashMap::new();
        let plans: Vec<Plan> = slots
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if let Some(c) = &s.carried {
                    return Plan::Done(Candidate {
                        disposition: Disposition::CachedSymbolic,
                        ..c.clone()
                    });
                }
                if filters.symbolic_cache {
                    if let Some(hit) = archive.lookup(&s.tree) {
                        return Plan::Done(Candidate {
                            tree: s.tree.clone(),
                            net: hit.net.clone(),
                            fitness: hit.fitness,
                            disposition: Disposition::CachedSymbolic,
                        });
                    }
                    if let Some(&leader) = first_seen.get(&s.tree.canonical_key()) {
                        return Plan::SameTree(leader);
                    }
                    first_seen.insert(s.tree.canonical_key(), i);
                }
                Plan::Lead
            })
            .collect();

        // Stage 2: compile, optimize and filter leaders in parallel.
        let leaders: Vec<usize> = (0..slots.len()).filter(|&i| matches!(plans[i], Plan::Lead)).collect();
        let prepared: Vec<(Prepared, bool)> = leaders
            .par_iter()
            .map(|&i| ev.prepare(&slots[i].tree, generation, i, filters))
            .collect::<Result<_>>()?;
        let meta_runs = prepared.iter().filter(|(_, ran)| *ran).count();

        // Stage 3: gradient-key assignment in index order.
        let mut outcome: Vec<Option<Candidate>> = vec![None; slots.len()];
        let mut to_evaluate: Vec<(usize, MetaLossNetwork)> = Vec::new();
        let mut key_leader: HashMap<String, usize> = HashMap::new();
        let mut key_followers: Vec<(usize, usize, MetaLossNetwork)> = Vec::new();
        let mut keys: HashMap<usize, String> = HashMap::new();
        for (&i, (p, _)) in leaders.iter().zip(prepared) {
            let tree = slots[i].tree.clone();
            match p {
                Prepared::Diverged(net) => {
                    outcome[i] = Some(Candidate {
                        tree,
                        net,
                        fitness: Fitness::WORST,
                        disposition: Disposition::Diverged,
                    })
                }
                Prepared::Rejected(net) => {
                    outcome[i] = Some(Candidate {
                        tree,
                        net: Some(net),
                        fitness: Fitness::WORST,
                        disposition: Disposition::Rejected,
                    })
                }
                Prepared::Ready(net, Some(key)) => {
                    if let Some(hit) = gradient_map.get(&key) {
                        outcome[i] = Some(Candidate {
                            tree,
                            net: Some(net),
                            fitness: hit.fitness,
                            disposition: Disposition::CachedGradient,
                        });
                    } else if let Some(&leader) = key_leader.get(&key) {
                        key_followers.push((i, leader, net));
                    } else {
                        key_leader.insert(key.clone(), i);
                        keys.insert(i, key);
                        to_evaluate.push((i, net));
                    }
                }
                Prepared::Ready(net, None) => to_evaluate.push((i, net)),
            }
        }

        // Stage 4: full evaluations in parallel.
        let fitnesses: Vec<Fitness> = to_evaluate
            .par_iter()
            .map(|(_, net)| ev.evaluate(net))
            .collect::<Result<_>>()?;

        // Stage 5: record and propagate results.
        for ((i, net), fitness) in to_evaluate.into_iter().zip(fitnesses) {
            evaluations.push(EvaluationRecord {
                generation,
                index: i,
                expression: slots[i].tree.canonical_key(),
                fitness,
            });
            if let Some(key) = keys.remove(&i) {
                gradient_map.insert(
                    key,
                    CacheEntry {
                        fitness,
                        net: Some(net.clone()),
                    },
                );
            }
            outcome[i] = Some(Candidate {
                tree: slots[i].tree.clone(),
                net: Some(net),
                fitness,
                disposition: Disposition::Evaluated,
            });
        }
        for (i, leader, net) in key_followers {
            let fitness = outcome[leader].as_ref().expect("leader resolved").fitness;
            outcome[i] = Some(Candidate {
                tree: slots[i].tree.clone(),
                net: Some(net),
                fitness,
                disposition: Disposition::CachedGradient,
            });
        }
        for &i in &leaders {
            let c = outcome[i].as_ref().expect("leader resolved");
            archive.insert(
                &c.tree,
                CacheEntry {
                    fitness: c.fitness,
                    net: c.net.clone(),
                },
            );
        }
        // Leaders precede their duplicates, so one ordered pass suffices.
        population = Vec::with_capacity(slots.len());
        for (i, plan) in plans.into_iter().enumerate() {
            let c = match plan {
                Plan::Done(c) => c,
                Plan::Lead => outcome[i].take().expect("leader resolved"),
                Plan::SameTree(leader) => Candidate {
                    disposition: Disposition::CachedSymbolic,
                    ..population[leader].clone()
                },
            };
            population.push(c);
        }

        meta_total += meta_runs;
        history.push(generation_record(generation, &population, meta_runs));

        if generation + 1 < gp.generations {
            slots = breed(&population, gp, &mut rng)?;
        }
    }

    let best = population[best_index(&population)].clone();
    Ok(EvolutionRun {
        best,
        history,
        population,
        evaluations,
        meta_optimizations: meta_total,
        local_search: cfg.local_search,
    })
}

fn generation_record(generation: usize, pop: &[Candidate], meta_runs: usize) -> GenerationRecord {
    let count = |d: Disposition| pop.iter().filter(|c| c.disposition == d).count();
    let finite: Vec<f64> = pop
        .iter()
        .filter(|c| !c.fitness.is_worst())
        .map(|c| c.fitness.value())
        .collect();
    let best = &pop[best_index(pop)];
    GenerationRecord {
        generation,
        best_fitness: best.fitness,
        mean_fitness: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
        best_expression: best.tree.canonical_key(),
        evaluated: count(Disposition::Evaluated),
        cached_symbolic: count(Disposition::CachedSymbolic),
        cached_gradient: count(Disposition::CachedGradient),
        rejected: count(Disposition::Rejected),
        diverged: count(Disposition::Diverged),
        meta_optimizations: meta_runs,
    }
}

/// Elites first, then tournament-selected parents through crossover
/// (probability `crossover_rate`) and mutation (`mutation_rate`).
pub fn breed_trees<R: Rng + ?Sized>(
    pop: &[(ExprTree, Fitness)],
    cfg: &GpConfig,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<ExprTree>)> {
    if pop.is_empty() {
        return Err(Error::usage("cannot breed an empty population"));
    }
    let mut order: Vec<usize> = (0..pop.len()).collect();
    order.sort_by_key(|&i| (pop[i].1, pop[i].0.len(), i));
    let elites: Vec<usize> = order
        .into_iter()
        .take(cfg.elite_count().min(cfg.population_size))
        .collect();

    let fitness: Vec<Fitness> = pop.iter().map(|(_, f)| *f).collect();
    let sizes: Vec<usize> = pop.iter().map(|(t, _)| t.len()).collect();
    let mut children = Vec::with_capacity(cfg.population_size);
    while elites.len() + children.len() < cfg.population_size {
        let a = &pop[tournament_index(&fitness, &sizes, cfg.tournament_size, rng)?].0;
        let b = &pop[tournament_index(&fitness, &sizes, cfg.tournament_size, rng)?].0;
        let (mut x, mut y) = if rng.random_bool(cfg.crossover_rate) {
            crossover(a, b, cfg.max_depth, rng)
        } else {
            (a.clone(), b.clone())
        };
        if rng.random_bool(cfg.mutation_rate) {
            x = mutate(&x, cfg.max_depth, rng);
        }
        if rng.random_bool(cfg.mutation_rate) {
            y = mutate(&y, cfg.max_depth, rng);
        }
        for child in [x, y] {
            if elites.len() + children.len() < cfg.population_size {
                children.push(correct_constraints(&child, cfg.max_depth, rng));
            }
        }
    }
    Ok((elites, children))
}

fn breed<R: Rng + ?Sized>(pop: &[Candidate], cfg: &GpConfig, rng: &mut R) -> Result<Vec<Slot>> {
    let pairs: Vec<(ExprTree, Fitness)> = pop.iter().map(|c| (c.tree.clone(), c.fitness)).collect();
    let (elites, children) = breed_trees(&pairs, cfg, rng)?;
    let mut slots: Vec<Slot> = elites
        .into_iter()
        .map(|i| Slot {
            tree: pop[i].tree.clone(),
            carried: Some(pop[i].clone()),
        })
        .collect();
    slots.extend(children.into_iter().map(|tree| Slot { tree, carried: None }));
    Ok(slots)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestLoss {
    pub expression: String,
    pub infix: String,
    pub fitness: Fitness,
    pub weights: Vec<f64>,
}

/// Structured summary of a run. Everything except `elapsed_seconds` is a
/// deterministic function of the configuration and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub mode: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub generations: Vec<GenerationRecord>,
    pub best: BestLoss,
    pub evaluations: usize,
    pub meta_optimizations: usize,
    pub elapsed_seconds: f64,
}

impl RunManifest {
    pub fn new(run: &EvolutionRun, config: serde_json::Value, seed: u64, elapsed_seconds: f64) -> Self {
        Self {
            mode: if run.local_search { "evomal" } else { "gp-lfl" }.into(),
            seed,
            config,
            generations: run.history.clone(),
            best: BestLoss {
                expression: run.best.tree.canonical_key(),
                infix: run.best.tree.to_infix(),
                fitness: run.best.fitness,
                weights: run.best.net.as_ref().map(|n| n.weights().to_vec()).unwrap_or_default(),
            },
            evaluations: run.evaluations.len(),
            meta_optimizations: run.meta_optimizations,
            elapsed_seconds,
        }
    }
}

/// Per-generation filter counts as CSV.
pub fn write_filter_stats<W: Write>(history: &[GenerationRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "generation",
        "cached_symbolic",
        "rejected",
        "cached_gradient",
        "diverged",
        "evaluated",
        "best_fitness",
    ])?;
    for r in history {
        out.write_record([
            r.generation.to_string(),
            r.cached_symbolic.to_string(),
            r.rejected.to_string(),
            r.cached_gradient.to_string(),
            r.diverged.to_string(),
            r.evaluated.to_string(),
            r.best_fitness.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("<filter stats>", e))?;
    Ok(())
}
