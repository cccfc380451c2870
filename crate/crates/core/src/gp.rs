//! Genetic operators over [`ExprTree`]s: initialisation, constraint repair,
//! crossover, mutation and tournament selection.
//!
//! All operators are pure functions of their inputs and the random stream.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{ExprTree, Symbol};
use crate::fitness::Fitness;
use crate::primitive::Primitive;

/// Depth bound for subtrees grown by mutation.
pub const MUTATION_DEPTH: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    pub population_size: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub elitism_rate: f64,
    pub tournament_size: usize,
    pub init_depth_range: (usize, usize),
    pub max_depth: usize,
    /// Selects the tree-generation and breeding stream; evaluation seeds
    /// stay tied to the run seed.
    pub rng_seed: u64,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            population_size: 25,
            generations: 50,
            crossover_rate: 0.7,
            mutation_rate: 0.25,
            elitism_rate: 0.05,
            tournament_size: 3,
            init_depth_range: (2, 5),
            max_depth: 10,
            rng_seed: 0,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(name, format!("must lie in [0, 1], got {v}")))
            }
        };
        prob("gp.crossover_rate", self.crossover_rate)?;
        prob("gp.mutation_rate", self.mutation_rate)?;
        prob("gp.elitism_rate", self.elitism_rate)?;
        if self.population_size < 1 {
            return Err(Error::config("gp.population_size", "must be at least 1"));
        }
        if self.generations < 1 {
            return Err(Error::config("gp.generations", "must be at least 1"));
        }
        if self.tournament_size < 1 {
            return Err(Error::config("gp.tournament_size", "must be at least 1"));
        }
        if self.max_depth < 2 {
            return Err(Error::config("gp.max_depth", "must be at least 2 to hold both y and f"));
        }
        let (lo, hi) = self.init_depth_range;
        if lo < 1 || lo > hi || hi > self.max_depth {
            return Err(Error::config(
                "gp.init_depth_range",
                format!("need 1 <= min <= max <= max_depth, got ({lo}, {hi})"),
            ));
        }
        Ok(())
    }

    /// Number of individuals copied unchanged: `ceil(rate * N)`, so any
    /// positive rate keeps at least one elite.
    pub fn elite_count(&self) -> usize {
        if self.elitism_rate <= 0.0 {
            return 0;
        }
        let n = (self.elitism_rate * self.population_size as f64 - 1e-9).ceil() as usize;
        n.clamp(1, self.population_size)
    }
}

fn random_terminal<R: Rng + ?Sized>(rng: &mut R) -> Symbol {
    *Symbol::TERMINALS.choose(rng).expect("non-empty")
}

fn random_primitive<R: Rng + ?Sized>(rng: &mut R) -> Primitive {
    *Primitive::ALL.choose(rng).expect("non-empty")
}

fn generate<R: Rng + ?Sized>(height: usize, full: bool, rng: &mut R) -> ExprTree {
    fn go<R: Rng + ?Sized>(depth: usize, height: usize, full: bool, rng: &mut R, out: &mut Vec<Symbol>) {
        let terminal = if depth >= height {
            true
        } else if full {
            false
        } else {
            // Uniform over the whole symbol set.
            let n_t = Symbol::TERMINALS.len();
            rng.random_range(0..n_t + Primitive::ALL.len()) < n_t
        };
        if terminal {
            out.push(random_terminal(rng));
            return;
        }
        let p = random_primitive(rng);
        out.push(Symbol::Op(p));
        for _ in 0..p.arity() {
            go(depth + 1, height, full, rng, out);
        }
    }
    let mut out = Vec::new();
    go(1, height.max(1), full, rng, &mut out);
    ExprTree::from_prefix(out).expect("generator emits well-formed trees")
}

/// Tree whose branches all have exactly depth `height`.
pub fn full_tree<R: Rng + ?Sized>(height: usize, rng: &mut R) -> ExprTree {
    generate(height, true, rng)
}

/// Tree of depth at most `height`, choosing uniformly over all symbols below it.
pub fn grow_tree<R: Rng + ?Sized>(height: usize, rng: &mut R) -> ExprTree {
    generate(height, false, rng)
}

/// Ramped half-and-half: a uniform height in `init_depth_range`, then full or
/// grow with equal probability. The result is not repaired.
pub fn random_tree<R: Rng + ?Sized>(cfg: &GpConfig, rng: &mut R) -> ExprTree {
    let (lo, hi) = cfg.init_depth_range;
    let height = rng.random_range(lo..=hi);
    generate(height, rng.random_bool(0.5), rng)
}

fn pred_target_pair<R: Rng + ?Sized>(rng: &mut R) -> ExprTree {
    let op = *Primitive::BINARY.choose(rng).expect("non-empty");
    let (a, b) = if rng.random_bool(0.5) {
        (Symbol::Pred, Symbol::Target)
    } else {
        (Symbol::Target, Symbol::Pred)
    };
    ExprTree::from_prefix(vec![Symbol::Op(op), a, b]).expect("binary node")
}

/// Ensures the tree mentions both `y` and `f`.
///
/// Trees that already do are returned unchanged. Otherwise one uniformly
/// chosen terminal becomes a random binary node over `{f, y}` (in random
/// order). Only terminals whose replacement keeps the depth within
/// `min(max_depth, max(depth, 3))` are eligible; if none is, the parent of a
/// random terminal is replaced instead.
pub fn correct_constraints<R: Rng + ?Sized>(t: &ExprTree, max_depth: usize, rng: &mut R) -> ExprTree {
    if t.satisfies_constraint() {
        return t.clone();
    }
    let limit = t.depth().max(MUTATION_DEPTH).min(max_depth).max(2);
    let depths = t.node_depths();
    let terminals: Vec<usize> = (0..t.len()).filter(|&i| t.symbols()[i].is_terminal()).collect();
    let shallow: Vec<usize> = terminals.iter().copied().filter(|&i| depths[i] < limit).collect();
    let pair = pred_target_pair(rng);
    if let Some(&i) = shallow.choose(rng) {
        return t.replace_subtree(i, &pair);
    }
    let &leaf = terminals.choose(rng).expect("every tree has a terminal");
    let parent = t.parents()[leaf].expect("a lone terminal is always shallow");
    t.replace_subtree(parent, &pair)
}

/// Swaps two uniformly chosen subtrees (any node, root included).
pub fn one_point<R: Rng + ?Sized>(a: &ExprTree, b: &ExprTree, rng: &mut R) -> (ExprTree, ExprTree) {
    let i = rng.random_range(0..a.len());
    let j = rng.random_range(0..b.len());
    (a.replace_subtree(i, &b.subtree(j)), b.replace_subtree(j, &a.subtree(i)))
}

/// One-point crossover with the depth guard and constraint repair applied.
pub fn crossover<R: Rng + ?Sized>(a: &ExprTree, b: &ExprTree, max_depth: usize, rng: &mut R) -> (ExprTree, ExprTree) {
    let (x, y) = one_point(a, b, rng);
    let x = if x.depth() > max_depth { a.clone() } else { x };
    let y = if y.depth() > max_depth { b.clone() } else { y };
    (
        correct_constraints(&x, max_depth, rng),
        correct_constraints(&y, max_depth, rng),
    )
}

/// Replaces a uniformly chosen subtree with a grown tree of depth <= 3.
pub fn mutate<R: Rng + ?Sized>(t: &ExprTree, max_depth: usize, rng: &mut R) -> ExprTree {
    let i = rng.random_range(0..t.len());
    let fresh = grow_tree(MUTATION_DEPTH, rng);
    let m = t.replace_subtree(i, &fresh);
    let m = if m.depth() > max_depth { t.clone() } else { m };
    correct_constraints(&m, max_depth, rng)
}

/// Index of the winner of a `k`-way tournament drawn with replacement.
///
/// Ties on fitness go to the smaller tree, then to the earlier index.
pub fn tournament_index<R: Rng + ?Sized>(fitness: &[Fitness], sizes: &[usize], k: usize, rng: &mut R) -> Result<usize> {
    if fitness.is_empty() {
        return Err(Error::usage("tournament over an empty population"));
    }
    if sizes.len() != fitness.len() || k == 0 {
        return Err(Error::usage("tournament needs k >= 1 and one size per member"));
    }
    let mut best = rng.random_range(0..fitness.len());
    for _ in 1..k {
        let c = rng.random_range(0..fitness.len());
        if (fitness[c], sizes[c], c) < (fitness[best], sizes[best], best) {
            best = c;
        }
    }
    Ok(best)
}

pub fn select_tournament<'a, R: Rng + ?Sized>(
    pop: &'a [(ExprTree, Fitness)],
    k: usize,
    rng: &mut R,
) -> Result<&'a ExprTree> {
    let fitness: Vec<Fitness> = pop.iter().map(|(_, f)| *f).collect();
    let sizes: Vec<usize> = pop.iter().map(|(t, _)| t.len()).collect();
    Ok(&pop[tournament_index(&fitness, &sizes, k, rng)?].0)
}
