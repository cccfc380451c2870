use metaloss_core::evolution::{breed_trees, run, write_filter_stats, EvolutionConfig, RunManifest};
use metaloss_core::fitness::FilterConfig;
use metaloss_core::{Disposition, ExprTree, Fitness, GpConfig, LearnerSpec, MetaTrainConfig, TaskDataset, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(local_search: bool, population: usize, generations: usize) -> EvolutionConfig {
    EvolutionConfig {
        gp: GpConfig {
            population_size: population,
            generations,
            ..GpConfig::default()
        },
        meta: MetaTrainConfig {
            s_meta: 5,
            batch_size: 32,
            ..MetaTrainConfig::default()
        },
        filters: FilterConfig {
            probe_batch: 64,
            s_testing: 60,
            ..FilterConfig::default()
        },
        train: TrainConfig {
            batch_size: 32,
            ..TrainConfig::default()
        },
        learner: LearnerSpec {
            hidden: vec![8],
            ..LearnerSpec::default()
        },
        local_search,
        ..EvolutionConfig::default()
    }
}

fn regression() -> Vec<TaskDataset> {
    vec![TaskDataset::linear_regression(3, 0.1, 200, 2).unwrap()]
}

#[test]
fn three_generation_regression_run() {
    let out = run(&small(true, 6, 3), &regression(), 11).unwrap();
    assert_eq!(out.history.len(), 3);
    for w in out.history.windows(2) {
        assert!(w[1].best_fitness <= w[0].best_fitness);
    }
    assert_eq!(out.population.len(), 6);
    assert!(out.meta_optimizations > 0);
    for c in &out.population {
        assert!(c.tree.satisfies_constraint() && c.tree.depth() <= 10);
        if matches!(c.disposition, Disposition::Rejected | Disposition::Diverged) {
            assert!(c.fitness.is_worst());
        }
    }
    assert_eq!(out.best.fitness, out.history[2].best_fitness);
}

#[test]
fn without_local_search_no_weights_are_optimized() {
    let out = run(&small(false, 6, 3), &regression(), 11).unwrap();
    assert_eq!(out.meta_optimizations, 0);
    assert!(out.history.iter().all(|h| h.meta_optimizations == 0));
    assert!(!out.local_search);
}

#[test]
fn runs_are_reproducible() {
    let cfg = small(true, 5, 2);
    let a = run(&cfg, &regression(), 3).unwrap();
    let b = run(&cfg, &regression(), 3).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.evaluations, b.evaluations);
    let ma = RunManifest::new(&a, serde_json::json!({}), 3, 1.0);
    let mb = RunManifest::new(&b, serde_json::json!({}), 3, 2.0);
    assert_eq!(
        RunManifest {
            elapsed_seconds: 0.0,
            ..ma
        },
        RunManifest {
            elapsed_seconds: 0.0,
            ..mb
        }
    );
}

#[test]
fn best_candidate_survives_into_the_next_generation() {
    let tasks = regression();
    for gens in 1..4 {
        let shorter = run(&small(false, 6, gens), &tasks, 5).unwrap();
        let longer = run(&small(false, 6, gens + 1), &tasks, 5).unwrap();
        assert_eq!(shorter.history[..], longer.history[..gens]);
        let kept = longer
            .population
            .iter()
            .find(|c| c.tree == shorter.best.tree && c.fitness == shorter.best.fitness);
        assert!(kept.is_some(), "generation {gens} lost its best candidate");
        assert_eq!(kept.unwrap().net, shorter.best.net);
    }
}

#[test]
fn filters_keep_most_candidates_from_full_evaluation() {
    let cfg = small(false, 10, 10);
    let (mut evaluated, mut total, mut archive_hits) = (0, 0, 0);
    for seed in 0..8 {
        let out = run(&cfg, &regression(), seed).unwrap();
        let first = &out.history[0];
        assert_eq!(first.cached_symbolic, 0, "the archive starts empty");
        for h in &out.history {
            assert!(h.evaluated_fraction() <= 1.0);
            evaluated += h.evaluated;
            total += h.evaluated + h.cached_symbolic + h.cached_gradient + h.rejected + h.diverged;
        }
        archive_hits += out.history[1..].iter().map(|h| h.cached_symbolic).sum::<usize>();
    }
    let share = evaluated as f64 / total as f64;
    assert!(share < 0.5, "{share}");
    assert!(archive_hits > 0);
}

#[test]
fn breeding_without_variation_copies_selected_parents() {
    let pop: Vec<(ExprTree, Fitness)> = ["(- y f)", "(sq (- y f))", "(+ y f)", "(abs (- f y))"]
        .iter()
        .zip([0.3, 0.1, 0.5, 0.2])
        .map(|(s, f)| (s.parse().unwrap(), Fitness::new(f)))
        .collect();
    let cfg = GpConfig {
        population_size: 4,
        crossover_rate: 0.0,
        mutation_rate: 0.0,
        ..GpConfig::default()
    };
    let (elites, children) = breed_trees(&pop, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(elites, vec![1]);
    assert_eq!(children.len(), 3);
    for c in &children {
        assert!(pop.iter().any(|(t, _)| t == c));
    }
}

#[test]
fn default_population_has_two_elites_and_23_children() {
    let pop: Vec<(ExprTree, Fitness)> = (0..25)
        .map(|i| ("(- y f)".parse().unwrap(), Fitness::new(i as f64)))
        .collect();
    let cfg = GpConfig::default();
    let (elites, children) = breed_trees(&pop, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!((elites.len(), children.len()), (2, 23));
    assert_eq!(elites, vec![0, 1]);
    let again = breed_trees(&pop, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(again.1, children);
}

#[test]
fn filter_statistics_export() {
    let out = run(&small(false, 4, 2), &regression(), 1).unwrap();
    let mut buf = Vec::new();
    write_filter_stats(&out.history, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "generation,cached_symbolic,rejected,cached_gradient,diverged,evaluated,best_fitness"
    );
    assert_eq!(lines.count(), 2);
}

#[test]
fn invalid_configuration_is_refused() {
    let mut cfg = small(true, 4, 2);
    cfg.gp.crossover_rate = 2.0;
    assert!(run(&cfg, &regression(), 0).is_err());
    assert!(run(&small(true, 4, 2), &[], 0).is_err());
}

#[test]
fn breeding_seed_varies_the_search_only() {
    let base = small(false, 5, 1);
    let other = EvolutionConfig {
        gp: GpConfig {
            rng_seed: 1,
            ..base.gp.clone()
        },
        ..base.clone()
    };
    let a = run(&base, &regression(), 2).unwrap();
    let b = run(&other, &regression(), 2).unwrap();
    let trees = |r: &metaloss_core::EvolutionRun| r.population.iter().map(|c| c.tree.clone()).collect::<Vec<_>>();
    assert_ne!(trees(&a), trees(&b));
}
