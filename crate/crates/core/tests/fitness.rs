use metaloss_core::fitness::{
    evaluate_fitness, gradient_equivalence_key, rejection_protocol, CacheEntry, ProbeSet, SymbolicCache,
};
use metaloss_core::train::predict;
use metaloss_core::{
    Activation, BuiltinLoss, ExprTree, FilterConfig, Fitness, LearnerSpec, MetaLossNetwork, Model, Scaled, TaskDataset,
    TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit(s: &str) -> MetaLossNetwork {
    MetaLossNetwork::unit(s.parse().unwrap(), Activation::Identity)
}

fn blobs() -> TaskDataset {
    TaskDataset::blobs(2, 2, 4.0, 500, 0).unwrap()
}

#[test]
fn symbolic_cache_is_structural() {
    let mut cache = SymbolicCache::new();
    let t: ExprTree = "(sq (- y f))".parse().unwrap();
    assert!(cache.lookup(&t).is_none());
    cache.insert(
        &t,
        CacheEntry {
            fitness: Fitness::new(0.25),
            net: None,
        },
    );
    assert_eq!(
        cache.lookup(&"(sq (- y f))".parse().unwrap()).unwrap().fitness,
        Fitness::new(0.25)
    );
    assert!(cache.lookup(&"(sq (- f y))".parse().unwrap()).is_none());
}

#[test]
fn rejection_keeps_aligned_losses_and_drops_their_negations() {
    let task = blobs();
    let model = LearnerSpec::default().build(task.features(), task.kind());
    let cfg = FilterConfig::default();
    let keep = [
        unit("(* -1 (* y (log f)))"),
        unit("(abs (log (* y f)))"),
        unit("(sq (- y f))"),
    ];
    let drop = [unit("(* y (log f))"), unit("(* -1 (sq (- y f)))")];
    for seed in 0..20 {
        let probe = ProbeSet::draw(&model, &task, cfg.probe_batch, seed).unwrap();
        for net in &keep {
            let out = rejection_protocol(net, &probe, &cfg).unwrap();
            assert!(out.accepted, "seed {seed}: {} g={}", net.tree(), out.g);
        }
        for net in &drop {
            let out = rejection_protocol(net, &probe, &cfg).unwrap();
            assert!(!out.accepted, "seed {seed}: {} g={}", net.tree(), out.g);
        }
    }
}

#[test]
fn constant_loss_gains_nothing() {
    let task = blobs();
    let model = LearnerSpec::default().build(task.features(), task.kind());
    let cfg = FilterConfig::default();
    let probe = ProbeSet::draw(&model, &task, 64, 1).unwrap();
    let out = rejection_protocol(&unit("(- (- y y) (- f f))"), &probe, &cfg).unwrap();
    assert_eq!(out.g, 0.0);
    assert!(!out.accepted);
}

#[test]
fn gradient_keys_see_magnitudes_not_signs() {
    let task = blobs();
    let model = LearnerSpec::default().build(task.features(), task.kind());
    let probe = ProbeSet::draw(&model, &task, 256, 2).unwrap();
    let key = |l: &dyn metaloss_core::PredictionLoss| gradient_equivalence_key(&l, &probe, 2).unwrap().unwrap();
    let a = unit("(sq (- y f))");
    let b = unit("(sq (- f y))");
    assert_eq!(key(&a), key(&a));
    assert_eq!(key(&a), key(&b));
    let ten = Scaled {
        factor: 10.0,
        inner: a.clone(),
    };
    assert_ne!(key(&a), key(&ten));
    assert_eq!(key(&a).split(',').count(), 256);
}

#[test]
fn probe_predictions_are_softmax_rows() {
    let task = TaskDataset::blobs(3, 2, 4.0, 300, 0).unwrap();
    let model = LearnerSpec::default().build(task.features(), task.kind());
    let probe = ProbeSet::draw(&model, &task, 32, 0).unwrap();
    for i in 0..probe.len() {
        let s: f64 = probe.predictions.row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn squared_error_tree_separates_distant_blobs() {
    let task = TaskDataset::blobs(2, 2, 12.0, 500, 0).unwrap();
    let model = LearnerSpec::default().build(task.features(), task.kind());
    let cfg = TrainConfig::default();
    let f = evaluate_fitness(&unit("(sq (- y f))"), &model, &task, &cfg).unwrap();
    assert_eq!(f, Fitness::new(0.0));
}

#[test]
fn constant_loss_scores_like_an_untrained_model() {
    let task = blobs();
    let model = LearnerSpec::default().build(task.features(), task.kind());
    let cfg = TrainConfig::default();
    let f = evaluate_fitness(&unit("(- (- y y) (- f f))"), &model, &task, &cfg).unwrap();
    let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let rows = &task.splits().val;
    let untrained = task.metric(rows, &predict(&model, &params, &task, rows).unwrap());
    assert_eq!(f.value(), untrained);
}

#[test]
fn squared_error_tree_matches_the_builtin_on_regression() {
    let task = TaskDataset::linear_regression(3, 0.1, 300, 4).unwrap();
    let model = LearnerSpec::default().build(task.features(), task.kind());
    let cfg = TrainConfig {
        steps: 200,
        ..TrainConfig::default()
    };
    let tree = evaluate_fitness(
        &MetaLossNetwork::unit(BuiltinLoss::SquaredError.tree(), Activation::Identity),
        &model,
        &task,
        &cfg,
    )
    .unwrap();
    let builtin = evaluate_fitness(&BuiltinLoss::SquaredError, &model, &task, &cfg).unwrap();
    assert!((tree.value() - builtin.value()).abs() < 1e-10);
    let again = evaluate_fitness(&BuiltinLoss::SquaredError, &model, &task, &cfg).unwrap();
    assert_eq!(builtin.value().to_bits(), again.value().to_bits());
}

#[test]
fn divergent_losses_get_the_worst_fitness() {
    let task = TaskDataset::linear_regression(3, 0.1, 300, 4).unwrap();
    let model = LearnerSpec::default().build(task.features(), task.kind());
    let cfg = TrainConfig {
        steps: 500,
        lr: 1.0,
        ..TrainConfig::default()
    };
    // Maximizing the squared error has no finite optimum.
    let f = evaluate_fitness(&unit("(* -1 (sq (- y f)))"), &model, &task, &cfg).unwrap();
    assert!(f.is_worst(), "{f:?}");
    assert!(Fitness::WORST > Fitness::new(1e300));
}
