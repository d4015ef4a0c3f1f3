//! Reptile update rules, evaluation contracts and batch-norm symmetries.

use autometa::data::{generate_synthetic_glyphs, sample_episode, ClassDataset, Episode, LabeledBatch};
use autometa::layers::Mode;
use autometa::meta::{
    evaluate_episodes, evaluate_meta, inner_adapt, reptile_outer_step, reptile_train, sample_eval_episodes,
    MetaConfig, MetaTask,
};
use autometa::network::{compile_network, ModelState, Network, NetworkSpec};
use autometa::optim::OptimKind;
use autometa::{rng, CellSpec};

fn setup(cell: &str, seed: u64) -> (Network, ModelState, ClassDataset) {
    let spec = NetworkSpec::new(CellSpec::from_json(cell).unwrap(), 4, 5);
    let (net, state) = compile_network(&spec, seed).unwrap();
    (net, state, generate_synthetic_glyphs(seed, 12, 8, 8).unwrap())
}

fn conv_net(seed: u64) -> (Network, ModelState, ClassDataset) {
    setup(r#"[[0,"conv3",1,"conv3"]]"#, seed)
}

fn sgd_one_step() -> MetaConfig {
    MetaConfig {
        inner_iterations: 1,
        inner_optimizer: OptimKind::Sgd,
        inner_lr: 0.01,
        meta_batch: 1,
        ..MetaConfig::default()
    }
}

fn max_diff(a: &ModelState, b: &ModelState) -> f64 {
    a.params
        .iter()
        .zip(&b.params)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn zero_inner_iterations_returns_theta() {
    let (net, theta, ds) = conv_net(1);
    let cfg = MetaConfig {
        inner_iterations: 0,
        ..MetaConfig::default()
    };
    let task = MetaTask::sample(&ds, &cfg, 3).unwrap();
    let phi = inner_adapt(&net, &theta, &task.episode.support, &cfg, 0, &mut rng::stream(0, "x", 0)).unwrap();
    assert_eq!(phi, theta);
}

#[test]
fn empty_support_is_an_error() {
    let (net, theta, ds) = conv_net(1);
    let cfg = MetaConfig::default();
    let task = MetaTask::sample(&ds, &cfg, 3).unwrap();
    let empty = task.episode.support.select(&[]);
    assert!(inner_adapt(&net, &theta, &empty, &cfg, 1, &mut rng::stream(0, "x", 0)).is_err());
}

#[test]
fn sgd_outer_step_is_a_plain_gradient_step() {
    let (net, theta, ds) = conv_net(2);
    let cfg = sgd_one_step();
    let task = MetaTask::sample(&ds, &cfg, 9).unwrap();
    let eps = 0.7;
    let next = reptile_outer_step(&net, &theta, std::slice::from_ref(&task), &cfg, eps).unwrap();

    let mut probe = theta.clone();
    let s = &task.episode.support;
    let (_, grads) = net
        .loss_and_grads(&mut probe, s.images.clone(), &s.labels, Mode::Train)
        .unwrap();
    let mut expected = theta.clone();
    for (p, g) in expected.params.iter_mut().zip(&grads) {
        p.axpy(-eps * cfg.inner_lr, g).unwrap();
    }
    assert!(max_diff(&next, &expected) <= 1e-12);
}

#[test]
fn unit_outer_step_adopts_adapted_parameters() {
    let (net, theta, ds) = conv_net(3);
    let cfg = MetaConfig {
        meta_batch: 1,
        inner_lr: 0.01,
        ..MetaConfig::default()
    };
    let task = MetaTask::sample(&ds, &cfg, 4).unwrap();
    let next = reptile_outer_step(&net, &theta, std::slice::from_ref(&task), &cfg, 1.0).unwrap();
    let phi = inner_adapt(
        &net,
        &theta,
        &task.episode.support,
        &cfg,
        cfg.inner_iterations,
        &mut rng::stream(task.seed, "inner", 0),
    )
    .unwrap();
    assert!(max_diff(&next, &phi) <= 1e-12);
}

#[test]
fn duplicated_task_matches_single_task() {
    let (net, theta, ds) = conv_net(4);
    let cfg = MetaConfig {
        train_shots: Some(3),
        ..MetaConfig::default()
    };
    let task = MetaTask::sample(&ds, &cfg, 5).unwrap();
    let one = reptile_outer_step(&net, &theta, std::slice::from_ref(&task), &cfg, 0.5).unwrap();
    let two = reptile_outer_step(&net, &theta, &[task.clone(), task], &cfg, 0.5).unwrap();
    assert!(max_diff(&one, &two) <= 1e-12);
}

#[test]
fn inner_loop_lowers_support_loss() {
    let cfg = MetaConfig {
        inner_lr: 0.01,
        ..MetaConfig::default()
    };
    let mut improved = 0;
    for trial in 0..100u64 {
        let (net, theta, ds) = conv_net(trial % 4);
        let task = MetaTask::sample(&ds, &cfg, 100 + trial).unwrap();
        let s = &task.episode.support;
        let loss = |state: &ModelState| {
            let mut st = state.clone();
            net.loss_and_grads(&mut st, s.images.clone(), &s.labels, Mode::Train)
                .unwrap()
                .0
        };
        let phi = inner_adapt(&net, &theta, s, &cfg, 8, &mut rng::stream(trial, "inner", 0)).unwrap();
        if loss(&phi) < loss(&theta) {
            improved += 1;
        }
    }
    assert!(improved >= 95, "{improved}/100");
}

#[test]
fn untrained_network_is_at_chance() {
    let (net, theta, _) = conv_net(5);
    let ds = generate_synthetic_glyphs(50, 20, 20, 8).unwrap();
    let cfg = MetaConfig {
        eval_inner_iterations: 0,
        ..MetaConfig::default()
    };
    let episodes = sample_eval_episodes(&ds, &cfg, 200, 1).unwrap();
    let before = theta.clone();
    let (acc, _) = evaluate_meta(&net, &theta, &episodes, &cfg, 1).unwrap();
    assert_eq!(before, theta);
    // sd of the mean if each episode were a single Bernoulli trial, which
    // bounds the correlated per-query case
    let sigma = (0.2f64 * 0.8 / 200.0).sqrt();
    assert!((acc - 0.2).abs() <= 3.0 * sigma, "accuracy {acc}");
    assert!(evaluate_meta(&net, &theta, &[], &cfg, 1).is_err());
}

fn permuted(batch: &LabeledBatch, order: &[usize]) -> LabeledBatch {
    batch.select(order)
}

#[test]
fn transduction_is_permutation_equivariant_and_batch_dependent() {
    let (net, theta, ds) = conv_net(6);
    let ep = sample_episode(&ds, 5, 1, 3, &mut rng::stream(6, "ep", 0)).unwrap();
    let n = ep.query.len();
    let order: Vec<usize> = (0..n).rev().collect();
    let q = &ep.query;
    let qp = permuted(q, &order);

    let mut st = theta.clone();
    let a = net.logits(&mut st, q.images.clone(), Mode::EvalTransduction).unwrap();
    let b = net.logits(&mut st, qp.images.clone(), Mode::EvalTransduction).unwrap();
    let c = a.dim(1);
    for (i, &o) in order.iter().enumerate() {
        for k in 0..c {
            assert!((b.data()[i * c + k] - a.data()[o * c + k]).abs() <= 1e-12);
        }
    }

    // a query batch of one class only skews the batch statistics
    let skew: Vec<usize> = (0..n).filter(|&i| q.labels[i] == q.labels[0]).collect();
    let skewed = q.select(&skew);
    let running = net.logits(&mut st, skewed.images.clone(), Mode::EvalRunning).unwrap();
    let trans = net.logits(&mut st, skewed.images.clone(), Mode::EvalTransduction).unwrap();
    let diff = running
        .data()
        .iter()
        .zip(trans.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(diff > 1e-6);
}

#[test]
fn running_statistics_make_predictions_independent_of_the_batch() {
    let (net, theta, ds) = conv_net(7);
    let ep = sample_episode(&ds, 5, 1, 4, &mut rng::stream(7, "ep", 0)).unwrap();
    let mut st = theta.clone();
    let full = net.logits(&mut st, ep.query.images.clone(), Mode::EvalRunning).unwrap();
    let c = full.dim(1);
    for i in [0, 3, 11] {
        let one = net.logits(&mut st, ep.query.select(&[i]).images, Mode::EvalRunning).unwrap();
        for k in 0..c {
            assert!((one.data()[k] - full.data()[i * c + k]).abs() <= 1e-9);
        }
    }
    assert_eq!(st, theta);
}

fn relabel(ep: &Episode, perm: &[usize]) -> Episode {
    let map = |b: &LabeledBatch| LabeledBatch {
        labels: b.labels.iter().map(|&l| perm[l]).collect(),
        ..b.clone()
    };
    Episode {
        support: map(&ep.support),
        query: map(&ep.query),
        ..ep.clone()
    }
}

#[test]
fn accuracy_is_invariant_to_relabeling() {
    let (net, theta, ds) = conv_net(8);
    let cfg = MetaConfig {
        inner_lr: 0.01,
        ..MetaConfig::default()
    };
    let episodes = sample_eval_episodes(&ds, &MetaConfig { query_per_class: 3, ..cfg.clone() }, 6, 2).unwrap();
    // label l becomes perm[l]; the head row of new class perm[l] must be the
    // old row l, i.e. inverse[perm[l]] = l
    let perm = [3, 0, 4, 1, 2];
    let mut inverse = [0; 5];
    for (l, &p) in perm.iter().enumerate() {
        inverse[p] = l;
    }
    let mut moved = theta.clone();
    net.permute_classes(&mut moved, &inverse).unwrap();
    let relabeled: Vec<Episode> = episodes.iter().map(|e| relabel(e, &perm)).collect();
    let a = evaluate_episodes(&net, &theta, &episodes, &cfg, 3).unwrap();
    let b = evaluate_episodes(&net, &moved, &relabeled, &cfg, 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn training_trace_is_reproducible() {
    let (net, theta, ds) = conv_net(9);
    let cfg = MetaConfig {
        outer_iterations: 3,
        meta_batch: 2,
        inner_iterations: 2,
        eval_interval: 2,
        query_per_class: 2,
        ..MetaConfig::default()
    };
    let eval = sample_eval_episodes(&ds, &cfg, 4, 0).unwrap();
    let a = reptile_train(&net, theta.clone(), &ds, &eval, &cfg, 17).unwrap();
    let b = reptile_train(&net, theta.clone(), &ds, &eval, &cfg, 17).unwrap();
    assert_eq!(a.state, b.state);
    let rows = |t: &[autometa::meta::TraceRow]| t.iter().map(|r| (r.outer_iter, r.meta_test_acc, r.ci95)).collect::<Vec<_>>();
    assert_eq!(rows(&a.trace), rows(&b.trace));
    assert_eq!(a.trace.iter().map(|r| r.outer_iter).collect::<Vec<_>>(), vec![2, 3]);

    let none = reptile_train(&net, theta.clone(), &ds, &eval, &MetaConfig { outer_iterations: 0, ..cfg }, 17).unwrap();
    assert_eq!(none.state, theta);
}
