mod support;

use std::cell::Cell;
use std::collections::BTreeSet;

use petl_core::backbone::{ArchConfig, Backbone, Head, HeadConfig};
use petl_core::harness::{
    evaluate, generate_task, timing_probe, train, Clock, Dataset, Label, TaskKind, TaskSpec, TrainConfig, MIN_REPS,
};
use petl_core::petl::{AdaptedModel, Method};
use support::bits;

fn task(kind: TaskKind, d: usize, seed: u64) -> Dataset {
    let mut spec = TaskSpec::new(kind, d);
    spec.seq_len = 6;
    spec.n_train = 32;
    spec.n_val = 8;
    spec.n_test = 32;
    spec.seed = seed;
    generate_task(&spec).unwrap()
}

fn snapshot(model: &AdaptedModel<f32>) -> Vec<(String, Vec<u64>)> {
    model.base().params().iter().map(|p| (p.name.clone(), bits(&p.tensor))).collect()
}

#[test]
fn frozen_parameters_survive_training_bitwise() {
    let data = task(TaskKind::Genre, 16, 1);
    let cfg = TrainConfig {
        steps: 100,
        batch_size: 4,
        ..TrainConfig::default()
    };
    for arch in [ArchConfig::transformer(16, 3, 2), ArchConfig::conformer(16, 3, 2).with_conv_kernel(3)] {
        for method in Method::table_rows() {
            let base = Backbone::<f32>::build(arch, 2).unwrap().with_use_layers(2).unwrap();
            let model = AdaptedModel::inject(base, method).unwrap();
            let head = Head::new(HeadConfig::new(10, TaskKind::Genre.output_kind()), 16, 3).unwrap();
            let trainable: BTreeSet<String> = model.base().params().trainable().map(|p| p.name.clone()).collect();
            let before = snapshot(&model);
            train(&model, &head, &data, &cfg).unwrap();
            let after = snapshot(&model);
            let mut changed = BTreeSet::new();
            for ((name, b), (_, a)) in before.iter().zip(&after) {
                if a != b {
                    changed.insert(name.clone());
                }
            }
            assert!(changed.is_subset(&trainable), "{method:?}: {:?}", changed.difference(&trainable));
            let used = |n: &str| n.starts_with("layer.0.") || n.starts_with("layer.1.");
            match method {
                Method::Probing => assert!(trainable.is_empty()),
                Method::FineTune => assert!(trainable.iter().all(|n| used(n))),
                Method::Petl(petl_core::petl::PetlConfig::BitFit) => {
                    let biases: BTreeSet<String> = before
                        .iter()
                        .map(|(n, _)| n.clone())
                        .filter(|n| used(n) && n.ends_with(".bias"))
                        .collect();
                    assert_eq!(trainable, biases);
                    assert_eq!(changed, biases, "every bias receives updates");
                }
                Method::Petl(_) => assert!(trainable.is_empty(), "{method:?}"),
            }
        }
    }
}

#[test]
fn training_is_deterministic() {
    let data = task(TaskKind::Tagging, 16, 4);
    let cfg = TrainConfig {
        steps: 20,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let run = || {
        let base = Backbone::<f32>::build(ArchConfig::transformer(16, 2, 2), 5).unwrap();
        let model = AdaptedModel::inject(base, petl_core::petl::PetlConfig::lora().into()).unwrap();
        let head = Head::new(HeadConfig::new(50, TaskKind::Tagging.output_kind()), 16, 6).unwrap();
        let h = train(&model, &head, &data, &cfg).unwrap();
        let e = evaluate(&model, &head, &data, &data.test, 50, 7).unwrap();
        (h, e)
    };
    let (h1, e1) = run();
    let (h2, e2) = run();
    assert_eq!(h1, h2);
    assert_eq!(e1, e2);
}

#[test]
fn dataset_regeneration_is_identical() {
    let a = task(TaskKind::Tempo, 8, 9);
    let b = task(TaskKind::Tempo, 8, 9);
    assert_eq!(a, b);
    assert_ne!(a, task(TaskKind::Tempo, 8, 10));
}

/// Nearest-centroid classification of time-averaged inputs, a linear probe
/// on the planted code.
#[test]
fn linear_probe_on_planted_features_separates_genres() {
    let mut spec = TaskSpec::new(TaskKind::Genre, 32);
    spec.n_train = 256;
    spec.n_test = 256;
    spec.seed = 12;
    let data = generate_task(&spec).unwrap();
    let pooled = |x: &[f64]| -> Vec<f64> {
        let mut m = vec![0.0; 32];
        for frame in x.chunks(32) {
            m.iter_mut().zip(frame).for_each(|(a, b)| *a += b / spec.seq_len as f64);
        }
        m
    };
    let class = |l: &Label| match l {
        Label::Class(c) => *c,
        _ => unreachable!(),
    };
    let mut centroids = vec![vec![0.0; 32]; 10];
    let mut counts = [0.0f64; 10];
    for ex in &data.train {
        let c = class(&ex.label);
        counts[c] += 1.0;
        centroids[c].iter_mut().zip(pooled(&ex.x)).for_each(|(a, b)| *a += b);
    }
    for (c, n) in centroids.iter_mut().zip(counts) {
        c.iter_mut().for_each(|v| *v /= n.max(1.0));
    }
    let correct = data
        .test
        .iter()
        .filter(|ex| {
            let p = pooled(&ex.x);
            let dist = |c: &Vec<f64>| c.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..10).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            best == class(&ex.label)
        })
        .count();
    let acc = correct as f64 / data.test.len() as f64;
    assert!(acc > 0.9, "{acc}");
}

struct FakeClock {
    now: Cell<u64>,
    tick: u64,
}

impl Clock for FakeClock {
    fn now_ns(&self) -> u64 {
        let t = self.now.get();
        self.now.set(t + self.tick);
        t
    }
}

#[test]
fn timing_probe_with_a_fake_clock() {
    let data = task(TaskKind::Genre, 8, 13);
    let base = Backbone::<f32>::build(ArchConfig::transformer(8, 1, 2), 0).unwrap();
    let model = AdaptedModel::inject(base, Method::FineTune).unwrap();
    let head = Head::new(HeadConfig::new(10, TaskKind::Genre.output_kind()), 8, 0).unwrap();
    let weights: Vec<Vec<u64>> = model.base().params().iter().map(|p| bits(&p.tensor)).collect();
    let clock = FakeClock {
        now: Cell::new(0),
        tick: 2_000_000,
    };
    let t = timing_probe(&model, &head, &data, &data.train[..4], 1, &clock).unwrap();
    assert_eq!(t.train_ms_per_step, 2.0);
    assert_eq!(t.infer_ms_per_example, 2.0);
    assert_eq!(clock.now.get(), 2 * 2 * 2_000_000 * (MIN_REPS as u64 + 1));
    assert_eq!(t.ratio_to(&t), (1.0, 1.0));
    let after: Vec<Vec<u64>> = model.base().params().iter().map(|p| bits(&p.tensor)).collect();
    assert_eq!(weights, after, "probing time does not update parameters");
}
