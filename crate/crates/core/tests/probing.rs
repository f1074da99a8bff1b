mod common;

use std::collections::BTreeMap;

use pruneprobe::corpus::{generate_corpus, GrammarParams, SubtokenMap};
use pruneprobe::model::{ActivationDump, Component, TokenMeta};
use pruneprobe::probing::*;
use pruneprobe::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn one_sentence_dump(rows: &[Vec<f64>]) -> ActivationDump {
    let tokens = (0..rows.len())
        .map(|i| TokenMeta {
            sentence: 0,
            position: i as u32,
            token: 3,
        })
        .collect();
    ActivationDump {
        encoder: vec![Tensor::from_rows(rows).unwrap()],
        decoder: Vec::new(),
        encoder_tokens: tokens,
        decoder_tokens: Vec::new(),
    }
}

#[test]
fn token_reps_average_subtokens() {
    let dump = one_sentence_dump(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![7.0, 7.0], vec![5.0, 6.0], vec![5.0, 6.0]]);
    let map = SubtokenMap {
        ids: vec![10, 11, 12, 13, 14],
        owner: vec![0, 0, 1, 2, 2],
    };
    let reps = extract_token_reps(&dump, Component::Encoder, 1, 0, &map).unwrap();
    assert_eq!(reps.row(0), &[2.0, 3.0]);
    assert_eq!(reps.row(1), &[7.0, 7.0]);
    assert_eq!(reps.row(2), &[5.0, 6.0]);
    assert!(extract_token_reps(&dump, Component::Encoder, 2, 0, &map).is_err());
}

#[test]
fn pairwise_feature_examples() {
    assert_eq!(
        build_pairwise_features(&[1.0, 2.0], &[3.0, 4.0]).unwrap(),
        vec![1.0, 2.0, 3.0, 4.0, 3.0, 8.0]
    );
    let f = build_pairwise_features(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
    assert_eq!(&f[..2], &[0.0, 0.0]);
    assert_eq!(&f[4..], &[0.0, 0.0]);
    let ab = build_pairwise_features(&[1.5, -2.0], &[0.5, 3.0]).unwrap();
    let ba = build_pairwise_features(&[0.5, 3.0], &[1.5, -2.0]).unwrap();
    assert_eq!(&ab[..2], &ba[2..4]);
    assert_eq!(&ab[2..4], &ba[..2]);
    assert_eq!(&ab[4..], &ba[4..]);
}

fn dataset(n: usize, d: usize, seed: u64, label: impl Fn(&[f64]) -> usize) -> ProbeDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        labels.push(label(&x));
        data.extend(x);
    }
    ProbeDataset::new(Tensor::matrix(n, d, data).unwrap(), labels, 2).unwrap()
}

fn splits(n: usize, seed: u64, label: impl Fn(&[f64]) -> usize + Copy) -> ProbeSplits {
    ProbeSplits {
        train: dataset(n, 6, seed, label),
        dev: dataset(n / 4, 6, seed + 1, label),
        test: dataset(n / 2, 6, seed + 2, label),
    }
}

fn linear_rule(x: &[f64]) -> usize {
    (x[0] + 0.5 * x[1] - x[2] > 0.0) as usize
}

/// Two classes separated by a margin of 2 along a fixed direction.
fn margin_dataset(n: usize, seed: u64) -> ProbeDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let y = i % 2;
        let mut x: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
        x[0] = rng.random_range(1.0..3.0) * if y == 1 { 1.0 } else { -1.0 };
        data.extend(x);
        labels.push(y);
    }
    ProbeDataset::new(Tensor::matrix(n, 6, data).unwrap(), labels, 2).unwrap()
}

#[test]
fn separable_task_is_learned() {
    let s = ProbeSplits {
        train: margin_dataset(600, 1),
        dev: margin_dataset(150, 2),
        test: margin_dataset(300, 3),
    };
    for family in [ProbeFamily::Linear, ProbeFamily::Mlp] {
        let r = train_probe(family, 6, &s, &ProbeTraining::default(), 0).unwrap();
        assert_eq!(r.test_accuracy, 1.0, "{:?}", family);
    }
}

/// Features of a separable task with labels permuted within each split,
/// balanced to exactly half of each class.
fn balanced_control(n: usize, seed: u64) -> ProbeSplits {
    let mk = |n: usize, seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let x: Vec<f64> = (0..6)
                .map(|j| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    if j == 0 { z.abs() * if y == 1 { 1.0 } else { -1.0 } } else { z }
                })
                .collect();
            data.extend(x);
            labels.push(y);
        }
        ProbeDataset::new(Tensor::matrix(n, 6, data).unwrap(), labels, 2)
            .unwrap()
            .shuffled_labels(seed ^ 0xc0)
    };
    ProbeSplits {
        train: mk(n, seed),
        dev: mk(n / 4, seed + 1),
        test: mk(n, seed + 2),
    }
}

#[test]
fn control_task_scores_chance() {
    let s = balanced_control(2000, 7);
    assert_eq!(s.test.labels.iter().filter(|&&l| l == 1).count(), 1000);
    for family in [ProbeFamily::Linear, ProbeFamily::Mlp] {
        let r = train_probe(family, 6, &s, &ProbeTraining::default(), 3).unwrap();
        assert!((r.test_accuracy - 0.5).abs() <= 0.05, "{:?}: {}", family, r.test_accuracy);
    }
}

#[test]
fn mlp_is_not_worse_than_linear() {
    let tasks: [fn(&[f64]) -> usize; 3] = [
        linear_rule,
        |x| (x[0] * x[1] > 0.0) as usize,
        |x| (x[0] * x[0] + x[1] * x[1] > 1.4) as usize,
    ];
    for (i, t) in tasks.iter().enumerate() {
        let s = splits(1200, 20 + i as u64, *t);
        let lin = train_probe(ProbeFamily::Linear, 6, &s, &ProbeTraining::default(), 0).unwrap();
        let mlp = train_probe(ProbeFamily::Mlp, 6, &s, &ProbeTraining::default(), 0).unwrap();
        assert!(
            mlp.test_accuracy >= lin.test_accuracy - 0.02,
            "task {}: mlp {} linear {}",
            i,
            mlp.test_accuracy,
            lin.test_accuracy
        );
    }
}

#[test]
fn single_class_training_rejected() {
    let s = splits(200, 5, |_| 0);
    assert!(train_probe(ProbeFamily::Linear, 6, &s, &ProbeTraining::default(), 0).is_err());
}

#[test]
fn zscore_examples() {
    let z = zscores(&[1.0, 2.0, 3.0]).unwrap();
    let s = (2.0f64 / 3.0).sqrt();
    for (a, b) in z.iter().zip([-1.0 / s, 0.0, 1.0 / s]) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((z[2] - 1.2247).abs() < 1e-4);
    assert_eq!(zscores(&[0.7; 4]).unwrap(), vec![0.0; 4]);
}

/// Ranks by counting, then Pearson on the ranks.
fn spearman_oracle(y: &[f64]) -> f64 {
    let rank = |v: &[f64], i: usize| {
        let less = v.iter().filter(|&&x| x < v[i]).count() as f64;
        let eq = v.iter().filter(|&&x| x == v[i]).count() as f64;
        less + (eq + 1.0) / 2.0
    };
    let x: Vec<f64> = (0..y.len()).map(|i| i as f64).collect();
    let rx: Vec<f64> = (0..x.len()).map(|i| rank(&x, i)).collect();
    let ry: Vec<f64> = (0..y.len()).map(|i| rank(y, i)).collect();
    common::oracles::pearson(&rx, &ry)
}

#[test]
fn trend_examples() {
    let t = TrendThresholds::default();
    assert_eq!(classify_trend(&[1.0, 2.0, 3.0, 4.0, 5.0], &t).unwrap(), (Trend::SparsityImproving, 1.0));
    assert_eq!(classify_trend(&[3.0; 6], &t).unwrap(), (Trend::SparsityInvariant, 0.0));
    let v = [5.0, 5.0, 5.0, 4.5, 4.0, 3.5, 3.0, 3.0, 2.5];
    let (trend, rho) = classify_trend(&v, &t).unwrap();
    assert_eq!(trend, Trend::SparsityDegrading);
    assert!((rho - spearman_oracle(&v)).abs() < 1e-12);
    assert!(classify_trend(&[1.0, 2.0, 3.0, 4.0], &t).is_err());
}

fn report(models: usize, layers: usize, tasks: &[ProbeTask], seed: u64) -> ProbeReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = (0..models).map(|k| format!("lth{}", k)).collect();
    let mut rows = Vec::new();
    for m in &names {
        for &task in tasks {
            for layer in 1..=layers {
                for family in [ProbeFamily::Linear, ProbeFamily::Mlp] {
                    rows.push(ProbeRow {
                        model: m.clone(),
                        layer,
                        task,
                        family,
                        metric: rng.random_range(0.3..1.0),
                        per_class: Vec::new(),
                    });
                }
            }
        }
    }
    ProbeReport { models: names, rows }
}

#[test]
fn zscore_table_is_standardized() {
    let tasks = [ProbeTask::Tag, ProbeTask::ParentTag, ProbeTask::ArcLabel];
    let r = report(5, 3, &tasks, 9);
    let table = zscore_table(&r, ProbeFamily::Linear).unwrap();
    for z in table.rows.values() {
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let std = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-9);
        assert!((std - 1.0).abs() < 1e-9);
    }
    for &task in &tasks {
        for m in &r.models {
            let brute = (1..=3)
                .map(|l| r.metric(m, l, task, ProbeFamily::Linear).unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(r.best_over_layers(m, task, ProbeFamily::Linear), Some(brute));
        }
    }
}

#[test]
fn layer_group_examples() {
    let mut lz = BTreeMap::new();
    lz.insert((ProbeTask::Tag, 1), vec![1.0, -1.0, 0.5]);
    lz.insert((ProbeTask::ParentTag, 1), vec![-1.0, 1.0, -0.5]);
    lz.insert((ProbeTask::GParentTag, 1), vec![0.4, 0.2, -0.6]);
    let single = layer_group_summary(&lz, &[ProbeTask::GParentTag]).unwrap();
    assert_eq!(single[&(0, 1)], 0.4);
    assert_eq!(single[&(2, 1)], -0.6);
    let cancel = layer_group_summary(&lz, &[ProbeTask::Tag, ProbeTask::ParentTag]).unwrap();
    assert!(cancel.values().all(|&v| v == 0.0));
    let three = layer_group_summary(&lz, &[ProbeTask::Tag, ProbeTask::ParentTag, ProbeTask::GParentTag]).unwrap();
    let want = [0.4 / 3.0, 0.2 / 3.0, -0.6 / 3.0];
    for (m, w) in want.iter().enumerate() {
        assert!((three[&(m, 1)] - w).abs() < 1e-15);
    }
}

#[test]
fn task_items_are_well_formed() {
    let corpus = generate_corpus(3, 200, &GrammarParams::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for task in [
        ProbeTask::Tag,
        ProbeTask::ParentTag,
        ProbeTask::GParentTag,
        ProbeTask::GGParentTag,
        ProbeTask::ArcPrediction,
        ProbeTask::ArcLabel,
        ProbeTask::Agreement,
    ] {
        let items = task_items(task, &corpus.train, &mut rng);
        assert!(!items.is_empty(), "{:?}", task);
        assert!(items.iter().all(|it| it.label < task.num_classes()));
        if task == ProbeTask::ArcPrediction {
            let pos = items.iter().filter(|it| it.label == 1).count();
            assert_eq!(pos * 2, items.len(), "negatives are sampled 1:1");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn zscores_invariant_to_affine_rescaling(
        v in prop::collection::vec(-10.0f64..10.0, 2..12),
        a in 0.1f64..20.0,
        b in -50.0f64..50.0,
    ) {
        let z = zscores(&v).unwrap();
        let w: Vec<f64> = v.iter().map(|x| a * x + b).collect();
        let zw = zscores(&w).unwrap();
        for (p, q) in z.iter().zip(&zw) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn spearman_is_bounded(v in prop::collection::vec(-5.0f64..5.0, 5..12)) {
        let x: Vec<f64> = (0..v.len()).map(|i| i as f64).collect();
        let rho = spearman(&x, &v);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&rho));
        prop_assert!((rho - spearman_oracle(&v)).abs() < 1e-9 || v.iter().all(|&y| y == v[0]));
    }
}
