use std::collections::BTreeMap;

use proptest::prelude::*;
use pruneprobe::corpus::{generate_corpus, GrammarParams};
use pruneprobe::model::{Component, LayerKind, ModelConfig, ModulePath, ParamScope, ParameterRegistry, Proj};
use pruneprobe::pruning::{
    imp_run, magnitude_prune, magnitude_prune_to, random_prune, random_prune_to, scheduled_kept, sparsity_report,
    train_lth0, ImpData, ImpSettings, MaskSet, Pruner, RewindMode,
};
use pruneprobe::tensor::Tensor;
use pruneprobe::training::{encode_pairs, TrainRecipe};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TABLE_EXCL: [&str; 7] = ["0.200", "0.360", "0.488", "0.590", "0.672", "0.738", "0.790"];

fn enc(layer: usize, kind: LayerKind) -> ModulePath {
    ModulePath::layer(Component::Encoder, layer, kind)
}

fn registry(paths: &[(ModulePath, usize)], seed: u64) -> ParameterRegistry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = paths
        .iter()
        .map(|(p, n)| {
            let v: Vec<f64> = (0..*n).map(|_| rng.random_range(-1.0..1.0)).collect();
            (*p, Tensor::matrix(1, *n, v).unwrap())
        })
        .collect::<BTreeMap<_, _>>();
    ParameterRegistry::from_values(map)
}

fn mixed_registry(seed: u64) -> ParameterRegistry {
    registry(
        &[
            (enc(1, LayerKind::Fc1), 300),
            (enc(1, LayerKind::Fc2), 120),
            (enc(1, LayerKind::SelfAttn(Proj::Q)), 80),
            (enc(2, LayerKind::SelfAttn(Proj::V)), 50),
            (enc(1, LayerKind::Fc1Bias), 30),
            (ModulePath::OutputBias, 40),
        ],
        seed,
    )
}

fn default_model_registry() -> ParameterRegistry {
    let cfg = ModelConfig::default().with_vocab(400, 400);
    ParameterRegistry::init(&cfg, 0).unwrap()
}

fn pruned_set(masks: &MaskSet) -> Vec<(ModulePath, usize)> {
    let mut out = Vec::new();
    for (p, m) in masks.iter() {
        for (i, keep) in m.iter().enumerate() {
            if !keep {
                out.push((*p, i));
            }
        }
    }
    out
}

#[test]
fn magnitude_example() {
    let path = enc(1, LayerKind::Fc1);
    let mut map = BTreeMap::new();
    map.insert(path, Tensor::matrix(1, 5, vec![0.1, -0.5, 0.3, 0.02, -0.2]).unwrap());
    let reg = ParameterRegistry::from_values(map);
    let m = magnitude_prune(&reg, &MaskSet::all_ones(&reg), 0.4).unwrap();
    assert_eq!(pruned_set(&m), vec![(path, 0), (path, 3)]);
}

#[test]
fn vanishing_rate_leaves_masks_unchanged() {
    let reg = mixed_registry(0);
    let ones = MaskSet::all_ones(&reg);
    assert_eq!(magnitude_prune(&reg, &ones, 1e-6).unwrap(), ones);
}

#[test]
fn only_prunable_paths_are_touched() {
    let reg = mixed_registry(1);
    let m = magnitude_prune(&reg, &MaskSet::all_ones(&reg), 0.9).unwrap();
    m.check_prunable_only().unwrap();
    assert!(pruned_set(&m).iter().all(|(p, _)| p.is_prunable()));
    assert_eq!(m.pruned_count(), (0.9f64 * 550.0).floor() as usize);
}

#[test]
fn repeated_rate_prunes_follow_floor_recursion() {
    let reg = mixed_registry(2);
    let mut masks = MaskSet::all_ones(&reg);
    let mut remaining = 550usize;
    for _ in 0..7 {
        let next = magnitude_prune(&reg, &masks, 0.2).unwrap();
        assert!(next.is_superset_of_pruned(&masks));
        remaining -= remaining / 5;
        assert_eq!(550 - next.pruned_count(), remaining);
        masks = next;
    }
}

#[test]
fn scheduled_sparsities_match_the_table() {
    let reg = default_model_registry();
    let n = reg.count_params(ParamScope::Prunable);
    let mut masks = MaskSet::all_ones(&reg);
    for (k, want) in (1..=7).zip(TABLE_EXCL) {
        masks = magnitude_prune_to(&reg, &masks, scheduled_kept(n, 0.2, k)).unwrap();
        let s = sparsity_report(&reg, &masks).unwrap().excl_embedding;
        assert_eq!(format!("{:.3}", s), want);
        assert!((s - (1.0 - 0.8f64.powi(k as i32))).abs() < 1.0 / n as f64);
    }
}

#[test]
fn random_prune_matches_magnitude_count_and_is_seeded() {
    let reg = mixed_registry(3);
    let ones = MaskSet::all_ones(&reg);
    let mag = magnitude_prune(&reg, &ones, 0.3).unwrap();
    let a = random_prune(&reg, &ones, 0.3, 9).unwrap();
    let b = random_prune(&reg, &ones, 0.3, 9).unwrap();
    let c = random_prune(&reg, &ones, 0.3, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.pruned_count(), mag.pruned_count());
    a.check_prunable_only().unwrap();
    let again = random_prune_to(&reg, &a, 100, 4).unwrap();
    assert!(again.is_superset_of_pruned(&a));
    assert_eq!(550 - again.pruned_count(), 100);
}

/// Wilson-Hilferty approximation of the chi-square quantile.
fn chi2_quantile(df: f64, z: f64) -> f64 {
    let a = 2.0 / (9.0 * df);
    df * (1.0 - a + z * a.sqrt()).powi(3)
}

#[test]
fn random_prune_spreads_uniformly_over_paths() {
    let paths: Vec<(ModulePath, usize)> = (1..=6)
        .flat_map(|l| {
            [
                (enc(l, LayerKind::Fc1), 400 + 50 * l),
                (enc(l, LayerKind::SelfAttn(Proj::K)), 200),
                (enc(l, LayerKind::Fc2), 100 * l),
            ]
        })
        .collect();
    let reg = registry(&paths, 5);
    let total: usize = paths.iter().map(|(_, n)| n).sum();
    let m = random_prune(&reg, &MaskSet::all_ones(&reg), 0.3, 123).unwrap();
    let pruned = m.pruned_count() as f64;
    let mut chi2 = 0.0;
    for (p, n) in &paths {
        let observed = m.get(p).map_or(0, |v| v.iter().filter(|k| !**k).count()) as f64;
        let expected = pruned * *n as f64 / total as f64;
        chi2 += (observed - expected).powi(2) / expected;
    }
    // p = 0.001 upper tail
    let limit = chi2_quantile(paths.len() as f64 - 1.0, 3.09);
    assert!(chi2 < limit, "chi2 {} limit {}", chi2, limit);
}

#[test]
fn exhausted_masks_rejected() {
    let reg = registry(&[(enc(1, LayerKind::Fc1), 4)], 0);
    let none = MaskSet::from_map([(enc(1, LayerKind::Fc1), vec![false; 4])].into_iter().collect());
    assert!(magnitude_prune(&reg, &none, 0.2).is_err());
    assert!(random_prune(&reg, &none, 0.2, 0).is_err());
    assert!(magnitude_prune_to(&reg, &MaskSet::all_ones(&reg), 5).is_err());
}

#[test]
fn sparsity_report_counts() {
    let (a, b) = (enc(1, LayerKind::Fc1), enc(1, LayerKind::Fc2));
    let reg = registry(&[(a, 10), (b, 10)], 0);
    let zero = sparsity_report(&reg, &MaskSet::all_ones(&reg)).unwrap();
    assert_eq!(zero.incl_embedding, 0.0);
    assert_eq!(zero.excl_embedding, 0.0);
    assert!(zero.paths.iter().all(|p| p.sparsity == 0.0));

    let mut ma = vec![true; 10];
    ma[..3].fill(false);
    let mut mb = vec![true; 10];
    mb[7] = false;
    let masks = MaskSet::from_map([(a, ma), (b, mb)].into_iter().collect());
    let r = sparsity_report(&reg, &masks).unwrap();
    let by_path: BTreeMap<_, _> = r.paths.iter().map(|p| (p.path, p.sparsity)).collect();
    assert!((by_path[&a] - 0.3).abs() < 1e-15);
    assert!((by_path[&b] - 0.1).abs() < 1e-15);
    assert!((r.excl_embedding - 0.2).abs() < 1e-15);
    assert_eq!(r.groups.len(), 1);
    assert!((r.groups[0].sparsity - 0.2).abs() < 1e-15);
}

#[test]
fn sparsity_csv_has_one_row_per_path() {
    let reg = mixed_registry(0);
    let r = sparsity_report(&reg, &MaskSet::all_ones(&reg)).unwrap();
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "path,kept,total,sparsity");
    assert_eq!(lines.len(), 1 + reg.len());
}

fn imp_fixture(mode: RewindMode, pruner: Pruner, k_max: usize) -> (ParameterRegistry, pruneprobe::pruning::LthFamily) {
    let grammar = GrammarParams {
        vocab_size: 120,
        rare_threshold: 40,
        max_words: 6,
        ..GrammarParams::default()
    };
    let corpus = generate_corpus(0, 120, &grammar).unwrap();
    let tok = corpus.tokenizer();
    let train = encode_pairs(&tok, &corpus.train);
    let eval = encode_pairs(&tok, &corpus.test);
    let cfg = ModelConfig {
        num_layers: 1,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        ..ModelConfig::default()
    }
    .with_vocab(tok.model_vocab(), tok.model_vocab());
    let recipe = TrainRecipe {
        epochs: 2,
        batch_size: 16,
        warmup_steps: 4,
        ..TrainRecipe::default()
    };
    let data = ImpData {
        train: &train,
        eval: &eval,
        tokenizer: &tok,
        eval_batch: 16,
        digest: "imp",
    };
    let start = train_lth0(&cfg, &recipe, &data).unwrap();
    let settings = ImpSettings {
        k_max,
        rate: 0.2,
        mode,
        pruner,
        seed: 1,
    };
    let mut seen = 0;
    let family = imp_run(&cfg, &recipe, &settings, &start, &data, |_| {
        seen += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, k_max + 1);
    (start.lth0.registry, family)
}

#[test]
fn first_iteration_reaches_table_sparsity() {
    let (reg, family) = imp_fixture(RewindMode::LrRewind, Pruner::Magnitude, 1);
    assert_eq!(family.members.len(), 2);
    assert!(family.aborted.is_none());
    let lth1 = &family.members[1];
    assert_eq!(format!("{:.3}", lth1.sparsity.excl_embedding), "0.200");

    // incl-embedding sparsity from the shape enumeration
    let all = reg.count_params(ParamScope::All);
    let prunable = reg.count_params(ParamScope::Prunable);
    let pruned = prunable - scheduled_kept(prunable, 0.2, 1);
    assert_eq!(lth1.sparsity.pruned, pruned);
    assert_eq!(lth1.sparsity.incl_embedding, pruned as f64 / all as f64);
    assert!(lth1.sparsity.incl_embedding < lth1.sparsity.excl_embedding);
    assert!((0.0..=100.0).contains(&lth1.bleu));
}

#[test]
fn weight_rewind_family_keeps_growing_masks() {
    let (_, family) = imp_fixture(RewindMode::WeightRewind, Pruner::Random, 2);
    let m = &family.members;
    assert_eq!(m.len(), 3);
    assert!(m[2].checkpoint.masks.is_superset_of_pruned(&m[1].checkpoint.masks));
    let n = m[2].sparsity.prunable_params;
    assert_eq!(m[2].sparsity.pruned, (n as f64 * 0.36).floor() as usize);
    assert!((m[2].sparsity.excl_embedding - 0.36).abs() < 1.0 / n as f64);
    for member in m {
        for (path, mask) in member.checkpoint.masks.iter() {
            let v = member.checkpoint.registry.value(path).unwrap().data();
            assert!(v.iter().zip(mask).all(|(x, keep)| *keep || *x == 0.0));
        }
    }
}

proptest! {
    #[test]
    fn magnitude_prunes_exactly_the_smallest(values in prop::collection::vec(-10.0f64..10.0, 2..60), rate in 0.05f64..0.95) {
        let path = enc(1, LayerKind::Fc1);
        let n = values.len();
        let reg = ParameterRegistry::from_values([(path, Tensor::matrix(1, n, values.clone()).unwrap())].into_iter().collect());
        let m = magnitude_prune(&reg, &MaskSet::all_ones(&reg), rate).unwrap();
        let k = (rate * n as f64).floor() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|a, b| values[*a].abs().total_cmp(&values[*b].abs()).then(a.cmp(b)));
        let mut want: Vec<usize> = order[..k].to_vec();
        want.sort_unstable();
        let got: Vec<usize> = pruned_set(&m).into_iter().map(|(_, i)| i).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn schedule_never_drifts_a_full_weight(n in 1usize..2_000_000, k in 0usize..12) {
        let kept = scheduled_kept(n, 0.2, k);
        let exact = n as f64 * 0.8f64.powi(k as i32);
        prop_assert!(kept as f64 >= exact - 1e-6);
        prop_assert!((kept as f64) < exact + 1.0);
    }
}
