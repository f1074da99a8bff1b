mod common;

use std::collections::BTreeMap;

use common::fixtures::random_matrix;
use common::oracles::{cka_gram, corr_table, matmul, pearson, permute_columns, random_orthogonal};
use pruneprobe::model::{AttentionBlockSet, AttentionDump, AttentionMaps, AttentionType};
use pruneprobe::similarity::*;
use pruneprobe::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn corr_examples() {
    let x = [1.0, 2.0, 3.0];
    assert!((neuron_corr(&x, &x).unwrap().0 - 1.0).abs() < 1e-12);
    assert!((neuron_corr(&x, &[-1.0, -2.0, -3.0]).unwrap().0 + 1.0).abs() < 1e-12);
    let r = neuron_corr(&x, &[1.0, 2.0, 4.0]).unwrap().0;
    assert!((r - pearson(&x, &[1.0, 2.0, 4.0])).abs() < 1e-12);
    assert!((r - 0.98198).abs() < 1e-5);
    assert_eq!(neuron_corr(&x, &[2.0, 2.0, 2.0]).unwrap(), (0.0, true));
}

#[test]
fn neuron_sim_self_is_one() {
    let a = random_matrix(40, 6, 1);
    let s = neuron_sim(&a, &a).unwrap();
    assert!((s.score - 1.0).abs() < 1e-9);
    assert_eq!(s.match_rate, 1.0);
}

#[test]
fn neuron_sim_column_permutation() {
    let a = random_matrix(30, 5, 2);
    let perm = [2, 0, 1, 3, 4];
    let b = permute_columns(&a, &perm);
    let s = neuron_sim(&a, &b).unwrap();
    assert!((s.score - 1.0).abs() < 1e-9);
    // Neurons 3 and 4 are fixed points.
    assert!((s.match_rate - 2.0 / 5.0).abs() < 1e-15);
    let c = random_matrix(30, 4, 3);
    let base = neuron_sim(&c, &a).unwrap().score;
    assert_eq!(neuron_sim(&c, &b).unwrap().score, base);
    let cp = permute_columns(&c, &[3, 1, 0, 2]);
    assert_eq!(neuron_sim(&cp, &a).unwrap().score, base);
}

fn brute_force_score(a: &Tensor, b: &Tensor) -> f64 {
    let t = corr_table(a, b);
    t.iter().map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).sum::<f64>() / t.len() as f64
}

#[test]
fn neuron_sim_matches_brute_force_tables() {
    let a = Tensor::from_rows(&[vec![1.0, 2.0, -1.0], vec![3.0, 0.0, 2.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![0.5, 4.0, 1.0], vec![-1.0, 2.0, 1.5]]).unwrap();
    let s = neuron_sim(&a, &b).unwrap();
    assert!((s.score - brute_force_score(&a, &b)).abs() < 1e-12);
    let a = Tensor::from_rows(&[
        vec![1.0, 0.2, 3.0],
        vec![2.0, -0.4, 1.0],
        vec![0.0, 0.9, 2.5],
        vec![-1.0, 0.1, 0.0],
    ])
    .unwrap();
    let b = Tensor::from_rows(&[
        vec![0.3, 1.0, 2.0],
        vec![0.1, 2.2, -1.0],
        vec![0.8, 0.1, 0.5],
        vec![-0.2, -0.7, 0.0],
    ])
    .unwrap();
    let s = neuron_sim(&a, &b).unwrap();
    assert!((s.score - brute_force_score(&a, &b)).abs() < 1e-12);
    let t = corr_table(&a, &b);
    for (i, m) in s.maxima.iter().enumerate() {
        assert!((m - t[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max)).abs() < 1e-12);
    }
}

#[test]
fn dead_neurons_are_reported() {
    let a = Tensor::from_rows(&[vec![1.0, 5.0], vec![2.0, 5.0], vec![4.0, 5.0]]).unwrap();
    let s = neuron_sim(&a, &a).unwrap();
    assert_eq!(s.dead_a, 1);
    assert_eq!(s.maxima[1], 0.0);
    assert_eq!(s.match_rate, 1.0);
}

#[test]
fn cka_matches_gram_form_on_fixtures() {
    let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 0.0], vec![-2.0, 1.0]]).unwrap();
    let y = Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, 2.0], vec![1.0, -1.0], vec![0.5, 3.0]]).unwrap();
    assert!((linear_cka(&x, &y).unwrap() - cka_gram(&x, &y)).abs() <= 1e-10);
    for seed in 0..50 {
        let x = random_matrix(12, 4, 100 + seed);
        let y = random_matrix(12, 3, 200 + seed);
        assert!((linear_cka(&x, &y).unwrap() - cka_gram(&x, &y)).abs() <= 1e-10);
    }
}

#[test]
fn cka_invariances() {
    let x = random_matrix(20, 5, 7);
    assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() <= 1e-9);
    let q = random_orthogonal(5, 8);
    assert!((linear_cka(&x, &matmul(&x, &q)).unwrap() - 1.0).abs() <= 1e-9);
    let y = random_matrix(20, 3, 9);
    let base = linear_cka(&x, &y).unwrap();
    assert!((linear_cka(&x.map(|v| 3.7 * v), &y).unwrap() - base).abs() <= 1e-9);
    assert!(linear_cka(&x, &Tensor::filled(&[20, 2], 1.0)).is_err());
}

#[test]
fn heatmap_diagonal_and_recomputation() {
    let layers: Vec<Tensor> = (0..2).map(|l| random_matrix(15, 4, 30 + l)).collect();
    let other: Vec<Tensor> = (0..2).map(|l| random_matrix(15, 4, 40 + l)).collect();
    let h = layer_sim_heatmap(&layers, &layers).unwrap();
    for i in 0..2 {
        assert!((h[i][i] - 1.0).abs() < 1e-9);
        for j in 0..2 {
            assert_eq!(h[i][j], h[j][i]);
        }
    }
    let h = layer_sim_heatmap(&layers, &other).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            assert!((h[i][j] - cka_gram(&layers[i], &other[j])).abs() < 1e-10);
            assert!((0.0..=1.0).contains(&h[i][j]));
        }
    }
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// Cross-attention maps for one sentence: 2 queries, 3 keys, `heads` heads.
fn cross_maps(seed: u64, heads: usize) -> AttentionMaps {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probs = (0..heads * 2).flat_map(|_| random_distribution(&mut rng, 3)).collect();
    AttentionMaps {
        heads,
        sentences: vec![AttentionBlockSet { q_len: 2, k_len: 3, probs }],
    }
}

/// Pair matrix built directly from the head-major layout.
fn pairs_oracle(m: &AttentionMaps) -> Tensor {
    let b = &m.sentences[0];
    let mut rows = Vec::new();
    for q in 0..b.q_len {
        for k in 0..b.k_len {
            rows.push((0..m.heads).map(|h| b.probs[h * b.q_len * b.k_len + q * b.k_len + k]).collect());
        }
    }
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn attention_sim_fixture_matches_gram_form() {
    let a = cross_maps(1, 2);
    let b = cross_maps(2, 2);
    let pa = attention_pairs(&a, AttentionType::EncDec).unwrap();
    let pb = attention_pairs(&b, AttentionType::EncDec).unwrap();
    assert_eq!(pa.shape(), &[6, 2]);
    assert_eq!(pa, pairs_oracle(&a));
    let v = attention_sim(&pa, &pb).unwrap();
    assert!((v - cka_gram(&pairs_oracle(&a), &pairs_oracle(&b))).abs() < 1e-10);
    assert!((attention_sim(&pa, &pa).unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn attention_sim_head_permutation() {
    let a = cross_maps(3, 3);
    let mut b = a.clone();
    let block = &a.sentences[0];
    let n = block.q_len * block.k_len;
    let order = [2, 0, 1];
    b.sentences[0].probs = order.iter().flat_map(|&h| block.probs[h * n..(h + 1) * n].to_vec()).collect();
    let pa = attention_pairs(&a, AttentionType::EncDec).unwrap();
    let pb = attention_pairs(&b, AttentionType::EncDec).unwrap();
    assert!((attention_sim(&pa, &pb).unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn invalid_distributions_rejected() {
    let mut m = cross_maps(4, 2);
    m.sentences[0].probs[0] += 1e-3;
    assert!(attention_pairs(&m, AttentionType::EncDec).is_err());
    // Causal map with mass on a future key.
    let bad = AttentionMaps {
        heads: 1,
        sentences: vec![AttentionBlockSet {
            q_len: 2,
            k_len: 2,
            probs: vec![0.5, 0.5, 0.5, 0.5],
        }],
    };
    assert!(attention_pairs(&bad, AttentionType::DecSelf).is_err());
    assert!(attention_pairs(&bad, AttentionType::EncSelf).is_ok());
}

#[test]
fn dec_self_pairs_are_causal() {
    let maps = AttentionMaps {
        heads: 1,
        sentences: vec![AttentionBlockSet {
            q_len: 3,
            k_len: 3,
            probs: vec![1.0, 0.0, 0.0, 0.3, 0.7, 0.0, 0.2, 0.3, 0.5],
        }],
    };
    let p = attention_pairs(&maps, AttentionType::DecSelf).unwrap();
    assert_eq!(p.data(), &[1.0, 0.3, 0.7, 0.2, 0.3, 0.5]);
}

fn dump_with(rows: Vec<Vec<f64>>) -> AttentionDump {
    let k = rows[0].len();
    let q = rows.len();
    let mut maps = BTreeMap::new();
    maps.insert(
        (AttentionType::EncSelf, 1),
        AttentionMaps {
            heads: 1,
            sentences: vec![AttentionBlockSet {
                q_len: q,
                k_len: k,
                probs: rows.concat(),
            }],
        },
    );
    AttentionDump { maps }
}

#[test]
fn concentration_counts() {
    let fixture = dump_with(vec![
        vec![0.97, 0.01, 0.01, 0.01, 0.0],
        vec![0.2, 0.2, 0.2, 0.2, 0.2],
        vec![0.0, 0.0, 1.0, 0.0, 0.0],
        vec![0.5, 0.5, 0.0, 0.0, 0.0],
        vec![0.95, 0.05, 0.0, 0.0, 0.0],
    ]);
    assert!((attention_concentration(&fixture, 0.95)[&(AttentionType::EncSelf, 1)] - 0.4).abs() < 1e-15);
    let one_hot = dump_with(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert_eq!(attention_concentration(&one_hot, 0.95)[&(AttentionType::EncSelf, 1)], 1.0);
    let uniform = dump_with(vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
    assert_eq!(attention_concentration(&uniform, 0.95)[&(AttentionType::EncSelf, 1)], 0.0);
}

#[test]
fn svd_examples() {
    // Rank one after centering.
    let u = [1.0, -2.0, 0.5, 3.0, -1.0];
    let v = [2.0, -1.0, 0.5];
    let rows: Vec<Vec<f64>> = u.iter().map(|a| v.iter().map(|b| a * b).collect()).collect();
    let r = svd_variance(&Tensor::from_rows(&rows).unwrap()).unwrap();
    assert!((r.cumulative[0] - 1.0).abs() < 1e-9);
    assert_eq!(min_k(&r.cumulative, 0.8), Some(1));

    // Centered orthogonal columns with norms 2, 1, 1.
    let x = Tensor::from_rows(&[
        vec![1.0, 0.5, 0.5],
        vec![1.0, -0.5, -0.5],
        vec![-1.0, 0.5, -0.5],
        vec![-1.0, -0.5, 0.5],
    ])
    .unwrap();
    let r = svd_variance(&x).unwrap();
    let want = [4.0 / 6.0, 5.0 / 6.0, 1.0];
    for (c, w) in r.cumulative.iter().zip(want) {
        assert!((c - w).abs() < 1e-12);
    }
    assert!(svd_variance(&Tensor::filled(&[4, 3], 2.0)).is_err());
}

fn brute_min_k(c: &[f64], t: f64) -> usize {
    let mut k = 1;
    while k < c.len() && c[k - 1] < t {
        k += 1;
    }
    k
}

#[test]
fn svd_spectrum_and_min_k_on_random_fixture() {
    let x = random_matrix(25, 6, 11);
    let r = svd_variance(&x).unwrap();
    // Sum of squared singular values is the centered Frobenius norm.
    let mut ss = 0.0;
    for j in 0..6 {
        let col: Vec<f64> = (0..25).map(|i| x.get(i, j)).collect();
        let m = col.iter().sum::<f64>() / 25.0;
        ss += col.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
    }
    let total: f64 = r.singular_values.iter().map(|s| s * s).sum();
    assert!((total - ss).abs() < 1e-9 * ss);
    assert!(r.cumulative.windows(2).all(|w| w[0] <= w[1]));
    assert!((r.cumulative.last().unwrap() - 1.0).abs() < 1e-6);
    for (t, k) in &r.min_k {
        assert_eq!(*k, brute_min_k(&r.cumulative, *t));
    }
}

#[test]
fn grouped_similarity_examples() {
    let x = random_matrix(30, 4, 50);
    let y = random_matrix(30, 4, 51);
    let all = grouped_similarity(&x, &y, &[0; 30], &["all"]).unwrap();
    assert!((all[0].cka.unwrap() - linear_cka(&x, &y).unwrap()).abs() < 1e-15);
    let labels: Vec<usize> = (0..30).map(|i| (i % 3 == 0) as usize).collect();
    for g in grouped_similarity(&x, &x, &labels, &["a", "b"]).unwrap() {
        assert!((g.cka.unwrap() - 1.0).abs() < 1e-9);
    }
    let out = grouped_similarity(&x, &y, &labels, &["a", "b"]).unwrap();
    for (gi, g) in out.iter().enumerate() {
        let rows: Vec<usize> = (0..30).filter(|&i| labels[i] == gi).collect();
        assert_eq!(g.tokens, rows.len());
        let want = cka_gram(&x.select_rows(&rows).unwrap(), &y.select_rows(&rows).unwrap());
        assert!((g.cka.unwrap() - want).abs() < 1e-10);
    }
    let mut small = vec![0usize; 30];
    small[..5].iter_mut().for_each(|l| *l = 1);
    let out = grouped_similarity(&x, &y, &small, &["big", "small"]).unwrap();
    assert!(out[0].cka.is_some());
    assert_eq!(out[1].cka, None);
    assert_eq!(out[1].tokens, 5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cka_is_bounded_and_symmetric(seed in 0u64..10_000, n in 4usize..20, p in 1usize..6, q in 1usize..6) {
        let x = random_matrix(n, p, seed);
        let y = random_matrix(n, q, seed + 1);
        let a = linear_cka(&x, &y).unwrap();
        let b = linear_cka(&y, &x).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn neuron_sim_permutation_is_exact(seed in 0u64..10_000, n in 3usize..20, p in 1usize..7, shift in 0usize..7) {
        let a = random_matrix(n, p, seed);
        let b = random_matrix(n, p, seed + 7);
        let perm: Vec<usize> = (0..p).map(|j| (j + shift) % p).collect();
        let base = neuron_sim(&a, &b).unwrap().score;
        prop_assert_eq!(neuron_sim(&a, &permute_columns(&b, &perm)).unwrap().score, base);
        prop_assert_eq!(neuron_sim(&permute_columns(&a, &perm), &b).unwrap().score, base);
    }

    #[test]
    fn svd_cumulative_is_monotone(seed in 0u64..10_000, n in 3usize..15, p in 1usize..6) {
        let r = svd_variance(&random_matrix(n, p, seed)).unwrap();
        prop_assert!(r.cumulative.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!((r.cumulative.last().unwrap() - 1.0).abs() < 1e-6);
        prop_assert!(r.singular_values.windows(2).all(|w| w[0] >= w[1]));
    }
}
