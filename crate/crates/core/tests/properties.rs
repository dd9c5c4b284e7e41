use std::collections::HashSet;

use proptest::prelude::*;
use qexpand_core::autograd::Tape;
use qexpand_core::classic::{expand_classic, weights_alpha, weights_aqe, weights_aqewd, Method, QeConfig, WeightMode};
use qexpand_core::dba::augment_database;
use qexpand_core::eval::average_precision;
use qexpand_core::io::{decode_qexp, encode_qexp};
use qexpand_core::lattqe::{LAttQe, LAttQeConfig};
use qexpand_core::nn::MultiHeadAttention;
use qexpand_core::synth::{generate_corpus, Split, SynthConfig};
use qexpand_core::tensor::{softmax, Tensor};
use qexpand_core::train::contrastive_loss;
use qexpand_core::{EmbeddingMatrix, Expander};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit_rows(dim: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
    prop::collection::vec(prop::collection::vec(-1.0f32..1.0, dim), 2..24).prop_filter_map("zero row", |rows| {
        rows.into_iter()
            .map(|r| {
                let n = r.iter().map(|x| x * x).sum::<f32>().sqrt();
                (n > 1e-3).then(|| r.iter().map(|x| x / n).collect())
            })
            .collect()
    })
}

fn unit(v: &[f32]) -> bool {
    (v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt() - 1.0).abs() <= 1e-5
}

fn small_model(seed: u64, pe: bool) -> LAttQe<f32> {
    let cfg = LAttQeConfig {
        dim: 8,
        layers: 2,
        heads: 2,
        kmax: 24,
        use_positional_encoding: pe,
        ..LAttQeConfig::default()
    };
    LAttQe::new(cfg, seed).unwrap()
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(scores in prop::collection::vec(-20.0f64..20.0, 1..30), shift in -50.0f64..50.0) {
        let p = softmax(&scores, 1.0).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let q = softmax(&shifted, 1.0).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn attention_rows_are_stochastic(seed in 0u64..1000, rows in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = qexpand_core::autograd::ParamStore::<f64>::new();
        let attn = MultiHeadAttention::new(&mut store, &mut rng, "a", 8, 4).unwrap();
        let data = (0..rows * 8).map(|i| (i as f64 * 0.37 + seed as f64).sin()).collect();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![rows, 8], data).unwrap());
        let (_, weights) = attn.forward_with_weights(&mut tape, &store, x).unwrap();
        for w in weights {
            for r in 0..w.rows() {
                prop_assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn knn_and_bottom_k_are_reverses(rows in unit_rows(4), q in prop::collection::vec(-1.0f32..1.0, 4)) {
        let m = EmbeddingMatrix::from_rows(&rows).unwrap();
        let top = m.knn(&q, m.len(), &[]).unwrap();
        let bottom = m.bottom_k(&q, m.len(), &[]).unwrap();
        let mut a: Vec<usize> = top.rows();
        let mut b: Vec<usize> = bottom.rows();
        let sims_top = top.similarities();
        let mut sims_bottom = bottom.similarities();
        sims_bottom.reverse();
        prop_assert_eq!(sims_top, sims_bottom);
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn every_row_retrieves_itself_first(rows in unit_rows(6)) {
        let m = EmbeddingMatrix::from_rows(&rows).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let top = m.knn(r, 1, &[]).unwrap();
            prop_assert!((top.entries[0].similarity - 1.0).abs() <= 1e-6);
            // an exact duplicate with a lower row may win the tie
            prop_assert!(top.entries[0].row == i || rows[top.entries[0].row] == *r);
        }
    }

    #[test]
    fn batch_search_matches_single_queries(rows in unit_rows(5), k in 0usize..30) {
        let m = EmbeddingMatrix::from_rows(&rows).unwrap();
        let queries: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
        let batch = m.knn_batch(&queries, k).unwrap();
        for (q, b) in queries.iter().zip(&batch) {
            prop_assert_eq!(&m.knn(q, k, &[]).unwrap(), b);
        }
    }

    #[test]
    fn classic_weights_are_monotone(sims in prop::collection::vec(-1.0f32..1.0, 0..40), alpha in 0.0f64..8.0) {
        let mut sorted = sims.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        prop_assert!(weights_aqe(sorted.len()).is_monotone_non_increasing());
        prop_assert!(weights_aqewd(sorted.len()).is_monotone_non_increasing());
        prop_assert!(weights_alpha(&sorted, alpha).is_monotone_non_increasing());
    }

    #[test]
    fn classic_expansions_are_unit(rows in unit_rows(6), q in prop::collection::vec(-1.0f32..1.0, 6), nqe in 0usize..10, method in 0usize..4) {
        let n = q.iter().map(|x| x * x).sum::<f32>().sqrt();
        prop_assume!(n > 1e-3);
        let q: Vec<f32> = q.iter().map(|x| x / n).collect();
        let m = EmbeddingMatrix::from_rows(&rows).unwrap();
        let cfg = QeConfig::new([Method::Aqe, Method::Aqewd, Method::AlphaQe, Method::Dqe][method], nqe);
        if let Ok(e) = expand_classic(&q, &m, &cfg, &[]) {
            prop_assert!(unit(&e));
        }
    }

    #[test]
    fn ap_is_bounded_and_one_iff_positives_lead(
        labels in prop::collection::vec(0u8..3, 1..50),
    ) {
        // 0 = negative, 1 = positive, 2 = junk
        let ranked: Vec<usize> = (0..labels.len()).collect();
        let pos: HashSet<usize> = ranked.iter().copied().filter(|&i| labels[i] == 1).collect();
        let junk: HashSet<usize> = ranked.iter().copied().filter(|&i| labels[i] == 2).collect();
        match average_precision(&ranked, &pos, &junk) {
            None => prop_assert!(pos.is_empty()),
            Some(ap) => {
                prop_assert!((0.0..=1.0).contains(&ap));
                let kept: Vec<u8> = labels.iter().copied().filter(|&l| l != 2).collect();
                let leads = kept.iter().skip_while(|&&l| l == 1).all(|&l| l == 0);
                prop_assert_eq!(ap == 1.0, leads);
            }
        }
    }

    #[test]
    fn ap_ignores_monotone_score_transforms(scores in prop::collection::vec(-1.0f64..1.0, 2..40), seed in 0u64..100) {
        let rank = |s: &[f64]| -> Vec<usize> {
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
            idx
        };
        let pos: HashSet<usize> = (0..scores.len()).filter(|i| (i + seed as usize).is_multiple_of(3)).collect();
        let junk: HashSet<usize> = (0..scores.len()).filter(|i| (i + seed as usize) % 7 == 1).filter(|i| !pos.contains(i)).collect();
        let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 2.0).collect();
        prop_assert_eq!(
            average_precision(&rank(&scores), &pos, &junk),
            average_precision(&rank(&transformed), &pos, &junk)
        );
    }

    #[test]
    fn contrastive_terms_are_non_negative(a in prop::collection::vec(-1.0f32..1.0, 4), b in prop::collection::vec(-1.0f32..1.0, 4), margin in 0.0f64..1.0, rel in any::<bool>()) {
        prop_assert!(contrastive_loss(&a, &b, rel, margin) >= 0.0);
        prop_assert_eq!(contrastive_loss(&a, &a, true, margin), 0.0);
    }

    #[test]
    fn qexp_round_trips(rows in 0usize..5, dim in 0usize..5, seed in any::<u64>()) {
        let data: Vec<f32> = (0..rows * dim).map(|i| f32::from_bits((seed as u32).wrapping_add((i as u32).wrapping_mul(2654435761)) & 0x7f7f_ffff)).collect();
        let raw = decode_qexp(&encode_qexp(rows, dim, &data).unwrap()).unwrap();
        prop_assert_eq!(raw.rows, rows);
        prop_assert_eq!(raw.dim, dim);
        prop_assert_eq!(raw.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), data.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn learned_weights_respect_mode_ranges(seed in 0u64..1000, k in 0usize..12) {
        let model = small_model(seed, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f32>> = (0..=k).map(|_| (0..8).map(|_| rand::Rng::random_range(&mut rng, -1.0f32..1.0)).collect()).collect();
        let refs: Vec<&[f32]> = rows[1..].iter().map(Vec::as_slice).collect();
        let t = model.encode(&rows[0], &refs).unwrap();
        let sim = model.attention_weights(&t, WeightMode::Similarity).unwrap();
        prop_assert!(sim.0.iter().all(|w| (-1.0 - 1e-6..=1.0 + 1e-6).contains(w)));
        let soft = model.attention_weights(&t, WeightMode::TemperedSoftmax).unwrap();
        prop_assert!(soft.0.iter().all(|&w| w > 0.0 && w < 1.0 || k == 0));
        prop_assert!((soft.0.iter().map(|&w| w as f64).sum::<f64>() - 1.0).abs() <= 1e-6);
        for i in 0..=k {
            for j in 0..=k {
                if sim.0[i] > sim.0[j] + 1e-5 {
                    prop_assert!(soft.0[i] >= soft.0[j]);
                }
            }
        }
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000) {
        let a = small_model(seed, true);
        let b = small_model(seed, true);
        let q = [0.5f32, -0.5, 0.5, -0.5, 0.0, 0.0, 0.0, 0.0];
        let d = [0.1f32, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
        let x = a.expand(&q, &[&d, &q]).unwrap();
        let y = b.expand(&q, &[&d, &q]).unwrap();
        prop_assert_eq!(x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), y.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn dba_preserves_ids_norms_and_purity(rows in unit_rows(6), ndba in 0usize..6, method in 0usize..3) {
        let m = EmbeddingMatrix::from_rows(&rows).unwrap();
        let cfg = QeConfig::new([Method::Aqe, Method::Aqewd, Method::AlphaQe][method], 1);
        let e = Expander::classic(cfg).unwrap();
        let a = augment_database(&m, &e, ndba).unwrap();
        let b = augment_database(&m, &e, ndba).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.ids(), m.ids());
        for r in a.rows() {
            prop_assert!(unit(r));
        }
    }

    #[test]
    fn synthetic_corpora_hold_their_invariants(seed in 0u64..500, sigma in 0.0f64..0.5) {
        let cfg = SynthConfig { classes: 16, items_per_class: (1, 8), dim: 8, sigma, distractors: 10, train_distractors: 5, seed, ..SynthConfig::default() };
        let c = generate_corpus(&cfg).unwrap();
        for r in c.embeddings.rows() {
            prop_assert!(unit(r));
        }
        let classes = |s: Split| -> HashSet<u32> { c.metadata.iter().filter(|m| m.split == s).filter_map(|m| m.class).collect() };
        let train = classes(Split::Train);
        let val: HashSet<u32> = classes(Split::Val).union(&classes(Split::ValQuery)).copied().collect();
        let test: HashSet<u32> = classes(Split::Test).union(&classes(Split::TestQuery)).copied().collect();
        prop_assert!(train.is_disjoint(&val) && train.is_disjoint(&test) && val.is_disjoint(&test));
        for stage in [qexpand_core::Stage::Val, qexpand_core::Stage::Test] {
            let b = c.benchmark(stage).unwrap();
            for id in b.queries.ids() {
                prop_assert!(b.database.position(id).is_none());
            }
        }
    }
}

#[test]
fn large_qexp_payload_round_trips() {
    let (rows, dim) = (3000, 128);
    let data: Vec<f32> = (0..rows * dim).map(|i| (i as f32).sin()).collect();
    let raw = decode_qexp(&encode_qexp(rows, dim, &data).unwrap()).unwrap();
    assert_eq!(raw.data, data);
}

#[test]
fn permuting_neighbors_without_positions_permutes_transformed_rows() {
    let model = small_model(5, false);
    let rows: Vec<Vec<f32>> = (0..6)
        .map(|i| (0..8).map(|j| ((i * 8 + j) as f32 * 0.7).cos()).collect())
        .collect();
    let refs: Vec<&[f32]> = rows[1..].iter().map(Vec::as_slice).collect();
    let perm = [3usize, 0, 4, 2, 1];
    let permuted: Vec<&[f32]> = perm.iter().map(|&p| refs[p]).collect();
    let a = model.encode(&rows[0], &refs).unwrap();
    let b = model.encode(&rows[0], &permuted).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        for (x, y) in b.vectors.row(i + 1).iter().zip(a.vectors.row(p + 1)) {
            assert!((x - y).abs() <= 1e-5);
        }
    }
}
