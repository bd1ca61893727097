use super::*;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 20;
const BLOCK: usize = 10;

fn block(i: usize) -> usize {
    i / BLOCK
}

/// Two blocks of ten items; sessions walk inside one block, with 10% jumps anywhere.
fn planted(n_sessions: usize, seed: u64) -> TrainingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sessions = (0..n_sessions)
        .map(|_| {
            let b = rng.gen_range(0..2);
            let len = rng.gen_range(3..=8);
            (0..len)
                .map(|_| if rng.gen_bool(0.1) { rng.gen_range(0..N) } else { b * BLOCK + rng.gen_range(0..BLOCK) })
                .collect()
        })
        .collect();
    TrainingSet::new(N, (0..N).map(block).collect(), sessions)
}

fn small(kind: ModelKind, epochs: usize) -> ModelConfig {
    let mut c = ModelConfig::defaults(kind).with_seed(3).with_epochs(epochs);
    c.embed_dim = 8;
    c.hidden_dim = 16;
    c.bottleneck = 4;
    c.heads = 2;
    c.max_len = 6;
    c.conv_filters = 4;
    c.batch = 32;
    c.lr = 0.01;
    c
}

fn trained(kind: ModelKind) -> TrainedModel {
    fit_on(&small(kind, 25), &planted(300, 11), None).unwrap()
}

fn ctx(items: &[usize]) -> RecContext {
    RecContext::new(items, 5).unwrap()
}

#[test]
fn zero_epochs_is_invalid() {
    for kind in ModelKind::ALL {
        let err = fit_on(&small(kind, 0), &planted(20, 1), None).unwrap_err();
        assert!(matches!(err, ModelError::InvalidConfig(_)), "{kind}: {err}");
    }
}

#[test]
fn defaults_follow_reference_table() {
    let expect = [
        (ModelKind::Cnn, 0.001, 128, 30),
        (ModelKind::Rnn, 0.01, 64, 50),
        (ModelKind::Gnn, 0.005, 128, 40),
        (ModelKind::Autoencoder, 0.001, 256, 50),
        (ModelKind::Transformer, 0.0001, 32, 20),
        (ModelKind::Ncf, 0.0005, 128, 30),
        (ModelKind::Siamese, 0.0005, 64, 35),
    ];
    for (kind, lr, batch, epochs) in expect {
        let c = ModelConfig::defaults(kind);
        assert_eq!((c.lr, c.batch, c.epochs), (lr, batch, epochs), "{kind}");
        c.validate().unwrap();
    }
    assert_eq!(ModelConfig::defaults(ModelKind::Rnn).dropout, 0.5);
    assert_eq!(ModelConfig::defaults(ModelKind::Rnn).max_len, 10);
}

#[test]
fn kind_names_round_trip() {
    for kind in ModelKind::ALL {
        assert_eq!(kind.as_str().parse::<ModelKind>().unwrap(), kind);
        assert_eq!(serde_json::to_string(&kind).unwrap(), format!("\"{kind}\""));
    }
    assert!("mlp".parse::<ModelKind>().is_err());
}

#[test]
fn overrides_replace_only_given_fields() {
    let o: ModelOverrides = serde_json::from_str(r#"{"epochs": 3, "lr": 0.5}"#).unwrap();
    let c = o.apply(ModelConfig::defaults(ModelKind::Cnn));
    assert_eq!((c.epochs, c.lr, c.batch), (3, 0.5, 128));
    assert!(serde_json::from_str::<ModelOverrides>(r#"{"epochz": 3}"#).is_err());
}

#[test]
fn context_truncates_and_pads() {
    let c = RecContext::new(&[1, 2, 3, 4], 3).unwrap();
    assert_eq!(c.items, vec![2, 3, 4]);
    assert_eq!(c.anchor(), 4);
    assert_eq!(c.padded(5, 99), vec![99, 99, 2, 3, 4]);
    assert!(matches!(RecContext::new(&[], 3), Err(ModelError::EmptyContext)));
}

#[test]
fn two_epochs_give_two_finite_losses() {
    let set = planted(30, 2);
    for kind in ModelKind::ALL {
        let m = fit_on(&small(kind, 2), &set, None).unwrap();
        assert_eq!(m.training_log.len(), 2, "{kind}");
        assert!(m.training_log.iter().all(|l| l.is_finite()), "{kind}");
        assert_eq!(m.item_embeddings.rows, N);
        assert_eq!(m.item_embeddings.cols, m.config.embedding_width());
        assert!(m.item_embeddings.data.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn every_kind_lowers_its_loss_on_planted_blocks() {
    let set = planted(300, 5);
    for kind in ModelKind::ALL {
        let m = fit_on(&small(kind, 15), &set, None).unwrap();
        let (first, last) = (m.training_log[0], *m.training_log.last().unwrap());
        assert!(last < first, "{kind}: {first} -> {last}");
        for i in 0..N {
            assert!(m.item_embeddings.row(i).iter().any(|&v| v != 0.0), "{kind}: zero row {i}");
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    let set = planted(12, 4);
    for kind in ModelKind::ALL {
        let eps = if kind == ModelKind::Rnn { 1e-3 } else { 1e-5 };
        let err = loss_grad_check(&small(kind, 1), &set, None, eps).unwrap();
        assert!(err < 1e-4, "{kind}: {err}");
    }
}

#[test]
fn empty_training_set_is_rejected() {
    let set = TrainingSet::new(N, (0..N).map(block).collect(), vec![vec![1], vec![]]);
    assert!(matches!(fit_on(&small(ModelKind::Cnn, 1), &set, None), Err(ModelError::EmptyTrainingSet)));
}

#[test]
fn scorers_reject_other_kinds_and_unknown_items() {
    let m = fit_on(&small(ModelKind::Gnn, 1), &planted(20, 1), None).unwrap();
    assert!(matches!(score_cnn(&m, &ctx(&[1])), Err(ModelError::KindMismatch { .. })));
    assert!(matches!(score(&m, &ctx(&[N])), Err(ModelError::UnknownItem(_))));
    assert!(matches!(embed(&m, N), Err(ModelError::UnknownItem(_))));
    assert!(matches!(recommend_topk(&m, &ctx(&[1]), 0, true), Err(ModelError::InvalidK { .. })));
    assert!(matches!(recommend_topk(&m, &ctx(&[1]), N + 1, true), Err(ModelError::InvalidK { .. })));
}

#[test]
fn topk_matches_full_sort_and_is_pure() {
    for kind in ModelKind::ALL {
        let m = trained(kind);
        let c = ctx(&[2, 5, 7]);
        let scores = score(&m, &c).unwrap();
        assert_eq!(scores.len(), N);
        assert!(scores.iter().all(|s| s.is_finite()));
        assert_eq!(score(&m, &c).unwrap(), scores, "{kind}: scoring not pure");

        let mut order: Vec<usize> = (0..N).filter(|i| !c.items.contains(i)).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let top = recommend_topk(&m, &c, 10, true).unwrap();
        assert_eq!(top.items(), order[..10].to_vec(), "{kind}");
        assert_eq!(recommend_topk(&m, &c, 1, true).unwrap().items(), vec![order[0]]);

        let all = recommend_topk(&m, &c, N, true).unwrap();
        assert_eq!(all.len(), N - 3);
        let with_ctx = recommend_topk(&m, &c, N, false).unwrap();
        assert_eq!(with_ctx.len(), N);
    }
}

#[test]
fn ties_break_by_index_and_shift_is_invariant() {
    let scores = vec![1.0, 3.0, 3.0, 0.5, 3.0];
    let r = RankedList::from_scores(&scores, &BTreeSet::new(), 3);
    assert_eq!(r.items(), vec![1, 2, 4]);
    let shifted: Vec<f64> = scores.iter().map(|s| s + 7.0).collect();
    assert_eq!(RankedList::from_scores(&shifted, &BTreeSet::new(), 5).items(), RankedList::from_scores(&scores, &BTreeSet::new(), 5).items());
}

#[test]
fn fit_is_deterministic_and_checkpoints_round_trip() {
    let set = planted(60, 8);
    let dir = tempfile::tempdir().unwrap();
    for kind in ModelKind::ALL {
        let a = fit_on(&small(kind, 3), &set, None).unwrap();
        let b = fit_on(&small(kind, 3), &set, None).unwrap();
        assert_eq!(a, b, "{kind}");
        a.save(dir.path(), "a").unwrap();
        b.save(dir.path(), "b").unwrap();
        let bytes = |stem: &str, ext: &str| std::fs::read(dir.path().join(format!("{stem}.{ext}"))).unwrap();
        assert_eq!(bytes("a", "ckpt"), bytes("b", "ckpt"));
        assert_eq!(bytes("a", "json"), bytes("b", "json"));
        let back = TrainedModel::load(dir.path(), "a").unwrap();
        assert_eq!(back, a, "{kind}");
        let c = ctx(&[3, 4]);
        assert_eq!(score(&back, &c).unwrap(), score(&a, &c).unwrap());
    }
}

#[test]
fn different_seeds_give_different_models() {
    let set = planted(40, 8);
    let a = fit_on(&small(ModelKind::Ncf, 2), &set, None).unwrap();
    let b = fit_on(&small(ModelKind::Ncf, 2).with_seed(4), &set, None).unwrap();
    assert_ne!(a.params, b.params);
}

#[test]
fn cold_items_get_category_means() {
    // items 9 and 19 never appear; category 2 holds only the unseen item 18
    let mut cats: Vec<usize> = (0..N).map(block).collect();
    cats[18] = 2;
    let sessions: Vec<Vec<usize>> = planted(80, 9).sessions.into_iter().map(|s| s.into_iter().filter(|&i| i != 9 && i != 19 && i != 18).collect()).collect();
    let set = TrainingSet::new(N, cats.clone(), sessions);
    let seen = set.seen_items();
    for kind in ModelKind::ALL {
        let m = fit_on(&small(kind, 2), &set, None).unwrap();
        assert_eq!(m.cold_items, [9, 18, 19].into_iter().collect(), "{kind}");
        let e = &m.item_embeddings;
        let mean = |pick: &dyn Fn(usize) -> bool| -> Vec<f64> {
            let rows: Vec<usize> = seen.iter().copied().filter(|&i| pick(i)).collect();
            (0..e.cols).map(|k| rows.iter().map(|&i| e.get(i, k)).sum::<f64>() / rows.len() as f64).collect()
        };
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(e.row(9), &mean(&|i| cats[i] == 0)), "{kind}");
        assert!(close(e.row(19), &mean(&|i| cats[i] == 1)), "{kind}");
        assert!(close(e.row(18), &mean(&|_| true)), "{kind}");
        assert!(score(&m, &ctx(&[9, 19])).unwrap().iter().all(|s| s.is_finite()));
    }
}

/// Mean rank of in-block items below that of out-of-block items for this share of anchors.
fn block_separation(m: &TrainedModel) -> f64 {
    let mut good = 0;
    for a in 0..N {
        let s = score(m, &ctx(&[a])).unwrap();
        let mut order: Vec<usize> = (0..N).collect();
        order.sort_by(|&x, &y| s[y].partial_cmp(&s[x]).unwrap().then(x.cmp(&y)));
        let mut rank = [0.0; 2];
        let mut count = [0.0; 2];
        for (r, &j) in order.iter().enumerate().filter(|&(_, &j)| j != a) {
            let side = usize::from(block(j) != block(a));
            rank[side] += r as f64;
            count[side] += 1.0;
        }
        if rank[0] / count[0] < rank[1] / count[1] {
            good += 1;
        }
    }
    good as f64 / N as f64
}

#[test]
fn cnn_rejects_odd_context_length() {
    let mut c = small(ModelKind::Cnn, 1);
    c.max_len = 5;
    assert!(matches!(c.validate(), Err(ModelError::InvalidConfig(_))));
}

#[test]
fn cnn_ranks_block_mates_first() {
    let m = trained(ModelKind::Cnn);
    let c = ctx(&[1, 2]);
    assert_eq!(score_cnn(&m, &c).unwrap(), score_cnn(&m, &c).unwrap());
    assert!(block_separation(&m) >= 0.8);
}

#[test]
fn rnn_masks_padding_and_reads_order() {
    let m = trained(ModelKind::Rnn);
    let plain = score_rnn(&m, &ctx(&[3, 4, 6])).unwrap();
    assert_eq!(score_rnn_padded(&m, &[N, N, 3, 4, 6]).unwrap(), plain);
    assert_eq!(score_rnn_padded(&m, &[N, 3, 4, 6]).unwrap(), plain);
    assert!(matches!(score_rnn_padded(&m, &[N, N]), Err(ModelError::EmptyContext)));
    assert!(matches!(score_rnn_padded(&m, &[N + 1]), Err(ModelError::UnknownItem(_))));
    assert_ne!(score_rnn(&m, &ctx(&[6, 4, 3])).unwrap(), plain);
    assert_ne!(score_rnn(&m, &ctx(&[3])).unwrap(), score_rnn(&m, &ctx(&[13])).unwrap());
    assert!(block_separation(&m) >= 0.8);
}

#[test]
fn gnn_embeddings_equal_manual_propagation() {
    let set = planted(100, 6);
    let g = set.graph();
    let m = fit_on(&small(ModelKind::Gnn, 10), &set, Some(&g)).unwrap();
    let base = m.params.get("base_embedding").unwrap();
    let d = base.shape[1];
    let mut z: Vec<Vec<f64>> = (0..N).map(|i| base.data[i * d..(i + 1) * d].to_vec()).collect();
    for _ in 0..m.config.layers {
        let mut next = vec![vec![0.0; d]; N];
        for i in 0..N {
            let mut total = 1.0;
            let mut acc = z[i].clone();
            for j in 0..N {
                let w = if i == j { 0.0 } else { g.weight(i, j) };
                if w > 0.0 {
                    total += w;
                    for k in 0..d {
                        acc[k] += w * z[j][k];
                    }
                }
            }
            next[i] = acc.iter().map(|v| v / total).collect();
        }
        z = next;
    }
    for (i, row) in z.iter().enumerate() {
        let got = embed(&m, i).unwrap();
        assert!(got.iter().zip(row).all(|(a, b)| (a - b).abs() < 1e-12), "row {i}");
    }
    let c = ctx(&[2, 7]);
    let s = score_gnn(&m, &c).unwrap();
    for j in 0..N {
        let want: f64 = (0..d).map(|k| (z[2][k] + z[7][k]) / 2.0 * z[j][k]).sum();
        assert!((s[j] - want).abs() < 1e-12);
    }
}

#[test]
fn gnn_isolated_node_keeps_base_and_blocks_separate() {
    let mut set = planted(200, 6);
    // item 19 appears only alone
    for s in &mut set.sessions {
        s.retain(|&i| i != 19);
    }
    set.sessions.push(vec![19]);
    let m = fit_on(&small(ModelKind::Gnn, 30), &set, None).unwrap();
    let a = propagation_matrix(&set.graph(), N);
    assert_eq!(a.row(19).collect::<Vec<_>>(), vec![(19, 1.0)]);
    let base = m.params.get("base_embedding").unwrap();
    let d = base.shape[1];
    assert_eq!(embed(&m, 19).unwrap(), base.data[19 * d..20 * d].to_vec());

    let e = &m.item_embeddings;
    let cos = |i: usize, j: usize| crate::metrics::item_similarity(e.row(i), e.row(j)).unwrap();
    let (mut within, mut across) = (vec![], vec![]);
    for i in 0..19 {
        for j in i + 1..19 {
            if block(i) == block(j) { within.push(cos(i, j)) } else { across.push(cos(i, j)) }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&within) > mean(&across));
}

#[test]
fn gnn_isomorphic_components_propagate_alike() {
    let sessions = vec![vec![0, 1], vec![1, 2], vec![3, 4], vec![4, 5]];
    let set = TrainingSet::new(6, vec![0; 6], sessions);
    let a = propagation_matrix(&set.graph(), 6);
    let base = FeatureMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]);
    let z = gnn::propagated(&a, &base, 2);
    for i in 0..3 {
        assert_eq!(z.row(i), z.row(i + 3));
    }
}

#[test]
fn autoencoder_outputs_probabilities_and_mirrors_widths() {
    let m = trained(ModelKind::Autoencoder);
    let w = autoencoder_layer_widths(&m).unwrap();
    let mut rev = w.clone();
    rev.reverse();
    assert_eq!(w, rev);
    assert_eq!(w, vec![N, 16, 4, 16, N]);
    let s = score_autoencoder(&m, &ctx(&[1, 2, 3])).unwrap();
    assert!(s.iter().all(|&p| p > 0.0 && p < 1.0));
    let unseen = |b: usize| (0..N).filter(|&j| block(j) == b && ![1, 2, 3].contains(&j)).map(|j| s[j]).sum::<f64>() / if b == 0 { 7.0 } else { 10.0 };
    assert!(unseen(0) > unseen(1));
}

#[test]
fn transformer_attention_and_positions() {
    let m = trained(ModelKind::Transformer);
    let c = ctx(&[1, 4, 8]);
    for head in attention_weights(&m, &c).unwrap() {
        assert_eq!(head.len(), 3);
        for row in head {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    let s = score_transformer(&m, &c).unwrap();
    assert_ne!(score_transformer(&m, &ctx(&[8, 4, 1])).unwrap(), s);

    let mut flat = m.clone();
    flat.config.positional_encoding = false;
    let a = score_transformer(&flat, &c).unwrap();
    let b = score_transformer(&flat, &ctx(&[8, 1, 4])).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-9));

    let single = attention_weights(&m, &ctx(&[5])).unwrap();
    assert!(single.iter().all(|h| h == &vec![vec![1.0]]));
    assert!(block_separation(&m) >= 0.8);
}

#[test]
fn ncf_zero_context_leaves_bias_only() {
    let m = trained(ModelKind::Ncf);
    let d = m.config.embed_dim;
    let g = ncf_gmf_branch(&m, &vec![0.0; d]).unwrap();
    let bias = m.params.get("gmf_b").unwrap().data[0];
    assert_eq!(g.len(), N);
    assert!(g.iter().all(|&v| v == bias));
    assert_eq!(score_ncf(&m, &ctx(&[0])).unwrap().len(), N);
}

#[test]
fn ncf_ranks_positives_above_median_negative() {
    let set = planted(300, 11);
    let m = fit_on(&small(ModelKind::Ncf, 25), &set, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut good, mut total) = (0, 0);
    for s in set.sessions.iter().take(100) {
        for t in 1..s.len() {
            let scores = score(&m, &ctx(&s[..t])).unwrap();
            let mut neg: Vec<f64> = layers::sample_negatives(&mut rng, N, s, 4).into_iter().map(|j| scores[j]).collect();
            neg.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = (neg[1] + neg[2]) / 2.0;
            total += 1;
            if scores[s[t]] > median {
                good += 1;
            }
        }
    }
    assert!(good as f64 / total as f64 >= 0.7, "{good}/{total}");
}

#[test]
fn siamese_scores_are_cosines() {
    let m = trained(ModelKind::Siamese);
    for a in 0..N {
        let s = score_siamese(&m, &ctx(&[a])).unwrap();
        assert!((s[a] - 1.0).abs() < 1e-9);
        assert!(s.iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
    }
    let g = planted(300, 11).graph();
    let (mut pos, mut neg) = (vec![], vec![]);
    for i in 0..N {
        let s = score_siamese(&m, &ctx(&[i])).unwrap();
        for j in 0..N {
            if i == j {
                continue;
            }
            if g.co_count(i, j) > 0 && block(i) == block(j) { pos.push(s[j]) } else if block(i) != block(j) { neg.push(s[j]) }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&pos) - mean(&neg) > m.config.margin / 2.0, "{} vs {}", mean(&pos), mean(&neg));
}



