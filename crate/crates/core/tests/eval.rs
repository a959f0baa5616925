mod common;

use mgcn::dataset::{InteractionDataset, SplitDataset};
use mgcn::dense::DenseMatrix;
use mgcn::eval::{self, evaluate_artifacts, ndcg_at_k, rank_by_scores, recall_at_k, top_k_by_scores, EvalOptions, Phase};
use mgcn::model::{self, ForwardArtifacts};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn equal_scores_rank_by_id() {
    assert_eq!(rank_by_scores(&[0.5; 6], &[]), vec![0, 1, 2, 3, 4, 5]);
    assert_eq!(rank_by_scores(&[0.5; 6], &[1, 4]), vec![0, 2, 3, 5]);
    assert_eq!(rank_by_scores(&[3.0, 1.0, 2.0, 9.0], &[0, 1, 3]), vec![2]);
    assert_eq!(top_k_by_scores(&[0.1, 0.9, 0.9, 0.3], &[], 2), vec![1, 2]);
}

#[test]
fn metric_examples() {
    assert_eq!(recall_at_k(&[3, 1, 2], &[1, 7], 2), 0.5);
    assert_eq!(recall_at_k(&[3, 1, 2], &[1, 7], 1), 0.0);
    assert_eq!(ndcg_at_k(&[5, 0], &[5], 1), 1.0);
    assert!((ndcg_at_k(&[0, 5], &[5], 2) - 0.630930).abs() < 1e-6);
    // The ideal DCG is truncated at K, so many relevant items cannot push NDCG below 1 for a perfect top-K.
    assert_eq!(ndcg_at_k(&[1, 2], &[1, 2, 3, 4], 2), 1.0);
}

/// Artifacts from a real forward pass with the final embeddings replaced.
fn artifacts_with(split: &SplitDataset, final_emb: DenseMatrix) -> ForwardArtifacts {
    let t = common::tiny(0, split.n_users(), split.n_items(), final_emb.cols(), &[2], 1);
    let p = common::random_params(&t.cfg, split.n_users(), split.n_items(), 0, 0.1);
    let mut a = model::forward(&p, &t.cfg, &t.graphs, &t.dense).unwrap();
    a.final_emb = final_emb;
    a
}

#[test]
fn complete_minus_one_end_to_end() {
    // User 0 trained on item 0 and holds item 1 out; user 1 trained on both.
    let ds = InteractionDataset::new(
        vec!["a".into(), "b".into()],
        vec!["x".into(), "y".into()],
        vec![(0, 0), (0, 1), (1, 0), (1, 1)],
    )
    .unwrap();
    let split = SplitDataset::from_parts(ds, vec![(0, 0), (1, 0), (1, 1)], vec![], vec![(0, 1)], 0, [0.8, 0.1, 0.1]).unwrap();
    // Item 0 scores higher for everyone, but it is masked for user 0.
    let emb = DenseMatrix::from_rows(&[vec![1.0], vec![1.0], vec![2.0], vec![0.5]]).unwrap();
    let opts = EvalOptions {
        keep_per_user: true,
        ..EvalOptions::default()
    };
    let r = evaluate_artifacts(&artifacts_with(&split, emb), &split, Phase::Test, &[1, 5], opts).unwrap();
    assert_eq!(r.n_users_evaluated, 1);
    assert_eq!((r.recall_at(1), r.ndcg_at(1), r.recall_at(5)), (1.0, 1.0, 1.0));
    let users = r.per_user.unwrap();
    assert_eq!(users.len(), 1);
    assert_eq!((users[0].user, users[0].ranked.clone()), (0, vec![1]));
    let val = evaluate_artifacts(&artifacts_with(&split, DenseMatrix::zeros(4, 1)), &split, Phase::Val, &[1], opts).unwrap();
    assert_eq!(val.n_users_evaluated, 0);
    assert_eq!(val.recall_at(1), 0.0);
}

#[test]
fn report_matches_brute_force_and_cutoff_keys() {
    let t = common::tiny(3, 12, 15, 4, &[3], 3);
    // Re-split the fixture so every user has held-out items.
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (k, &e) in t.split.train_edges.iter().enumerate() {
        let first = t.split.train_edges.iter().position(|f| f.0 == e.0).unwrap();
        if k != first && k % 3 == 0 { test.push(e) } else { train.push(e) }
    }
    let split = SplitDataset::from_parts(t.split.base.clone(), train, vec![], test, 0, [0.8, 0.1, 0.1]).unwrap();
    let p = common::random_params(&t.cfg, 12, 15, 5, 0.5);
    let a = model::forward(&p, &t.cfg, &t.graphs, &t.dense).unwrap();
    let r = evaluate_artifacts(&a, &split, Phase::Test, &[10, 1, 5, 5], EvalOptions::default()).unwrap();
    assert_eq!(r.cutoffs, vec![1, 5, 10]);
    assert_eq!(r.recall.keys().copied().collect::<Vec<_>>(), vec![1, 5, 10]);
    assert!(evaluate_artifacts(&a, &split, Phase::Test, &[], EvalOptions::default()).is_err());
    assert!(evaluate_artifacts(&a, &split, Phase::Test, &[0, 3], EvalOptions::default()).is_err());

    let truth = split.test_items_by_user();
    for &k in &[1, 5, 10] {
        let (mut rec, mut nd, mut n) = (0.0, 0.0, 0usize);
        for u in 0..12 {
            if truth[u].is_empty() {
                continue;
            }
            let scores: Vec<f64> = (0..15)
                .map(|i| a.user_embedding(u).iter().zip(a.item_embedding(i)).map(|(x, y)| x * y).sum())
                .collect();
            let ranked = common::brute_rank(&scores, &split.train_items_by_user[u]);
            rec += common::brute_recall(&ranked, &truth[u], k);
            nd += common::brute_ndcg(&ranked, &truth[u], k);
            n += 1;
        }
        assert_eq!(r.n_users_evaluated, n);
        assert!((r.recall_at(k) - rec / n as f64).abs() < 1e-12);
        assert!((r.ndcg_at(k) - nd / n as f64).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_monotone_in_k(seed in any::<u64>(), n in 2usize..40) {
        let mut r = common::rng(seed);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..5u8))).collect();
        let relevant: Vec<usize> = (0..n).filter(|_| r.random_bool(0.3)).collect();
        prop_assume!(!relevant.is_empty());
        let ranked = rank_by_scores(&scores, &[]);
        let mut last = 0.0;
        for k in 1..=n {
            let v = recall_at_k(&ranked, &relevant, k);
            prop_assert!(v >= last);
            last = v;
            let nd = ndcg_at_k(&ranked, &relevant, k);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&nd));
            prop_assert_eq!(top_k_by_scores(&scores, &[], k), ranked[..k].to_vec());
        }
        prop_assert_eq!(last, 1.0);
    }

    #[test]
    fn masked_items_never_appear(seed in any::<u64>(), n in 1usize..40) {
        let mut r = common::rng(seed);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let mask: Vec<usize> = (0..n).filter(|_| r.random_bool(0.4)).collect();
        let ranked = rank_by_scores(&scores, &mask);
        prop_assert_eq!(ranked.len(), n - mask.len());
        prop_assert!(ranked.iter().all(|i| !mask.contains(i)));
        prop_assert_eq!(ranked, common::brute_rank(&scores, &mask));
    }
}

#[test]
fn random_scorer_matches_expectation() {
    let (nu, ni) = (2000, 60);
    let mut r = common::rng(21);
    let mut edges = Vec::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for u in 0..nu {
        let mut items: Vec<usize> = (0..ni).filter(|_| r.random_bool(0.15)).collect();
        if items.len() < 2 {
            items = vec![u % ni, (u + 1) % ni];
        }
        for (k, &i) in items.iter().enumerate() {
            edges.push((u, i));
            if k % 4 == 1 { test.push((u, i)) } else { train.push((u, i)) }
        }
    }
    let ds = InteractionDataset::new(
        (0..nu).map(|u| u.to_string()).collect(),
        (0..ni).map(|i| i.to_string()).collect(),
        edges,
    )
    .unwrap();
    let split = SplitDataset::from_parts(ds, train, vec![], test, 0, [0.8, 0.1, 0.1]).unwrap();
    let opts = EvalOptions::default();
    let k = 10;
    let expected = eval::random_recall_expectation(&split, Phase::Test, k, opts);
    let truth = split.test_items_by_user();
    let samples: Vec<f64> = (0..nu)
        .map(|u| {
            let scores: Vec<f64> = (0..ni).map(|_| r.random::<f64>()).collect();
            recall_at_k(&rank_by_scores(&scores, &split.train_items_by_user[u]), &truth[u], k)
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / nu as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (nu - 1) as f64;
    let se = (var / nu as f64).sqrt();
    assert!((mean - expected).abs() < 3.0 * se, "{mean} vs {expected} (se {se})");
}
