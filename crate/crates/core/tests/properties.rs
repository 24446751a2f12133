use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::Arc;

use longtail::alignment::{
    align_generative, listmle_loss, pairwise_violations, ranknet_loss, CandidateRanking, RankedCandidate, RankingLoss,
};
use longtail::cf::{build_matrix, item_similarity, train_bpr, ActionWeights, CfModel, CfScorer, ItemKnnIndex};
use longtail::config::TrainingConfig;
use longtail::data::{
    chronological_split, classify_head_tail, head_count, load_dataset, save_dataset, Action, Catalog, Dataset,
    InteractionRecord, ItemRecord, TailFlag,
};
use longtail::embedding::{
    cosine, pool, pseudo_embed_catalog, top_k_semantic, EmbeddingMatrix, ItemEmbedding, Pooling, TokenEmbeddingSequence,
};
use longtail::evaluation::{diversity, hit_rate_at_k, ndcg_at_k, recall_at_k};
use longtail::fusion::{grid_search_over, simplex_grid, GridCase, GridMetric, ScoreTriple};
use longtail::generative::{beam_search, filter_training_sequences, MarkovModel, SequenceModel};
use longtail::intent::{intent, AttentionParams, UserHistory};
use proptest::collection::vec;
use proptest::prelude::*;

fn item_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("i{i:03}")).collect()
}

fn catalog_of(sales: &[u64]) -> Arc<Catalog> {
    let items = item_ids(sales.len())
        .into_iter()
        .zip(sales)
        .map(|(id, &s)| ItemRecord::new(id, s))
        .collect();
    Arc::new(Catalog::new(items).unwrap())
}

fn action_of(k: u8) -> Action {
    Action::ALL[k as usize % 3]
}

/// (user, item, action, timestamp) tuples over `n_items` items.
fn events(n_items: usize, max: usize) -> impl Strategy<Value = Vec<(u8, usize, u8, i64)>> {
    vec((0u8..6, 0..n_items, 0u8..3, 0i64..50), 1..max)
}

fn dataset_of(sales: &[u64], evs: &[(u8, usize, u8, i64)]) -> Dataset {
    let ids = item_ids(sales.len());
    let interactions = evs
        .iter()
        .map(|&(u, i, a, t)| InteractionRecord::new(&format!("u{u}"), &ids[i], action_of(a), t))
        .collect();
    Dataset::new(catalog_of(sales), interactions).unwrap()
}

fn heads(d: &Dataset) -> BTreeSet<String> {
    d.catalog()
        .items()
        .iter()
        .filter(|i| i.tail_flag == Some(TailFlag::Head))
        .map(|i| i.item_id.clone())
        .collect()
}

fn unit_rows(vectors: &[Vec<f64>]) -> Option<EmbeddingMatrix<f64>> {
    let rows = vectors
        .iter()
        .enumerate()
        .map(|(i, v)| ItemEmbedding {
            item_id: format!("i{i:03}"),
            vector: v.clone(),
            normalized: false,
        })
        .collect();
    EmbeddingMatrix::from_rows(rows).ok()
}

fn markov(n: usize, seqs: &[Vec<usize>], order: usize, alpha: f64) -> MarkovModel<f64> {
    let seqs: Vec<Vec<usize>> = seqs.iter().map(|s| s.iter().map(|&x| x % n).collect()).collect();
    MarkovModel::fit_sequences(item_ids(n), &seqs, order, alpha).unwrap()
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<usize>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn head_set_has_exact_size(
        sales in vec(0u64..20, 1..300),
        permille in 1u64..1000,
    ) {
        let f = permille as f64 / 1000.0;
        let n = sales.len();
        let expected = ((permille * n as u64) / 1000).max(1) as usize;
        prop_assert_eq!(head_count(f, n), expected);
        let d = classify_head_tail(&dataset_of(&sales, &[]), f).unwrap();
        prop_assert_eq!(heads(&d).len(), expected);
        prop_assert!(d.catalog().items().iter().all(|i| i.tail_flag.is_some()));
    }

    #[test]
    fn head_set_ignores_catalog_order(sales in vec(0u64..5, 60), perm in permutation(60), len in 1usize..=60, permille in 1u64..1000) {
        let sales = &sales[..len];
        let ids = item_ids(len);
        let order: Vec<usize> = perm.into_iter().filter(|&i| i < len).collect();
        let shuffled: Vec<ItemRecord> = order.iter().map(|&i| ItemRecord::new(ids[i].clone(), sales[i])).collect();
        let f = permille as f64 / 1000.0;
        let a = classify_head_tail(&dataset_of(sales, &[]), f).unwrap();
        let b = classify_head_tail(&Dataset::new(Arc::new(Catalog::new(shuffled).unwrap()), vec![]).unwrap(), f).unwrap();
        prop_assert_eq!(heads(&a), heads(&b));
    }

    #[test]
    fn split_is_chronological_and_complete(evs in events(8, 80), permille in 1u64..1000) {
        let d = dataset_of(&[1; 8], &evs);
        let split = chronological_split(&d, permille as f64 / 1000.0).unwrap();
        for user in d.users() {
            let train = split.train.sequence_of(user);
            let test = split.test.sequence_of(user);
            prop_assert!(!train.is_empty());
            if let (Some(last), Some(first)) = (train.iter().map(|e| e.timestamp).max(), test.iter().map(|e| e.timestamp).min()) {
                prop_assert!(last <= first);
            }
            let mut joined: Vec<InteractionRecord> = train.iter().chain(test).cloned().collect();
            joined.sort_by(|a, b| (a.timestamp, &a.item_id, a.action).cmp(&(b.timestamp, &b.item_id, b.action)));
            let mut original = d.sequence_of(user).to_vec();
            original.sort_by(|a, b| (a.timestamp, &a.item_id, a.action).cmp(&(b.timestamp, &b.item_id, b.action)));
            prop_assert_eq!(joined, original);
        }
    }

    #[test]
    fn dataset_round_trips_through_files(
        sales in vec(0u64..1000, 1..12),
        text in vec(("\\PC{0,12}", "\\PC{0,12}", vec("[a-z]{1,6}", 0..4)), 12),
        evs in events(12, 40),
        flagged in any::<bool>(),
    ) {
        let n = sales.len();
        let items: Vec<ItemRecord> = item_ids(n)
            .into_iter()
            .zip(&sales)
            .zip(&text)
            .map(|((id, &s), (title, desc, tokens))| ItemRecord {
                title: title.clone(),
                description: desc.clone(),
                tokens: tokens.clone(),
                ..ItemRecord::new(id, s)
            })
            .collect();
        let evs: Vec<_> = evs.into_iter().map(|(u, i, a, t)| (u, i % n, a, t)).collect();
        let ids = item_ids(n);
        let interactions = evs.iter().map(|&(u, i, a, t)| InteractionRecord::new(&format!("u{u}"), &ids[i], action_of(a), t)).collect();
        let mut d = Dataset::new(Arc::new(Catalog::new(items).unwrap()), interactions).unwrap();
        if flagged {
            d = classify_head_tail(&d, 0.3).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let (c, i) = (dir.path().join("c.jsonl"), dir.path().join("i.jsonl"));
        save_dataset(&d, &c, &i).unwrap();
        prop_assert_eq!(load_dataset(&c, &i).unwrap(), d);
    }

    #[test]
    fn average_pooling_ignores_token_order(tokens in vec(vec(-3.0f64..3.0, 4), 1..8), perm_seed in any::<u64>()) {
        let mut shuffled = tokens.clone();
        shuffled.rotate_left(perm_seed as usize % tokens.len());
        let a = pool(&TokenEmbeddingSequence { item_id: "x".into(), vectors: tokens }, Pooling::Average);
        let b = pool(&TokenEmbeddingSequence { item_id: "x".into(), vectors: shuffled }, Pooling::Average);
        match (a, b) {
            (Ok(a), Ok(b)) => for (x, y) in a.vector.iter().zip(&b.vector) {
                prop_assert!((x - y).abs() <= 1e-12);
            },
            (a, b) => prop_assert_eq!(a.is_ok(), b.is_ok()),
        }
    }

    #[test]
    fn pseudo_embeddings_are_unit_rows(words in vec(vec("[a-z]{1,5}", 1..5), 1..20), dim in 2usize..64, seed in any::<u64>()) {
        let items = item_ids(words.len()).into_iter().zip(&words).map(|(id, w)| ItemRecord { tokens: w.clone(), ..ItemRecord::new(id, 0) }).collect();
        let m = pseudo_embed_catalog::<f64>(&Catalog::new(items).unwrap(), dim, seed).unwrap();
        for (_, row) in m.rows() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() <= 1e-9);
        }
        let (a, b) = (m.row_at(0), m.row_at(m.len() - 1));
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        prop_assert!((cosine(a, b).unwrap() - dot).abs() <= 1e-9);
    }

    #[test]
    fn cosine_is_symmetric_and_scale_free(a in vec(-5.0f64..5.0, 6), b in vec(-5.0f64..5.0, 6), c in 0.001f64..1000.0) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
        let ab = cosine(&a, &b).unwrap();
        prop_assert!((ab - cosine(&b, &a).unwrap()).abs() <= 1e-12);
        let scaled: Vec<f64> = a.iter().map(|x| x * c).collect();
        prop_assert!((ab - cosine(&scaled, &b).unwrap()).abs() <= 1e-12);
        prop_assert!(ab.abs() <= 1.0 + 1e-12);
    }

    #[test]
    fn top_k_is_sorted(vectors in vec(vec(-1.0f64..1.0, 5), 1..80), query in vec(-1.0f64..1.0, 5), k in 1usize..100) {
        let Some(m) = unit_rows(&vectors) else { return Ok(()) };
        prop_assume!(query.iter().any(|x| x.abs() > 1e-6));
        let top = top_k_semantic(&query, &m, k, &HashSet::new()).unwrap();
        prop_assert_eq!(top.len(), k.min(vectors.len()));
        prop_assert!(top.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn recent_items_win_without_content_signal(vectors in vec(vec(-1.0f64..1.0, 4), 1..20), beta in 0.01f64..3.0, u in vec(-1.0f64..1.0, 4)) {
        let Some(m) = unit_rows(&vectors) else { return Ok(()) };
        let mut params = AttentionParams::<f64>::zeros(4);
        params.u = u;
        params.beta = beta;
        let iv = intent(&UserHistory::new("u", m.ids().to_vec()), &params, &m).unwrap();
        prop_assert!(iv.alphas.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn intent_is_the_attention_weighted_sum(vectors in vec(vec(-1.0f64..1.0, 4), 1..10), flat in vec(-2.0f64..2.0, 25)) {
        let Some(m) = unit_rows(&vectors) else { return Ok(()) };
        let iv = intent(&UserHistory::new("u", m.ids().to_vec()), &AttentionParams::from_flat(4, &flat), &m).unwrap();
        prop_assert!(iv.alphas.iter().all(|&a| a >= 0.0));
        for d in 0..4 {
            let want: f64 = (0..m.len()).map(|t| iv.alphas[t] * m.row_at(t)[d]).sum();
            prop_assert!((iv.h[d] - want).abs() <= 1e-9);
        }
    }

    #[test]
    fn itemknn_ignores_user_labels(evs in events(10, 60), perm in permutation(6)) {
        let d = dataset_of(&[1; 10], &evs);
        let relabelled: Vec<InteractionRecord> = d
            .interactions()
            .iter()
            .map(|e| {
                let u: usize = e.user_id[1..].parse().unwrap();
                InteractionRecord { user_id: format!("v{}", perm[u]), ..e.clone() }
            })
            .collect();
        let d2 = Dataset::new(d.shared_catalog(), relabelled).unwrap();
        let w = ActionWeights::<f64>::default();
        let (m1, m2) = (build_matrix(&d, &w), build_matrix(&d2, &w));
        let s1 = CfScorer::with_model(m1.clone(), CfModel::ItemKnn(ItemKnnIndex::build(&m1, 5)));
        let s2 = CfScorer::with_model(m2.clone(), CfModel::ItemKnn(ItemKnnIndex::build(&m2, 5)));
        for user in d.users() {
            let u: usize = user[1..].parse().unwrap();
            let a = s1.score_all(user).unwrap();
            let b = s2.score_all(&format!("v{}", perm[u])).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn item_similarity_is_symmetric_with_unit_diagonal(evs in events(8, 60)) {
        let m = build_matrix(&dataset_of(&[1; 8], &evs), &ActionWeights::<f64>::default());
        for i in 0..m.n_items() {
            if !m.col(i).is_empty() {
                prop_assert!((item_similarity(&m, i, i) - 1.0).abs() <= 1e-12);
            }
            for j in 0..m.n_items() {
                prop_assert!((item_similarity(&m, i, j) - item_similarity(&m, j, i)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn cf_scores_are_finite(evs in events(8, 60), seed in any::<u64>()) {
        let m = build_matrix(&dataset_of(&[1; 8], &evs), &ActionWeights::<f64>::default());
        let cfg = TrainingConfig { epochs: 3, batch_size: 16, learning_rate: 0.05, seed, negatives_per_positive: 1 };
        let mut scorers = vec![CfScorer::with_model(m.clone(), CfModel::ItemKnn(ItemKnnIndex::build(&m, 3)))];
        if let Ok((mf, _)) = train_bpr(&m, 4, 1e-4, &cfg) {
            scorers.push(CfScorer::with_model(m.clone(), CfModel::Bpr(mf)));
        }
        for s in &scorers {
            for user in m.users() {
                prop_assert!(s.score_all(user).unwrap().iter().all(|x| x.is_finite()));
            }
        }
    }

    #[test]
    fn observing_a_transition_never_lowers_it(
        seqs in vec(vec(0usize..6, 1..6), 1..10),
        a in 0usize..6,
        b in 0usize..6,
        order in 1usize..3,
        alpha in 0.01f64..2.0,
    ) {
        let before = markov(6, &seqs, order, alpha);
        let mut more = seqs.clone();
        more.push(vec![a, b]);
        let after = markov(6, &more, order, alpha);
        prop_assert!(after.log_prob(&[a], b) >= before.log_prob(&[a], b) - 1e-12);
    }

    #[test]
    fn fitting_and_search_are_deterministic(seqs in vec(vec(0usize..7, 1..6), 1..10), hist in vec(0usize..7, 0..4)) {
        let (m1, m2) = (markov(7, &seqs, 2, 0.3), markov(7, &seqs, 2, 0.3));
        prop_assert_eq!(m1.to_text(), m2.to_text());
        let ids = item_ids(7);
        let h = UserHistory::new("u", hist.iter().map(|&i| ids[i].clone()).collect());
        let c1 = beam_search(&m1, &h, 5, 2, &HashSet::new()).unwrap();
        let c2 = beam_search(&m2, &h, 5, 2, &HashSet::new()).unwrap();
        prop_assert!(c1.candidates.len() <= 5);
        prop_assert!(c1.candidates.windows(2).all(|w| w[0].1 >= w[1].1));
        prop_assert_eq!(c1, c2);
    }

    #[test]
    fn filtering_is_a_subset_and_idempotent(evs in events(6, 60), min_len in 0usize..6, action in prop::option::of(0u8..3)) {
        let d = dataset_of(&[1; 6], &evs);
        let required = action.map(action_of);
        let once = filter_training_sequences(&d, min_len, required);
        let all: Vec<&InteractionRecord> = d.interactions().iter().collect();
        prop_assert!(once.interactions().iter().all(|e| all.contains(&e)));
        prop_assert_eq!(filter_training_sequences(&once, min_len, required), once);
    }

    #[test]
    fn listmle_is_translation_invariant_and_positive(scores in vec(-10.0f64..10.0, 1..9), c in -50.0f64..50.0, perm_seed in any::<u64>()) {
        let k = scores.len();
        let mut order: Vec<usize> = (0..k).collect();
        order.rotate_left(perm_seed as usize % k);
        let base = listmle_loss(&scores, &order).unwrap().loss;
        let shifted: Vec<f64> = scores.iter().map(|s| s + c).collect();
        prop_assert!((base - listmle_loss(&shifted, &order).unwrap().loss).abs() <= 1e-9);
        if k == 1 {
            prop_assert_eq!(base, 0.0);
        } else {
            prop_assert!(base > 0.0);
        }
    }

    #[test]
    fn ranknet_rewards_widening_a_correct_gap(scores in vec(-5.0f64..5.0, 2..9), bump in 0.01f64..5.0, perm_seed in any::<u64>()) {
        let k = scores.len();
        let mut order: Vec<usize> = (0..k).collect();
        order.rotate_left(perm_seed as usize % k);
        let mut wider = scores.clone();
        wider[order[0]] += bump;
        prop_assert!(ranknet_loss(&wider, &order).unwrap().loss < ranknet_loss(&scores, &order).unwrap().loss);
    }

    #[test]
    fn alignment_never_adds_violations(
        seqs in vec(vec(0usize..6, 1..6), 1..10),
        rankings in vec((vec(0usize..6, 0..3), permutation(6), 2usize..7), 1..6),
        lr in 0.01f64..2.0,
        seed in any::<u64>(),
    ) {
        let model = markov(6, &seqs, 2, 0.5);
        let ids = item_ids(6);
        let rankings: Vec<CandidateRanking<f64>> = rankings
            .into_iter()
            .enumerate()
            .map(|(r, (ctx, perm, k))| CandidateRanking {
                input_user: format!("u{r}"),
                context: ctx.iter().map(|&i| ids[i].clone()).collect(),
                candidates: perm[..k].iter().map(|&i| RankedCandidate { item_id: ids[i].clone(), log_prob: 0.0, feedback: 0.0 }).collect(),
                label_order: (0..k).collect(),
            })
            .collect();
        let count = |m: &MarkovModel<f64>| -> usize {
            rankings.iter().map(|r| {
                let h = m.resolve(&r.context).unwrap();
                let scores: Vec<f64> = r.candidates.iter().map(|c| m.log_prob(&h, m.position(&c.item_id).unwrap())).collect();
                pairwise_violations(&scores, &r.label_order)
            }).sum()
        };
        let cfg = TrainingConfig { epochs: 5, batch_size: 2, learning_rate: lr, seed, negatives_per_positive: 1 };
        for loss in [RankingLoss::ListMle, RankingLoss::RankNet] {
            let (aligned, report) = align_generative(&model, &rankings, loss, &cfg).unwrap();
            prop_assert_eq!(report.initial_violations, count(&model));
            prop_assert_eq!(report.final_violations, count(&aligned));
            prop_assert!(report.final_violations <= report.initial_violations);
        }
    }

    #[test]
    fn grid_search_stays_on_the_simplex(
        cases in vec((vec((-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0), 2..15), vec(any::<bool>(), 15)), 1..6),
        step_idx in 0usize..4,
    ) {
        let step = [0.1, 0.25, 0.5, 1.0][step_idx];
        let ids = item_ids(15);
        let cases: Vec<GridCase<f64>> = cases
            .into_iter()
            .enumerate()
            .map(|(u, (triples, rel))| {
                let n = triples.len();
                let mut relevant: HashSet<String> = (0..n).filter(|&i| rel[i]).map(|i| ids[i].clone()).collect();
                if relevant.is_empty() {
                    relevant.insert(ids[0].clone());
                }
                GridCase {
                    user_id: format!("u{u}"),
                    triples: triples.into_iter().enumerate().map(|(i, (a, b, c))| (ids[i].clone(), ScoreTriple { s_sem: a, s_cf: b, s_gen: c })).collect::<BTreeMap<_, _>>(),
                    relevant,
                }
            })
            .collect();
        let points = simplex_grid(step).unwrap();
        let a = grid_search_over(&cases, &points, GridMetric::Ndcg10).unwrap();
        let b = grid_search_over(&cases, &points, GridMetric::Ndcg10).unwrap();
        let w = a.best.as_array();
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(points.contains(&a.best));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn ratio_metrics_are_bounded_and_monotone(perm in permutation(30), len in 0usize..20, rel in vec(0usize..30, 1..10)) {
        let ids = item_ids(30);
        let list: Vec<String> = perm[..len].iter().map(|&i| ids[i].clone()).collect();
        let relevant: HashSet<String> = rel.iter().map(|&i| ids[i].clone()).collect();
        let mut prev = (0.0, 0.0);
        for k in 1..=25 {
            let r = recall_at_k(&list, &relevant, k).unwrap();
            let h = hit_rate_at_k(&list, &relevant, k).unwrap();
            let n = ndcg_at_k(&list, &relevant, k).unwrap();
            for x in [r, h, n] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
            prop_assert!(r >= prev.0 && h >= prev.1);
            prev = (r, h);
        }
    }

    #[test]
    fn ndcg_is_one_with_relevant_items_on_top(perm in permutation(20), n_rel in 1usize..10, k in 1usize..20) {
        let ids = item_ids(20);
        let list: Vec<String> = perm.iter().map(|&i| ids[i].clone()).collect();
        let relevant: HashSet<String> = list[..n_rel].iter().cloned().collect();
        prop_assert!((ndcg_at_k(&list, &relevant, k).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn diversity_ignores_user_and_list_order(lists in vec(vec(0usize..15, 0..8), 2..7), rot in 0usize..7) {
        let ids = item_ids(15);
        let lists: Vec<Vec<String>> = lists.iter().map(|l| l.iter().map(|&i| ids[i].clone()).collect()).collect();
        let mut reordered: Vec<Vec<String>> = lists.iter().map(|l| l.iter().rev().cloned().collect()).collect();
        reordered.rotate_left(rot % lists.len());
        let pairs = lists.len() * lists.len();
        let a = diversity(&lists, pairs, 0).unwrap();
        let b = diversity(&reordered, pairs, 0).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }
}
