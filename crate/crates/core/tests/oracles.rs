//! Dataset-level checks and toy-model oracles for the scoring channels.

use std::collections::{BTreeSet, HashMap, HashSet};

use longtail::cf::{bpr_loss, train_bpr, BprTriple};
use longtail::config::{RunConfig, TrainingConfig};
use longtail::data::{generate_synthetic, Dataset, SplitDataset};
use longtail::embedding::{EmbeddingMatrix, ItemEmbedding};
use longtail::evaluation::{evaluation_users, Relevance};
use longtail::fusion::{grid_search_over, simplex_grid, FusionWeights, GridCase, GridMetric, Recommender, ScoreTriple};
use longtail::generative::{beam_search, MarkovModel, SequenceModel};
use longtail::intent::{intent, AttentionParams, UserHistory};
use longtail::pipeline::{cf_matrix, embeddings_for, prepare, train_all};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn default_data() -> (RunConfig, Dataset) {
    let cfg = RunConfig::default();
    let s = &cfg.synthetic;
    let d = generate_synthetic(cfg.seed, s.n_users, s.n_items, s.n_interactions, s.zipf_exponent).unwrap();
    (cfg, d)
}

#[test]
fn top_decile_of_items_carries_most_interactions() {
    let (_, d) = default_data();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for e in d.interactions() {
        *counts.entry(e.item_id.as_str()).or_default() += 1;
    }
    let mut sorted: Vec<usize> = counts.into_values().collect();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    let top: usize = sorted.iter().take(d.catalog().len() / 10).sum();
    let share = top as f64 / d.interactions().len() as f64;
    assert!(share > 0.5, "top 10% share {share}");
}

#[test]
fn collaborative_scores_bury_tail_items() {
    let (cfg, d) = default_data();
    let split = prepare(&d, &cfg).unwrap();
    let (cf, _) = longtail::pipeline::train_cf_stage::<f64>(&split.train, &cfg).unwrap();
    let catalog = split.train.catalog();
    let ids: Vec<&str> = catalog.ids().collect();
    let (mut head, mut tail) = (Vec::new(), Vec::new());
    for (user, events) in split.test.user_sequences() {
        let Ok(scores) = cf.score_all(user) else { continue };
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(ids[b])));
        let mut rank = vec![0usize; ids.len()];
        for (r, &i) in order.iter().enumerate() {
            rank[i] = r + 1;
        }
        for e in events {
            let p = catalog.position(&e.item_id).unwrap();
            let bucket = if catalog.items()[p].is_tail().unwrap() {
                &mut tail
            } else {
                &mut head
            };
            bucket.push(rank[p] as f64);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(!head.is_empty() && !tail.is_empty());
    assert!(
        mean(&tail) > mean(&head),
        "tail mean rank {} vs head {}",
        mean(&tail),
        mean(&head)
    );
}

#[test]
fn bpr_loss_on_a_fixed_sample_does_not_rise_early() {
    let (cfg, d) = default_data();
    let split = prepare(&d, &cfg).unwrap();
    let m = cf_matrix::<f64>(&split.train, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut triples = Vec::new();
    while triples.len() < 5000 {
        let user = rng.random_range(0..m.n_users());
        let row = m.row(user);
        let pos = row[rng.random_range(0..row.len())].0;
        let neg = rng.random_range(0..m.n_items());
        if row.iter().all(|&(i, _)| i != neg) {
            triples.push(BprTriple { user, pos, neg });
        }
    }
    let reg = cfg.cf.regularization;
    let losses: Vec<f64> = (0..=3)
        .map(|epochs| {
            let tc = TrainingConfig {
                epochs,
                ..cfg.bpr_training()
            };
            let (mf, _) = train_bpr(&m, cfg.cf.factors, reg, &tc).unwrap();
            bpr_loss(&mf, &triples, reg)
        })
        .collect();
    assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
}

#[test]
fn intent_matches_a_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let d = 5;
        let rows: Vec<ItemEmbedding<f64>> = (0..4)
            .map(|t| ItemEmbedding {
                item_id: format!("i{t}"),
                vector: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                normalized: false,
            })
            .collect();
        let m = EmbeddingMatrix::from_rows(rows).unwrap();
        let flat: Vec<f64> = (0..d * d + 2 * d + 1).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = AttentionParams::from_flat(d, &flat);
        let got = intent(&UserHistory::new("u", m.ids().to_vec()), &p, &m).unwrap();

        let mut weights = [0.0; 4];
        for t in 0..4 {
            let e = m.row_at(t);
            let mut logit = p.beta * (t + 1) as f64;
            for i in 0..d {
                let mut z = p.b[i];
                for j in 0..d {
                    z += p.w[i * d + j] * e[j];
                }
                logit += p.u[i] * z.tanh();
            }
            weights[t] = logit.exp();
        }
        let total: f64 = weights.iter().sum();
        for t in 0..4 {
            assert!((got.alphas[t] - weights[t] / total).abs() < 1e-12);
        }
        for i in 0..d {
            let mut h = 0.0;
            for t in 0..4 {
                h += weights[t] / total * m.row_at(t)[i];
            }
            assert!((got.h[i] - h).abs() < 1e-12);
        }
    }
}

#[test]
fn narrow_beam_on_a_six_item_toy_matches_enumeration() {
    let vocab: Vec<String> = ["A", "B", "C", "D", "E", "F"].iter().map(|s| s.to_string()).collect();
    let seqs = vec![
        vec![0, 1, 2, 3],
        vec![0, 1, 3, 4],
        vec![1, 2, 0, 5],
        vec![2, 3, 4, 0, 1],
        vec![0, 2, 1, 4],
        vec![5, 0, 1, 2],
    ];
    let model = MarkovModel::<f64>::fit_sequences(vocab.clone(), &seqs, 2, 0.2).unwrap();
    let history = UserHistory::new("u", vec!["A".into()]);
    let got = beam_search(&model, &history, 5, 2, &HashSet::new()).unwrap();

    let base = model.resolve(&history.items).unwrap();
    let first = model.next_distribution(&base);
    let mut all = Vec::new();
    for a in 0..6 {
        let second = model.next_distribution(&[base.clone(), vec![a]].concat());
        for b in 0..6 {
            all.push((vec![vocab[a].clone(), vocab[b].clone()], first[a].ln() + second[b].ln()));
        }
    }
    all.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
    all.truncate(5);
    assert_eq!(got.beams, all);
}

struct Toy {
    split: SplitDataset,
    recommender: Recommender<f64>,
}

fn toy() -> Toy {
    let mut cfg = RunConfig::default();
    cfg.synthetic.n_users = 40;
    cfg.synthetic.n_items = 50;
    cfg.synthetic.n_interactions = 800;
    cfg.embedding.dim = 8;
    cfg.attention.epochs = 2;
    cfg.align.epochs = 2;
    cfg.fusion.recall_k_each = 5;
    let s = &cfg.synthetic;
    let d = generate_synthetic(cfg.seed, s.n_users, s.n_items, s.n_interactions, s.zipf_exponent).unwrap();
    let split = prepare(&d, &cfg).unwrap();
    let emb = embeddings_for::<f64>(&d, &cfg).unwrap();
    let recommender = train_all(&split, &emb, &cfg).unwrap().recommender(&cfg).unwrap();
    Toy { split, recommender }
}

fn top_outside(ids: &[String], scores: &[f64], exclude: &HashSet<&str>, k: usize) -> Vec<String> {
    let mut entries: Vec<(&String, f64)> = ids
        .iter()
        .zip(scores)
        .filter(|(id, _)| !exclude.contains(id.as_str()))
        .map(|(id, &s)| (id, s))
        .collect();
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    entries.into_iter().take(k).map(|(id, _)| id.clone()).collect()
}

#[test]
fn recall_is_the_union_of_per_channel_top_lists() {
    let Toy { split, recommender } = toy();
    let c = recommender.components();
    let ids = c.embeddings.ids().to_vec();
    for (history, _) in evaluation_users(&split, Relevance::AnyAction) {
        let exclude = history.item_set();
        let h = recommender.intent_vector(&history).unwrap();
        let hn = h.iter().map(|x| x * x).sum::<f64>().sqrt();
        let semantic: Vec<f64> = (0..ids.len())
            .map(|p| {
                let row = c.embeddings.row_at(p);
                let dot: f64 = row.iter().zip(&h).map(|(a, b)| a * b).sum();
                dot / (hn * row.iter().map(|x| x * x).sum::<f64>().sqrt())
            })
            .collect();
        let cf = c.cf.score_all(&history.user_id).unwrap();
        let hist = c.generative.resolve(&history.items).unwrap();
        let gen: Vec<f64> = c.generative.next_distribution(&hist).iter().map(|p| p.ln()).collect();
        for k in [1, 3, 10] {
            let mut want = BTreeSet::new();
            for scores in [&semantic, &cf, &gen] {
                want.extend(top_outside(&ids, scores, &exclude, k));
            }
            assert_eq!(
                recommender.recall_candidates(&history, k).unwrap(),
                want,
                "user {}",
                history.user_id
            );
        }
    }
}

#[test]
fn recommendations_respect_history_and_recall_size() {
    let Toy { split, recommender } = toy();
    let k_each = recommender.options().k_each;
    let n = recommender.components().embeddings.len();
    for (history, _) in evaluation_users(&split, Relevance::AnyAction) {
        let seen = history.item_set();
        let full = UserHistory::new(history.user_id.clone(), history.items.clone());
        let candidates = recommender.recall_candidates(&full, k_each).unwrap();
        assert!(candidates.len() <= 3 * k_each);
        if n - seen.len() >= k_each {
            assert!(candidates.len() >= k_each);
        }
        let (list, _) = recommender.recommend(&full, &FusionWeights::default(), 10).unwrap();
        let items = list.item_ids();
        assert!(items.iter().all(|id| !seen.contains(id.as_str())));
        assert_eq!(items.iter().collect::<HashSet<_>>().len(), items.len());
        assert!(list.items.windows(2).all(|w| w[0].1 >= w[1].1));
    }
}

#[test]
fn grid_search_favours_the_only_informative_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut noise = || -> f64 { StandardNormal.sample(&mut rng) };
    let cases: Vec<GridCase<f64>> = (0..40)
        .map(|u| {
            let relevant: HashSet<String> = (0..3).map(|r| format!("i{:02}", (u * 7 + r * 11) % 30)).collect();
            let triples = (0..30)
                .map(|i| {
                    let id = format!("i{i:02}");
                    let signal = if relevant.contains(&id) { 2.0 } else { 0.0 };
                    (
                        id,
                        ScoreTriple {
                            s_sem: signal + noise(),
                            s_cf: noise(),
                            s_gen: noise(),
                        },
                    )
                })
                .collect();
            GridCase {
                user_id: format!("u{u}"),
                triples,
                relevant,
            }
        })
        .collect();
    let result = grid_search_over(&cases, &simplex_grid(0.1).unwrap(), GridMetric::Ndcg10).unwrap();
    let w = result.best;
    assert!(w.semantic >= w.collaborative && w.semantic >= w.generative, "{w:?}");
}
