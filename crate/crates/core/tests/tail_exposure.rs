//! Tail exposure of full fusion against the semantic-only projection on the
//! seeded default scenario.

use longtail::config::RunConfig;
use longtail::data::generate_synthetic;
use longtail::evaluation::{evaluate_configs, PipelineConfig};
use longtail::pipeline::{embeddings_for, eval_options, prepare, train_all};

#[test]
fn fusion_exposes_at_least_as_much_tail_as_semantic_only() {
    let cfg = RunConfig::default();
    let s = &cfg.synthetic;
    let d = generate_synthetic(cfg.seed, s.n_users, s.n_items, s.n_interactions, s.zipf_exponent).unwrap();
    let split = prepare(&d, &cfg).unwrap();
    let emb = embeddings_for::<f64>(&d, &cfg).unwrap();
    let rec = train_all(&split, &emb, &cfg).unwrap().recommender(&cfg).unwrap();
    let reports = evaluate_configs(
        &rec,
        &split,
        &PipelineConfig::standard_set(cfg.fusion.weights),
        &eval_options(&cfg),
    )
    .unwrap();
    let tail = |name: &str| reports.iter().find(|(n, _)| n == name).unwrap().1.tail_coverage;
    let (fusion, semantic) = (tail("fusion"), tail("semantic"));
    println!("tail coverage: fusion {fusion:.4}, semantic-only {semantic:.4}");
    assert!(fusion >= semantic, "fusion {fusion:.4} < semantic-only {semantic:.4}");
}
