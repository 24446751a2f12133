//! Offline metrics and the experiment runner.
//!
//! Relevance is binary: an item is relevant to a user when it appears in the
//! user's held-out interactions and not in their training history. Ranking
//! metrics are macro-averaged over users with at least one relevant item.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Action, Catalog, SplitDataset};
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionWeights, Recommender};
use crate::intent::UserHistory;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relevance {
    #[default]
    AnyAction,
    PurchaseOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailCoverageMode {
    /// Share of recommendation slots holding tail items.
    #[default]
    Slots,
    /// Share of distinct recommended items that are tail items.
    DistinctItems,
}

fn check(relevant: &HashSet<String>, k: usize) -> Result<()> {
    if relevant.is_empty() {
        return Err(Error::invalid("empty relevant set"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    Ok(())
}

fn hits(ranked: &[String], relevant: &HashSet<String>, k: usize) -> usize {
    ranked.iter().take(k).filter(|id| relevant.contains(*id)).count()
}

pub fn recall_at_k(ranked: &[String], relevant: &HashSet<String>, k: usize) -> Result<f64> {
    check(relevant, k)?;
    Ok(hits(ranked, relevant, k) as f64 / relevant.len() as f64)
}

/// 1 when any of the top `k` is relevant, else 0.
pub fn hit_rate_at_k(ranked: &[String], relevant: &HashSet<String>, k: usize) -> Result<f64> {
    check(relevant, k)?;
    Ok(if hits(ranked, relevant, k) > 0 { 1.0 } else { 0.0 })
}

pub fn ndcg_at_k(ranked: &[String], relevant: &HashSet<String>, k: usize) -> Result<f64> {
    check(relevant, k)?;
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, id)| relevant.contains(*id))
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..relevant.len().min(k)).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    Ok(dcg / idcg)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn jaccard_distance(a: &HashSet<&str>, b: &HashSet<&str>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    1.0 - a.intersection(b).count() as f64 / union as f64
}

/// Mean Jaccard distance between users' lists. Every pair is used when there
/// are at most `sample_pairs` of them; otherwise `sample_pairs` distinct-user
/// pairs are drawn with replacement from a generator seeded by `seed`.
pub fn diversity(lists: &[Vec<String>], sample_pairs: usize, seed: u64) -> Result<f64> {
    let n = lists.len();
    if n < 2 {
        return Err(Error::invalid("diversity needs at least two users"));
    }
    let sets: Vec<HashSet<&str>> = lists.iter().map(|l| l.iter().map(String::as_str).collect()).collect();
    let n_pairs = n * (n - 1) / 2;
    let total: f64 = if n_pairs <= sample_pairs {
        (0..n)
            .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
            .map(|(u, v)| jaccard_distance(&sets[u], &sets[v]))
            .sum::<f64>()
            / n_pairs as f64
    } else {
        if sample_pairs == 0 {
            return Err(Error::invalid("sample_pairs must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sum = 0.0;
        for _ in 0..sample_pairs {
            let u = rng.random_range(0..n);
            let mut v = rng.random_range(0..n - 1);
            if v >= u {
                v += 1;
            }
            sum += jaccard_distance(&sets[u], &sets[v]);
        }
        sum / sample_pairs as f64
    };
    Ok(total)
}

pub fn tail_coverage(lists: &[Vec<String>], catalog: &Catalog, mode: TailCoverageMode) -> Result<f64> {
    if !catalog.flags_assigned() {
        return Err(Error::invalid("head/tail flags are not assigned"));
    }
    let is_tail = |id: &str| -> Result<bool> {
        catalog
            .get(id)
            .and_then(|item| item.is_tail())
            .ok_or_else(|| Error::UnknownItem(id.to_owned()))
    };
    let items: Vec<&str> = match mode {
        TailCoverageMode::Slots => lists.iter().flatten().map(String::as_str).collect(),
        TailCoverageMode::DistinctItems => {
            let mut set: Vec<&str> = lists.iter().flatten().map(String::as_str).collect();
            set.sort_unstable();
            set.dedup();
            set
        }
    };
    if items.is_empty() {
        return Err(Error::invalid("no recommendations"));
    }
    let mut tail = 0usize;
    for id in &items {
        if is_tail(id)? {
            tail += 1;
        }
    }
    Ok(tail as f64 / items.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median_ms: f64,
    pub p95_ms: f64,
    pub mean_ms: f64,
    pub samples: usize,
}

impl LatencyStats {
    /// Nearest-rank p95; the median averages the two middle values on even counts.
    pub fn from_samples(samples_ms: &[f64]) -> Result<Self> {
        if samples_ms.is_empty() {
            return Err(Error::invalid("no latency samples"));
        }
        let mut s = samples_ms.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median_ms = if n % 2 == 1 {
            s[n / 2]
        } else {
            (s[n / 2 - 1] + s[n / 2]) / 2.0
        };
        let p95_ms = s[(0.95 * n as f64).ceil() as usize - 1];
        Ok(LatencyStats {
            median_ms,
            p95_ms,
            mean_ms: mean(&s),
            samples: n,
        })
    }
}

/// Times `pipeline` on each user in order, sequentially; the first `warmup`
/// calls are run but not recorded.
pub fn measure_latency<U, F>(mut pipeline: F, users: &[U], warmup: usize) -> Result<LatencyStats>
where
    F: FnMut(&U) -> Result<()>,
{
    if users.is_empty() {
        return Err(Error::invalid("empty latency sample"));
    }
    let mut samples = Vec::with_capacity(users.len().saturating_sub(warmup));
    for (i, u) in users.iter().enumerate() {
        let start = Instant::now();
        pipeline(u)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        if i >= warmup {
            samples.push(ms);
        }
    }
    LatencyStats::from_samples(&samples)
}

/// Users of `split.test` with their full training history and relevant
/// held-out items, sorted by user id. Users without relevant items are left out.
pub fn evaluation_users(split: &SplitDataset, relevance: Relevance) -> Vec<(UserHistory, HashSet<String>)> {
    split
        .test
        .user_sequences()
        .into_iter()
        .filter_map(|(user, held_out)| {
            let history = split.train.sequence_of(user);
            if history.is_empty() {
                return None;
            }
            let seen: HashSet<&str> = history.iter().map(|e| e.item_id.as_str()).collect();
            let relevant: HashSet<String> = held_out
                .iter()
                .filter(|e| relevance == Relevance::AnyAction || e.action == Action::Purchase)
                .filter(|e| !seen.contains(e.item_id.as_str()))
                .map(|e| e.item_id.clone())
                .collect();
            if relevant.is_empty() {
                return None;
            }
            let items = history.iter().map(|e| e.item_id.clone()).collect();
            Some((UserHistory::new(user, items), relevant))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub hit_rate_at: BTreeMap<usize, f64>,
    pub ndcg_at: BTreeMap<usize, f64>,
    /// Over top-10 lists.
    pub diversity: f64,
    /// Over top-10 lists.
    pub tail_coverage: f64,
    pub latency: Option<LatencyStats>,
    pub users_evaluated: usize,
    pub users_skipped: usize,
}

/// Six significant digits.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

impl MetricReport {
    /// Named values in a fixed order.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (k, v) in &self.recall_at {
            out.push((format!("recall@{k}"), *v));
        }
        for (k, v) in &self.hit_rate_at {
            out.push((format!("hit_rate@{k}"), *v));
        }
        for (k, v) in &self.ndcg_at {
            out.push((format!("ndcg@{k}"), *v));
        }
        out.push(("diversity".into(), self.diversity));
        out.push(("tail_coverage".into(), self.tail_coverage));
        if let Some(l) = &self.latency {
            out.push(("latency_median_ms".into(), l.median_ms));
            out.push(("latency_p95_ms".into(), l.p95_ms));
            out.push(("latency_mean_ms".into(), l.mean_ms));
        }
        out
    }

    /// `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={}", fmt_sig(v));
        }
        let _ = writeln!(s, "users_evaluated={}", self.users_evaluated);
        let _ = writeln!(s, "users_skipped={}", self.users_skipped);
        s
    }
}

/// An aligned table with one column per named report.
pub fn comparison_table(reports: &[(String, MetricReport)]) -> String {
    let Some((_, first)) = reports.first() else {
        return String::new();
    };
    let rows: Vec<String> = first.entries().into_iter().map(|(k, _)| k).collect();
    let mut cells: Vec<Vec<String>> = vec![std::iter::once("metric".to_owned())
        .chain(reports.iter().map(|(n, _)| n.clone()))
        .collect()];
    for (i, row) in rows.iter().enumerate() {
        let mut line = vec![row.clone()];
        for (_, r) in reports {
            line.push(r.entries().get(i).map(|(_, v)| fmt_sig(*v)).unwrap_or_default());
        }
        cells.push(line);
    }
    let widths: Vec<usize> = (0..cells[0].len())
        .map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in &cells {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, v)| {
                if c == 0 {
                    format!("{v:<w$}", w = widths[c])
                } else {
                    format!("{v:>w$}", w = widths[c])
                }
            })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

/// A fusion configuration to compare; components are shared.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub name: String,
    pub weights: FusionWeights,
}

impl PipelineConfig {
    pub fn new(name: impl Into<String>, weights: FusionWeights) -> Self {
        PipelineConfig {
            name: name.into(),
            weights,
        }
    }

    /// Full fusion with `weights` plus the three single-channel projections.
    pub fn standard_set(weights: FusionWeights) -> Vec<PipelineConfig> {
        vec![
            PipelineConfig::new("fusion", weights),
            PipelineConfig::new("semantic", FusionWeights::new(1.0, 0.0, 0.0)),
            PipelineConfig::new("cf", FusionWeights::new(0.0, 1.0, 0.0)),
            PipelineConfig::new("generative", FusionWeights::new(0.0, 0.0, 1.0)),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub k_list: Vec<usize>,
    pub diversity_pairs: usize,
    pub relevance: Relevance,
    pub tail_mode: TailCoverageMode,
    pub seed: u64,
}

/// Scores every evaluation user once, then ranks and measures each configuration.
pub fn evaluate_configs<T: Scalar>(
    recommender: &Recommender<T>,
    split: &SplitDataset,
    configs: &[PipelineConfig],
    opts: &EvalOptions,
) -> Result<Vec<(String, MetricReport)>> {
    if configs.is_empty() {
        return Ok(Vec::new());
    }
    for c in configs {
        c.weights.validate()?;
    }
    if opts.k_list.is_empty() || opts.k_list.contains(&0) {
        return Err(Error::Config("k_list must be nonempty with every K >= 1".into()));
    }
    let users = evaluation_users(split, opts.relevance);
    let n_test_users = split.test.users().len();
    if users.len() < 2 {
        return Err(Error::invalid("fewer than two users with relevant held-out items"));
    }
    let max_k = *opts.k_list.iter().max().expect("nonempty");
    let per_user: Vec<Vec<Vec<String>>> = users
        .par_iter()
        .map(|(history, _)| {
            let triples = recommender.candidate_triples(history)?;
            configs
                .iter()
                .map(|c| Ok(fuse(&history.user_id, &triples, &c.weights, max_k)?.item_ids()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let catalog = split.train.catalog();
    configs
        .iter()
        .enumerate()
        .map(|(ci, c)| {
            let lists: Vec<&Vec<String>> = per_user.iter().map(|u| &u[ci]).collect();
            let mut report = MetricReport {
                recall_at: BTreeMap::new(),
                hit_rate_at: BTreeMap::new(),
                ndcg_at: BTreeMap::new(),
                diversity: 0.0,
                tail_coverage: 0.0,
                latency: None,
                users_evaluated: users.len(),
                users_skipped: n_test_users - users.len(),
            };
            for &k in &opts.k_list {
                let mut r = Vec::with_capacity(users.len());
                let mut h = Vec::with_capacity(users.len());
                let mut n = Vec::with_capacity(users.len());
                for (list, (_, relevant)) in lists.iter().zip(&users) {
                    r.push(recall_at_k(list, relevant, k)?);
                    h.push(hit_rate_at_k(list, relevant, k)?);
                    n.push(ndcg_at_k(list, relevant, k)?);
                }
                report.recall_at.insert(k, mean(&r));
                report.hit_rate_at.insert(k, mean(&h));
                report.ndcg_at.insert(k, mean(&n));
            }
            let top10: Vec<Vec<String>> = lists.iter().map(|l| l.iter().take(10).cloned().collect()).collect();
            report.diversity = diversity(&top10, opts.diversity_pairs, opts.seed)?;
            report.tail_coverage = tail_coverage(&top10, catalog, opts.tail_mode)?;
            Ok((c.name.clone(), report))
        })
        .collect()
}
