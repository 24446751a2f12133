//! Multi-source candidate recall, per-channel normalization, weighted linear
//! fusion and simplex grid search over the fusion weights.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cf::CfScorer;
use crate::embedding::{cosine, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::evaluation::{ndcg_at_k, recall_at_k};
use crate::generative::{beam_search, MarkovModel, SequenceModel};
use crate::intent::{intent, AttentionParams, UserHistory};
use crate::rank;
use crate::scalar::Scalar;

/// Channel weights `(semantic, collaborative, generative)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionWeights {
    pub semantic: f64,
    pub collaborative: f64,
    pub generative: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights::new(0.4, 0.4, 0.2)
    }
}

impl FusionWeights {
    pub const fn new(semantic: f64, collaborative: f64, generative: f64) -> Self {
        FusionWeights {
            semantic,
            collaborative,
            generative,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.semantic, self.collaborative, self.generative]
    }

    pub fn scaled(&self, c: f64) -> Self {
        FusionWeights::new(c * self.semantic, c * self.collaborative, c * self.generative)
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::Config(format!(
                "fusion weights must be finite and >= 0, got {self}"
            )));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(Error::Config("fusion weights are all zero".into()));
        }
        Ok(())
    }
}

impl fmt::Display for FusionWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.semantic, self.collaborative, self.generative)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Subtract the mean, divide by the population standard deviation.
    #[default]
    ZScore,
    MinMax,
    /// Raw scores.
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridMetric {
    #[default]
    #[serde(rename = "ndcg@10")]
    Ndcg10,
    #[serde(rename = "recall@50")]
    Recall50,
}

impl GridMetric {
    pub fn evaluate(self, ranked: &[String], relevant: &HashSet<String>) -> Result<f64> {
        match self {
            GridMetric::Ndcg10 => ndcg_at_k(ranked, relevant, 10),
            GridMetric::Recall50 => recall_at_k(ranked, relevant, 50),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScoreTriple<T> {
    pub s_sem: T,
    pub s_cf: T,
    pub s_gen: T,
}

impl<T: Scalar> ScoreTriple<T> {
    pub fn fused(&self, w: &FusionWeights) -> T {
        T::of(w.semantic) * self.s_sem + T::of(w.collaborative) * self.s_cf + T::of(w.generative) * self.s_gen
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecommendationList<T> {
    pub user_id: String,
    /// Best first.
    pub items: Vec<(String, T)>,
    pub k: usize,
}

impl<T> RecommendationList<T> {
    pub fn item_ids(&self) -> Vec<String> {
        self.items.iter().map(|(id, _)| id.clone()).collect()
    }
}

/// Normalizes one channel in place across a candidate set.
pub fn normalize<T: Scalar>(values: &mut [T], mode: Normalization) {
    if values.is_empty() || mode == Normalization::None {
        return;
    }
    let (lo, hi) = values
        .iter()
        .fold((values[0], values[0]), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    match mode {
        Normalization::ZScore => {
            if lo == hi {
                values.iter_mut().for_each(|v| *v = T::zero());
                return;
            }
            let n = T::of_usize(values.len());
            let mean = values.iter().copied().sum::<T>() / n;
            let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let sd = var.sqrt();
            values.iter_mut().for_each(|v| *v = (*v - mean) / sd);
        }
        Normalization::MinMax => {
            if lo == hi {
                values.iter_mut().for_each(|v| *v = T::of(0.5));
                return;
            }
            values.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
        }
        Normalization::None => {}
    }
}

/// Normalizes each channel of `triples` independently.
pub fn normalize_triples<T: Scalar>(triples: &mut BTreeMap<String, ScoreTriple<T>>, mode: Normalization) {
    let mut channels: [Vec<T>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for t in triples.values() {
        channels[0].push(t.s_sem);
        channels[1].push(t.s_cf);
        channels[2].push(t.s_gen);
    }
    channels.iter_mut().for_each(|c| normalize(c, mode));
    for (i, t) in triples.values_mut().enumerate() {
        *t = ScoreTriple {
            s_sem: channels[0][i],
            s_cf: channels[1][i],
            s_gen: channels[2][i],
        };
    }
}

/// Top `k` candidates by `S = λ1 s_sem + λ2 s_cf + λ3 s_gen`; ties by item id.
pub fn fuse<T: Scalar>(
    user_id: &str,
    triples: &BTreeMap<String, ScoreTriple<T>>,
    weights: &FusionWeights,
    k: usize,
) -> Result<RecommendationList<T>> {
    weights.validate()?;
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    let scored: Vec<(&str, T)> = triples.iter().map(|(id, t)| (id.as_str(), t.fused(weights))).collect();
    Ok(RecommendationList {
        user_id: user_id.to_owned(),
        items: rank::top_k(scored, k)
            .into_iter()
            .map(|(id, s)| (id.to_owned(), s))
            .collect(),
        k,
    })
}

/// The trained scorers behind the three channels. All of them index the
/// catalog in the same order.
#[derive(Clone, Debug)]
pub struct Components<T> {
    pub embeddings: EmbeddingMatrix<T>,
    pub attention: AttentionParams<T>,
    pub cf: CfScorer<T>,
    pub generative: MarkovModel<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecommenderOptions {
    /// History length fed to the intent encoder.
    pub t_max: usize,
    pub k_each: usize,
    pub beam_depth: usize,
    pub normalization: Normalization,
}

impl Default for RecommenderOptions {
    fn default() -> Self {
        RecommenderOptions {
            t_max: 50,
            k_each: 1000,
            beam_depth: 1,
            normalization: Normalization::ZScore,
        }
    }
}

/// Raw channel scores for every catalog item, in catalog order.
#[derive(Clone, Debug)]
pub struct ChannelScores<T> {
    pub semantic: Vec<T>,
    pub collaborative: Vec<T>,
    pub generative: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct Recommender<T> {
    components: Components<T>,
    options: RecommenderOptions,
}

impl<T: Scalar> Recommender<T> {
    pub fn new(components: Components<T>, options: RecommenderOptions) -> Result<Self> {
        let ids = components.embeddings.ids();
        if components.cf.matrix().items() != ids || components.generative.vocabulary() != ids {
            return Err(Error::invalid("components were built over different catalogs"));
        }
        if components.attention.dim != components.embeddings.dim() {
            return Err(Error::DimensionMismatch {
                expected: components.embeddings.dim(),
                found: components.attention.dim,
            });
        }
        if options.k_each == 0 || options.beam_depth == 0 || options.t_max == 0 {
            return Err(Error::invalid("k_each, beam depth and t_max must be >= 1"));
        }
        Ok(Recommender { components, options })
    }

    pub fn components(&self) -> &Components<T> {
        &self.components
    }

    pub fn options(&self) -> &RecommenderOptions {
        &self.options
    }

    fn recent(&self, history: &UserHistory) -> UserHistory {
        let start = history.items.len().saturating_sub(self.options.t_max);
        UserHistory::new(history.user_id.clone(), history.items[start..].to_vec())
    }

    /// Intent vector from the most recent `t_max` items.
    pub fn intent_vector(&self, history: &UserHistory) -> Result<Vec<T>> {
        let c = &self.components;
        Ok(intent(&self.recent(history), &c.attention, &c.embeddings)?.h)
    }

    pub fn semantic_scores(&self, history: &UserHistory) -> Result<Vec<T>> {
        let h = self.intent_vector(history)?;
        self.components
            .embeddings
            .rows()
            .map(|(_, row)| cosine(&h, row))
            .collect()
    }

    pub fn channel_scores(&self, history: &UserHistory) -> Result<ChannelScores<T>> {
        let c = &self.components;
        let hist = c.generative.resolve(&history.items)?;
        Ok(ChannelScores {
            semantic: self.semantic_scores(history)?,
            collaborative: c.cf.score_all(&history.user_id)?,
            generative: c
                .generative
                .next_distribution(&hist)
                .into_iter()
                .map(|p| p.ln())
                .collect(),
        })
    }

    fn top_excluding(&self, scores: &[T], exclude: &HashSet<&str>, k: usize) -> Vec<String> {
        let ids = self.components.embeddings.ids();
        let entries = ids
            .iter()
            .zip(scores)
            .filter(|(id, _)| !exclude.contains(id.as_str()))
            .map(|(id, &s)| (id.as_str(), s))
            .collect();
        rank::top_k(entries, k)
            .into_iter()
            .map(|(id, _)| id.to_owned())
            .collect()
    }

    /// Union of each channel's `k_each` best items outside the user's history.
    pub fn recall_candidates(&self, history: &UserHistory, k_each: usize) -> Result<BTreeSet<String>> {
        let scores = self.channel_scores(history)?;
        self.recall_from(history, &scores, k_each)
    }

    fn recall_from(&self, history: &UserHistory, scores: &ChannelScores<T>, k_each: usize) -> Result<BTreeSet<String>> {
        if k_each == 0 {
            return Err(Error::invalid("k_each must be >= 1"));
        }
        let exclude = history.item_set();
        let mut out: BTreeSet<String> = self
            .top_excluding(&scores.semantic, &exclude, k_each)
            .into_iter()
            .collect();
        out.extend(self.top_excluding(&scores.collaborative, &exclude, k_each));
        if exclude.len() < self.components.embeddings.len() {
            let beams = beam_search(
                &self.components.generative,
                history,
                k_each,
                self.options.beam_depth,
                &exclude,
            )?;
            out.extend(beams.candidates.into_iter().map(|(id, _)| id));
        }
        Ok(out)
    }

    fn triples_from(
        &self,
        scores: &ChannelScores<T>,
        candidates: &BTreeSet<String>,
        mode: Normalization,
    ) -> Result<BTreeMap<String, ScoreTriple<T>>> {
        if candidates.is_empty() {
            return Err(Error::invalid("empty candidate set"));
        }
        let mut triples = BTreeMap::new();
        for id in candidates {
            let p = self
                .components
                .embeddings
                .position(id)
                .ok_or_else(|| Error::UnknownItem(id.clone()))?;
            triples.insert(
                id.clone(),
                ScoreTriple {
                    s_sem: scores.semantic[p],
                    s_cf: scores.collaborative[p],
                    s_gen: scores.generative[p],
                },
            );
        }
        normalize_triples(&mut triples, mode);
        Ok(triples)
    }

    /// Normalized score triples for `candidates`.
    pub fn score_candidates(
        &self,
        history: &UserHistory,
        candidates: &BTreeSet<String>,
        mode: Normalization,
    ) -> Result<BTreeMap<String, ScoreTriple<T>>> {
        let scores = self.channel_scores(history)?;
        self.triples_from(&scores, candidates, mode)
    }

    /// Recalled candidates with their normalized triples.
    pub fn candidate_triples(&self, history: &UserHistory) -> Result<BTreeMap<String, ScoreTriple<T>>> {
        let scores = self.channel_scores(history)?;
        let candidates = self.recall_from(history, &scores, self.options.k_each)?;
        self.triples_from(&scores, &candidates, self.options.normalization)
    }

    /// The full serving path: intent, recall, scoring, normalization, fusion.
    pub fn recommend(
        &self,
        history: &UserHistory,
        weights: &FusionWeights,
        k: usize,
    ) -> Result<(RecommendationList<T>, BTreeMap<String, ScoreTriple<T>>)> {
        let triples = self.candidate_triples(history)?;
        let list = fuse(&history.user_id, &triples, weights, k)?;
        Ok((list, triples))
    }

    /// Semantic-only ranking over the whole catalog for a caller-supplied history.
    pub fn recommend_semantic(&self, history: &UserHistory, k: usize) -> Result<RecommendationList<T>> {
        if k == 0 {
            return Err(Error::invalid("k must be >= 1"));
        }
        let scores = self.semantic_scores(history)?;
        let exclude = history.item_set();
        let ids = self.components.embeddings.ids();
        let entries = ids
            .iter()
            .zip(scores)
            .filter(|(id, _)| !exclude.contains(id.as_str()))
            .map(|(id, s)| (id.as_str(), s))
            .collect();
        Ok(RecommendationList {
            user_id: history.user_id.clone(),
            items: rank::top_k(entries, k)
                .into_iter()
                .map(|(id, s)| (id.to_owned(), s))
                .collect(),
            k,
        })
    }
}

/// Rounds away accumulated binary error so lattice points print cleanly.
fn lattice(x: f64) -> f64 {
    (x * 1e12).round() / 1e12
}

/// Weight triples on `λ1 + λ2 + λ3 = 1` with spacing `step`, in
/// lexicographic order.
pub fn simplex_grid(step: f64) -> Result<Vec<FusionWeights>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Config(format!("grid step must lie in (0, 1], got {step}")));
    }
    let n = (1.0 / step + 1e-9).floor() as usize;
    let mut out = Vec::new();
    for i in 0..=n {
        for j in 0..=n - i {
            let (a, b) = (lattice(i as f64 * step), lattice(j as f64 * step));
            out.push(FusionWeights::new(a, b, lattice((1.0 - a - b).max(0.0))));
        }
    }
    Ok(out)
}

/// A validation user: recalled candidate triples and the held-out items.
pub struct GridCase<T> {
    pub user_id: String,
    pub triples: BTreeMap<String, ScoreTriple<T>>,
    pub relevant: HashSet<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub best: FusionWeights,
    pub best_score: f64,
    /// Every evaluated point with its mean validation metric.
    pub evaluated: Vec<(FusionWeights, f64)>,
}

fn distance_to_default(w: &FusionWeights) -> f64 {
    let d = FusionWeights::default().as_array();
    w.as_array().iter().zip(d).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

/// Exhaustive search over `points`; the highest mean metric wins, ties go
/// to the point closest to the default weights, then to the
/// lexicographically smallest.
pub fn grid_search_over<T: Scalar>(
    cases: &[GridCase<T>],
    points: &[FusionWeights],
    metric: GridMetric,
) -> Result<GridResult> {
    if cases.is_empty() {
        return Err(Error::invalid("empty validation slice"));
    }
    if points.is_empty() {
        return Err(Error::invalid("empty weight grid"));
    }
    let evaluated: Vec<(FusionWeights, f64)> = points
        .par_iter()
        .map(|w| {
            let total = cases.iter().try_fold(0.0, |acc, case| {
                let k = case.triples.len();
                let list = fuse(&case.user_id, &case.triples, w, k)?;
                Ok::<f64, Error>(acc + metric.evaluate(&list.item_ids(), &case.relevant)?)
            })?;
            Ok((*w, total / cases.len() as f64))
        })
        .collect::<Result<_>>()?;
    let (best, best_score) = *evaluated
        .iter()
        .reduce(|a, b| {
            let better = b.1 > a.1
                || (b.1 == a.1
                    && (distance_to_default(&b.0) < distance_to_default(&a.0)
                        || (distance_to_default(&b.0) == distance_to_default(&a.0)
                            && b.0.as_array() < a.0.as_array())));
            if better {
                b
            } else {
                a
            }
        })
        .expect("nonempty grid");
    Ok(GridResult {
        best,
        best_score,
        evaluated,
    })
}

/// Builds validation cases from a recommender trained on `validation.train`
/// and searches the simplex grid.
pub fn grid_search<T: Scalar>(
    recommender: &Recommender<T>,
    validation: &crate::data::SplitDataset,
    relevance: crate::evaluation::Relevance,
    grid_step: f64,
    metric: GridMetric,
) -> Result<GridResult> {
    let points = simplex_grid(grid_step)?;
    let users = crate::evaluation::evaluation_users(validation, relevance);
    let cases: Vec<GridCase<T>> = users
        .par_iter()
        .map(|(history, relevant)| {
            Ok(GridCase {
                user_id: history.user_id.clone(),
                triples: recommender.candidate_triples(history)?,
                relevant: relevant.clone(),
            })
        })
        .collect::<Result<_>>()?;
    grid_search_over(&cases, &points, metric)
}
