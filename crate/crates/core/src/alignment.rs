//! Partial-order labels from offline feedback and listwise/pairwise
//! alignment of the generative scorer.
//!
//! A ranking's scores are the model's log probabilities of its candidates
//! given the ranking's context. Alignment learns a log-space offset per
//! (context, candidate); since both losses are invariant to adding a constant
//! to every score, the renormalizer drops out and the gradient of an offset
//! is the loss gradient of its candidate's score.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainingConfig;
use crate::data::{Action, Dataset};
use crate::error::{Error, Result};
use crate::generative::{BeamCandidateSet, MarkovModel, SequenceModel};
use crate::jsonl;
use crate::scalar::{sigmoid, softplus, Scalar};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankingLoss {
    #[default]
    #[serde(rename = "listmle")]
    ListMle,
    #[serde(rename = "ranknet")]
    RankNet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedCandidate<T> {
    pub item_id: String,
    pub log_prob: T,
    pub feedback: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateRanking<T> {
    pub input_user: String,
    /// History items the candidate log probabilities were conditioned on.
    pub context: Vec<String>,
    pub candidates: Vec<RankedCandidate<T>>,
    /// Candidate indices, best first.
    pub label_order: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingLossReport<T> {
    pub loss: T,
    pub gradient: Vec<T>,
    pub pairwise_violations: usize,
}

/// Per-item engagement and conversion rates over a held-out interaction set.
#[derive(Clone, Debug, Default)]
pub struct FeedbackTable {
    n_users: usize,
    items: HashMap<String, ItemFeedback>,
}

#[derive(Clone, Copy, Debug, Default)]
struct ItemFeedback {
    users: usize,
    events: usize,
    purchases: usize,
}

impl FeedbackTable {
    pub fn new(held_out: &Dataset) -> Self {
        let mut items: HashMap<String, ItemFeedback> = HashMap::new();
        let sequences = held_out.user_sequences();
        for (_, events) in &sequences {
            let mut seen = HashSet::new();
            for e in events.iter() {
                let f = items.entry(e.item_id.clone()).or_default();
                f.events += 1;
                if e.action == Action::Purchase {
                    f.purchases += 1;
                }
                if seen.insert(e.item_id.as_str()) {
                    f.users += 1;
                }
            }
        }
        FeedbackTable {
            n_users: sequences.len(),
            items,
        }
    }

    /// Share of held-out users who interacted with the item.
    pub fn click_rate(&self, item_id: &str) -> f64 {
        match self.items.get(item_id) {
            Some(f) if self.n_users > 0 => f.users as f64 / self.n_users as f64,
            _ => 0.0,
        }
    }

    /// Share of the item's held-out interactions that are purchases.
    pub fn purchase_rate(&self, item_id: &str) -> f64 {
        match self.items.get(item_id) {
            Some(f) if f.events > 0 => f.purchases as f64 / f.events as f64,
            _ => 0.0,
        }
    }
}

/// Labels beam candidates by `ctr_weight * click_rate + cvr_weight * purchase_rate`,
/// best first; ties go to the higher log probability, then the smaller item id.
pub fn build_partial_order<T: Scalar>(
    candidates: &BeamCandidateSet<T>,
    context: &[String],
    feedback: &FeedbackTable,
    ctr_weight: f64,
    cvr_weight: f64,
) -> Result<CandidateRanking<T>> {
    if candidates.candidates.is_empty() {
        return Err(Error::invalid("no candidates to label"));
    }
    if !(ctr_weight >= 0.0 && cvr_weight >= 0.0 && ctr_weight + cvr_weight > 0.0) {
        return Err(Error::invalid("feedback weights must be >= 0 and not both 0"));
    }
    let ranked: Vec<RankedCandidate<T>> = candidates
        .candidates
        .iter()
        .map(|(id, lp)| RankedCandidate {
            item_id: id.clone(),
            log_prob: *lp,
            feedback: T::of(ctr_weight * feedback.click_rate(id) + cvr_weight * feedback.purchase_rate(id)),
        })
        .collect();
    let label_order = label_order(&ranked);
    Ok(CandidateRanking {
        input_user: candidates.input_user.clone(),
        context: context.to_vec(),
        candidates: ranked,
        label_order,
    })
}

fn label_order<T: Scalar>(candidates: &[RankedCandidate<T>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&candidates[a], &candidates[b]);
        y.feedback
            .partial_cmp(&x.feedback)
            .unwrap_or(Ordering::Equal)
            .then_with(|| y.log_prob.partial_cmp(&x.log_prob).unwrap_or(Ordering::Equal))
            .then_with(|| x.item_id.cmp(&y.item_id))
    });
    order
}

fn check_ranking_input<T: Scalar>(scores: &[T], label_order: &[usize]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::invalid("empty score list"));
    }
    if let Some(p) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("non-finite score at position {p}")));
    }
    let mut seen = vec![false; scores.len()];
    if label_order.len() != scores.len()
        || !label_order
            .iter()
            .all(|&i| i < seen.len() && !std::mem::replace(&mut seen[i], true))
    {
        return Err(Error::invalid("label order is not a permutation of the candidates"));
    }
    Ok(())
}

/// Pairs ordered by the labels whose scores are strictly inverted.
pub fn pairwise_violations<T: Scalar>(scores: &[T], label_order: &[usize]) -> usize {
    let mut count = 0;
    for (i, &a) in label_order.iter().enumerate() {
        for &b in &label_order[i + 1..] {
            if scores[a] < scores[b] {
                count += 1;
            }
        }
    }
    count
}

/// `ln(e^x + e^y)` without overflow.
fn log_add_exp<T: Scalar>(x: T, y: T) -> T {
    let (hi, lo) = if x >= y { (x, y) } else { (y, x) };
    hi + (lo - hi).exp().ln_1p()
}

/// Plackett-Luce negative log-likelihood of `label_order`.
pub fn listmle_loss<T: Scalar>(scores: &[T], label_order: &[usize]) -> Result<RankingLossReport<T>> {
    check_ranking_input(scores, label_order)?;
    let k = scores.len();
    let a: Vec<T> = label_order.iter().map(|&i| scores[i]).collect();
    // suffix[i] = ln Σ_{j >= i} exp(a_j)
    let mut suffix = vec![T::zero(); k];
    suffix[k - 1] = a[k - 1];
    for i in (0..k - 1).rev() {
        suffix[i] = log_add_exp(a[i], suffix[i + 1]);
    }
    let loss = (0..k).map(|i| suffix[i] - a[i]).sum::<T>();
    let mut gradient = vec![T::zero(); k];
    for j in 0..k {
        let mass = suffix[..=j].iter().map(|&s| (a[j] - s).exp()).sum::<T>();
        gradient[label_order[j]] = mass - T::one();
    }
    Ok(RankingLossReport {
        loss,
        gradient,
        pairwise_violations: pairwise_violations(scores, label_order),
    })
}

/// Mean logistic loss over every label-ordered pair.
pub fn ranknet_loss<T: Scalar>(scores: &[T], label_order: &[usize]) -> Result<RankingLossReport<T>> {
    check_ranking_input(scores, label_order)?;
    let k = scores.len();
    if k < 2 {
        return Err(Error::invalid("ranknet needs at least two candidates"));
    }
    let n_pairs = T::of_usize(k * (k - 1) / 2);
    let mut loss = T::zero();
    let mut gradient = vec![T::zero(); k];
    for (i, &a) in label_order.iter().enumerate() {
        for &b in &label_order[i + 1..] {
            let d = scores[a] - scores[b];
            loss = loss + softplus(-d);
            let g = sigmoid(-d) / n_pairs;
            gradient[a] = gradient[a] - g;
            gradient[b] = gradient[b] + g;
        }
    }
    Ok(RankingLossReport {
        loss: loss / n_pairs,
        gradient,
        pairwise_violations: pairwise_violations(scores, label_order),
    })
}

pub fn ranking_loss<T: Scalar>(kind: RankingLoss, scores: &[T], label_order: &[usize]) -> Result<RankingLossReport<T>> {
    match kind {
        RankingLoss::ListMle => listmle_loss(scores, label_order),
        RankingLoss::RankNet => ranknet_loss(scores, label_order),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignReport {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub initial_violations: usize,
    /// Violations of the returned model.
    pub final_violations: usize,
    pub total_pairs: usize,
    /// Epoch whose parameters were returned; 0 is the input model.
    pub selected_epoch: usize,
}

struct Resolved {
    history: Vec<usize>,
    ctx: Vec<u32>,
    items: Vec<usize>,
    label_order: Vec<usize>,
}

fn resolve_rankings<T: Scalar>(model: &MarkovModel<T>, rankings: &[CandidateRanking<T>]) -> Result<Vec<Resolved>> {
    rankings
        .iter()
        .map(|r| {
            let history = model.resolve(&r.context)?;
            let ids: Vec<String> = r.candidates.iter().map(|c| c.item_id.clone()).collect();
            let items = model.resolve(&ids)?;
            Ok(Resolved {
                ctx: model.context_key(&history),
                history,
                items,
                label_order: r.label_order.clone(),
            })
        })
        .collect()
}

fn scores_of<T: Scalar>(model: &MarkovModel<T>, r: &Resolved) -> Vec<T> {
    r.items.iter().map(|&j| model.log_prob(&r.history, j)).collect()
}

/// Mean loss (over rankings the loss applies to) and total violations.
fn evaluate<T: Scalar>(model: &MarkovModel<T>, rankings: &[Resolved], kind: RankingLoss) -> Result<(f64, usize)> {
    let mut loss = 0.0;
    let mut n = 0usize;
    let mut violations = 0;
    for r in rankings {
        let scores = scores_of(model, r);
        violations += pairwise_violations(&scores, &r.label_order);
        if kind == RankingLoss::RankNet && r.items.len() < 2 {
            continue;
        }
        loss += ranking_loss(kind, &scores, &r.label_order)?.loss.to_f64_lossy();
        n += 1;
    }
    Ok((loss / n.max(1) as f64, violations))
}

/// Gradient descent on per-(context, candidate) log-space offsets.
///
/// Each minibatch step averages the gradient over the rankings sharing a
/// context. The returned model is the snapshot with the fewest pairwise
/// violations (latest on ties), so violations never exceed the input's.
pub fn align_generative<T: Scalar>(
    model: &MarkovModel<T>,
    rankings: &[CandidateRanking<T>],
    loss: RankingLoss,
    config: &TrainingConfig,
) -> Result<(MarkovModel<T>, AlignReport)> {
    config.validate()?;
    if rankings.is_empty() {
        return Err(Error::invalid("no rankings to align on"));
    }
    for r in rankings {
        check_ranking_input(&vec![T::zero(); r.candidates.len()], &r.label_order)?;
        if r.candidates.iter().any(|c| !c.feedback.is_finite()) {
            return Err(Error::invalid(format!("non-finite feedback for user {}", r.input_user)));
        }
    }
    if loss == RankingLoss::RankNet && rankings.iter().all(|r| r.candidates.len() < 2) {
        return Err(Error::invalid("ranknet needs a ranking with at least two candidates"));
    }
    let resolved = resolve_rankings(model, rankings)?;
    let total_pairs = resolved.iter().map(|r| r.items.len() * (r.items.len() - 1) / 2).sum();
    let (initial_loss, initial_violations) = evaluate(model, &resolved, loss)?;

    let lr = T::of(config.learning_rate);
    let mut current = model.clone();
    let mut best = (model.clone(), initial_violations, 0usize);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..resolved.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut grads: BTreeMap<(&[u32], usize), T> = BTreeMap::new();
            let mut counts: HashMap<&[u32], usize> = HashMap::new();
            for &ri in batch {
                let r = &resolved[ri];
                if loss == RankingLoss::RankNet && r.items.len() < 2 {
                    continue;
                }
                let report = ranking_loss(loss, &scores_of(&current, r), &r.label_order)?;
                *counts.entry(&r.ctx).or_default() += 1;
                for (&j, &g) in r.items.iter().zip(&report.gradient) {
                    let e = grads.entry((r.ctx.as_slice(), j)).or_insert(T::zero());
                    *e = *e + g;
                }
            }
            for ((ctx, j), g) in grads {
                let step = lr * g / T::of_usize(counts[ctx]);
                let delta = current.adjustment(ctx, j) - step;
                current.set_adjustment(ctx.to_vec(), j, delta);
            }
        }
        let (l, v) = evaluate(&current, &resolved, loss)?;
        epoch_losses.push(l);
        if v <= best.1 {
            best = (current.clone(), v, epoch);
        }
    }
    let (aligned, final_violations, selected_epoch) = best;
    Ok((
        aligned,
        AlignReport {
            initial_loss,
            epoch_losses,
            initial_violations,
            final_violations,
            total_pairs,
            selected_epoch,
        },
    ))
}

/// One line of a rankings file; candidates are listed best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RankingRecord {
    user_id: String,
    context: Vec<String>,
    items: Vec<String>,
    feedback: Vec<f64>,
    log_probs: Vec<f64>,
}

pub fn write_rankings<T: Scalar>(path: &Path, rankings: &[CandidateRanking<T>]) -> Result<()> {
    let records: Vec<RankingRecord> = rankings
        .iter()
        .map(|r| {
            let ordered: Vec<&RankedCandidate<T>> = r.label_order.iter().map(|&i| &r.candidates[i]).collect();
            RankingRecord {
                user_id: r.input_user.clone(),
                context: r.context.clone(),
                items: ordered.iter().map(|c| c.item_id.clone()).collect(),
                feedback: ordered.iter().map(|c| c.feedback.to_f64_lossy()).collect(),
                log_probs: ordered.iter().map(|c| c.log_prob.to_f64_lossy()).collect(),
            }
        })
        .collect();
    jsonl::write(path, &records)
}

pub fn read_rankings<T: Scalar>(path: &Path) -> Result<Vec<CandidateRanking<T>>> {
    jsonl::read::<RankingRecord>(path)?
        .into_iter()
        .map(|(line, r)| {
            let malformed = |message: &str| Error::Malformed {
                path: path.to_path_buf(),
                line,
                message: message.to_owned(),
            };
            let k = r.items.len();
            if k == 0 || r.feedback.len() != k || r.log_probs.len() != k {
                return Err(malformed(
                    "items, feedback and log_probs must be nonempty and equally long",
                ));
            }
            if r.feedback.iter().chain(&r.log_probs).any(|v| !v.is_finite()) {
                return Err(malformed("non-finite value"));
            }
            if r.items.iter().collect::<HashSet<_>>().len() != k {
                return Err(malformed("duplicate candidate"));
            }
            Ok(CandidateRanking {
                input_user: r.user_id,
                context: r.context,
                candidates: r
                    .items
                    .into_iter()
                    .zip(r.feedback.iter().zip(&r.log_probs))
                    .map(|(item_id, (&f, &lp))| RankedCandidate {
                        item_id,
                        log_prob: T::of(lp),
                        feedback: T::of(f),
                    })
                    .collect(),
                label_order: (0..k).collect(),
            })
        })
        .collect()
}
