//! Additive self-attention over a user's history embeddings with a learnable
//! time-decay term, producing the intent vector `h_u`.
//!
//! For history embeddings `e_1..e_T` (oldest first):
//!
//! ```text
//! logit_t = u · tanh(W e_t + b) + beta * t
//! alpha   = softmax(logit)
//! h_u     = Σ_t alpha_t e_t
//! ```
//!
//! Training minimizes `-ln σ(cos(h_u, e_pos) - cos(h_u, e_neg))` over
//! (history prefix, next item, sampled negative) triples.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::TrainingConfig;
use crate::data::{InteractionRecord, SplitDataset};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::scalar::{dot, norm, sigmoid, softmax, softplus, Scalar};

/// Parameters `W` (row-major `d x d`), `b`, `u` and the decay rate `beta`.
///
/// Gradients share this layout.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub dim: usize,
    pub w: Vec<T>,
    pub b: Vec<T>,
    pub u: Vec<T>,
    pub beta: T,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn zeros(dim: usize) -> Self {
        AttentionParams {
            dim,
            w: vec![T::zero(); dim * dim],
            b: vec![T::zero(); dim],
            u: vec![T::zero(); dim],
            beta: T::zero(),
        }
    }

    /// `W = 0.1 I`, `b = 0`, `u ~ U[-0.1, 0.1]`, `beta = 0`.
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a7e_17);
        let mut p = Self::zeros(dim);
        for i in 0..dim {
            p.w[i * dim + i] = T::of(0.1);
        }
        for x in p.u.iter_mut() {
            *x = T::of(rng.random_range(-0.1..=0.1));
        }
        p
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(&self.b).chain(&self.u).all(|x| x.is_finite()) && self.beta.is_finite()
    }

    /// Flat view `[W.., b.., u.., beta]`, used by optimizers and gradient checks.
    pub fn flatten(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.w.len() + 2 * self.dim + 1);
        v.extend_from_slice(&self.w);
        v.extend_from_slice(&self.b);
        v.extend_from_slice(&self.u);
        v.push(self.beta);
        v
    }

    pub fn from_flat(dim: usize, flat: &[T]) -> Self {
        let d2 = dim * dim;
        AttentionParams {
            dim,
            w: flat[..d2].to_vec(),
            b: flat[d2..d2 + dim].to_vec(),
            u: flat[d2 + dim..d2 + 2 * dim].to_vec(),
            beta: flat[d2 + 2 * dim],
        }
    }

    fn axpy(&mut self, scale: T, other: &AttentionParams<T>) {
        let add = |a: &mut [T], b: &[T]| a.iter_mut().zip(b).for_each(|(x, &y)| *x = *x + scale * y);
        add(&mut self.w, &other.w);
        add(&mut self.b, &other.b);
        add(&mut self.u, &other.u);
        self.beta = self.beta + scale * other.beta;
    }

    /// Text layout: `attention <dim>` header, then `W` one row per line, then
    /// `b`, `u` and `beta` lines. Values use shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let line = |v: &[T]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let mut out = format!("attention {}\n", self.dim);
        for row in self.w.chunks(self.dim.max(1)) {
            out.push_str(&format!("W {}\n", line(row)));
        }
        out.push_str(&format!(
            "b {}\nu {}\nbeta {}\n",
            line(&self.b),
            line(&self.u),
            self.beta
        ));
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::invalid(format!("attention parameter file: {m}"));
        let mut lines = text.lines();
        let dim: usize = lines
            .next()
            .and_then(|h| h.strip_prefix("attention "))
            .and_then(|d| d.trim().parse().ok())
            .ok_or_else(|| bad("missing `attention <dim>` header".into()))?;
        let mut p = Self::zeros(dim);
        let mut w_rows = 0;
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            let tag = parts.next().unwrap_or_default();
            let values = parts
                .map(|s| s.parse::<T>().map_err(|_| bad(format!("bad number `{s}`"))))
                .collect::<Result<Vec<T>>>()?;
            let expect = |n: usize| {
                if values.len() == n {
                    Ok(())
                } else {
                    Err(bad(format!("`{tag}` has {} values, expected {n}", values.len())))
                }
            };
            match tag {
                "W" if w_rows < dim => {
                    expect(dim)?;
                    p.w[w_rows * dim..(w_rows + 1) * dim].copy_from_slice(&values);
                    w_rows += 1;
                }
                "b" => {
                    expect(dim)?;
                    p.b = values;
                }
                "u" => {
                    expect(dim)?;
                    p.u = values;
                }
                "beta" => {
                    expect(1)?;
                    p.beta = values[0];
                }
                _ => return Err(bad(format!("unexpected line `{tag}`"))),
            }
        }
        if w_rows != dim {
            return Err(bad(format!("{w_rows} W rows, expected {dim}")));
        }
        if !p.is_finite() {
            return Err(bad("non-finite parameter".into()));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// A user's item sequence, oldest first, truncated to the most recent items.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserHistory {
    pub user_id: String,
    pub items: Vec<String>,
}

impl UserHistory {
    pub fn new(user_id: impl Into<String>, items: Vec<String>) -> Self {
        UserHistory {
            user_id: user_id.into(),
            items,
        }
    }

    /// Keeps the last `t_max` events.
    pub fn from_events(user_id: &str, events: &[InteractionRecord], t_max: usize) -> Self {
        let start = events.len().saturating_sub(t_max);
        UserHistory::new(user_id, events[start..].iter().map(|e| e.item_id.clone()).collect())
    }

    pub fn item_set(&self) -> HashSet<&str> {
        self.items.iter().map(String::as_str).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntentVector<T> {
    pub user_id: String,
    pub h: Vec<T>,
    pub alphas: Vec<T>,
}

/// The recency term added to the logit of position `t` (1 = oldest).
#[inline]
pub fn time_decay<T: Scalar>(beta: T, t: usize) -> T {
    beta * T::of_usize(t)
}

fn resolve<'a, T: Scalar>(history: &UserHistory, embeddings: &'a EmbeddingMatrix<T>) -> Result<Vec<&'a [T]>> {
    if history.items.is_empty() {
        return Err(Error::invalid(format!(
            "user `{}` has an empty history",
            history.user_id
        )));
    }
    history
        .items
        .iter()
        .map(|id| embeddings.row(id).ok_or_else(|| Error::UnknownItem(id.clone())))
        .collect()
}

fn check_dim<T: Scalar>(params: &AttentionParams<T>, embeddings: &EmbeddingMatrix<T>) -> Result<()> {
    if params.dim == embeddings.dim() {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected: embeddings.dim(),
            found: params.dim,
        })
    }
}

/// `tanh(W e + b)`.
fn hidden<T: Scalar>(params: &AttentionParams<T>, e: &[T]) -> Vec<T> {
    let d = params.dim;
    (0..d)
        .map(|i| (dot(&params.w[i * d..(i + 1) * d], e) + params.b[i]).tanh())
        .collect()
}

fn logits_of<T: Scalar>(params: &AttentionParams<T>, rows: &[&[T]]) -> (Vec<Vec<T>>, Vec<T>) {
    let hiddens: Vec<Vec<T>> = rows.iter().map(|e| hidden(params, e)).collect();
    let logits = hiddens
        .iter()
        .enumerate()
        .map(|(i, a)| dot(&params.u, a) + time_decay(params.beta, i + 1))
        .collect();
    (hiddens, logits)
}

fn pool_rows<T: Scalar>(alphas: &[T], rows: &[&[T]], dim: usize) -> Vec<T> {
    let mut h = vec![T::zero(); dim];
    for (&a, e) in alphas.iter().zip(rows) {
        h.iter_mut().zip(e.iter()).for_each(|(x, &v)| *x = *x + a * v);
    }
    h
}

pub fn attention_logits<T: Scalar>(
    history: &UserHistory,
    params: &AttentionParams<T>,
    embeddings: &EmbeddingMatrix<T>,
) -> Result<Vec<T>> {
    check_dim(params, embeddings)?;
    let rows = resolve(history, embeddings)?;
    Ok(logits_of(params, &rows).1)
}

pub fn intent<T: Scalar>(
    history: &UserHistory,
    params: &AttentionParams<T>,
    embeddings: &EmbeddingMatrix<T>,
) -> Result<IntentVector<T>> {
    check_dim(params, embeddings)?;
    let rows = resolve(history, embeddings)?;
    let (_, logits) = logits_of(params, &rows);
    let alphas = softmax(&logits);
    Ok(IntentVector {
        user_id: history.user_id.clone(),
        h: pool_rows(&alphas, &rows, params.dim),
        alphas,
    })
}

/// `d cos(h, e) / d h`.
fn cosine_grad<T: Scalar>(h: &[T], e: &[T]) -> Option<(T, Vec<T>)> {
    let (nh, ne) = (norm(h), norm(e));
    if nh == T::zero() || ne == T::zero() {
        return None;
    }
    let c = dot(h, e) / (nh * ne);
    let g = h
        .iter()
        .zip(e)
        .map(|(&hi, &ei)| ei / (nh * ne) - c * hi / (nh * nh))
        .collect();
    Some((c, g))
}

/// Loss of one training triple, averaged over its negatives.
/// `None` when the intent vector degenerates to zero.
pub fn triple_loss<T: Scalar>(params: &AttentionParams<T>, history: &[&[T]], pos: &[T], negs: &[&[T]]) -> Option<T> {
    let (_, logits) = logits_of(params, history);
    let h = pool_rows(&softmax(&logits), history, params.dim);
    let cp = cosine_grad(&h, pos)?.0;
    let mut total = T::zero();
    for neg in negs {
        total = total + softplus(-(cp - cosine_grad(&h, neg)?.0));
    }
    Some(total / T::of_usize(negs.len()))
}

/// Loss and exact analytic gradient of [`triple_loss`].
pub fn triple_loss_grad<T: Scalar>(
    params: &AttentionParams<T>,
    history: &[&[T]],
    pos: &[T],
    negs: &[&[T]],
) -> Option<(T, AttentionParams<T>)> {
    let d = params.dim;
    let (hiddens, logits) = logits_of(params, history);
    let alphas = softmax(&logits);
    let h = pool_rows(&alphas, history, d);

    let (cp, gp) = cosine_grad(&h, pos)?;
    let inv_n = T::one() / T::of_usize(negs.len());
    let mut loss = T::zero();
    let mut g_h = vec![T::zero(); d];
    for neg in negs {
        let (cn, gn) = cosine_grad(&h, neg)?;
        let x = cp - cn;
        loss = loss + softplus(-x) * inv_n;
        // d softplus(-x) / dx = -σ(-x)
        let dx = -sigmoid(-x) * inv_n;
        for i in 0..d {
            g_h[i] = g_h[i] + dx * (gp[i] - gn[i]);
        }
    }

    let g_alpha: Vec<T> = history.iter().map(|e| dot(&g_h, e)).collect();
    let mean = dot(&alphas, &g_alpha);
    let mut grad = AttentionParams::zeros(d);
    for (t, (e, a)) in history.iter().zip(&hiddens).enumerate() {
        let g_logit = alphas[t] * (g_alpha[t] - mean);
        grad.beta = grad.beta + g_logit * T::of_usize(t + 1);
        for i in 0..d {
            grad.u[i] = grad.u[i] + g_logit * a[i];
            let g_z = g_logit * params.u[i] * (T::one() - a[i] * a[i]);
            grad.b[i] = grad.b[i] + g_z;
            let row = &mut grad.w[i * d..(i + 1) * d];
            row.iter_mut().zip(e.iter()).for_each(|(w, &ej)| *w = *w + g_z * ej);
        }
    }
    Some((loss, grad))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntentOptions {
    pub t_max: usize,
    pub triples_per_user: usize,
}

impl Default for IntentOptions {
    fn default() -> Self {
        IntentOptions {
            t_max: 50,
            triples_per_user: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean loss over the fixed triple set before the first update.
    pub initial_loss: f64,
    /// Mean loss over the same set after each epoch.
    pub epoch_losses: Vec<f64>,
}

struct Triple {
    history: Vec<usize>,
    pos: usize,
    negs: Vec<usize>,
}

fn sample_triples<T: Scalar>(
    split: &SplitDataset,
    embeddings: &EmbeddingMatrix<T>,
    config: &TrainingConfig,
    opts: &IntentOptions,
) -> Result<Vec<Triple>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_items = embeddings.len();
    let mut triples = Vec::new();
    for (_, events) in split.train.user_sequences() {
        if events.len() < 2 {
            continue;
        }
        let items = events
            .iter()
            .map(|e| {
                embeddings
                    .position(&e.item_id)
                    .ok_or_else(|| Error::UnknownItem(e.item_id.clone()))
            })
            .collect::<Result<Vec<usize>>>()?;
        let seen: HashSet<usize> = items.iter().copied().collect();
        if seen.len() >= n_items {
            continue;
        }
        let n_targets = items.len() - 1;
        let mut targets: Vec<usize> = if n_targets <= opts.triples_per_user {
            (1..items.len()).collect()
        } else {
            rand::seq::index::sample(&mut rng, n_targets, opts.triples_per_user)
                .into_iter()
                .map(|i| i + 1)
                .collect()
        };
        targets.sort_unstable();
        for p in targets {
            let start = p.saturating_sub(opts.t_max);
            let negs = (0..config.negatives_per_positive)
                .map(|_| loop {
                    let j = rng.random_range(0..n_items);
                    if !seen.contains(&j) {
                        break j;
                    }
                })
                .collect();
            triples.push(Triple {
                history: items[start..p].to_vec(),
                pos: items[p],
                negs,
            });
        }
    }
    if triples.is_empty() {
        return Err(Error::invalid("no trainable triples: no user has >= 2 training events"));
    }
    Ok(triples)
}

fn mean_loss<T: Scalar>(params: &AttentionParams<T>, triples: &[Triple], emb: &EmbeddingMatrix<T>) -> f64 {
    let losses: Vec<Option<T>> = triples
        .par_iter()
        .map(|tr| {
            let rows: Vec<&[T]> = tr.history.iter().map(|&i| emb.row_at(i)).collect();
            let negs: Vec<&[T]> = tr.negs.iter().map(|&i| emb.row_at(i)).collect();
            triple_loss(params, &rows, emb.row_at(tr.pos), &negs)
        })
        .collect();
    let (total, n) = losses
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(t, n), l| (t + l.to_f64_lossy(), n + 1));
    total / n.max(1) as f64
}

/// Fits the attention parameters by minibatch gradient descent with
/// batch-mean gradients on a fixed, seeded triple set.
pub fn train_intent<T: Scalar>(
    split: &SplitDataset,
    embeddings: &EmbeddingMatrix<T>,
    config: &TrainingConfig,
    opts: &IntentOptions,
) -> Result<(AttentionParams<T>, TrainReport)> {
    config.validate()?;
    let triples = sample_triples(split, embeddings, config, opts)?;
    let mut params = AttentionParams::init(embeddings.dim(), config.seed);
    let initial_loss = mean_loss(&params, &triples, embeddings);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..triples.len()).collect();
    let lr = T::of(config.learning_rate);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            // Per-triple gradients are computed in parallel and summed in batch order.
            let grads: Vec<Option<AttentionParams<T>>> = batch
                .par_iter()
                .map(|&k| {
                    let tr = &triples[k];
                    let rows: Vec<&[T]> = tr.history.iter().map(|&i| embeddings.row_at(i)).collect();
                    let negs: Vec<&[T]> = tr.negs.iter().map(|&i| embeddings.row_at(i)).collect();
                    triple_loss_grad(&params, &rows, embeddings.row_at(tr.pos), &negs).map(|(_, g)| g)
                })
                .collect();
            let mut acc = AttentionParams::zeros(params.dim);
            let mut n = 0usize;
            for g in grads.iter().flatten() {
                acc.axpy(T::one(), g);
                n += 1;
            }
            if n > 0 {
                params.axpy(-lr / T::of_usize(n), &acc);
            }
        }
        epoch_losses.push(mean_loss(&params, &triples, embeddings));
    }
    Ok((
        params,
        TrainReport {
            initial_loss,
            epoch_losses,
        },
    ))
}
