//! Generative next-item scoring. A smoothed back-off Markov model stands in
//! for a fine-tuned language model behind the [`SequenceModel`] interface;
//! beam search produces candidate lists from any such model.
//!
//! Smoothing, from the empty context up to the last `order` items:
//!
//! ```text
//! P_0(j)     = 1 / V
//! P_k(j|ctx) = (count(ctx_k, j) + alpha * P_{k-1}(j|ctx)) / (count(ctx_k) + alpha)
//! ```
//!
//! An unseen context leaves the lower-order distribution unchanged.
//! Alignment adds log-space offsets `delta(ctx, j)` on the full context,
//! renormalized: `P'(j) = P(j) e^delta(j) / Σ_i P(i) e^delta(i)`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use crate::data::{Action, Dataset};
use crate::error::{Error, Result};
use crate::intent::UserHistory;
use crate::rank;
use crate::scalar::Scalar;

/// Next-item distribution over a fixed vocabulary.
pub trait SequenceModel<T: Scalar> {
    fn vocabulary(&self) -> &[String];

    fn position(&self, item_id: &str) -> Option<usize>;

    /// Probabilities for every vocabulary item, in vocabulary order.
    fn next_distribution(&self, history: &[usize]) -> Vec<T>;

    fn log_prob(&self, history: &[usize], item: usize) -> T;

    fn resolve(&self, items: &[String]) -> Result<Vec<usize>> {
        items
            .iter()
            .map(|id| self.position(id).ok_or_else(|| Error::UnknownItem(id.clone())))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ContextCounts<T> {
    total: T,
    next: BTreeMap<u32, T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarkovModel<T> {
    order: usize,
    alpha: T,
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    /// `levels[k]` maps length-`k` contexts to their successor counts.
    levels: Vec<HashMap<Vec<u32>, ContextCounts<T>>>,
    /// Alignment offsets keyed by full context (the last `min(order, len)` items).
    adjustments: HashMap<Vec<u32>, BTreeMap<u32, T>>,
}

impl<T: Scalar> MarkovModel<T> {
    fn empty(vocab: Vec<String>, order: usize, alpha: T) -> Result<Self> {
        if order < 1 {
            return Err(Error::invalid("markov order must be >= 1"));
        }
        if !(alpha > T::zero()) {
            return Err(Error::invalid("smoothing alpha must be > 0"));
        }
        if vocab.is_empty() {
            return Err(Error::invalid("empty vocabulary"));
        }
        let index: HashMap<String, usize> = vocab.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        if index.len() != vocab.len() {
            return Err(Error::invalid("duplicate vocabulary item"));
        }
        Ok(MarkovModel {
            order,
            alpha,
            vocab,
            index,
            levels: vec![HashMap::new(); order + 1],
            adjustments: HashMap::new(),
        })
    }

    /// Fits counts from index sequences over `vocab`.
    pub fn fit_sequences(vocab: Vec<String>, sequences: &[Vec<usize>], order: usize, alpha: T) -> Result<Self> {
        let mut model = Self::empty(vocab, order, alpha)?;
        if sequences.iter().all(Vec::is_empty) {
            return Err(Error::invalid("no training sequences"));
        }
        for seq in sequences {
            for (p, &item) in seq.iter().enumerate() {
                if item >= model.vocab.len() {
                    return Err(Error::invalid(format!("item index {item} outside vocabulary")));
                }
                for k in 0..=order.min(p) {
                    let ctx: Vec<u32> = seq[p - k..p].iter().map(|&i| i as u32).collect();
                    model.observe(k, ctx, item as u32, T::one());
                }
            }
        }
        Ok(model)
    }

    fn observe(&mut self, level: usize, ctx: Vec<u32>, item: u32, count: T) {
        let cc = self.levels[level].entry(ctx).or_insert_with(|| ContextCounts {
            total: T::zero(),
            next: BTreeMap::new(),
        });
        cc.total = cc.total + count;
        let c = cc.next.entry(item).or_insert(T::zero());
        *c = *c + count;
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    /// The full context key used for alignment offsets.
    pub fn context_key(&self, history: &[usize]) -> Vec<u32> {
        let k = self.order.min(history.len());
        history[history.len() - k..].iter().map(|&i| i as u32).collect()
    }

    /// Contexts that have at least one observation, for every level.
    pub fn contexts(&self) -> impl Iterator<Item = &Vec<u32>> {
        self.levels.iter().flat_map(|l| l.keys())
    }

    pub fn adjustment(&self, ctx: &[u32], item: usize) -> T {
        self.adjustments
            .get(ctx)
            .and_then(|m| m.get(&(item as u32)))
            .copied()
            .unwrap_or(T::zero())
    }

    pub fn set_adjustment(&mut self, ctx: Vec<u32>, item: usize, delta: T) {
        self.adjustments.entry(ctx).or_default().insert(item as u32, delta);
    }

    pub fn has_adjustments(&self) -> bool {
        self.adjustments.values().any(|m| !m.is_empty())
    }

    /// Smoothed probability before alignment offsets.
    fn base_prob(&self, history: &[usize], item: usize) -> T {
        let mut p = T::one() / T::of_usize(self.vocab.len());
        for k in 0..=self.order.min(history.len()) {
            let ctx: Vec<u32> = history[history.len() - k..].iter().map(|&i| i as u32).collect();
            if let Some(cc) = self.levels[k].get(&ctx) {
                let a = self.alpha * p;
                let num = match cc.next.get(&(item as u32)) {
                    Some(&c) => c + a,
                    None => a,
                };
                p = num / (cc.total + self.alpha);
            }
        }
        p
    }

    fn base_distribution(&self, history: &[usize]) -> Vec<T> {
        let mut dist = vec![T::one() / T::of_usize(self.vocab.len()); self.vocab.len()];
        for k in 0..=self.order.min(history.len()) {
            let ctx: Vec<u32> = history[history.len() - k..].iter().map(|&i| i as u32).collect();
            if let Some(cc) = self.levels[k].get(&ctx) {
                let denom = cc.total + self.alpha;
                dist.iter_mut().for_each(|p| *p = self.alpha * *p);
                for (&j, &c) in &cc.next {
                    dist[j as usize] = c + dist[j as usize];
                }
                dist.iter_mut().for_each(|p| *p = *p / denom);
            }
        }
        dist
    }

    /// Normalizer of the offset distribution for `history`'s full context.
    fn normalizer(&self, history: &[usize]) -> Option<(&BTreeMap<u32, T>, T)> {
        let adj = self.adjustments.get(&self.context_key(history))?;
        let z = adj.iter().fold(T::one(), |z, (&j, &d)| {
            z + self.base_prob(history, j as usize) * (d.exp() - T::one())
        });
        Some((adj, z))
    }
}

impl<T: Scalar> SequenceModel<T> for MarkovModel<T> {
    fn vocabulary(&self) -> &[String] {
        &self.vocab
    }

    fn position(&self, item_id: &str) -> Option<usize> {
        self.index.get(item_id).copied()
    }

    fn next_distribution(&self, history: &[usize]) -> Vec<T> {
        let mut dist = self.base_distribution(history);
        if let Some((adj, z)) = self.normalizer(history) {
            dist.iter_mut().for_each(|p| *p = *p / z);
            for (&j, &d) in adj {
                dist[j as usize] = dist[j as usize] * d.exp();
            }
        }
        dist
    }

    fn log_prob(&self, history: &[usize], item: usize) -> T {
        let p = self.base_prob(history, item);
        match self.normalizer(history) {
            Some((adj, z)) => {
                let q = p / z;
                match adj.get(&(item as u32)) {
                    Some(&d) => (q * d.exp()).ln(),
                    None => q.ln(),
                }
            }
            None => p.ln(),
        }
    }
}

/// Index sequences for every user of `train`, oldest first.
pub fn training_sequences<T: Scalar>(model_vocab: &MarkovModel<T>, train: &Dataset) -> Vec<Vec<usize>> {
    train
        .user_sequences()
        .into_iter()
        .map(|(_, events)| events.iter().filter_map(|e| model_vocab.position(&e.item_id)).collect())
        .collect()
}

/// Fits the model on every user sequence of `train`; the vocabulary is the catalog.
pub fn fit_markov<T: Scalar>(train: &Dataset, order: usize, smoothing_alpha: T) -> Result<MarkovModel<T>> {
    let vocab: Vec<String> = train.catalog().ids().map(str::to_owned).collect();
    let index: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let sequences: Vec<Vec<usize>> = train
        .user_sequences()
        .into_iter()
        .map(|(_, events)| events.iter().map(|e| index[e.item_id.as_str()]).collect())
        .collect();
    MarkovModel::fit_sequences(vocab, &sequences, order, smoothing_alpha)
}

/// Keeps users whose sequence has at least `min_length` events and, when
/// `required_action` is set, at least one event of that action.
pub fn filter_training_sequences(dataset: &Dataset, min_length: usize, required_action: Option<Action>) -> Dataset {
    let min_length = min_length.max(1);
    let kept: Vec<_> = dataset
        .user_sequences()
        .into_iter()
        .filter(|(_, events)| {
            events.len() >= min_length && required_action.is_none_or(|a| events.iter().any(|e| e.action == a))
        })
        .flat_map(|(_, events)| events.iter().cloned())
        .collect();
    Dataset::new(dataset.shared_catalog(), kept).expect("subset of a valid dataset")
}

/// `ln P(item | last items of history)`.
pub fn gen_log_prob<T: Scalar, M: SequenceModel<T>>(model: &M, history: &UserHistory, item_id: &str) -> Result<T> {
    let item = model
        .position(item_id)
        .ok_or_else(|| Error::UnknownItem(item_id.to_owned()))?;
    let hist = model.resolve(&history.items)?;
    Ok(model.log_prob(&hist, item))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamCandidateSet<T> {
    pub input_user: String,
    /// First items of the surviving beams, best first, deduplicated, with the
    /// log probability of the best beam starting with each.
    pub candidates: Vec<(String, T)>,
    pub width: usize,
    /// Every surviving beam with its summed log probability.
    pub beams: Vec<(Vec<String>, T)>,
}

/// Beam search of `depth` steps over items not in `exclude`.
///
/// At each step every beam is extended by every admissible item and the
/// `width` best sequences by summed log probability survive; ties go to the
/// lexicographically smaller item-id sequence. With `depth = 1` this is the
/// `width` most probable next items.
pub fn beam_search<T: Scalar, M: SequenceModel<T>>(
    model: &M,
    history: &UserHistory,
    width: usize,
    depth: usize,
    exclude: &HashSet<&str>,
) -> Result<BeamCandidateSet<T>> {
    if width == 0 || depth == 0 {
        return Err(Error::invalid("beam width and depth must be >= 1"));
    }
    let vocab = model.vocabulary();
    let allowed: Vec<usize> = (0..vocab.len())
        .filter(|&j| !exclude.contains(vocab[j].as_str()))
        .collect();
    if allowed.is_empty() {
        return Err(Error::invalid("no admissible items after exclusion"));
    }
    let base = model.resolve(&history.items)?;
    let mut beams: Vec<(Vec<usize>, T)> = vec![(Vec::new(), T::zero())];
    for _ in 0..depth {
        let mut expanded: Vec<(Vec<&str>, (Vec<usize>, T))> = Vec::with_capacity(beams.len() * allowed.len());
        for (seq, score) in &beams {
            let mut ctx = base.clone();
            ctx.extend_from_slice(seq);
            let dist = model.next_distribution(&ctx);
            for &j in &allowed {
                let mut next = seq.clone();
                next.push(j);
                let key: Vec<&str> = next.iter().map(|&i| vocab[i].as_str()).collect();
                expanded.push((key, (next, *score + dist[j].ln())));
            }
        }
        let ranked = rank::top_k(
            expanded.into_iter().map(|(key, (seq, s))| ((key, seq), s)).collect(),
            width,
        );
        beams = ranked.into_iter().map(|((_, seq), s)| (seq, s)).collect();
    }
    let mut seen = HashSet::new();
    let candidates = beams
        .iter()
        .filter(|(seq, _)| seen.insert(seq[0]))
        .map(|(seq, s)| (vocab[seq[0]].clone(), *s))
        .collect();
    Ok(BeamCandidateSet {
        input_user: history.user_id.clone(),
        candidates,
        width,
        beams: beams
            .into_iter()
            .map(|(seq, s)| (seq.into_iter().map(|i| vocab[i].clone()).collect(), s))
            .collect(),
    })
}

impl<T: Scalar> MarkovModel<T> {
    /// Text layout: a `markov <order> <alpha> <vocab size>` header, one
    /// `V <item>` line per vocabulary item, then tab-separated
    /// `N <context items> <item> <count>` and `A <context items> <item> <offset>` rows.
    pub fn to_text(&self) -> String {
        let mut out = format!("markov {} {} {}\n", self.order, self.alpha, self.vocab.len());
        for id in &self.vocab {
            out.push_str(&format!("V\t{id}\n"));
        }
        let ctx_str = |ctx: &[u32]| {
            ctx.iter()
                .map(|&i| self.vocab[i as usize].as_str())
                .collect::<Vec<_>>()
                .join(" ")
        };
        for level in &self.levels {
            let mut keys: Vec<&Vec<u32>> = level.keys().collect();
            keys.sort();
            for ctx in keys {
                for (&j, &c) in &level[ctx].next {
                    out.push_str(&format!("N\t{}\t{}\t{}\n", ctx_str(ctx), self.vocab[j as usize], c));
                }
            }
        }
        let mut keys: Vec<&Vec<u32>> = self.adjustments.keys().collect();
        keys.sort();
        for ctx in keys {
            for (&j, &d) in &self.adjustments[ctx] {
                out.push_str(&format!("A\t{}\t{}\t{}\n", ctx_str(ctx), self.vocab[j as usize], d));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::invalid(format!("markov model file: {m}"));
        let mut lines = text.lines().filter(|l| !l.is_empty());
        let header: Vec<&str> = lines
            .next()
            .and_then(|h| h.strip_prefix("markov "))
            .map(|h| h.split_whitespace().collect())
            .ok_or_else(|| bad("missing header".into()))?;
        let [order, alpha, n_vocab] = header[..] else {
            return Err(bad("header needs order, alpha and vocabulary size".into()));
        };
        let order: usize = order.parse().map_err(|_| bad("bad order".into()))?;
        let alpha: T = alpha.parse().map_err(|_| bad("bad alpha".into()))?;
        let n_vocab: usize = n_vocab.parse().map_err(|_| bad("bad vocabulary size".into()))?;
        let mut vocab = Vec::with_capacity(n_vocab);
        let mut rows = Vec::new();
        for line in lines {
            let fields: Vec<&str> = line.split('\t').collect();
            match fields[..] {
                ["V", id] => vocab.push(id.to_owned()),
                [tag @ ("N" | "A"), ctx, item, value] => rows.push((tag, ctx, item, value)),
                _ => return Err(bad(format!("unrecognized row `{line}`"))),
            }
        }
        if vocab.len() != n_vocab {
            return Err(bad(format!("{} vocabulary rows, header says {n_vocab}", vocab.len())));
        }
        let mut model = Self::empty(vocab, order, alpha)?;
        for (tag, ctx, item, value) in rows {
            let pos = |id: &str| {
                model
                    .position(id)
                    .map(|p| p as u32)
                    .ok_or_else(|| Error::UnknownItem(id.to_owned()))
            };
            let ctx = ctx.split_whitespace().map(pos).collect::<Result<Vec<u32>>>()?;
            let item = pos(item)?;
            let value: T = value.parse().map_err(|_| bad(format!("bad number `{value}`")))?;
            if tag == "N" {
                if ctx.len() > order || !(value > T::zero()) {
                    return Err(bad("invalid count row".into()));
                }
                model.observe(ctx.len(), ctx, item, value);
            } else {
                model.adjustments.entry(ctx).or_default().insert(item, value);
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}
