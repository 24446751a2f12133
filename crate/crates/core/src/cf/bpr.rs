//! Bayesian personalized ranking over latent factors.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::InteractionMatrix;
use crate::config::TrainingConfig;
use crate::error::{Error, Result};
use crate::intent::TrainReport;
use crate::scalar::{dot, sigmoid, softplus, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct MfModel<T> {
    users: Vec<String>,
    items: Vec<String>,
    factors: usize,
    user_factors: Vec<T>,
    item_factors: Vec<T>,
}

/// A sampled `(user, positive item, negative item)` triple, by matrix position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BprTriple {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

impl<T: Scalar> MfModel<T> {
    pub fn from_parts(
        users: Vec<String>,
        items: Vec<String>,
        factors: usize,
        user_factors: Vec<T>,
        item_factors: Vec<T>,
    ) -> Result<Self> {
        if factors == 0 {
            return Err(Error::invalid("latent dimension must be >= 1"));
        }
        if user_factors.len() != users.len() * factors || item_factors.len() != items.len() * factors {
            return Err(Error::invalid("factor matrix shape does not match ids"));
        }
        if user_factors.iter().chain(&item_factors).any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite factor"));
        }
        Ok(MfModel {
            users,
            items,
            factors,
            user_factors,
            item_factors,
        })
    }

    pub fn factors(&self) -> usize {
        self.factors
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn user_factors(&self) -> &[T] {
        &self.user_factors
    }

    pub fn item_factors(&self) -> &[T] {
        &self.item_factors
    }

    pub fn user_vec(&self, u: usize) -> &[T] {
        &self.user_factors[u * self.factors..(u + 1) * self.factors]
    }

    pub fn item_vec(&self, i: usize) -> &[T] {
        &self.item_factors[i * self.factors..(i + 1) * self.factors]
    }

    pub fn predict(&self, u: usize, i: usize) -> T {
        dot(self.user_vec(u), self.item_vec(i))
    }

    /// `mf <users> <items> <f>` header, then `U <id> <f values>` rows and
    /// `I <id> <f values>` rows.
    pub fn to_text(&self) -> String {
        let mut out = format!("mf {} {} {}\n", self.users.len(), self.items.len(), self.factors);
        let row = |tag: &str, id: &str, v: &[T]| {
            let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            format!("{tag} {id} {}\n", vals.join(" "))
        };
        for (u, id) in self.users.iter().enumerate() {
            out.push_str(&row("U", id, self.user_vec(u)));
        }
        for (i, id) in self.items.iter().enumerate() {
            out.push_str(&row("I", id, self.item_vec(i)));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::invalid(format!("factor file: {m}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<usize> = lines
            .next()
            .and_then(|h| h.strip_prefix("mf "))
            .map(|h| h.split_whitespace().filter_map(|x| x.parse().ok()).collect())
            .ok_or_else(|| bad("missing header"))?;
        let [n_users, n_items, f] = header[..] else {
            return Err(bad("header needs three sizes"));
        };
        let (mut users, mut items) = (Vec::new(), Vec::new());
        let (mut uf, mut itf) = (Vec::new(), Vec::new());
        for line in lines {
            let mut parts = line.split_whitespace();
            let (tag, id) = (parts.next(), parts.next().ok_or_else(|| bad("missing id"))?);
            let vals = parts
                .map(|s| s.parse::<T>().map_err(|_| bad("bad number")))
                .collect::<Result<Vec<T>>>()?;
            if vals.len() != f {
                return Err(bad("wrong row width"));
            }
            match tag {
                Some("U") => {
                    users.push(id.to_owned());
                    uf.extend(vals);
                }
                Some("I") => {
                    items.push(id.to_owned());
                    itf.extend(vals);
                }
                _ => return Err(bad("unknown row tag")),
            }
        }
        if users.len() != n_users || items.len() != n_items {
            return Err(bad("row counts disagree with header"));
        }
        Self::from_parts(users, items, f, uf, itf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// `Σ -ln σ(x_ui - x_uj) + reg (|p_u|² + |q_i|² + |q_j|²)` over `triples`.
pub fn bpr_loss<T: Scalar>(model: &MfModel<T>, triples: &[BprTriple], reg: T) -> T {
    triples.iter().fold(T::zero(), |acc, t| {
        let (p, qi, qj) = (model.user_vec(t.user), model.item_vec(t.pos), model.item_vec(t.neg));
        let x = dot(p, qi) - dot(p, qj);
        acc + softplus(-x) + reg * (dot(p, p) + dot(qi, qi) + dot(qj, qj))
    })
}

/// Loss and gradient of [`bpr_loss`] with respect to the user and item factor matrices.
pub fn bpr_loss_grad<T: Scalar>(model: &MfModel<T>, triples: &[BprTriple], reg: T) -> (T, Vec<T>, Vec<T>) {
    let f = model.factors;
    let mut gu = vec![T::zero(); model.user_factors.len()];
    let mut gi = vec![T::zero(); model.item_factors.len()];
    let two = T::of(2.0);
    for t in triples {
        let (p, qi, qj) = (model.user_vec(t.user), model.item_vec(t.pos), model.item_vec(t.neg));
        let x = dot(p, qi) - dot(p, qj);
        // d softplus(-x) / dx
        let dx = -sigmoid(-x);
        for k in 0..f {
            gu[t.user * f + k] = gu[t.user * f + k] + dx * (qi[k] - qj[k]) + two * reg * p[k];
            gi[t.pos * f + k] = gi[t.pos * f + k] + dx * p[k] + two * reg * qi[k];
            gi[t.neg * f + k] = gi[t.neg * f + k] - dx * p[k] + two * reg * qj[k];
        }
    }
    (bpr_loss(model, triples, reg), gu, gi)
}

fn sample_triples<T: Scalar, R: Rng>(m: &InteractionMatrix<T>, n: usize, rng: &mut R) -> Vec<BprTriple> {
    let positives: Vec<(usize, usize)> = (0..m.n_users())
        .flat_map(|u| m.row(u).iter().map(move |&(i, _)| (u, i)))
        .filter(|&(u, _)| m.row(u).len() < m.n_items())
        .collect();
    if positives.is_empty() {
        return Vec::new();
    }
    (0..n)
        .map(|_| {
            let (user, pos) = positives[rng.random_range(0..positives.len())];
            let row: HashSet<usize> = m.row(user).iter().map(|&(i, _)| i).collect();
            let neg = loop {
                let j = rng.random_range(0..m.n_items());
                if !row.contains(&j) {
                    break j;
                }
            };
            BprTriple { user, pos, neg }
        })
        .collect()
}

/// Factors drawn from `N(0, 0.1²)` with a seeded generator.
pub fn init_mf<T: Scalar>(matrix: &InteractionMatrix<T>, factors: usize, seed: u64) -> Result<MfModel<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb9_b9);
    let normal = Normal::new(0.0, 0.1).expect("valid std");
    let mut draw = |n: usize| -> Vec<T> { (0..n).map(|_| T::of(normal.sample(&mut rng))).collect() };
    let uf = draw(matrix.n_users() * factors);
    let itf = draw(matrix.n_items() * factors);
    MfModel::from_parts(matrix.users().to_vec(), matrix.items().to_vec(), factors, uf, itf)
}

/// Fits factors by stochastic gradient descent on sampled triples.
///
/// Gradients are summed, not averaged, within a batch: each triple only
/// touches three factor rows, and averaging would dilute those sparse updates.
/// The reported loss is the mean over a fixed seeded sample of triples.
pub fn train_bpr<T: Scalar>(
    matrix: &InteractionMatrix<T>,
    factors: usize,
    regularization: f64,
    config: &TrainingConfig,
) -> Result<(MfModel<T>, TrainReport)> {
    if factors < 1 {
        return Err(Error::invalid("latent dimension must be >= 1"));
    }
    config.validate()?;
    if matrix.nnz() == 0 {
        return Err(Error::invalid("BPR needs at least one positive entry"));
    }
    let mut model = init_mf(matrix, factors, config.seed)?;

    let reg = T::of(regularization);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xe7a1);
    let eval = sample_triples(matrix, matrix.nnz().min(20_000), &mut eval_rng);
    let mean = |m: &MfModel<T>| {
        if eval.is_empty() {
            0.0
        } else {
            bpr_loss(m, &eval, reg).to_f64_lossy() / eval.len() as f64
        }
    };
    let initial_loss = mean(&model);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let lr = T::of(config.learning_rate);
    let f = factors;
    for epoch in 0..config.epochs {
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64 + 1));
        let mut triples = sample_triples(matrix, matrix.nnz(), &mut epoch_rng);
        triples.shuffle(&mut epoch_rng);
        for batch in triples.chunks(config.batch_size) {
            let (_, gu, gi) = bpr_loss_grad(&model, batch, reg);
            let touched_users: HashSet<usize> = batch.iter().map(|t| t.user).collect();
            let touched_items: HashSet<usize> = batch.iter().flat_map(|t| [t.pos, t.neg]).collect();
            for u in touched_users {
                for k in u * f..(u + 1) * f {
                    model.user_factors[k] = model.user_factors[k] - lr * gu[k];
                }
            }
            for i in touched_items {
                for k in i * f..(i + 1) * f {
                    model.item_factors[k] = model.item_factors[k] - lr * gi[k];
                }
            }
        }
        epoch_losses.push(mean(&model));
    }
    Ok((
        model,
        TrainReport {
            initial_loss,
            epoch_losses,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cf::tests::toy;
    use crate::cf::{build_matrix, ActionWeights};
    use crate::data::Action::Click;

    fn matrix() -> InteractionMatrix<f64> {
        let d = toy(
            &[
                ("u1", "A", Click),
                ("u1", "B", Click),
                ("u2", "B", Click),
                ("u2", "C", Click),
            ],
            &["A", "B", "C", "D"],
        );
        build_matrix(&d, &ActionWeights::default())
    }

    #[test]
    fn equal_scores_cost_ln2() {
        let m = MfModel::from_parts(
            vec!["u".into()],
            vec!["a".into(), "b".into()],
            1,
            vec![1.0],
            vec![0.5, 0.5],
        )
        .unwrap();
        let t = [BprTriple {
            user: 0,
            pos: 0,
            neg: 1,
        }];
        assert!((bpr_loss(&m, &t, 0.0) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_keep_initialization() {
        let m = matrix();
        let cfg = TrainingConfig {
            epochs: 0,
            ..TrainingConfig::default()
        };
        let (a, report) = train_bpr::<f64>(&m, 4, 1e-4, &cfg).unwrap();
        assert_eq!(a, init_mf(&m, 4, cfg.seed).unwrap());
        assert!(report.epoch_losses.is_empty());
    }

    #[test]
    fn rejects_zero_factors_and_empty_matrix() {
        let m = matrix();
        assert!(train_bpr::<f64>(&m, 0, 1e-4, &TrainingConfig::default()).is_err());
        let empty = build_matrix::<f64>(&toy(&[], &["A"]), &ActionWeights::default());
        assert!(train_bpr::<f64>(&empty, 2, 1e-4, &TrainingConfig::default()).is_err());
    }

    #[test]
    fn training_separates_positives() {
        let m = matrix();
        let cfg = TrainingConfig {
            epochs: 200,
            batch_size: 4,
            learning_rate: 0.1,
            ..TrainingConfig::default()
        };
        let (mf, report) = train_bpr::<f64>(&m, 4, 1e-4, &cfg).unwrap();
        assert!(report.epoch_losses.last().unwrap() < &report.initial_loss);
        // u1 interacted with A, never with D.
        assert!(mf.predict(0, 0) > mf.predict(0, 3));
    }

    #[test]
    fn text_round_trip() {
        let m = matrix();
        let cfg = TrainingConfig {
            epochs: 1,
            ..TrainingConfig::default()
        };
        let (mf, _) = train_bpr::<f64>(&m, 3, 1e-4, &cfg).unwrap();
        assert_eq!(MfModel::from_text(&mf.to_text()).unwrap(), mf);
    }
}
