//! Collaborative filtering score with two backends: item-item cosine kNN and
//! BPR matrix factorization.

mod bpr;
mod knn;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{Action, Dataset};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use bpr::{bpr_loss, bpr_loss_grad, init_mf, train_bpr, BprTriple, MfModel};
pub use knn::{item_similarity, ItemKnnIndex};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CfBackendKind {
    #[default]
    ItemKnn,
    Bpr,
}

/// Implicit-feedback weight per action type.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionWeights<T> {
    pub click: T,
    pub cart: T,
    pub purchase: T,
}

impl<T: Scalar> Default for ActionWeights<T> {
    fn default() -> Self {
        ActionWeights {
            click: T::one(),
            cart: T::of(2.0),
            purchase: T::of(3.0),
        }
    }
}

impl<T: Scalar> ActionWeights<T> {
    pub fn of(&self, action: Action) -> T {
        match action {
            Action::Click => self.click,
            Action::AddToCart => self.cart,
            Action::Purchase => self.purchase,
        }
    }
}

/// Sparse user x item matrix. Items follow catalog order; users are sorted.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionMatrix<T> {
    users: Vec<String>,
    user_index: HashMap<String, usize>,
    items: Vec<String>,
    item_index: HashMap<String, usize>,
    /// Per user, `(item, weight)` ascending by item.
    rows: Vec<Vec<(usize, T)>>,
    /// Per item, `(user, weight)` ascending by user.
    cols: Vec<Vec<(usize, T)>>,
}

impl<T: Scalar> InteractionMatrix<T> {
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn user_position(&self, user_id: &str) -> Option<usize> {
        self.user_index.get(user_id).copied()
    }

    pub fn item_position(&self, item_id: &str) -> Option<usize> {
        self.item_index.get(item_id).copied()
    }

    pub fn row(&self, user: usize) -> &[(usize, T)] {
        &self.rows[user]
    }

    pub fn col(&self, item: usize) -> &[(usize, T)] {
        &self.cols[item]
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn entry(&self, user_id: &str, item_id: &str) -> Option<T> {
        let u = self.user_position(user_id)?;
        let i = self.item_position(item_id)?;
        self.rows[u]
            .binary_search_by_key(&i, |&(j, _)| j)
            .ok()
            .map(|k| self.rows[u][k].1)
    }
}

/// Entry `(u, i)` is the largest action weight among that pair's events.
pub fn build_matrix<T: Scalar>(train: &Dataset, weights: &ActionWeights<T>) -> InteractionMatrix<T> {
    let catalog = train.catalog();
    let items: Vec<String> = catalog.ids().map(str::to_owned).collect();
    let item_index: HashMap<String, usize> = items.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
    let mut users = Vec::new();
    let mut rows = Vec::new();
    for (user, events) in train.user_sequences() {
        let mut best: HashMap<usize, T> = HashMap::new();
        for e in events {
            let i = item_index[&e.item_id];
            let w = weights.of(e.action);
            best.entry(i).and_modify(|x| *x = x.max(w)).or_insert(w);
        }
        let mut row: Vec<(usize, T)> = best.into_iter().collect();
        row.sort_unstable_by_key(|&(i, _)| i);
        users.push(user.to_owned());
        rows.push(row);
    }
    let mut cols = vec![Vec::new(); items.len()];
    for (u, row) in rows.iter().enumerate() {
        for &(i, w) in row {
            cols[i].push((u, w));
        }
    }
    let user_index = users.iter().enumerate().map(|(u, id)| (id.clone(), u)).collect();
    InteractionMatrix {
        users,
        user_index,
        items,
        item_index,
        rows,
        cols,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CfModel<T> {
    ItemKnn(ItemKnnIndex<T>),
    Bpr(MfModel<T>),
}

impl<T> CfModel<T> {
    pub fn kind(&self) -> CfBackendKind {
        match self {
            CfModel::ItemKnn(_) => CfBackendKind::ItemKnn,
            CfModel::Bpr(_) => CfBackendKind::Bpr,
        }
    }
}

/// Dispatches collaborative scores to the configured backend.
#[derive(Clone, Debug)]
pub struct CfScorer<T> {
    matrix: InteractionMatrix<T>,
    model: Option<CfModel<T>>,
}

impl<T: Scalar> CfScorer<T> {
    pub fn new(matrix: InteractionMatrix<T>) -> Self {
        CfScorer { matrix, model: None }
    }

    pub fn with_model(matrix: InteractionMatrix<T>, model: CfModel<T>) -> Self {
        CfScorer {
            matrix,
            model: Some(model),
        }
    }

    pub fn matrix(&self) -> &InteractionMatrix<T> {
        &self.matrix
    }

    pub fn model(&self) -> Option<&CfModel<T>> {
        self.model.as_ref()
    }

    fn ready(&self) -> Result<&CfModel<T>> {
        self.model.as_ref().ok_or_else(|| Error::Dependency {
            stage: "cf".into(),
            detail: "collaborative backend has not been built or trained".into(),
        })
    }

    fn user(&self, user_id: &str) -> Result<usize> {
        self.matrix
            .user_position(user_id)
            .ok_or_else(|| Error::UnknownUser(user_id.to_owned()))
    }

    pub fn cf_score(&self, user_id: &str, item_id: &str) -> Result<T> {
        let model = self.ready()?;
        let u = self.user(user_id)?;
        let i = self
            .matrix
            .item_position(item_id)
            .ok_or_else(|| Error::UnknownItem(item_id.to_owned()))?;
        Ok(match model {
            CfModel::ItemKnn(knn) => knn.score(self.matrix.row(u), i),
            CfModel::Bpr(mf) => mf.predict(u, i),
        })
    }

    /// Scores for every item, in catalog order.
    pub fn score_all(&self, user_id: &str) -> Result<Vec<T>> {
        let model = self.ready()?;
        let u = self.user(user_id)?;
        Ok(match model {
            CfModel::ItemKnn(knn) => knn.score_all(self.matrix.row(u)),
            CfModel::Bpr(mf) => (0..self.matrix.n_items()).map(|i| mf.predict(u, i)).collect(),
        })
    }
}
