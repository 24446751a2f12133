use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::InteractionMatrix;
use crate::error::{Error, Result};
use crate::jsonl;
use crate::rank;
use crate::scalar::Scalar;

/// Truncated item-item cosine neighborhoods over interaction columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemKnnIndex<T> {
    k_neighbors: usize,
    /// Per item, its neighbors as `(item, sim)` ascending by item.
    neighbors: Vec<Vec<(usize, T)>>,
    /// Per item `i`, every `(j, sim)` such that `i` is a neighbor of `j`,
    /// ascending by `j`.
    reverse: Vec<Vec<(usize, T)>>,
}

/// Exact cosine between two item columns; zero if either is empty.
pub fn item_similarity<T: Scalar>(m: &InteractionMatrix<T>, i: usize, j: usize) -> T {
    let (a, b) = (m.col(i), m.col(j));
    let norm = |c: &[(usize, T)]| c.iter().map(|&(_, w)| w * w).sum::<T>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    let (mut x, mut y, mut dot) = (0, 0, T::zero());
    while x < a.len() && y < b.len() {
        match a[x].0.cmp(&b[y].0) {
            std::cmp::Ordering::Less => x += 1,
            std::cmp::Ordering::Greater => y += 1,
            std::cmp::Ordering::Equal => {
                dot = dot + a[x].1 * b[y].1;
                x += 1;
                y += 1;
            }
        }
    }
    dot / (na * nb)
}

impl<T: Scalar> ItemKnnIndex<T> {
    /// Keeps each item's `k_neighbors` most similar other items with positive
    /// similarity, ties by item position.
    pub fn build(m: &InteractionMatrix<T>, k_neighbors: usize) -> Self {
        let n = m.n_items();
        let norms: Vec<T> = (0..n)
            .map(|i| m.col(i).iter().map(|&(_, w)| w * w).sum::<T>().sqrt())
            .collect();
        let mut acc = vec![T::zero(); n];
        let mut touched = Vec::new();
        let mut neighbors = Vec::with_capacity(n);
        for i in 0..n {
            // Users are visited in ascending order for every item, so the
            // accumulated dot product of (i, j) equals that of (j, i) exactly.
            for &(u, wi) in m.col(i) {
                for &(j, wj) in m.row(u) {
                    if j != i {
                        if acc[j] == T::zero() {
                            touched.push(j);
                        }
                        acc[j] = acc[j] + wi * wj;
                    }
                }
            }
            let scored: Vec<(usize, T)> = touched
                .iter()
                .map(|&j| (j, acc[j] / (norms[i] * norms[j])))
                .filter(|&(_, s)| s > T::zero())
                .collect();
            for &j in &touched {
                acc[j] = T::zero();
            }
            touched.clear();
            let mut top = rank::top_k(scored, k_neighbors);
            top.sort_unstable_by_key(|&(j, _)| j);
            neighbors.push(top);
        }
        Self::from_neighbors(k_neighbors, neighbors)
    }

    fn from_neighbors(k_neighbors: usize, neighbors: Vec<Vec<(usize, T)>>) -> Self {
        let mut reverse = vec![Vec::new(); neighbors.len()];
        for (j, list) in neighbors.iter().enumerate() {
            for &(i, s) in list {
                reverse[i].push((j, s));
            }
        }
        ItemKnnIndex {
            k_neighbors,
            neighbors,
            reverse,
        }
    }

    pub fn k_neighbors(&self) -> usize {
        self.k_neighbors
    }

    pub fn neighbors(&self, item: usize) -> &[(usize, T)] {
        &self.neighbors[item]
    }

    /// `Σ_{i' in history ∩ neighbors(item)} sim(i', item) * weight(i')`.
    pub fn score(&self, history: &[(usize, T)], item: usize) -> T {
        let list = &self.neighbors[item];
        history.iter().fold(T::zero(), |acc, &(i, w)| {
            match list.binary_search_by_key(&i, |&(j, _)| j) {
                Ok(k) => acc + list[k].1 * w,
                Err(_) => acc,
            }
        })
    }

    /// [`Self::score`] for every item at once; identical values, same summation order.
    pub fn score_all(&self, history: &[(usize, T)]) -> Vec<T> {
        let mut out = vec![T::zero(); self.neighbors.len()];
        for &(i, w) in history {
            for &(j, s) in &self.reverse[i] {
                out[j] = out[j] + s * w;
            }
        }
        out
    }

    pub fn save(&self, path: &Path, m: &InteractionMatrix<T>) -> Result<()> {
        let header = KnnHeader {
            k_neighbors: self.k_neighbors,
            items: m.n_items(),
        };
        let lines: Vec<KnnLine> = self
            .neighbors
            .iter()
            .enumerate()
            .map(|(i, list)| {
                let sorted = rank::top_k(list.clone(), list.len());
                KnnLine {
                    item_id: m.items()[i].clone(),
                    neighbors: sorted
                        .into_iter()
                        .map(|(j, s)| (m.items()[j].clone(), s.to_f64_lossy()))
                        .collect(),
                }
            })
            .collect();
        jsonl::write_with_header(path, Some(&header), &lines)
    }

    pub fn load(path: &Path, m: &InteractionMatrix<T>) -> Result<Self> {
        let lines = jsonl::read_lines(path)?;
        let (first_no, first) = lines.first().ok_or_else(|| Error::Malformed {
            path: path.to_path_buf(),
            line: 1,
            message: "missing header".into(),
        })?;
        let header: KnnHeader = jsonl::parse_line(path, *first_no, first)?;
        if header.items != m.n_items() {
            return Err(Error::invalid(format!(
                "neighbor file covers {} items, catalog has {}",
                header.items,
                m.n_items()
            )));
        }
        let mut neighbors = vec![Vec::new(); m.n_items()];
        let mut seen: HashMap<usize, ()> = HashMap::new();
        for (no, text) in &lines[1..] {
            let line: KnnLine = jsonl::parse_line(path, *no, text)?;
            let pos = |id: &str| m.item_position(id).ok_or_else(|| Error::UnknownItem(id.to_owned()));
            let i = pos(&line.item_id)?;
            if seen.insert(i, ()).is_some() {
                return Err(Error::DuplicateItem(line.item_id));
            }
            let mut list = line
                .neighbors
                .iter()
                .map(|(id, s)| Ok((pos(id)?, T::of(*s))))
                .collect::<Result<Vec<_>>>()?;
            list.sort_unstable_by_key(|&(j, _)| j);
            neighbors[i] = list;
        }
        Ok(Self::from_neighbors(header.k_neighbors, neighbors))
    }
}

#[derive(Serialize, Deserialize)]
struct KnnHeader {
    k_neighbors: usize,
    items: usize,
}

#[derive(Serialize, Deserialize)]
struct KnnLine {
    item_id: String,
    neighbors: Vec<(String, f64)>,
}
