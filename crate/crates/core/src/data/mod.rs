//! Catalog and interaction data: ingestion, head/tail classification,
//! chronological splitting and the synthetic power-law generator.

mod io;
mod synthetic;

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, save_dataset};
pub use synthetic::{generate_synthetic, SyntheticSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    #[serde(rename = "click")]
    Click,
    #[serde(rename = "cart")]
    AddToCart,
    #[serde(rename = "purchase")]
    Purchase,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Click, Action::AddToCart, Action::Purchase];

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Click => "click",
            Action::AddToCart => "cart",
            Action::Purchase => "purchase",
        }
    }

    pub fn parse(s: &str) -> Option<Action> {
        Action::ALL.into_iter().find(|a| a.as_str() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TailFlag {
    Head,
    Tail,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemRecord {
    pub item_id: String,
    pub title: String,
    pub description: String,
    pub review_summary: String,
    pub sales_volume: u64,
    /// Pre-tokenized text; no segmentation or stop-word removal happens here.
    pub tokens: Vec<String>,
    /// `None` until [`classify_head_tail`] has run.
    pub tail_flag: Option<TailFlag>,
}

impl ItemRecord {
    pub fn new(item_id: impl Into<String>, sales_volume: u64) -> Self {
        ItemRecord {
            item_id: item_id.into(),
            title: String::new(),
            description: String::new(),
            review_summary: String::new(),
            sales_volume,
            tokens: Vec::new(),
            tail_flag: None,
        }
    }

    pub fn is_tail(&self) -> Option<bool> {
        self.tail_flag.map(|f| f == TailFlag::Tail)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    pub action: Action,
    pub timestamp: i64,
}

impl InteractionRecord {
    pub fn new(user_id: &str, item_id: &str, action: Action, timestamp: i64) -> Self {
        InteractionRecord {
            user_id: user_id.to_owned(),
            item_id: item_id.to_owned(),
            action,
            timestamp,
        }
    }
}

/// Item records with a unique-id index. Row order is the catalog file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    items: Vec<ItemRecord>,
    index: HashMap<String, usize>,
}

impl Catalog {
    pub fn new(items: Vec<ItemRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(items.len());
        for (pos, item) in items.iter().enumerate() {
            if index.insert(item.item_id.clone(), pos).is_some() {
                return Err(Error::DuplicateItem(item.item_id.clone()));
            }
        }
        Ok(Catalog { items, index })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }

    pub fn position(&self, item_id: &str) -> Option<usize> {
        self.index.get(item_id).copied()
    }

    pub fn get(&self, item_id: &str) -> Option<&ItemRecord> {
        self.position(item_id).map(|p| &self.items[p])
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.item_id.as_str())
    }

    pub fn flags_assigned(&self) -> bool {
        self.items.iter().all(|i| i.tail_flag.is_some())
    }
}

/// A validated catalog plus interactions sorted by `(user_id, timestamp)`.
///
/// Sorting is stable, so events sharing a timestamp keep their input order.
/// Each user's events are therefore a contiguous, time-ordered slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    catalog: Arc<Catalog>,
    interactions: Vec<InteractionRecord>,
}

impl Dataset {
    pub fn new(catalog: Arc<Catalog>, mut interactions: Vec<InteractionRecord>) -> Result<Self> {
        if let Some(bad) = interactions.iter().find(|i| catalog.position(&i.item_id).is_none()) {
            return Err(Error::DanglingItem(bad.item_id.clone()));
        }
        interactions.sort_by(|a, b| a.user_id.cmp(&b.user_id).then(a.timestamp.cmp(&b.timestamp)));
        Ok(Dataset { catalog, interactions })
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn shared_catalog(&self) -> Arc<Catalog> {
        Arc::clone(&self.catalog)
    }

    pub fn interactions(&self) -> &[InteractionRecord] {
        &self.interactions
    }

    pub fn users(&self) -> Vec<&str> {
        self.user_sequences().into_iter().map(|(u, _)| u).collect()
    }

    /// Per-user event slices, ascending by user id, each oldest first.
    pub fn user_sequences(&self) -> Vec<(&str, &[InteractionRecord])> {
        self.interactions
            .chunk_by(|a, b| a.user_id == b.user_id)
            .map(|chunk| (chunk[0].user_id.as_str(), chunk))
            .collect()
    }

    pub fn sequence_of(&self, user_id: &str) -> &[InteractionRecord] {
        let start = self.interactions.partition_point(|i| i.user_id.as_str() < user_id);
        let end = self.interactions.partition_point(|i| i.user_id.as_str() <= user_id);
        &self.interactions[start..end]
    }

    /// Copy of this dataset with the same interactions over a different catalog.
    fn with_catalog(&self, catalog: Catalog) -> Dataset {
        Dataset {
            catalog: Arc::new(catalog),
            interactions: self.interactions.clone(),
        }
    }

    fn subset(&self, interactions: Vec<InteractionRecord>) -> Dataset {
        Dataset {
            catalog: Arc::clone(&self.catalog),
            interactions,
        }
    }
}

/// Replaces every item's `sales_volume` by its purchase count in `dataset`.
pub fn recompute_sales_from_purchases(dataset: &Dataset) -> Dataset {
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for event in dataset.interactions().iter().filter(|i| i.action == Action::Purchase) {
        *counts.entry(event.item_id.as_str()).or_default() += 1;
    }
    let items = dataset
        .catalog()
        .items()
        .iter()
        .map(|item| ItemRecord {
            sales_volume: counts.get(item.item_id.as_str()).copied().unwrap_or(0),
            ..item.clone()
        })
        .collect();
    dataset.with_catalog(Catalog::new(items).expect("ids unchanged"))
}

/// Number of head items for a catalog of `n` items: `max(1, floor(fraction * n))`.
pub fn head_count(head_fraction: f64, n: usize) -> usize {
    // The epsilon absorbs products such as 0.29 * 100 = 28.999999999999996.
    let raw = (head_fraction * n as f64 + 1e-9).floor() as usize;
    raw.clamp(1, n.max(1))
}

/// Flags the top `max(1, floor(head_fraction * N))` items by sales as `Head`,
/// ties broken by ascending item id, and the rest as `Tail`.
pub fn classify_head_tail(dataset: &Dataset, head_fraction: f64) -> Result<Dataset> {
    if !(head_fraction > 0.0 && head_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "head_fraction must be in (0,1), got {head_fraction}"
        )));
    }
    let catalog = dataset.catalog();
    if catalog.is_empty() {
        return Err(Error::invalid("cannot classify an empty catalog"));
    }
    let mut order: Vec<&ItemRecord> = catalog.items().iter().collect();
    order.sort_by(|a, b| {
        b.sales_volume
            .cmp(&a.sales_volume)
            .then_with(|| a.item_id.cmp(&b.item_id))
    });
    let heads: BTreeSet<&str> = order[..head_count(head_fraction, catalog.len())]
        .iter()
        .map(|i| i.item_id.as_str())
        .collect();
    let items = catalog
        .items()
        .iter()
        .map(|item| {
            let flag = if heads.contains(item.item_id.as_str()) {
                TailFlag::Head
            } else {
                TailFlag::Tail
            };
            ItemRecord {
                tail_flag: Some(flag),
                ..item.clone()
            }
        })
        .collect();
    Ok(dataset.with_catalog(Catalog::new(items)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub test: Dataset,
    pub holdout_fraction: f64,
}

/// Number of trailing events a user with `n` events contributes to the holdout.
pub fn holdout_count(holdout_fraction: f64, n: usize) -> usize {
    if n <= 1 {
        return 0;
    }
    let raw = (holdout_fraction * n as f64 - 1e-9).ceil() as usize;
    raw.clamp(1, n - 1)
}

/// Per-user leave-last-out split: the last `ceil(fraction * n_u)` events of
/// each user go to test. Users with a single event stay entirely in train,
/// and every user keeps at least one training event.
pub fn chronological_split(dataset: &Dataset, holdout_fraction: f64) -> Result<SplitDataset> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "holdout_fraction must be in (0,1), got {holdout_fraction}"
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (_, events) in dataset.user_sequences() {
        let cut = events.len() - holdout_count(holdout_fraction, events.len());
        train.extend_from_slice(&events[..cut]);
        test.extend_from_slice(&events[cut..]);
    }
    Ok(SplitDataset {
        train: dataset.subset(train),
        test: dataset.subset(test),
        holdout_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog(sales: &[(&str, u64)]) -> Arc<Catalog> {
        Arc::new(Catalog::new(sales.iter().map(|&(id, s)| ItemRecord::new(id, s)).collect()).unwrap())
    }

    fn heads(d: &Dataset) -> Vec<&str> {
        d.catalog()
            .items()
            .iter()
            .filter(|i| i.tail_flag == Some(TailFlag::Head))
            .map(|i| i.item_id.as_str())
            .collect()
    }

    #[test]
    fn ten_percent_of_ten_is_the_best_seller() {
        let ids: Vec<String> = (0..10).map(|i| format!("I{i}")).collect();
        let sales: Vec<(&str, u64)> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), 100 - 10 * i as u64))
            .collect();
        let d = Dataset::new(catalog(&sales), vec![]).unwrap();
        let c = classify_head_tail(&d, 0.10).unwrap();
        assert_eq!(heads(&c), vec!["I0"]);
        assert!(c.catalog().flags_assigned());
    }

    #[test]
    fn ties_go_to_smallest_ids() {
        let ids: Vec<String> = (0..20).rev().map(|i| format!("item{i:02}")).collect();
        let sales: Vec<(&str, u64)> = ids.iter().map(|id| (id.as_str(), 5)).collect();
        let d = Dataset::new(catalog(&sales), vec![]).unwrap();
        let c = classify_head_tail(&d, 0.10).unwrap();
        let mut h = heads(&c);
        h.sort();
        assert_eq!(h, vec!["item00", "item01"]);
    }

    #[test]
    fn minimum_one_head() {
        let d = Dataset::new(catalog(&[("a", 1), ("b", 2), ("c", 3), ("d", 4), ("e", 5)]), vec![]).unwrap();
        let c = classify_head_tail(&d, 0.10).unwrap();
        assert_eq!(heads(&c), vec!["e"]);
        assert_eq!(head_count(0.29, 100), 29);
    }

    #[test]
    fn classify_rejects_empty_catalog_and_bad_fraction() {
        let d = Dataset::new(catalog(&[]), vec![]).unwrap();
        assert!(classify_head_tail(&d, 0.1).is_err());
        let d = Dataset::new(catalog(&[("a", 1)]), vec![]).unwrap();
        assert!(classify_head_tail(&d, 1.0).is_err());
    }

    fn user_events(user: &str, n: usize) -> Vec<InteractionRecord> {
        (0..n)
            .map(|t| InteractionRecord::new(user, "a", Action::Click, t as i64))
            .collect()
    }

    #[test]
    fn split_arithmetic() {
        let mut events = user_events("u10", 10);
        events.extend(user_events("u1", 1));
        events.extend(user_events("u5", 5));
        let d = Dataset::new(catalog(&[("a", 0)]), events).unwrap();
        let s = chronological_split(&d, 0.2).unwrap();
        assert_eq!(s.train.sequence_of("u10").len(), 8);
        assert_eq!(s.test.sequence_of("u10").len(), 2);
        assert_eq!(
            s.test
                .sequence_of("u10")
                .iter()
                .map(|e| e.timestamp)
                .collect::<Vec<_>>(),
            vec![8, 9]
        );
        assert_eq!(s.train.sequence_of("u1").len(), 1);
        assert!(s.test.sequence_of("u1").is_empty());
        assert_eq!(s.test.sequence_of("u5").len(), 1);
        assert!(!s.test.users().contains(&"u1"));
    }

    #[test]
    fn holdout_count_survives_rounding() {
        // 0.1 * 30 evaluates to 3.0000000000000004
        assert_eq!(holdout_count(0.1, 30), 3);
        assert_eq!(holdout_count(0.9, 2), 1);
    }

    #[test]
    fn dangling_and_duplicate_are_rejected() {
        let err = Dataset::new(
            catalog(&[("a", 0)]),
            vec![InteractionRecord::new("u", "X99", Action::Click, 0)],
        )
        .unwrap_err();
        assert!(matches!(err, Error::DanglingItem(ref id) if id == "X99"));
        let dup = Catalog::new(vec![ItemRecord::new("a", 0), ItemRecord::new("a", 1)]);
        assert!(matches!(dup, Err(Error::DuplicateItem(_))));
    }

    #[test]
    fn recompute_counts_purchases_only() {
        let events = vec![
            InteractionRecord::new("u", "a", Action::Purchase, 0),
            InteractionRecord::new("u", "a", Action::Click, 1),
            InteractionRecord::new("v", "a", Action::Purchase, 2),
            InteractionRecord::new("v", "b", Action::AddToCart, 2),
        ];
        let d = Dataset::new(catalog(&[("a", 99), ("b", 99)]), events).unwrap();
        let r = recompute_sales_from_purchases(&d);
        assert_eq!(r.catalog().get("a").unwrap().sales_volume, 2);
        assert_eq!(r.catalog().get("b").unwrap().sales_volume, 0);
    }
}
