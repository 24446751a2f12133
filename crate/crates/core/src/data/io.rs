use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Catalog, Dataset, InteractionRecord, ItemRecord, TailFlag};
use crate::error::{Error, Result};
use crate::jsonl;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CatalogLine {
    item_id: String,
    title: String,
    description: String,
    review_summary: String,
    sales_volume: u64,
    /// Whitespace-separated tokens.
    tokens: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tail_flag: Option<TailFlag>,
}

impl From<&ItemRecord> for CatalogLine {
    fn from(item: &ItemRecord) -> Self {
        CatalogLine {
            item_id: item.item_id.clone(),
            title: item.title.clone(),
            description: item.description.clone(),
            review_summary: item.review_summary.clone(),
            sales_volume: item.sales_volume,
            tokens: item.tokens.join(" "),
            tail_flag: item.tail_flag,
        }
    }
}

/// Reads the catalog and interaction files, validating ids and sorting events.
pub fn load_dataset(catalog_path: &Path, interactions_path: &Path) -> Result<Dataset> {
    let mut items = Vec::new();
    for (line, rec) in jsonl::read::<CatalogLine>(catalog_path)? {
        if rec.item_id.is_empty() || rec.item_id.chars().any(char::is_whitespace) {
            return Err(Error::Malformed {
                path: catalog_path.to_path_buf(),
                line,
                message: format!("item_id `{}` must be nonempty without whitespace", rec.item_id),
            });
        }
        items.push(ItemRecord {
            item_id: rec.item_id,
            title: rec.title,
            description: rec.description,
            review_summary: rec.review_summary,
            sales_volume: rec.sales_volume,
            tokens: rec.tokens.split_whitespace().map(str::to_owned).collect(),
            tail_flag: rec.tail_flag,
        });
    }
    let catalog = Arc::new(Catalog::new(items)?);
    let interactions = jsonl::read::<InteractionRecord>(interactions_path)?
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    Dataset::new(catalog, interactions)
}

pub fn save_dataset(dataset: &Dataset, catalog_path: &Path, interactions_path: &Path) -> Result<()> {
    let lines: Vec<CatalogLine> = dataset.catalog().items().iter().map(Into::into).collect();
    jsonl::write(catalog_path, &lines)?;
    jsonl::write(interactions_path, dataset.interactions())
}
