use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::{read_embeddings, EmbeddingMatrix};
use super::{Dataset, DatasetStats, InteractionSequence, ItemRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// Minimum interactions per user and per item (k-core threshold).
    pub min_count: usize,
    /// Sequences keep only their most recent `max_len` items.
    pub max_len: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            min_count: 5,
            max_len: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestReport {
    /// Event rows whose item key appears in neither embedding file.
    pub rejected_rows: usize,
    /// Rows dropped by the k-core filter.
    pub filtered_rows: usize,
    pub missing_text: usize,
    pub missing_image: usize,
    pub stats: DatasetStats,
}

struct Event {
    user: String,
    item: String,
    ts: f64,
}

/// Loads an interaction log and the two embedding matrices, applies the
/// iterative k-core filter, truncates to the most recent items and assigns
/// dense ids (sorted key order).
pub fn ingest(
    events_path: &Path,
    text_path: &Path,
    image_path: &Path,
    cfg: &IngestConfig,
) -> Result<(Dataset, IngestReport)> {
    let text = read_embeddings(text_path)?;
    let image = read_embeddings(image_path)?;
    let raw = fs::read_to_string(events_path).map_err(|e| Error::io(events_path, e))?;

    let text_idx: HashMap<&str, usize> = text.rows.iter().enumerate().map(|(i, (k, _))| (k.as_str(), i)).collect();
    let image_idx: HashMap<&str, usize> = image.rows.iter().enumerate().map(|(i, (k, _))| (k.as_str(), i)).collect();

    let mut events = Vec::new();
    let mut rejected = 0usize;
    for (ln, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Parse {
                path: events_path.to_path_buf(),
                line: ln + 1,
                msg: format!("expected 3 tab-separated columns, got {}", cols.len()),
            });
        }
        let ts = cols[2].trim().parse::<f64>().map_err(|e| Error::Parse {
            path: events_path.to_path_buf(),
            line: ln + 1,
            msg: format!("bad timestamp: {e}"),
        })?;
        let item = cols[1].trim();
        if !text_idx.contains_key(item) && !image_idx.contains_key(item) {
            rejected += 1;
            continue;
        }
        events.push(Event {
            user: cols[0].trim().to_string(),
            item: item.to_string(),
            ts,
        });
    }
    if rejected > 0 {
        log::warn!("rejected {rejected} event rows with unknown item keys");
    }

    let before = events.len();
    let events = k_core(events, cfg.min_count);
    let filtered_rows = before - events.len();
    if events.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no interactions survive the {}-core filter",
            cfg.min_count
        )));
    }

    let item_keys = sorted_keys(events.iter().map(|e| e.item.as_str()));
    let user_keys = sorted_keys(events.iter().map(|e| e.user.as_str()));
    let item_id: HashMap<&str, u32> = item_keys.iter().enumerate().map(|(i, k)| (k.as_str(), i as u32)).collect();
    let user_id: HashMap<&str, u32> = user_keys.iter().enumerate().map(|(i, k)| (k.as_str(), i as u32)).collect();

    // Stable sort keeps file order among equal timestamps.
    let mut per_user: BTreeMap<u32, Vec<(f64, u32)>> = BTreeMap::new();
    for e in &events {
        per_user.entry(user_id[e.user.as_str()]).or_default().push((e.ts, item_id[e.item.as_str()]));
    }
    let sequences: Vec<InteractionSequence> = per_user
        .into_iter()
        .map(|(uid, mut evs)| {
            evs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let start = evs.len().saturating_sub(cfg.max_len);
            InteractionSequence {
                user_id: uid,
                items: evs[start..].iter().map(|&(_, i)| i).collect(),
            }
        })
        .collect();

    let text_mean = modality_mean(&text, &item_keys)?;
    let image_mean = modality_mean(&image, &item_keys)?;
    let mut missing_text = 0;
    let mut missing_image = 0;
    let items: Vec<ItemRecord> = item_keys
        .iter()
        .enumerate()
        .map(|(i, key)| {
            let t = text_idx.get(key.as_str()).map(|&r| text.rows[r].1.clone());
            let im = image_idx.get(key.as_str()).map(|&r| image.rows[r].1.clone());
            missing_text += usize::from(t.is_none());
            missing_image += usize::from(im.is_none());
            ItemRecord {
                item_id: i as u32,
                key: key.clone(),
                has_text: t.is_some(),
                has_image: im.is_some(),
                text_emb: t.unwrap_or_else(|| text_mean.clone()),
                image_emb: im.unwrap_or_else(|| image_mean.clone()),
            }
        })
        .collect();

    let dataset = Dataset {
        items,
        sequences,
        text_dim: text.dim,
        image_dim: image.dim,
    };
    dataset.validate()?;
    let report = IngestReport {
        rejected_rows: rejected,
        filtered_rows,
        missing_text,
        missing_image,
        stats: dataset.stats(),
    };
    Ok((dataset, report))
}

/// Iteratively drops rows whose user or item has fewer than `k` rows until
/// nothing changes.
fn k_core(mut events: Vec<Event>, k: usize) -> Vec<Event> {
    loop {
        let mut uc: HashMap<&str, usize> = HashMap::new();
        let mut ic: HashMap<&str, usize> = HashMap::new();
        for e in &events {
            *uc.entry(&e.user).or_default() += 1;
            *ic.entry(&e.item).or_default() += 1;
        }
        let keep: Vec<bool> = events.iter().map(|e| uc[e.user.as_str()] >= k && ic[e.item.as_str()] >= k).collect();
        if keep.iter().all(|&b| b) {
            return events;
        }
        let mut it = keep.into_iter();
        events.retain(|_| it.next().unwrap_or(false));
    }
}

/// Numeric order when every key is an integer, lexicographic otherwise.
fn sorted_keys<'a>(keys: impl Iterator<Item = &'a str>) -> Vec<String> {
    let set: HashSet<&str> = keys.collect();
    let mut v: Vec<String> = set.into_iter().map(str::to_string).collect();
    if v.iter().all(|k| k.parse::<u64>().is_ok()) {
        v.sort_by_key(|k| k.parse::<u64>().unwrap_or(0));
    } else {
        v.sort();
    }
    v
}

/// Mean embedding over catalog items that have this modality.
fn modality_mean(m: &EmbeddingMatrix, catalog: &[String]) -> Result<Vec<f32>> {
    let in_catalog: HashSet<&str> = catalog.iter().map(String::as_str).collect();
    let mut sum = vec![0f64; m.dim];
    let mut n = 0usize;
    for (k, v) in &m.rows {
        if in_catalog.contains(k.as_str()) {
            for (s, x) in sum.iter_mut().zip(v) {
                *s += f64::from(*x);
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyDataset("no catalog item has this modality".into()));
    }
    Ok(sum.into_iter().map(|s| (s / n as f64) as f32).collect())
}
