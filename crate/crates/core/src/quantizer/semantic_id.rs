//! Per-item composite semantic IDs: `L` positions, each holding one code
//! per retained signal.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Signal;
use crate::artifacts::write_json;
use crate::error::{Error, Result};

pub const TSV_FILE: &str = "semantic_ids.tsv";
pub const META_FILE: &str = "semantic_ids.meta.json";
pub const COLLISIONS_FILE: &str = "collisions.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticIdTable {
    pub signals: Vec<Signal>,
    pub levels: usize,
    pub codes_per_level: usize,
    /// `codes[item][l * signals.len() + s]`.
    pub codes: Vec<Vec<u32>>,
    /// Extra index for items whose full ID is shared with another item.
    pub disambiguation: Vec<Option<u32>>,
}

/// Number of items whose first `p` positions coincide with at least one
/// other item's, for each prefix length `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollisionReport {
    pub n_items: usize,
    pub colliding_items: BTreeMap<usize, usize>,
}

impl CollisionReport {
    pub fn full(&self) -> usize {
        self.colliding_items.values().last().copied().unwrap_or(0)
    }

    pub fn full_rate(&self) -> f64 {
        self.full() as f64 / self.n_items.max(1) as f64
    }
}

impl SemanticIdTable {
    /// `per_signal[s][item]` holds the `levels` codes of signal `s`.
    pub fn from_signal_codes(
        signals: &[Signal],
        levels: usize,
        codes_per_level: usize,
        per_signal: &[Vec<Vec<u32>>],
    ) -> Result<Self> {
        if signals.is_empty() || signals.len() != per_signal.len() {
            return Err(Error::Misaligned(format!(
                "{} signals but {} code sets",
                signals.len(),
                per_signal.len()
            )));
        }
        let n = per_signal[0].len();
        let s_count = signals.len();
        let mut codes = Vec::with_capacity(n);
        for item in 0..n {
            let mut row = vec![0u32; levels * s_count];
            for (s, set) in per_signal.iter().enumerate() {
                let c = set
                    .get(item)
                    .filter(|c| c.len() == levels)
                    .ok_or_else(|| Error::Misaligned(format!("signal {s} lacks codes for item {item}")))?;
                for l in 0..levels {
                    if c[l] as usize >= codes_per_level {
                        return Err(Error::Misaligned(format!("code {} out of range at item {item}", c[l])));
                    }
                    row[l * s_count + s] = c[l];
                }
            }
            codes.push(row);
        }
        let mut table = Self {
            signals: signals.to_vec(),
            levels,
            codes_per_level,
            codes,
            disambiguation: vec![None; n],
        };
        table.assign_disambiguation();
        Ok(table)
    }

    pub fn n_items(&self) -> usize {
        self.codes.len()
    }

    pub fn sub_tokens(&self) -> usize {
        self.signals.len()
    }

    pub fn item(&self, item: usize) -> &[u32] {
        &self.codes[item]
    }

    pub fn position(&self, item: usize, level: usize) -> &[u32] {
        let s = self.sub_tokens();
        &self.codes[item][level * s..(level + 1) * s]
    }

    /// Items sharing a full ID get indices `0, 1, ...` in item order.
    fn assign_disambiguation(&mut self) {
        let mut groups: HashMap<&[u32], Vec<usize>> = HashMap::new();
        for (i, c) in self.codes.iter().enumerate() {
            groups.entry(c.as_slice()).or_default().push(i);
        }
        let mut dis = vec![None; self.codes.len()];
        for items in groups.values().filter(|g| g.len() > 1) {
            for (k, &i) in items.iter().enumerate() {
                dis[i] = Some(k as u32);
            }
        }
        self.disambiguation = dis;
    }

    pub fn collision_report(&self) -> CollisionReport {
        let s = self.sub_tokens();
        let mut colliding_items = BTreeMap::new();
        for p in 1..=self.levels {
            let mut counts: HashMap<&[u32], usize> = HashMap::new();
            for c in &self.codes {
                *counts.entry(&c[..p * s]).or_default() += 1;
            }
            let n = counts.values().filter(|&&k| k > 1).sum();
            colliding_items.insert(p, n);
        }
        CollisionReport {
            n_items: self.n_items(),
            colliding_items,
        }
    }

    /// Full code sequence to the items carrying it, in disambiguation order.
    pub fn index(&self) -> HashMap<Vec<u32>, Vec<u32>> {
        let mut map: HashMap<Vec<u32>, Vec<u32>> = HashMap::new();
        for (i, c) in self.codes.iter().enumerate() {
            map.entry(c.clone()).or_default().push(i as u32);
        }
        map
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, c) in self.codes.iter().enumerate() {
            let parts: Vec<String> = c
                .chunks(self.sub_tokens())
                .map(|p| p.iter().map(u32::to_string).collect::<Vec<_>>().join(","))
                .collect();
            out.push_str(&format!("{i}\t{}", parts.join(" | ")));
            if let Some(d) = self.disambiguation[i] {
                out.push_str(&format!(" | #{d}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tsv = dir.join(TSV_FILE);
        fs::File::create(&tsv)
            .and_then(|mut f| f.write_all(self.to_tsv().as_bytes()))
            .map_err(|e| Error::io(&tsv, e))?;
        let meta = Meta {
            signals: self.signals.clone(),
            levels: self.levels,
            codes_per_level: self.codes_per_level,
        };
        write_json(&dir.join(META_FILE), &meta)?;
        write_json(&dir.join(COLLISIONS_FILE), &self.collision_report().colliding_items)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let meta: Meta = serde_json::from_str(&fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?)?;
        let tsv = dir.join(TSV_FILE);
        let text = fs::read_to_string(&tsv).map_err(|e| Error::io(&tsv, e))?;
        let s = meta.signals.len();
        let mut codes = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let bad = |msg: &str| Error::Parse {
                path: tsv.clone(),
                line: ln + 1,
                msg: msg.to_string(),
            };
            let (id, rest) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            if id.parse::<usize>().ok() != Some(ln) {
                return Err(bad("item ids must be consecutive from 0"));
            }
            let mut row = Vec::with_capacity(meta.levels * s);
            for part in rest.split(" | ").filter(|p| !p.starts_with('#')) {
                for c in part.split(',') {
                    row.push(c.trim().parse::<u32>().map_err(|_| bad("bad code"))?);
                }
            }
            if row.len() != meta.levels * s {
                return Err(bad("wrong number of codes"));
            }
            codes.push(row);
        }
        let mut table = Self {
            signals: meta.signals,
            levels: meta.levels,
            codes_per_level: meta.codes_per_level,
            disambiguation: vec![None; codes.len()],
            codes,
        };
        table.assign_disambiguation();
        Ok(table)
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    signals: Vec<Signal>,
    levels: usize,
    codes_per_level: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[[u32; 4]]) -> SemanticIdTable {
        // two signals, two levels
        let id: Vec<Vec<u32>> = rows.iter().map(|r| vec![r[0], r[2]]).collect();
        let tx: Vec<Vec<u32>> = rows.iter().map(|r| vec![r[1], r[3]]).collect();
        SemanticIdTable::from_signal_codes(&[Signal::Id, Signal::Text], 2, 8, &[id, tx]).unwrap()
    }

    #[test]
    fn layout_is_level_major() {
        let t = table(&[[1, 2, 3, 4]]);
        assert_eq!(t.position(0, 0), &[1, 2]);
        assert_eq!(t.position(0, 1), &[3, 4]);
    }

    #[test]
    fn collisions_match_sorted_scan() {
        let rows = [[1, 2, 3, 4], [1, 2, 3, 4], [1, 2, 0, 0], [5, 5, 5, 5], [1, 3, 3, 4]];
        let t = table(&rows);
        let scan = |p: usize| {
            let mut keys: Vec<Vec<u32>> = t.codes.iter().map(|c| c[..2 * p].to_vec()).collect();
            keys.sort();
            (0..keys.len())
                .filter(|&i| (i > 0 && keys[i - 1] == keys[i]) || (i + 1 < keys.len() && keys[i + 1] == keys[i]))
                .count()
        };
        let r = t.collision_report();
        assert_eq!(r.colliding_items[&1], scan(1));
        assert_eq!(r.colliding_items[&2], scan(2));
        assert_eq!(r.colliding_items[&1], 3);
        assert_eq!(r.full(), 2);
        assert_eq!(t.disambiguation, vec![Some(0), Some(1), None, None, None]);
    }

    #[test]
    fn tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = table(&[[1, 2, 3, 4], [1, 2, 3, 4], [7, 0, 0, 1]]);
        t.save(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(TSV_FILE)).unwrap();
        assert_eq!(text.lines().next().unwrap(), "0\t1,2 | 3,4 | #0");
        assert_eq!(SemanticIdTable::load(dir.path()).unwrap(), t);
        let coll: BTreeMap<String, usize> =
            serde_json::from_str(&fs::read_to_string(dir.path().join(COLLISIONS_FILE)).unwrap()).unwrap();
        assert_eq!(coll["2"], 2);
    }

    #[test]
    fn rejects_out_of_range_codes() {
        let r = SemanticIdTable::from_signal_codes(&[Signal::Id], 1, 4, &[vec![vec![4]]]);
        assert!(r.is_err());
    }
}
