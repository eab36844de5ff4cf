//! Beam search over composite positions. Each step scores a position's
//! code tuple by the sum of the per-sub-token log-probabilities and keeps
//! the best `beam_size` prefixes.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::model::Generator;
use super::similarity::SimilarityTable;
use crate::error::{Error, Result};
use crate::nn::to_f64_vec;
use crate::quantizer::SemanticIdTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub top_k: usize,
    /// Expand only prefixes of existing IDs instead of filtering at the end.
    pub constrained: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 20,
            top_k: 10,
            constrained: false,
        }
    }
}

/// Valid next positions for every prefix of an existing ID.
#[derive(Debug, Clone)]
pub struct Trie {
    children: HashMap<Vec<u32>, Vec<Vec<u32>>>,
}

impl Trie {
    pub fn build(ids: &SemanticIdTable) -> Self {
        let s = ids.sub_tokens();
        let mut sets: HashMap<Vec<u32>, HashSet<Vec<u32>>> = HashMap::new();
        for codes in &ids.codes {
            for l in 0..ids.levels {
                sets.entry(codes[..l * s].to_vec())
                    .or_default()
                    .insert(codes[l * s..(l + 1) * s].to_vec());
            }
        }
        let children = sets
            .into_iter()
            .map(|(k, v)| {
                let mut v: Vec<Vec<u32>> = v.into_iter().collect();
                v.sort();
                (k, v)
            })
            .collect();
        Self { children }
    }

    pub fn next(&self, prefix: &[u32]) -> &[Vec<u32>] {
        self.children.get(prefix).map_or(&[], Vec::as_slice)
    }
}

/// Lookup structures shared by every generation call.
pub struct Decoding<'a> {
    pub ids: &'a SemanticIdTable,
    pub sim: &'a SimilarityTable,
    index: HashMap<Vec<u32>, Vec<u32>>,
    trie: Option<Trie>,
}

impl<'a> Decoding<'a> {
    pub fn new(ids: &'a SemanticIdTable, sim: &'a SimilarityTable, constrained: bool) -> Self {
        Self {
            ids,
            sim,
            index: ids.index(),
            trie: constrained.then(|| Trie::build(ids)),
        }
    }

    /// Items carrying a full code sequence, in item order.
    pub fn items_for(&self, codes: &[u32]) -> &[u32] {
        self.index.get(codes).map_or(&[], Vec::as_slice)
    }
}

/// A completed beam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub codes: Vec<u32>,
    pub log_prob: f64,
    pub items: Vec<u32>,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Ranked items, best first; ties in log-probability go to the lower id.
    pub items: Vec<u32>,
    pub log_probs: Vec<f64>,
    /// Final beams in rank order, including code sequences naming no item.
    pub beams: Vec<Candidate>,
    /// Fewer than `top_k` valid items were found.
    pub exhausted: bool,
}

#[derive(PartialEq)]
struct HeapEntry {
    score: f64,
    codes: Vec<u32>,
    ranks: Vec<usize>,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.codes.cmp(&self.codes))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// The `k` best tuples `(c_1, ..., c_S)` by `sum_s lists[s][c_s]`, best
/// first, ties broken by the lexicographically smaller tuple. Exact,
/// without enumerating the full product.
pub fn top_combinations(lists: &[Vec<f64>], k: usize) -> Vec<(f64, Vec<u32>)> {
    if lists.is_empty() || lists.iter().any(Vec::is_empty) || k == 0 {
        return Vec::new();
    }
    let sorted: Vec<Vec<u32>> = lists
        .iter()
        .map(|l| {
            let mut idx: Vec<u32> = (0..l.len() as u32).collect();
            idx.sort_by(|&a, &b| l[b as usize].total_cmp(&l[a as usize]).then(a.cmp(&b)));
            idx
        })
        .collect();
    let entry = |ranks: Vec<usize>| {
        let codes: Vec<u32> = ranks.iter().zip(&sorted).map(|(&r, s)| s[r]).collect();
        let score = codes.iter().zip(lists).map(|(&c, l)| l[c as usize]).sum();
        HeapEntry { score, codes, ranks }
    };
    let mut heap = BinaryHeap::new();
    let mut seen = HashSet::new();
    let start = vec![0; lists.len()];
    seen.insert(start.clone());
    heap.push(entry(start));
    let mut out = Vec::with_capacity(k);
    while let Some(top) = heap.pop() {
        for s in 0..lists.len() {
            if top.ranks[s] + 1 < lists[s].len() {
                let mut next = top.ranks.clone();
                next[s] += 1;
                if seen.insert(next.clone()) {
                    heap.push(entry(next));
                }
            }
        }
        out.push((top.score, top.codes));
        if out.len() == k {
            break;
        }
    }
    out
}

fn rank_desc(a: &(f64, Vec<u32>), b: &(f64, Vec<u32>)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1))
}

/// Beam search for every history in `histories`.
pub fn generate(model: &Generator, dec: &Decoding<'_>, histories: &[&[u32]], cfg: &BeamConfig) -> Result<Vec<GenerationResult>> {
    if cfg.beam_size == 0 || cfg.top_k == 0 || cfg.beam_size < cfg.top_k {
        return Err(Error::Config(format!(
            "beam size {} must be at least top-k {} and positive",
            cfg.beam_size, cfg.top_k
        )));
    }
    let s = model.space.sub_tokens;
    let enc = model.encode(histories, dec.ids, dec.sim)?;
    let mut beams: Vec<Vec<(f64, Vec<u32>)>> = vec![vec![(0.0, Vec::new())]; histories.len()];
    for l in 0..model.space.levels {
        let mut rows = Vec::new();
        let mut prefixes = Vec::new();
        for (u, bs) in beams.iter().enumerate() {
            for (_, codes) in bs {
                rows.push(u as u32);
                prefixes.push(codes.clone());
            }
        }
        let lps = model.next_log_probs(&enc.select(&rows)?, &prefixes, l)?;
        let host: Vec<Vec<f64>> = lps.iter().map(to_f64_vec).collect::<Result<_>>()?;
        let n = model.space.codes;
        let mut r = 0;
        for bs in beams.iter_mut() {
            let mut cands: Vec<(f64, Vec<u32>)> = Vec::new();
            for (score, prefix) in bs.iter() {
                let heads: Vec<Vec<f64>> = host.iter().map(|h| h[r * n..(r + 1) * n].to_vec()).collect();
                r += 1;
                let tuples = match &dec.trie {
                    Some(trie) => trie
                        .next(prefix)
                        .iter()
                        .map(|t| (t.iter().zip(&heads).map(|(&c, h)| h[c as usize]).sum(), t.clone()))
                        .collect(),
                    None => top_combinations(&heads, cfg.beam_size),
                };
                for (ts, t) in tuples {
                    let mut codes = prefix.clone();
                    codes.extend(t);
                    cands.push((score + ts, codes));
                }
            }
            cands.sort_by(rank_desc);
            cands.truncate(cfg.beam_size);
            *bs = cands;
        }
        debug_assert!(beams.iter().all(|b| b.iter().all(|(_, c)| c.len() == (l + 1) * s)));
    }
    Ok(beams
        .into_iter()
        .map(|bs| {
            let beams: Vec<Candidate> = bs
                .into_iter()
                .map(|(log_prob, codes)| {
                    let items = dec.items_for(&codes).to_vec();
                    Candidate {
                        valid: !items.is_empty(),
                        codes,
                        log_prob,
                        items,
                    }
                })
                .collect();
            let mut ranked: Vec<(f64, u32)> = beams
                .iter()
                .flat_map(|c| c.items.iter().map(move |&i| (c.log_prob, i)))
                .collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            ranked.truncate(cfg.top_k);
            GenerationResult {
                exhausted: ranked.len() < cfg.top_k,
                items: ranked.iter().map(|x| x.1).collect(),
                log_probs: ranked.iter().map(|x| x.0).collect(),
                beams,
            }
        })
        .collect())
}
