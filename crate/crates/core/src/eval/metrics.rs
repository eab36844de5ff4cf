use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ranked item lists produced at a fixed depth. A list may be shorter than
/// `depth` when generation ran out of valid items; the missing tail counts
/// as misses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedLists {
    pub depth: usize,
    pub lists: Vec<Vec<u32>>,
}

impl RankedLists {
    pub fn new(depth: usize, lists: Vec<Vec<u32>>) -> Result<Self> {
        if let Some(l) = lists.iter().find(|l| l.len() > depth) {
            return Err(Error::Precondition(format!("a list of {} items exceeds depth {depth}", l.len())));
        }
        Ok(Self { depth, lists })
    }

    /// Lists of exactly their own (common) length.
    pub fn full(lists: Vec<Vec<u32>>) -> Result<Self> {
        let depth = lists.first().map_or(0, Vec::len);
        if lists.iter().any(|l| l.len() != depth) {
            return Err(Error::Precondition("lists differ in length".into()));
        }
        Ok(Self { depth, lists })
    }

    /// 1-based rank of `target` in list `u`.
    pub fn rank_of(&self, u: usize, target: u32) -> Option<usize> {
        self.lists[u].iter().position(|&i| i == target).map(|p| p + 1)
    }

    fn check(&self, targets: &[u32], k: usize) -> Result<()> {
        if k == 0 || k > self.depth {
            return Err(Error::Precondition(format!("k = {k} outside 1..={} (list length)", self.depth)));
        }
        if targets.len() != self.lists.len() {
            return Err(Error::Misaligned(format!("{} targets for {} lists", targets.len(), self.lists.len())));
        }
        if targets.is_empty() {
            return Err(Error::EmptyDataset("no users to evaluate".into()));
        }
        Ok(())
    }
}

/// Per-user hit indicator of the target within the top `k`.
pub fn recall_per_user(lists: &RankedLists, targets: &[u32], k: usize) -> Result<Vec<f64>> {
    lists.check(targets, k)?;
    Ok(targets
        .iter()
        .enumerate()
        .map(|(u, &t)| match lists.rank_of(u, t) {
            Some(r) if r <= k => 1.0,
            _ => 0.0,
        })
        .collect())
}

/// Per-user DCG of the single relevant item within the top `k`.
pub fn ndcg_per_user(lists: &RankedLists, targets: &[u32], k: usize) -> Result<Vec<f64>> {
    lists.check(targets, k)?;
    Ok(targets
        .iter()
        .enumerate()
        .map(|(u, &t)| match lists.rank_of(u, t) {
            Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
            _ => 0.0,
        })
        .collect())
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn recall_at_k(lists: &RankedLists, targets: &[u32], k: usize) -> Result<f64> {
    Ok(mean(&recall_per_user(lists, targets, k)?))
}

pub fn ndcg_at_k(lists: &RankedLists, targets: &[u32], k: usize) -> Result<f64> {
    Ok(mean(&ndcg_per_user(lists, targets, k)?))
}

pub fn recall_name(k: usize) -> String {
    format!("R@{k}")
}

pub fn ndcg_name(k: usize) -> String {
    format!("N@{k}")
}

#[cfg(test)]
mod tests {
    use super::*;

    // Brute force: scan every slot and sum gains.
    fn brute(lists: &[Vec<u32>], targets: &[u32], k: usize) -> (f64, f64) {
        let mut hits = 0.0;
        let mut dcg = 0.0;
        for (l, t) in lists.iter().zip(targets) {
            for (i, item) in l.iter().enumerate().take(k) {
                if item == t {
                    hits += 1.0;
                    dcg += 1.0 / (i as f64 + 2.0).ln() * std::f64::consts::LN_2;
                }
            }
        }
        (hits / targets.len() as f64, dcg / targets.len() as f64)
    }

    fn fixture() -> (Vec<Vec<u32>>, Vec<u32>) {
        let lists = vec![
            vec![1, 2, 3, 4, 5],
            vec![9, 8, 7, 6, 5],
            vec![3, 1, 4, 5, 9],
            vec![2, 7, 1, 8, 3],
            vec![0, 1, 2, 3, 4],
            vec![5, 6, 7, 8, 9],
            vec![4, 3, 2, 1, 0],
            vec![6, 2, 8, 3, 1],
            vec![7, 7, 7, 7, 7],
            vec![1, 3, 5, 7, 9],
        ];
        let targets = vec![1, 5, 4, 0, 9, 5, 0, 3, 2, 7];
        (lists, targets)
    }

    #[test]
    fn hand_counted_fixture() {
        let (lists, targets) = fixture();
        let r = RankedLists::full(lists.clone()).unwrap();
        // Ranks: 1, 5, 3, miss, miss, 1, 5, 4, miss, 4.
        assert_eq!(recall_at_k(&r, &targets, 5).unwrap(), 0.7);
        assert_eq!(recall_at_k(&r, &targets, 3).unwrap(), 0.3);
        assert_eq!(recall_at_k(&r, &targets, 1).unwrap(), 0.2);
        for k in 1..=5 {
            let (br, bn) = brute(&lists, &targets, k);
            assert!((recall_at_k(&r, &targets, k).unwrap() - br).abs() < 1e-12);
            assert!((ndcg_at_k(&r, &targets, k).unwrap() - bn).abs() < 1e-12);
        }
    }

    #[test]
    fn trivial_cases() {
        let r = RankedLists::full(vec![vec![3, 1], vec![4, 1]]).unwrap();
        assert_eq!(recall_at_k(&r, &[3, 4], 1).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&r, &[3, 4], 2).unwrap(), 1.0);
        assert_eq!(recall_at_k(&r, &[9, 9], 2).unwrap(), 0.0);
        assert_eq!(ndcg_at_k(&r, &[9, 9], 2).unwrap(), 0.0);
        let rank2 = ndcg_at_k(&r, &[1, 1], 2).unwrap();
        assert_eq!(rank2, 1.0 / 3f64.log2());
        assert!((rank2 - 0.6309).abs() < 1e-4);
    }

    #[test]
    fn k_beyond_depth_is_an_error() {
        let r = RankedLists::full(vec![vec![1, 2]]).unwrap();
        assert!(recall_at_k(&r, &[1], 3).is_err());
        assert!(ndcg_at_k(&r, &[1], 0).is_err());
        assert!(recall_at_k(&r, &[1, 2], 1).is_err());
        let short = RankedLists::new(10, vec![vec![1], vec![2, 3, 4]]).unwrap();
        assert_eq!(recall_at_k(&short, &[9, 4], 10).unwrap(), 0.5);
        assert!(RankedLists::new(1, vec![vec![1, 2]]).is_err());
    }

    #[test]
    fn random_fixtures_match_brute_force() {
        use crate::rng;
        use rand::seq::SliceRandom;
        use rand::Rng as _;
        let mut r = rng::stream(3, "metrics");
        for _ in 0..50 {
            let users = r.random_range(1..=20);
            let depth = r.random_range(1..=12);
            let lists: Vec<Vec<u32>> = (0..users)
                .map(|_| {
                    let mut all: Vec<u32> = (0..30).collect();
                    all.shuffle(&mut r);
                    all.truncate(depth);
                    all
                })
                .collect();
            let targets: Vec<u32> = (0..users).map(|_| r.random_range(0..30)).collect();
            let rl = RankedLists::full(lists.clone()).unwrap();
            for k in 1..=depth {
                let (br, bn) = brute(&lists, &targets, k);
                assert!((recall_at_k(&rl, &targets, k).unwrap() - br).abs() < 1e-12);
                assert!((ndcg_at_k(&rl, &targets, k).unwrap() - bn).abs() < 1e-12);
            }
        }
    }
}
