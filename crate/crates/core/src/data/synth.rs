use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, InteractionSequence, ItemRecord};
use crate::error::{Error, Result};
use crate::rng;

/// Parameters of the synthetic behavior-correlated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_items: usize,
    pub n_users: usize,
    pub n_clusters: usize,
    pub seed: u64,
    /// Global multiplier on every per-item random component. At 0 all items
    /// of a cluster share identical embeddings.
    pub noise_scale: f64,
    pub text_dim: usize,
    pub image_dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Number of successor clusters per cluster in the transition chain.
    pub successors: usize,
    /// Within-cluster popularity follows `1 / rank^exponent`.
    pub popularity_exponent: f64,
    /// Std of the per-item perturbation of the cluster centroid.
    pub item_noise: f64,
    /// Std of the behavior-irrelevant half of every modality vector.
    pub nuisance_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_items: 2000,
            n_users: 5000,
            n_clusters: 50,
            seed: 7,
            noise_scale: 1.0,
            text_dim: 64,
            image_dim: 48,
            min_len: 5,
            max_len: 20,
            successors: 3,
            popularity_exponent: 1.0,
            item_noise: 0.3,
            nuisance_scale: 2.0,
        }
    }
}

/// A synthetic dataset together with its generating ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub dataset: Dataset,
    pub item_cluster: Vec<u32>,
    /// Row-stochastic cluster transition matrix.
    pub transition: Vec<Vec<f64>>,
}

/// Generates items in latent behavior clusters and user sequences from a
/// cluster-level Markov chain. The first half of every modality vector is
/// the cluster centroid plus item noise, the second half is nuisance drawn
/// independently of the cluster.
pub fn synthesize(cfg: &SynthConfig) -> Result<SyntheticCorpus> {
    if cfg.n_items == 0 || cfg.n_users == 0 {
        return Err(Error::Config("synthesize needs at least one item and one user".into()));
    }
    if cfg.n_items > 1 && cfg.n_clusters <= 1 {
        return Err(Error::Config(format!(
            "{} items cannot be clustered into {} cluster(s)",
            cfg.n_items, cfg.n_clusters
        )));
    }
    if cfg.n_clusters > cfg.n_items {
        return Err(Error::Config(format!(
            "n_clusters ({}) exceeds n_items ({})",
            cfg.n_clusters, cfg.n_items
        )));
    }
    if cfg.min_len < 3 || cfg.max_len < cfg.min_len {
        return Err(Error::Config(format!(
            "sequence length range [{}, {}] invalid (min 3)",
            cfg.min_len, cfg.max_len
        )));
    }
    if cfg.text_dim < 2 || cfg.image_dim < 2 {
        return Err(Error::Config("modality dims must be at least 2".into()));
    }
    let c = cfg.n_clusters.max(1);

    let mut r = rng::stream(cfg.seed, "synth/clusters");
    let mut item_cluster: Vec<u32> = (0..cfg.n_items).map(|i| (i % c) as u32).collect();
    item_cluster.shuffle(&mut r);

    let mut members: Vec<Vec<u32>> = vec![Vec::new(); c];
    for (i, &k) in item_cluster.iter().enumerate() {
        members[k as usize].push(i as u32);
    }
    // Popularity rank inside each cluster is the (shuffled) member order.
    let mut r = rng::stream(cfg.seed, "synth/popularity");
    let mut pop_cdf: Vec<Vec<f64>> = Vec::with_capacity(c);
    for m in members.iter_mut() {
        m.shuffle(&mut r);
        let w: Vec<f64> = (0..m.len()).map(|k| 1.0 / ((k + 1) as f64).powf(cfg.popularity_exponent)).collect();
        pop_cdf.push(cumulative(&w));
    }

    let mut r = rng::stream(cfg.seed, "synth/chain");
    let succ = cfg.successors.clamp(1, c);
    let mut transition = vec![vec![0.0; c]; c];
    let all: Vec<usize> = (0..c).collect();
    for row in transition.iter_mut() {
        let picks: Vec<usize> = all.choose_multiple(&mut r, succ).copied().collect();
        let w: Vec<f64> = picks.iter().map(|_| r.random_range(0.2..1.0)).collect();
        let total: f64 = w.iter().sum();
        for (p, wi) in picks.iter().zip(&w) {
            row[*p] = wi / total;
        }
    }
    let trans_cdf: Vec<Vec<f64>> = transition.iter().map(|row| cumulative(row)).collect();

    let text_centroids = gaussian_rows(c, cfg.text_dim / 2, 1.0, cfg.seed, "synth/text_centroids");
    let image_centroids = gaussian_rows(c, cfg.image_dim / 2, 1.0, cfg.seed, "synth/image_centroids");
    let mut r = rng::stream(cfg.seed, "synth/embeddings");
    let modality = |centroid: &[f64], dim: usize, r: &mut rng::Rng| -> Vec<f32> {
        let mut v = Vec::with_capacity(dim);
        for &m in centroid {
            v.push((m + cfg.noise_scale * cfg.item_noise * normal(r)) as f32);
        }
        while v.len() < dim {
            v.push((cfg.noise_scale * cfg.nuisance_scale * normal(r)) as f32);
        }
        v
    };
    let items: Vec<ItemRecord> = (0..cfg.n_items)
        .map(|i| {
            let k = item_cluster[i] as usize;
            let text_emb = modality(&text_centroids[k], cfg.text_dim, &mut r);
            let image_emb = modality(&image_centroids[k], cfg.image_dim, &mut r);
            ItemRecord {
                item_id: i as u32,
                key: i.to_string(),
                text_emb,
                image_emb,
                has_text: true,
                has_image: true,
            }
        })
        .collect();

    let mut r = rng::stream(cfg.seed, "synth/users");
    let sequences = (0..cfg.n_users)
        .map(|u| {
            let len = r.random_range(cfg.min_len..=cfg.max_len);
            let mut cluster = r.random_range(0..c);
            let mut seq = Vec::with_capacity(len);
            for _ in 0..len {
                let pick = sample_cdf(&pop_cdf[cluster], r.random());
                seq.push(members[cluster][pick]);
                cluster = sample_cdf(&trans_cdf[cluster], r.random());
            }
            InteractionSequence {
                user_id: u as u32,
                items: seq,
            }
        })
        .collect();

    let dataset = Dataset {
        items,
        sequences,
        text_dim: cfg.text_dim,
        image_dim: cfg.image_dim,
    };
    dataset.validate()?;
    Ok(SyntheticCorpus {
        dataset,
        item_cluster,
        transition,
    })
}

impl SyntheticCorpus {
    /// Total-variation distance between the empirical joint distribution of
    /// consecutive (cluster, next cluster) pairs and the one implied by the
    /// configured chain given the same source-cluster counts. Equals the
    /// source-weighted mean of per-row TV distances.
    pub fn transition_tv(&self) -> f64 {
        let c = self.transition.len();
        let mut counts = vec![vec![0usize; c]; c];
        for s in &self.dataset.sequences {
            for w in s.items.windows(2) {
                let a = self.item_cluster[w[0] as usize] as usize;
                let b = self.item_cluster[w[1] as usize] as usize;
                counts[a][b] += 1;
            }
        }
        let total: usize = counts.iter().flatten().sum();
        if total == 0 {
            return 0.0;
        }
        let mut tv = 0.0;
        for (row, probs) in counts.iter().zip(&self.transition) {
            let n: usize = row.iter().sum();
            for (&k, &p) in row.iter().zip(probs) {
                tv += (k as f64 - n as f64 * p).abs();
            }
        }
        0.5 * tv / total as f64
    }
}

fn normal(r: &mut rng::Rng) -> f64 {
    StandardNormal.sample(r)
}

fn gaussian_rows(n: usize, dim: usize, std: f64, seed: u64, name: &str) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, name);
    (0..n).map(|_| (0..dim).map(|_| std * normal(&mut r)).collect()).collect()
}

fn cumulative(w: &[f64]) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    let mut acc = 0.0;
    w.iter()
        .map(|x| {
            acc += x / total;
            acc
        })
        .collect()
}

fn sample_cdf(cdf: &[f64], u: f64) -> usize {
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
}
