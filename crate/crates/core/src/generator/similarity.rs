//! Discretized cosine similarity between items' frozen quantized vectors.

use crate::error::{Error, Result};

/// `n x n` table of similarity buckets in `[0, K]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimilarityTable {
    n: usize,
    k: u16,
    buckets: Vec<u16>,
}

/// `round_half_up((d + 1) / 2 * K)` with `d` clamped to `[-1, 1]`.
pub fn bucket(d: f64, k: u16) -> u16 {
    let d = d.clamp(-1.0, 1.0);
    let x = (d + 1.0) / 2.0 * f64::from(k);
    ((x + 0.5).floor() as u16).min(k)
}

impl SimilarityTable {
    /// Builds the table from row-major vectors of width `dim`.
    pub fn build(vectors: &[f64], dim: usize, k: u16) -> Result<Self> {
        if dim == 0 || vectors.len() % dim != 0 {
            return Err(Error::Misaligned(format!("{} values do not split into rows of {dim}", vectors.len())));
        }
        if k == 0 {
            return Err(Error::Config("similarity bucket count must be positive".into()));
        }
        let n = vectors.len() / dim;
        let rows: Vec<&[f64]> = vectors.chunks_exact(dim).collect();
        let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        if let Some(i) = norms.iter().position(|&x| x <= 0.0 || !x.is_finite()) {
            return Err(Error::ZeroNorm(i));
        }
        let mut buckets = vec![0u16; n * n];
        for i in 0..n {
            buckets[i * n + i] = k;
            for j in i + 1..n {
                let dot: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum();
                let b = bucket(dot / (norms[i] * norms[j]), k);
                buckets[i * n + j] = b;
                buckets[j * n + i] = b;
            }
        }
        Ok(Self { n, k, buckets })
    }

    /// A table where every pair sits in bucket `b`.
    pub fn constant(n: usize, k: u16, b: u16) -> Self {
        Self {
            n,
            k,
            buckets: vec![b.min(k); n * n],
        }
    }

    pub fn n_items(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> u16 {
        self.k
    }

    pub fn get(&self, i: u32, j: u32) -> Result<u16> {
        let (i, j) = (i as usize, j as usize);
        if i >= self.n || j >= self.n {
            return Err(Error::Misaligned(format!("no similarity entry for items ({i}, {j})")));
        }
        Ok(self.buckets[i * self.n + j])
    }
}
