//! Sequence-to-item contrastive task: a causal self-attention encoder
//! summarizes a history of item vectors, and an in-batch InfoNCE loss
//! pulls the summary toward the next item's vector.

use candle_core::{DType, Tensor, D};
use candle_nn::{Linear, Module};

use crate::error::{Error, Result};
use crate::nn::{attention_mask, to_f64_vec, Init, LayerNorm, ParamStore, TransformerBlock, MASK_NEG};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceEncoderConfig {
    /// Width of the item vectors entering and leaving the encoder.
    pub io_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
}

/// SASRec-style encoder with learned positional embeddings counted back
/// from the most recent item. Inputs are left-padded.
#[derive(Debug, Clone)]
pub struct SequenceEncoder {
    pub cfg: SequenceEncoderConfig,
    pub input: Linear,
    pub positions: Tensor,
    pub blocks: Vec<TransformerBlock>,
    pub final_ln: LayerNorm,
    pub output: Linear,
}

impl SequenceEncoder {
    pub fn new(store: &ParamStore, name: &str, cfg: SequenceEncoderConfig) -> Result<Self> {
        let blocks = (0..cfg.layers)
            .map(|i| TransformerBlock::new(store, &format!("{name}.block{i}"), cfg.model_dim, cfg.heads, 2 * cfg.model_dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            input: store.linear(&format!("{name}.input"), cfg.io_dim, cfg.model_dim)?,
            positions: store.param(&format!("{name}.pos"), &[cfg.max_len, cfg.model_dim], Init::Normal { std: 0.02 })?,
            blocks,
            final_ln: LayerNorm::new(store, &format!("{name}.ln"), cfg.model_dim)?,
            output: store.linear(&format!("{name}.output"), cfg.model_dim, cfg.io_dim)?,
        })
    }

    /// Encodes `[B, T, io_dim]` left-padded histories (`valid[b][t]` marks
    /// real items) into the final-position state `[B, io_dim]`.
    pub fn encode(&self, v: &Tensor, valid: &[Vec<bool>]) -> Result<Tensor> {
        let t = v.dim(1)?;
        Ok(self.encode_states(v, valid)?.narrow(1, t - 1, 1)?.squeeze(1)?)
    }

    /// Per-position states `[B, T, io_dim]`; position `t` sees only `..=t`.
    pub fn encode_states(&self, v: &Tensor, valid: &[Vec<bool>]) -> Result<Tensor> {
        let (b, t, d) = v.dims3()?;
        if d != self.cfg.io_dim {
            return Err(Error::DimMismatch {
                expected: self.cfg.io_dim,
                got: d,
            });
        }
        if t == 0 || valid.len() != b || valid.iter().any(|r| r.len() != t || !r[t - 1]) {
            return Err(Error::Precondition("every history needs at least one item in its last slot".into()));
        }
        if t > self.cfg.max_len {
            return Err(Error::Precondition(format!("history length {t} exceeds {}", self.cfg.max_len)));
        }
        let pos_idx: Vec<u32> = (0..t as u32).rev().collect();
        let pos = self.positions.index_select(&Tensor::from_vec(pos_idx, t, v.device())?, 0)?;
        let mut x = self.input.forward(v)?.broadcast_add(&pos)?;
        let mask = attention_mask(valid, t, true, v.dtype(), v.device())?;
        for block in &self.blocks {
            x = block.forward(&x, Some(&mask))?;
        }
        Ok(self.output.forward(&self.final_ln.forward(&x)?)?)
    }
}

/// Left-pads variable-length histories of item indices to a common length.
/// Returns padded indices (pad slots hold item 0) and the validity mask.
pub fn left_pad(histories: &[&[u32]]) -> (Vec<u32>, Vec<Vec<bool>>, usize) {
    let t = histories.iter().map(|h| h.len()).max().unwrap_or(0);
    let mut idx = Vec::with_capacity(histories.len() * t);
    let mut valid = Vec::with_capacity(histories.len());
    for h in histories {
        let pad = t - h.len();
        idx.extend(std::iter::repeat_n(0, pad));
        idx.extend_from_slice(h);
        valid.push((0..t).map(|i| i >= pad).collect());
    }
    (idx, valid, t)
}

fn check_norms(x: &Tensor) -> Result<Tensor> {
    let norms = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    if let Some(i) = to_f64_vec(&norms)?.iter().position(|&n| n <= 0.0 || !n.is_finite()) {
        return Err(Error::ZeroNorm(i));
    }
    Ok(norms)
}

/// Row-wise cosine similarity matrix `S[i][j] = cos(a_i, b_j)`.
pub fn cosine_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let an = a.broadcast_div(&check_norms(a)?)?;
    let bn = b.broadcast_div(&check_norms(b)?)?;
    Ok(an.matmul(&bn.t()?)?)
}

/// In-batch InfoNCE over cosine similarities at temperature `tau`. Row `i`
/// treats `positives[i]` as its target and the other rows' targets as
/// negatives, skipping rows whose target item equals its own.
pub fn rec_contrastive_loss(h: &Tensor, positives: &Tensor, target_items: &[u32], tau: f64) -> Result<Tensor> {
    let (b, d) = h.dims2()?;
    let (bp, dp) = positives.dims2()?;
    if bp != b || target_items.len() != b {
        return Err(Error::Misaligned(format!("{b} states, {bp} positives, {} targets", target_items.len())));
    }
    if dp != d {
        return Err(Error::DimMismatch { expected: d, got: dp });
    }
    if b < 2 {
        return Err(Error::Precondition("contrastive loss needs a batch of at least 2".into()));
    }
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let logits = (cosine_matrix(h, positives)? / tau)?;
    let mut mask = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            if i != j && target_items[i] == target_items[j] {
                mask[i * b + j] = MASK_NEG;
            }
        }
    }
    let mask = Tensor::from_vec(mask, (b, b), h.device())?.to_dtype(h.dtype())?;
    let logp = candle_nn::ops::log_softmax(&(logits + mask)?, D::Minus1)?;
    let eye = Tensor::eye(b, h.dtype(), h.device())?;
    Ok(((logp * eye)?.sum_all()? / -(b as f64))?)
}

/// Fraction of rows whose target ranks in the top `k` of `catalog` by
/// cosine similarity (ties counted against the target).
pub fn catalog_hit_rate(h: &Tensor, catalog: &Tensor, targets: &[u32], k: usize) -> Result<f64> {
    let sims = cosine_matrix(&h.to_dtype(DType::F64)?, &catalog.to_dtype(DType::F64)?)?;
    let n = catalog.dim(0)?;
    let flat = to_f64_vec(&sims)?;
    let hits = targets
        .iter()
        .enumerate()
        .filter(|&(i, &t)| {
            let row = &flat[i * n..(i + 1) * n];
            let s = row[t as usize];
            row.iter().enumerate().filter(|&(j, &x)| j != t as usize && x >= s).count() < k
        })
        .count();
    Ok(hits as f64 / targets.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numeric_grad, relative_error};
    use crate::nn::scalar;
    use crate::rng;
    use candle_core::{Device, Var};
    use rand_distr::{Distribution, StandardNormal};

    fn t2(data: &[f64], rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(data.to_vec(), (rows, cols), &Device::Cpu).unwrap()
    }

    fn randn(seed: u64, n: usize) -> Vec<f64> {
        let mut r = rng::stream(seed, "c");
        (0..n).map(|_| StandardNormal.sample(&mut r)).collect()
    }

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    fn brute_loss(h: &[f64], v: &[f64], targets: &[u32], d: usize, tau: f64) -> f64 {
        let b = targets.len();
        let mut total = 0.0;
        for i in 0..b {
            let hi = &h[i * d..(i + 1) * d];
            let pos = (cos(hi, &v[i * d..(i + 1) * d]) / tau).exp();
            let mut denom = pos;
            for j in 0..b {
                if j != i && targets[j] != targets[i] {
                    denom += (cos(hi, &v[j * d..(j + 1) * d]) / tau).exp();
                }
            }
            total += -(pos / denom).ln();
        }
        total / b as f64
    }

    #[test]
    fn closed_form_two_item_case() {
        let h = t2(&[1.0, 0.0, -1.0, 0.0], 2, 2);
        let v = t2(&[1.0, 0.0, -1.0, 0.0], 2, 2);
        let l = scalar(&rec_contrastive_loss(&h, &v, &[0, 1], 1.0).unwrap()).unwrap();
        assert!((l - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn uniform_similarities_give_log_b() {
        let h = t2(&[1.0, 0.0, 2.0, 0.0, 0.5, 0.0, 3.0, 0.0], 4, 2);
        let v = t2(&[0.0, 1.0, 0.0, 2.0, 0.0, 1.0, 0.0, 5.0], 4, 2);
        let l = scalar(&rec_contrastive_loss(&h, &v, &[0, 1, 2, 3], 0.1).unwrap()).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_summation_and_excludes_duplicates() {
        let (b, d) = (5, 4);
        let h = randn(1, b * d);
        let v = randn(2, b * d);
        for targets in [[0u32, 1, 2, 3, 4], [0, 1, 0, 3, 1]] {
            let l = scalar(&rec_contrastive_loss(&t2(&h, b, d), &t2(&v, b, d), &targets, 0.1).unwrap()).unwrap();
            assert!((l - brute_loss(&h, &v, &targets, d, 0.1)).abs() < 1e-9);
        }
    }

    #[test]
    fn scale_invariant_and_rejects_zero_norm() {
        let (b, d) = (3, 3);
        let h = randn(3, b * d);
        let v = randn(4, b * d);
        let base = scalar(&rec_contrastive_loss(&t2(&h, b, d), &t2(&v, b, d), &[0, 1, 2], 0.1).unwrap()).unwrap();
        let mut hs = h.clone();
        hs[3..6].iter_mut().for_each(|x| *x *= 7.5);
        let scaled = scalar(&rec_contrastive_loss(&t2(&hs, b, d), &t2(&v, b, d), &[0, 1, 2], 0.1).unwrap()).unwrap();
        assert!((base - scaled).abs() < 1e-12);
        assert!(base > 0.0);
        let mut z = v.clone();
        z[3..6].iter_mut().for_each(|x| *x = 0.0);
        let r = rec_contrastive_loss(&t2(&h, b, d), &t2(&z, b, d), &[0, 1, 2], 0.1);
        assert!(matches!(r, Err(Error::ZeroNorm(1))));
        assert!(rec_contrastive_loss(&t2(&h[..3], 1, 3), &t2(&v[..3], 1, 3), &[0], 0.1).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let (b, d) = (4, 3);
            let h = Var::from_tensor(&t2(&randn(10 + seed, b * d), b, d)).unwrap();
            let v = Var::from_tensor(&t2(&randn(20 + seed, b * d), b, d)).unwrap();
            let targets = [0, 1, 2, 1];
            let loss = rec_contrastive_loss(h.as_tensor(), v.as_tensor(), &targets, 0.5).unwrap();
            let g = loss.backward().unwrap();
            let fh = |x: &Tensor| scalar(&rec_contrastive_loss(x, v.as_tensor(), &targets, 0.5)?);
            let num = numeric_grad(h.as_tensor(), 1e-6, fh).unwrap();
            let ana = to_f64_vec(g.get(h.as_tensor()).unwrap()).unwrap();
            assert!(relative_error(&ana, &num) < 1e-4);
            let fv = |x: &Tensor| scalar(&rec_contrastive_loss(h.as_tensor(), x, &targets, 0.5)?);
            let num = numeric_grad(v.as_tensor(), 1e-6, fv).unwrap();
            let ana = to_f64_vec(g.get(v.as_tensor()).unwrap()).unwrap();
            assert!(relative_error(&ana, &num) < 1e-4);
        }
    }

    fn encoder(seed: u64, heads: usize, layers: usize) -> (ParamStore, SequenceEncoder) {
        let store = ParamStore::new(seed, DType::F64);
        let cfg = SequenceEncoderConfig {
            io_dim: 3,
            model_dim: 4,
            heads,
            layers,
            max_len: 6,
        };
        let enc = SequenceEncoder::new(&store, "seq", cfg).unwrap();
        (store, enc)
    }

    #[test]
    fn final_state_ignores_padding_and_is_causal() {
        let (_, enc) = encoder(1, 2, 2);
        let x = randn(30, 3 * 3);
        let v = Tensor::from_vec(x.clone(), (1, 3, 3), &Device::Cpu).unwrap();
        let single = enc.encode(&v.narrow(1, 2, 1).unwrap(), &[vec![true]]).unwrap();
        // same item with junk padding in front
        let padded = enc.encode(&v, &[vec![false, false, true]]).unwrap();
        let a = to_f64_vec(&single).unwrap();
        let b = to_f64_vec(&padded).unwrap();
        assert!(relative_error(&a, &b) < 1e-12);

        // states up to position 1 ignore a permutation of positions 2..5
        let x5 = randn(31, 5 * 3);
        let mut perm = x5.clone();
        perm[6..].rotate_left(3);
        let states = |d: Vec<f64>| {
            let t = Tensor::from_vec(d, (1, 5, 3), &Device::Cpu).unwrap();
            let s = enc.encode_states(&t, &[vec![true; 5]]).unwrap();
            to_f64_vec(&s.narrow(1, 0, 2).unwrap()).unwrap()
        };
        assert_eq!(states(x5), states(perm));
        assert!(enc.encode(&v, &[vec![true, true, false]]).is_err());
    }

    fn lin(l: &Linear, x: &[f64]) -> Vec<f64> {
        let w = l.weight().to_vec2::<f64>().unwrap();
        let b = l.bias().unwrap().to_vec1::<f64>().unwrap();
        w.iter().zip(&b).map(|(row, bi)| bi + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()).collect()
    }

    fn ln(l: &LayerNorm, x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n;
        let w = l.weight.to_vec1::<f64>().unwrap();
        let b = l.bias.to_vec1::<f64>().unwrap();
        x.iter().enumerate().map(|(i, a)| (a - m) / (var + l.eps).sqrt() * w[i] + b[i]).collect()
    }

    #[test]
    fn two_step_forward_matches_manual_attention() {
        let (_, enc) = encoder(5, 1, 1);
        let x = randn(40, 6);
        let v = Tensor::from_vec(x.clone(), (1, 2, 3), &Device::Cpu).unwrap();
        let got = to_f64_vec(&enc.encode(&v, &[vec![true, true]]).unwrap()).unwrap();

        let pos = enc.positions.to_vec2::<f64>().unwrap();
        let e: Vec<Vec<f64>> = (0..2)
            .map(|t| lin(&enc.input, &x[t * 3..t * 3 + 3]).iter().zip(&pos[1 - t]).map(|(a, b)| a + b).collect())
            .collect();
        let blk = &enc.blocks[0];
        let h: Vec<Vec<f64>> = e.iter().map(|r| ln(&blk.ln1, r)).collect();
        let q = lin(&blk.attn.q, &h[1]);
        let k: Vec<Vec<f64>> = h.iter().map(|r| lin(&blk.attn.k, r)).collect();
        let vv: Vec<Vec<f64>> = h.iter().map(|r| lin(&blk.attn.v, r)).collect();
        let s: Vec<f64> = k.iter().map(|kr| kr.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / 2.0).collect();
        let mx = s[0].max(s[1]);
        let w: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
        let z = w[0] + w[1];
        let ctx: Vec<f64> = (0..4).map(|d| (w[0] * vv[0][d] + w[1] * vv[1][d]) / z).collect();
        let att = lin(&blk.attn.o, &ctx);
        let x1: Vec<f64> = e[1].iter().zip(&att).map(|(a, b)| a + b).collect();
        let ff = lin(&blk.ff.mlp.fc2, &lin(&blk.ff.mlp.fc1, &ln(&blk.ln2, &x1)).iter().map(|a| a.max(0.0)).collect::<Vec<_>>());
        let x2: Vec<f64> = x1.iter().zip(&ff).map(|(a, b)| a + b).collect();
        let want = lin(&enc.output, &ln(&enc.final_ln, &x2));
        assert!(relative_error(&got, &want) < 1e-12);
    }

    #[test]
    fn left_pad_layout() {
        let a = [1u32, 2, 3];
        let b = [7u32];
        let (idx, valid, t) = left_pad(&[&a, &b]);
        assert_eq!(t, 3);
        assert_eq!(idx, vec![1, 2, 3, 0, 0, 7]);
        assert_eq!(valid[1], vec![false, false, true]);
    }

    #[test]
    fn catalog_hit_rate_counts_top_k() {
        let cat = t2(&[1.0, 0.0, 0.0, 1.0, -1.0, 0.0], 3, 2);
        let h = t2(&[1.0, 0.1, 0.0, 1.0], 2, 2);
        assert_eq!(catalog_hit_rate(&h, &cat, &[0, 2], 1).unwrap(), 0.5);
        assert_eq!(catalog_hit_rate(&h, &cat, &[0, 2], 3).unwrap(), 1.0);
    }
}
