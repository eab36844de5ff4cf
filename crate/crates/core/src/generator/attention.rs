//! Self-attention whose value vectors are modulated element-wise by a
//! learned embedding of the item-pair similarity bucket.

use candle_core::{Tensor, D};
use candle_nn::Module;

use crate::error::{Error, Result};
use crate::nn::{merge_heads, split_heads, FeedForward, Init, LayerNorm, MultiHeadAttention, ParamStore};

/// `K + 1` modulation vectors, one per similarity bucket.
#[derive(Debug, Clone)]
pub struct SimilarityEmbedding {
    pub table: Tensor,
    pub frozen: bool,
}

impl SimilarityEmbedding {
    pub const NAME: &'static str = "gen.sim_emb";

    /// Learnable table initialized at `1 + N(0, noise_std)`.
    pub fn new(store: &ParamStore, k: u16, dim: usize, noise_std: f64) -> Result<Self> {
        Ok(Self {
            table: store.param(Self::NAME, &[k as usize + 1, dim], Init::OnesWithNoise { std: noise_std })?,
            frozen: false,
        })
    }

    /// Constant all-ones table, outside any parameter store.
    pub fn ones(store: &ParamStore, k: u16, dim: usize) -> Result<Self> {
        Ok(Self {
            table: Tensor::ones((k as usize + 1, dim), store.dtype(), store.device())?,
            frozen: true,
        })
    }

    /// Gathers `[B, t, t, dim]` from bucket indices `[B, t, t]`.
    pub fn lookup(&self, buckets: &Tensor) -> Result<Tensor> {
        let (b, t1, t2) = buckets.dims3()?;
        let dim = self.table.dim(1)?;
        Ok(self.table.index_select(&buckets.flatten_all()?, 0)?.reshape((b, t1, t2, dim))?)
    }
}

/// Multi-head attention over item-major token sequences (`t` items times
/// `levels` tokens each). The value aggregated from key item `j` into a
/// query token of item `i` is multiplied by `sim[b, i, j]` before summing.
#[derive(Debug, Clone)]
pub struct SimAttention {
    pub mha: MultiHeadAttention,
}

impl SimAttention {
    pub fn new(store: &ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            mha: MultiHeadAttention::new(store, name, dim, heads)?,
        })
    }

    /// `x`: `[B, t * levels, dim]`; `mask`: additive, broadcastable to
    /// `[B, H, T, T]`; `sim`: `[B, t, t, dim]` or `None` for plain values.
    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>, levels: usize, sim: Option<&Tensor>) -> Result<Tensor> {
        let (b, tt, dim) = x.dims3()?;
        if levels == 0 || tt % levels != 0 {
            return Err(Error::Misaligned(format!("{tt} tokens do not split into items of {levels} levels")));
        }
        let t = tt / levels;
        let h = self.mha.heads;
        let dh = dim / h;
        let q = split_heads(&self.mha.q.forward(x)?, h)?;
        let k = split_heads(&self.mha.k.forward(x)?, h)?;
        let v = split_heads(&self.mha.v.forward(x)?, h)?;
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        // [B, H, T, t, L] -> [B, H, t, T, L] times [B, H, t, L, dh]
        let attn = attn
            .reshape((b, h, tt, t, levels))?
            .permute((0, 1, 3, 2, 4))?
            .reshape((b * h, t, tt, levels))?;
        let v = v.reshape((b * h, t, levels, dh))?;
        let mut per_item = attn.matmul(&v)?.reshape((b, h, t, tt, dh))?;
        if let Some(sim) = sim {
            let (sb, sq, sk, sd) = sim.dims4()?;
            if (sb, sq, sk, sd) != (b, t, t, dim) {
                return Err(Error::Misaligned(format!(
                    "similarity embedding shape {:?} for {b} sequences of {t} items, dim {dim}",
                    sim.dims()
                )));
            }
            let expand: Vec<u32> = (0..tt as u32).map(|i| i / levels as u32).collect();
            let expand = Tensor::from_vec(expand, tt, x.device())?;
            let e = sim
                .index_select(&expand, 1)?
                .reshape((b, tt, t, h, dh))?
                .permute((0, 3, 2, 1, 4))?;
            per_item = (per_item * e)?;
        }
        let out = merge_heads(&per_item.sum(2)?)?;
        Ok(self.mha.o.forward(&out)?)
    }
}

/// Pre-norm encoder block built on [`SimAttention`].
#[derive(Debug, Clone)]
pub struct SimEncoderBlock {
    pub ln1: LayerNorm,
    pub attn: SimAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl SimEncoderBlock {
    pub fn new(store: &ParamStore, name: &str, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: SimAttention::new(store, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, hidden)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>, levels: usize, sim: Option<&Tensor>) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, mask, levels, sim)?)?;
        let h = self.ln2.forward(&x)?;
        Ok((&x + self.ff.forward(&h)?)?)
    }
}
