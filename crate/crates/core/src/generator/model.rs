use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{Linear, Module};
use serde::{Deserialize, Serialize};

use super::attention::{SimEncoderBlock, SimilarityEmbedding};
use super::similarity::SimilarityTable;
use super::GeneratorConfig;
use crate::artifacts::{read_json, write_json};
use crate::error::{Error, Result};
use crate::nn::{attention_mask, FeedForward, Init, LayerNorm, MultiHeadAttention, ParamStore};
use crate::quantizer::SemanticIdTable;

const PARAMS_FILE: &str = "generator.safetensors";
const CONFIG_FILE: &str = "generator_config.json";
const META_FILE: &str = "generator_meta.json";

/// Shape of the code vocabulary: `levels` positions of `sub_tokens` codes,
/// each in `[0, codes)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpace {
    pub sub_tokens: usize,
    pub levels: usize,
    pub codes: usize,
}

impl TokenSpace {
    pub fn of(ids: &SemanticIdTable) -> Self {
        Self {
            sub_tokens: ids.sub_tokens(),
            levels: ids.levels,
            codes: ids.codes_per_level,
        }
    }

    /// Codes in a full ID.
    pub fn width(&self) -> usize {
        self.sub_tokens * self.levels
    }
}

/// A history and the item that followed it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub history: Vec<u32>,
    pub target: u32,
}

#[derive(Debug, Clone)]
enum SubTokens {
    Fresh(Tensor),
    Inherited { src: Tensor, proj: Linear },
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderBlock {
    fn new(store: &ParamStore, name: &str, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), dim, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            cross: MultiHeadAttention::new(store, &format!("{name}.cross"), dim, heads)?,
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), dim)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, hidden)?,
        })
    }

    fn forward(&self, x: &Tensor, self_mask: &Tensor, enc: &Tensor, cross_mask: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.self_attn.forward(&h, &h, Some(self_mask))?)?;
        let h = self.ln2.forward(&x)?;
        let x = (&x + self.cross.forward(&h, enc, Some(cross_mask))?)?;
        let h = self.ln3.forward(&x)?;
        Ok((&x + self.ff.forward(&h)?)?)
    }
}

/// Encoder output for a batch of histories.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `[B, T, model_dim]` token states.
    pub states: Tensor,
    /// Per-token key validity, `[B][T]`.
    pub key_valid: Vec<Vec<bool>>,
}

impl Encoded {
    /// Repeats rows: output row `r` is input row `rows[r]`.
    pub fn select(&self, rows: &[u32]) -> Result<Self> {
        let idx = Tensor::from_vec(rows.to_vec(), rows.len(), self.states.device())?;
        Ok(Self {
            states: self.states.index_select(&idx, 0)?,
            key_valid: rows.iter().map(|&r| self.key_valid[r as usize].clone()).collect(),
        })
    }
}

pub struct Generator {
    pub cfg: GeneratorConfig,
    pub space: TokenSpace,
    pub store: ParamStore,
    sub: SubTokens,
    inherited_dim: Option<usize>,
    enc_level: Tensor,
    enc_pos: Tensor,
    dec_level: Tensor,
    bos: Tensor,
    pub enc_blocks: Vec<SimEncoderBlock>,
    enc_ln: LayerNorm,
    dec_blocks: Vec<DecoderBlock>,
    dec_ln: LayerNorm,
    /// Index `level * sub_tokens + signal`.
    heads: Vec<Linear>,
    pub sim_emb: SimilarityEmbedding,
}

impl Generator {
    /// `inherit` carries stage-1 code vectors laid out as
    /// `[sub_tokens, levels, codes, dim]` plus that `dim`.
    pub fn new(cfg: &GeneratorConfig, space: TokenSpace, inherit: Option<(&[f64], usize)>, dtype: DType) -> Result<Self> {
        cfg.validate(space.sub_tokens)?;
        if cfg.inherit_codebooks != inherit.is_some() {
            return Err(Error::Config("inherit_codebooks requires stage-1 code vectors, and only then".into()));
        }
        let store = ParamStore::new(cfg.seed, dtype);
        let dm = cfg.model_dim;
        let sub_dim = dm / space.sub_tokens;
        let vocab = space.sub_tokens * space.levels * space.codes;
        let (sub, inherited_dim) = match inherit {
            None => (SubTokens::Fresh(store.param("gen.sub", &[vocab, sub_dim], Init::Normal { std: 1.0 })?), None),
            Some((data, d1)) => {
                if data.len() != vocab * d1 {
                    return Err(Error::Misaligned(format!("{} inherited values for a {vocab} x {d1} table", data.len())));
                }
                let src = store.param("gen.sub_src", &[vocab, d1], Init::Zeros)?;
                store.set("gen.sub_src", &Tensor::from_vec(data.to_vec(), (vocab, d1), &Device::Cpu)?)?;
                let proj = store.linear("gen.sub_proj", d1, sub_dim)?;
                (SubTokens::Inherited { src, proj }, Some(d1))
            }
        };
        let enc_blocks = (0..cfg.encoder_layers)
            .map(|i| SimEncoderBlock::new(&store, &format!("gen.enc{i}"), dm, cfg.heads, cfg.ff_dim))
            .collect::<Result<Vec<_>>>()?;
        let dec_blocks = (0..cfg.decoder_layers)
            .map(|i| DecoderBlock::new(&store, &format!("gen.dec{i}"), dm, cfg.heads, cfg.ff_dim))
            .collect::<Result<Vec<_>>>()?;
        let mut heads = Vec::with_capacity(space.width());
        for l in 0..space.levels {
            for s in 0..space.sub_tokens {
                let name = format!("gen.head.{l}.{s}");
                let w = store.param(&format!("{name}.weight"), &[space.codes, dm], Init::Normal { std: 0.02 })?;
                let b = store.param(&format!("{name}.bias"), &[space.codes], Init::Zeros)?;
                heads.push(Linear::new(w, Some(b)));
            }
        }
        let sim_emb = if cfg.freeze_sim_ones {
            SimilarityEmbedding::ones(&store, cfg.k, dm)?
        } else {
            SimilarityEmbedding::new(&store, cfg.k, dm, cfg.sim_noise_std)?
        };
        Ok(Self {
            cfg: cfg.clone(),
            space,
            sub,
            inherited_dim,
            enc_level: store.param("gen.enc_level", &[space.levels, dm], Init::Normal { std: 0.02 })?,
            enc_pos: store.param("gen.enc_pos", &[cfg.max_len, dm], Init::Normal { std: 0.02 })?,
            dec_level: store.param("gen.dec_level", &[space.levels, dm], Init::Normal { std: 0.02 })?,
            bos: store.param("gen.bos", &[1, dm], Init::Normal { std: 1.0 })?,
            enc_blocks,
            enc_ln: LayerNorm::new(&store, "gen.enc_ln", dm)?,
            dec_blocks,
            dec_ln: LayerNorm::new(&store, "gen.dec_ln", dm)?,
            heads,
            sim_emb,
            store,
        })
    }

    fn sub_table(&self) -> Result<Tensor> {
        Ok(match &self.sub {
            SubTokens::Fresh(t) => t.clone(),
            SubTokens::Inherited { src, proj } => proj.forward(src)?,
        })
    }

    /// Composite embeddings `[rows, model_dim]` of positions given as
    /// `codes` (`rows x sub_tokens`, row-major) at the matching `levels`.
    pub fn embed_positions(&self, table: &Tensor, codes: &[u32], levels: &[usize]) -> Result<Tensor> {
        let s = self.space.sub_tokens;
        if codes.len() != levels.len() * s {
            return Err(Error::Misaligned(format!("{} codes for {} positions", codes.len(), levels.len())));
        }
        let (l_count, n) = (self.space.levels, self.space.codes);
        let mut idx = Vec::with_capacity(codes.len());
        for (r, &l) in levels.iter().enumerate() {
            for k in 0..s {
                let c = codes[r * s + k] as usize;
                if c >= n || l >= l_count {
                    return Err(Error::Misaligned(format!("code {c} at level {l} is outside the token space")));
                }
                idx.push((k * l_count * n + l * n + c) as u32);
            }
        }
        let rows = levels.len();
        let g = table.index_select(&Tensor::from_vec(idx, rows * s, &Device::Cpu)?, 0)?;
        Ok(g.reshape((rows, self.cfg.model_dim))?)
    }

    /// Runs the encoder over item-major tokens of left-padded histories.
    pub fn encode(&self, histories: &[&[u32]], ids: &SemanticIdTable, sim: &SimilarityTable) -> Result<Encoded> {
        let b = histories.len();
        let (s, l_count) = (self.space.sub_tokens, self.space.levels);
        if TokenSpace::of(ids) != self.space {
            return Err(Error::Misaligned("semantic-ID table does not match the generator's token space".into()));
        }
        let t = histories.iter().map(|h| h.len().min(self.cfg.max_len)).max().unwrap_or(0);
        if b == 0 || t == 0 || histories.iter().any(|h| h.is_empty()) {
            return Err(Error::Precondition("every history needs at least one item".into()));
        }
        let tt = t * l_count;
        let mut codes = Vec::with_capacity(b * tt * s);
        let mut levels = Vec::with_capacity(b * tt);
        let mut extra = Vec::with_capacity(b * tt);
        let mut key_valid = Vec::with_capacity(b);
        let mut items = Vec::with_capacity(b * t);
        for h in histories {
            let h = &h[h.len().saturating_sub(self.cfg.max_len)..];
            let pad = t - h.len();
            let mut valid = Vec::with_capacity(tt);
            for j in 0..t {
                let item = if j < pad { None } else { Some(h[j - pad]) };
                let it = item.unwrap_or(h[0]);
                if it as usize >= ids.n_items() {
                    return Err(Error::Misaligned(format!("item {it} has no semantic ID")));
                }
                items.push(item);
                for l in 0..l_count {
                    codes.extend_from_slice(ids.position(it as usize, l));
                    levels.push(l);
                    extra.push((l as u32, (t - 1 - j) as u32));
                    valid.push(item.is_some());
                }
            }
            key_valid.push(valid);
        }
        let table = self.sub_table()?;
        let emb = self.embed_positions(&table, &codes, &levels)?;
        let lvl = Tensor::from_vec(extra.iter().map(|e| e.0).collect::<Vec<_>>(), b * tt, &Device::Cpu)?;
        let pos = Tensor::from_vec(extra.iter().map(|e| e.1).collect::<Vec<_>>(), b * tt, &Device::Cpu)?;
        let x = ((emb + self.enc_level.index_select(&lvl, 0)?)? + self.enc_pos.index_select(&pos, 0)?)?;
        let mut x = x.reshape((b, tt, self.cfg.model_dim))?;
        let mask = attention_mask(&key_valid, tt, false, x.dtype(), x.device())?;
        let sim_t = if self.cfg.sim_layers > 0 && !self.sim_emb.frozen {
            let mut buckets = Vec::with_capacity(b * t * t);
            for r in 0..b {
                for i in 0..t {
                    for j in 0..t {
                        buckets.push(match (items[r * t + i], items[r * t + j]) {
                            (Some(a), Some(c)) => u32::from(sim.get(a, c)?),
                            _ => u32::from(sim.k()),
                        });
                    }
                }
            }
            if sim.k() != self.cfg.k {
                return Err(Error::Misaligned(format!("similarity table has K={}, model expects {}", sim.k(), self.cfg.k)));
            }
            Some(self.sim_emb.lookup(&Tensor::from_vec(buckets, (b, t, t), &Device::Cpu)?)?)
        } else {
            None
        };
        for (i, block) in self.enc_blocks.iter().enumerate() {
            let s = if i < self.cfg.sim_layers { sim_t.as_ref() } else { None };
            x = block.forward(&x, Some(&mask), l_count, s)?;
        }
        Ok(Encoded {
            states: self.enc_ln.forward(&x)?,
            key_valid,
        })
    }

    /// Decoder states `[R, l + 1, model_dim]` for prefixes of `l` positions
    /// (`prefix[r]` holds `l * sub_tokens` codes).
    fn decoder_states(&self, enc: &Encoded, prefix: &[Vec<u32>], l: usize) -> Result<Tensor> {
        let r = prefix.len();
        let dm = self.cfg.model_dim;
        if enc.key_valid.len() != r {
            return Err(Error::Misaligned(format!("{} encoder rows for {r} prefixes", enc.key_valid.len())));
        }
        if l >= self.space.levels || prefix.iter().any(|p| p.len() != l * self.space.sub_tokens) {
            return Err(Error::Misaligned(format!("prefixes must hold {l} positions")));
        }
        let bos = self.bos.broadcast_as((r, 1, dm))?;
        let mut x = if l == 0 {
            bos
        } else {
            let codes: Vec<u32> = prefix.concat();
            let levels: Vec<usize> = (0..r).flat_map(|_| 0..l).collect();
            let emb = self.embed_positions(&self.sub_table()?, &codes, &levels)?.reshape((r, l, dm))?;
            Tensor::cat(&[&bos, &emb], 1)?
        };
        x = x.broadcast_add(&self.dec_level.narrow(0, 0, l + 1)?)?;
        let self_valid = vec![vec![true; l + 1]; r];
        let self_mask = attention_mask(&self_valid, l + 1, true, x.dtype(), x.device())?;
        let cross_mask = attention_mask(&enc.key_valid, l + 1, false, x.dtype(), x.device())?;
        for block in &self.dec_blocks {
            x = block.forward(&x, &self_mask, &enc.states, &cross_mask)?;
        }
        self.dec_ln.forward(&x)
    }

    /// Log-probabilities `[R, codes]` per sub-token for position `l` given
    /// prefixes of `l` positions.
    pub fn next_log_probs(&self, enc: &Encoded, prefix: &[Vec<u32>], l: usize) -> Result<Vec<Tensor>> {
        let h = self.decoder_states(enc, prefix, l)?.narrow(1, l, 1)?.squeeze(1)?;
        (0..self.space.sub_tokens)
            .map(|s| {
                let logits = self.heads[l * self.space.sub_tokens + s].forward(&h)?;
                Ok(candle_nn::ops::log_softmax(&logits, D::Minus1)?)
            })
            .collect()
    }

    /// Teacher-forced logits, indexed `[level][sub_token]`, each `[B, codes]`.
    pub fn teacher_forced_logits(&self, enc: &Encoded, targets: &[&[u32]]) -> Result<Vec<Vec<Tensor>>> {
        let (s, l_count) = (self.space.sub_tokens, self.space.levels);
        let prefix: Vec<Vec<u32>> = targets.iter().map(|t| t[..(l_count - 1) * s].to_vec()).collect();
        let h = self.decoder_states(enc, &prefix, l_count - 1)?;
        (0..l_count)
            .map(|l| {
                let hl = h.narrow(1, l, 1)?.squeeze(1)?;
                (0..s)
                    .map(|k| Ok(self.heads[l * s + k].forward(&hl)?))
                    .collect::<Result<Vec<_>>>()
            })
            .collect()
    }

    /// Cross-entropy summed over every code of the target IDs, averaged
    /// over the batch.
    pub fn loss(&self, logits: &[Vec<Tensor>], targets: &[&[u32]]) -> Result<Tensor> {
        let s = self.space.sub_tokens;
        let mut total: Option<Tensor> = None;
        for (l, per) in logits.iter().enumerate() {
            for (k, lg) in per.iter().enumerate() {
                let y: Vec<u32> = targets.iter().map(|t| t[l * s + k]).collect();
                let y = Tensor::from_vec(y, targets.len(), &Device::Cpu)?;
                let ce = candle_nn::loss::cross_entropy(lg, &y)?;
                total = Some(match total {
                    None => ce,
                    Some(t) => (t + ce)?,
                });
            }
        }
        total.ok_or_else(|| Error::Precondition("empty token space".into()))
    }

    /// Number of target codes whose argmax prediction is correct.
    pub fn correct_codes(&self, logits: &[Vec<Tensor>], targets: &[&[u32]]) -> Result<usize> {
        let s = self.space.sub_tokens;
        let mut correct = 0;
        for (l, per) in logits.iter().enumerate() {
            for (k, lg) in per.iter().enumerate() {
                let pred = lg.argmax(D::Minus1)?.to_vec1::<u32>()?;
                correct += pred.iter().zip(targets).filter(|(p, t)| **p == t[l * s + k]).count();
            }
        }
        Ok(correct)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.save(&dir.join(PARAMS_FILE))?;
        write_json(&dir.join(CONFIG_FILE), &self.cfg)?;
        write_json(
            &dir.join(META_FILE),
            &Meta {
                space: self.space,
                inherited_dim: self.inherited_dim,
                params: self.store.shape_manifest(),
                checksum: self.store.checksum()?,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg: GeneratorConfig = read_json(&dir.join(CONFIG_FILE))?;
        let meta: Meta = read_json(&dir.join(META_FILE))?;
        let placeholder = meta
            .inherited_dim
            .map(|d| (vec![0.0; meta.space.sub_tokens * meta.space.levels * meta.space.codes * d], d));
        let mut g = Self::new(&cfg, meta.space, placeholder.as_ref().map(|(v, d)| (v.as_slice(), *d)), DType::F32)?;
        if g.store.shape_manifest() != meta.params {
            return Err(Error::Precondition(format!("checkpoint in {} does not match its config", dir.display())));
        }
        g.store.load(&dir.join(PARAMS_FILE))?;
        Ok(g)
    }

    pub fn exists(dir: &Path) -> bool {
        dir.join(PARAMS_FILE).exists() && dir.join(CONFIG_FILE).exists()
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    space: TokenSpace,
    inherited_dim: Option<usize>,
    params: BTreeMap<String, Vec<usize>>,
    checksum: String,
}
