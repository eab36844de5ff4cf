//! Small neural building blocks on top of candle, plus a parameter store
//! whose initialization is driven by the run seed rather than a global RNG.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::{Linear, VarMap};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

/// Parameter initializers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform { lo: f64, hi: f64 },
    Normal { std: f64 },
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual dense-layer default.
    FanIn(usize),
    /// `1 + N(0, std)`.
    OnesWithNoise { std: f64 },
}

/// Named trainable parameters. Each parameter draws its initial values from
/// its own seeded stream keyed by name.
pub struct ParamStore {
    varmap: VarMap,
    dtype: DType,
    device: Device,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            varmap: VarMap::new(),
            dtype,
            device: Device::Cpu,
            seed,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Returns the parameter `name`, creating it with `init` on first use.
    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut data = self.varmap.data().lock().expect("param store poisoned");
        if let Some(var) = data.get(name) {
            if var.dims() != shape {
                return Err(Error::Config(format!(
                    "parameter {name} exists with shape {:?}, requested {shape:?}",
                    var.dims()
                )));
            }
            return Ok(var.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let mut r = rng::stream(self.seed, &format!("param/{name}"));
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform { lo, hi } => (0..n).map(|_| r.random_range(lo..hi)).collect(),
            Init::Normal { std } => (0..n)
                .map(|_| { let z: f64 = StandardNormal.sample(&mut r); std * z })
                .collect(),
            Init::FanIn(fan_in) => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| r.random_range(-b..b)).collect()
            }
            Init::OnesWithNoise { std } => (0..n)
                .map(|_| { let z: f64 = StandardNormal.sample(&mut r); 1.0 + std * z })
                .collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn linear(&self, name: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
        let w = self.param(&format!("{name}.weight"), &[out_dim, in_dim], Init::FanIn(in_dim))?;
        let b = self.param(&format!("{name}.bias"), &[out_dim], Init::FanIn(in_dim))?;
        Ok(Linear::new(w, Some(b)))
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.varmap.data().lock().expect("param store poisoned").get(name).cloned()
    }

    /// Variables whose names satisfy `keep`, sorted by name.
    pub fn vars_where(&self, keep: impl Fn(&str) -> bool) -> Vec<Var> {
        let data = self.varmap.data().lock().expect("param store poisoned");
        let mut named: Vec<(&String, &Var)> = data.iter().filter(|(k, _)| keep(k)).collect();
        named.sort_by(|a, b| a.0.cmp(b.0));
        named.into_iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn names(&self) -> Vec<String> {
        let data = self.varmap.data().lock().expect("param store poisoned");
        let mut names: Vec<String> = data.keys().cloned().collect();
        names.sort();
        names
    }

    pub fn shape_manifest(&self) -> BTreeMap<String, Vec<usize>> {
        let data = self.varmap.data().lock().expect("param store poisoned");
        data.iter().map(|(k, v)| (k.clone(), v.dims().to_vec())).collect()
    }

    /// Overwrites the value of an existing parameter.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .var(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Deep copy of every parameter value.
    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        let data = self.varmap.data().lock().expect("param store poisoned");
        let mut out = data
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect::<Result<Vec<_>>>()?;
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }

    pub fn restore(&self, snapshot: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in snapshot {
            self.set(name, t)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.varmap.save(path)?;
        Ok(())
    }

    /// Loads values for every parameter already registered in the store.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
            ));
        }
        self.varmap.load(path)?;
        Ok(())
    }

    /// SHA-256 over parameter names, shapes and raw values in name order.
    pub fn checksum(&self) -> Result<String> {
        let data = self.varmap.data().lock().expect("param store poisoned");
        let mut names: Vec<&String> = data.keys().collect();
        names.sort();
        let mut h = Sha256::new();
        for name in names {
            let t = data[name].as_tensor().flatten_all()?.to_dtype(DType::F64)?;
            h.update(name.as_bytes());
            for d in t.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.to_vec1::<f64>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// Two dense layers with a ReLU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &ParamStore, name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: store.linear(&format!("{name}.fc1"), in_dim, hidden)?,
            fc2: store.linear(&format!("{name}.fc2"), hidden, out_dim)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.fc1.weight().dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.weight().dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let got = x.dim(D::Minus1)?;
        if got != self.in_dim() {
            return Err(Error::DimMismatch {
                expected: self.in_dim(),
                got,
            });
        }
        Ok(self.fc2.forward(&self.fc1.forward(x)?.relu()?)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: store.param(&format!("{name}.weight"), &[dim], Init::Const(1.0))?,
            bias: store.param(&format!("{name}.bias"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Splits `[B, T, H*dh]` into `[B, H, T, dh]`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, t, d) = x.dims3()?;
    Ok(x.reshape((b, t, heads, d / heads))?.transpose(1, 2)?.contiguous()?)
}

/// Inverse of [`split_heads`].
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, t, dh) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, t, h * dh))?)
}

/// Large negative additive mask value; finite so masked rows never produce NaN.
pub const MASK_NEG: f64 = -1e9;

/// Additive attention mask of shape `[B, 1, Tq, Tk]`. A key is visible when
/// `key_valid[b][k]` holds and, if `causal`, `k <= q + offset`
/// (`offset = Tk - Tq`).
pub fn attention_mask(
    key_valid: &[Vec<bool>],
    tq: usize,
    causal: bool,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let b = key_valid.len();
    let tk = key_valid.first().map_or(0, Vec::len);
    let offset = tk.saturating_sub(tq);
    let mut m = Vec::with_capacity(b * tq * tk);
    for row in key_valid {
        for q in 0..tq {
            for (k, &ok) in row.iter().enumerate() {
                let visible = ok && (!causal || k <= q + offset);
                m.push(if visible { 0.0 } else { MASK_NEG });
            }
        }
    }
    Ok(Tensor::from_vec(m, (b, 1, tq, tk), device)?.to_dtype(dtype)?)
}

/// Standard multi-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: store.linear(&format!("{name}.q"), dim, dim)?,
            k: store.linear(&format!("{name}.k"), dim, dim)?,
            v: store.linear(&format!("{name}.v"), dim, dim)?,
            o: store.linear(&format!("{name}.o"), dim, dim)?,
            heads,
        })
    }

    /// `mask` is additive, broadcastable to `[B, H, Tq, Tk]`.
    pub fn forward(&self, xq: &Tensor, xkv: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let q = split_heads(&self.q.forward(xq)?, self.heads)?;
        let k = split_heads(&self.k.forward(xkv)?, self.heads)?;
        let v = split_heads(&self.v.forward(xkv)?, self.heads)?;
        let dh = q.dim(D::Minus1)?;
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = merge_heads(&attn.matmul(&v)?)?;
        Ok(self.o.forward(&out)?)
    }
}

/// Position-wise feed-forward block.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub mlp: Mlp,
}

impl FeedForward {
    pub fn new(store: &ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, name, dim, hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.mlp.forward(x)
    }
}

/// Pre-norm transformer block with standard self-attention.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl TransformerBlock {
    pub fn new(store: &ParamStore, name: &str, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, hidden)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, mask)?)?;
        let h = self.ln2.forward(&x)?;
        Ok((&x + self.ff.forward(&h)?)?)
    }
}

/// Copies a scalar tensor out as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Flattens a tensor into host f64 values.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_by_name() {
        let a = ParamStore::new(3, DType::F64);
        let b = ParamStore::new(3, DType::F64);
        b.param("other", &[4], Init::Normal { std: 1.0 }).unwrap();
        let ta = a.param("w", &[2, 3], Init::Normal { std: 1.0 }).unwrap();
        let tb = b.param("w", &[2, 3], Init::Normal { std: 1.0 }).unwrap();
        assert_eq!(to_f64_vec(&ta).unwrap(), to_f64_vec(&tb).unwrap());
        assert_eq!(a.checksum().unwrap().len(), 64);
    }

    #[test]
    fn mlp_matches_manual_forward() {
        let store = ParamStore::new(1, DType::F64);
        let mlp = Mlp::new(&store, "m", 3, 4, 2).unwrap();
        let x = [0.5, -1.0, 2.0];
        let w1 = mlp.fc1.weight().to_vec2::<f64>().unwrap();
        let b1 = mlp.fc1.bias().unwrap().to_vec1::<f64>().unwrap();
        let w2 = mlp.fc2.weight().to_vec2::<f64>().unwrap();
        let b2 = mlp.fc2.bias().unwrap().to_vec1::<f64>().unwrap();
        let h: Vec<f64> = (0..4)
            .map(|i| (b1[i] + (0..3).map(|j| w1[i][j] * x[j]).sum::<f64>()).max(0.0))
            .collect();
        let want: Vec<f64> = (0..2)
            .map(|i| b2[i] + (0..4).map(|j| w2[i][j] * h[j]).sum::<f64>())
            .collect();
        let xt = Tensor::new(&[x], &Device::Cpu).unwrap();
        let got = to_f64_vec(&mlp.forward(&xt).unwrap()).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_rejects_wrong_input_dim() {
        let store = ParamStore::new(1, DType::F32);
        let mlp = Mlp::new(&store, "m", 3, 4, 2).unwrap();
        let x = Tensor::zeros((1, 5), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(mlp.forward(&x), Err(Error::DimMismatch { expected: 3, got: 5 })));
    }

    #[test]
    fn causal_mask_layout() {
        let m = attention_mask(&[vec![true, true, false]], 3, true, DType::F64, &Device::Cpu).unwrap();
        let v = m.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let vis: Vec<bool> = v.iter().map(|x| *x == 0.0).collect();
        assert_eq!(
            vis,
            vec![true, false, false, true, true, false, true, true, false]
        );
    }
}
