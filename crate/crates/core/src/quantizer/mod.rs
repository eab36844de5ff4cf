//! Residual quantization over a codebook bank shared by the behavior
//! signals, the straight-through estimator, RQ losses, reconstruction
//! decoders and semantic-ID assembly.

mod kmeans;
mod semantic_id;

pub use kmeans::kmeans;
pub use semantic_id::{CollisionReport, SemanticIdTable};

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::disentangle::Modality;
use crate::error::{Error, Result};
use crate::nn::{to_f64_vec, Init, Mlp, ParamStore};
use crate::rng::Rng;
use rand::Rng as _;

/// The three behavior signals of an item, in semantic-ID order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Signal {
    Id,
    Text,
    Image,
}

impl Signal {
    pub const ALL: [Signal; 3] = [Signal::Id, Signal::Text, Signal::Image];

    pub fn name(self) -> &'static str {
        match self {
            Signal::Id => "id",
            Signal::Text => "text",
            Signal::Image => "image",
        }
    }

    pub fn modality(self) -> Option<Modality> {
        match self {
            Signal::Id => None,
            Signal::Text => Some(Modality::Text),
            Signal::Image => Some(Modality::Image),
        }
    }
}

/// `levels x codes x dim` trainable code vectors; level `l` is `C^l`.
#[derive(Debug, Clone)]
pub struct CodebookBank {
    name: String,
    entries: Tensor,
    levels: usize,
    codes: usize,
    dim: usize,
}

impl CodebookBank {
    pub fn new(store: &ParamStore, name: &str, levels: usize, codes: usize, dim: usize) -> Result<Self> {
        if levels == 0 || codes == 0 || dim == 0 {
            return Err(Error::Config(format!("codebook shape {levels}x{codes}x{dim} is empty")));
        }
        let entries = store.param(name, &[levels, codes, dim], Init::Normal { std: 0.1 })?;
        Ok(Self {
            name: name.to_string(),
            entries,
            levels,
            codes,
            dim,
        })
    }

    /// Wraps a fixed `[L, N, D]` tensor (not registered in any store).
    pub fn from_entries(entries: Tensor) -> Result<Self> {
        let (levels, codes, dim) = entries.dims3()?;
        Ok(Self {
            name: String::new(),
            entries,
            levels,
            codes,
            dim,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn codes(&self) -> usize {
        self.codes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn level(&self, l: usize) -> Result<Tensor> {
        Ok(self.entries.get(l)?)
    }

    pub fn to_host(&self) -> Result<HostBank> {
        Ok(HostBank {
            levels: self.levels,
            codes: self.codes,
            dim: self.dim,
            data: to_f64_vec(&self.entries)?,
        })
    }

    /// Writes host values back into the bank's parameter.
    pub fn assign(&self, store: &ParamStore, host: &HostBank) -> Result<()> {
        let t = Tensor::from_vec(host.data.clone(), (host.levels, host.codes, host.dim), self.entries.device())?;
        store.set(&self.name, &t)
    }
}

/// Host-side copy of a bank used for the nearest-code scan.
#[derive(Debug, Clone, PartialEq)]
pub struct HostBank {
    pub levels: usize,
    pub codes: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl HostBank {
    pub fn level(&self, l: usize) -> &[f64] {
        let n = self.codes * self.dim;
        &self.data[l * n..(l + 1) * n]
    }

    pub fn code(&self, l: usize, c: usize) -> &[f64] {
        &self.level(l)[c * self.dim..(c + 1) * self.dim]
    }

    fn code_mut(&mut self, l: usize, c: usize) -> &mut [f64] {
        let start = (l * self.codes + c) * self.dim;
        &mut self.data[start..start + self.dim]
    }
}

/// Codes, quantized vector and residual chain of one input vector.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    pub codes: Vec<u32>,
    /// Sum of the selected code vectors.
    pub quantized: Vec<f64>,
    /// `residuals[0] = z`, `residuals[l + 1] = residuals[l] - c^l`.
    pub residuals: Vec<Vec<f64>>,
}

impl QuantizationResult {
    pub fn final_residual(&self) -> &[f64] {
        self.residuals.last().expect("residual chain is never empty")
    }
}

/// Greedy residual quantization: at each level pick the code nearest (in
/// squared Euclidean distance, lowest index on ties) to the current
/// residual, then subtract it.
pub fn rq_quantize(z: &[f64], bank: &HostBank) -> Result<QuantizationResult> {
    if z.len() != bank.dim {
        return Err(Error::DimMismatch {
            expected: bank.dim,
            got: z.len(),
        });
    }
    let mut residuals = Vec::with_capacity(bank.levels + 1);
    residuals.push(z.to_vec());
    let mut codes = Vec::with_capacity(bank.levels);
    let mut quantized = vec![0.0; bank.dim];
    for l in 0..bank.levels {
        let r = residuals.last().expect("non-empty");
        let c = kmeans::nearest(r, bank.level(l), bank.dim);
        let code = bank.code(l, c);
        let next: Vec<f64> = r.iter().zip(code).map(|(a, b)| a - b).collect();
        for (q, x) in quantized.iter_mut().zip(code) {
            *q += x;
        }
        codes.push(c as u32);
        residuals.push(next);
    }
    Ok(QuantizationResult {
        codes,
        quantized,
        residuals,
    })
}

/// Quantizes every row of a `[B, D]` tensor.
pub fn quantize_rows(z: &Tensor, bank: &HostBank) -> Result<Vec<QuantizationResult>> {
    let (_, d) = z.dims2()?;
    let flat = to_f64_vec(z)?;
    flat.chunks_exact(d).map(|row| rq_quantize(row, bank)).collect()
}

/// Differentiable view of a batch quantization with fixed code choices.
#[derive(Debug, Clone)]
pub struct ResidualLookup {
    /// Selected code vectors per level, `[B, D]` each; gradient reaches the bank.
    pub selected: Vec<Tensor>,
    /// Residual entering each level, `[B, D]` each; `residuals[0] = z`.
    pub residuals: Vec<Tensor>,
    /// Sum of `selected`.
    pub quantized: Tensor,
}

/// Gathers the chosen codes from `bank` and rebuilds the residual chain.
/// Residuals subtract stop-gradient copies of the codes, so the gradient of
/// any residual with respect to `z` is the identity.
pub fn residual_lookup(z: &Tensor, codes: &[Vec<u32>], bank: &CodebookBank) -> Result<ResidualLookup> {
    let (b, d) = z.dims2()?;
    if d != bank.dim() {
        return Err(Error::DimMismatch {
            expected: bank.dim(),
            got: d,
        });
    }
    if codes.len() != b {
        return Err(Error::Misaligned(format!("{} code rows for batch {b}", codes.len())));
    }
    let mut selected = Vec::with_capacity(bank.levels());
    let mut residuals = Vec::with_capacity(bank.levels());
    let mut r = z.clone();
    for l in 0..bank.levels() {
        let idx: Vec<u32> = codes.iter().map(|c| c[l]).collect();
        let idx = Tensor::from_vec(idx, b, z.device())?;
        let c = bank.level(l)?.index_select(&idx, 0)?;
        residuals.push(r.clone());
        r = (&r - c.detach())?;
        selected.push(c);
    }
    let mut quantized = selected[0].clone();
    for c in &selected[1..] {
        quantized = (&quantized + c)?;
    }
    Ok(ResidualLookup {
        selected,
        residuals,
        quantized,
    })
}

/// `sum_l ( |sg[r^l] - c^l|^2 + alpha |r^l - sg[c^l]|^2 )`, averaged over
/// the batch. The first term trains the codebook, the second commits the
/// encoder to its codes.
pub fn rq_loss(lookup: &ResidualLookup, alpha: f64) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (r, c) in lookup.residuals.iter().zip(&lookup.selected) {
        let codebook = (r.detach() - c)?.sqr()?.sum(D::Minus1)?;
        let commit = (r - c.detach())?.sqr()?.sum(D::Minus1)?;
        let level = (codebook + (commit * alpha)?)?;
        total = Some(match total {
            None => level,
            Some(t) => (t + level)?,
        });
    }
    Ok(total.expect("at least one level").mean_all()?)
}

/// Forward value `quantized` (bit-exact); gradient with respect to `z` is
/// the identity and gradient into `quantized` passes through unchanged.
pub fn straight_through(z: &Tensor, quantized: &Tensor) -> Result<Tensor> {
    if z.dims() != quantized.dims() {
        return Err(Error::Misaligned(format!(
            "straight-through shapes {:?} vs {:?}",
            z.dims(),
            quantized.dims()
        )));
    }
    Ok((quantized + (z - z.detach())?)?)
}

/// Which bank each signal quantizes against.
#[derive(Debug, Clone)]
pub struct CodebookSet {
    banks: Vec<CodebookBank>,
    signals: Vec<Signal>,
    shared: bool,
}

impl CodebookSet {
    /// One bank for all `signals` when `shared`, else one bank per signal.
    pub fn new(store: &ParamStore, signals: &[Signal], shared: bool, levels: usize, codes: usize, dim: usize) -> Result<Self> {
        let banks = if shared {
            vec![CodebookBank::new(store, "codebook.shared", levels, codes, dim)?]
        } else {
            signals
                .iter()
                .map(|s| CodebookBank::new(store, &format!("codebook.{}", s.name()), levels, codes, dim))
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Self {
            banks,
            signals: signals.to_vec(),
            shared,
        })
    }

    pub fn shared(&self) -> bool {
        self.shared
    }

    pub fn banks(&self) -> &[CodebookBank] {
        &self.banks
    }

    pub fn signals(&self) -> &[Signal] {
        &self.signals
    }

    pub fn bank_index(&self, signal: Signal) -> Result<usize> {
        if self.shared {
            return Ok(0);
        }
        self.signals
            .iter()
            .position(|&s| s == signal)
            .ok_or_else(|| Error::Config(format!("signal {} has no codebook", signal.name())))
    }

    pub fn bank_for(&self, signal: Signal) -> Result<&CodebookBank> {
        Ok(&self.banks[self.bank_index(signal)?])
    }

    /// Signals quantized against bank `i`.
    pub fn signals_of_bank(&self, i: usize) -> Vec<Signal> {
        if self.shared {
            self.signals.clone()
        } else {
            vec![self.signals[i]]
        }
    }
}

/// Maps `[q ; z_specific]` (or just `q` without a specific encoder) back to
/// the modality's input space.
#[derive(Debug, Clone)]
pub struct ReconDecoder {
    pub modality: Modality,
    pub mlp: Mlp,
    pub takes_specific: bool,
}

impl ReconDecoder {
    pub fn new(store: &ParamStore, modality: Modality, dim: usize, out_dim: usize, takes_specific: bool) -> Result<Self> {
        let in_dim = if takes_specific { 2 * dim } else { dim };
        Ok(Self {
            modality,
            mlp: Mlp::new(store, &format!("dec.{}", modality.name()), in_dim, 2 * dim, out_dim)?,
            takes_specific,
        })
    }

    pub fn reconstruct(&self, q_behavior: &Tensor, z_specific: Option<&Tensor>) -> Result<Tensor> {
        let input = match (self.takes_specific, z_specific) {
            (true, Some(s)) => Tensor::cat(&[q_behavior, s], D::Minus1)?,
            (false, None) => q_behavior.clone(),
            (true, None) => {
                return Err(Error::Misaligned("decoder expects a modality-specific input".into()));
            }
            (false, Some(_)) => {
                return Err(Error::Misaligned("decoder takes no modality-specific input".into()));
            }
        };
        self.mlp.forward(&input)
    }
}

/// `|x - x_hat|^2` summed over dims, averaged over the batch.
pub fn recon_loss(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    if x.dims() != x_hat.dims() {
        return Err(Error::Misaligned(format!("reconstruction shapes {:?} vs {:?}", x.dims(), x_hat.dims())));
    }
    Ok((x - x_hat)?.sqr()?.sum(D::Minus1)?.mean_all()?)
}

/// Residual k-means initialization: level 0 is fit on `points`, each later
/// level on the residuals left by the levels before it.
pub fn kmeans_init(points: &[f64], bank: &CodebookBank, store: &ParamStore, rng: &mut Rng) -> Result<()> {
    let dim = bank.dim();
    if points.is_empty() || points.len() % dim != 0 {
        return Err(Error::Precondition("k-means init needs a non-empty point set".into()));
    }
    let mut residual = points.to_vec();
    let mut data = Vec::with_capacity(bank.levels() * bank.codes() * dim);
    for _ in 0..bank.levels() {
        let cents = kmeans(&residual, dim, bank.codes(), 25, rng);
        for r in residual.chunks_exact_mut(dim) {
            let c = kmeans::nearest(r, &cents, dim);
            for (x, y) in r.iter_mut().zip(&cents[c * dim..(c + 1) * dim]) {
                *x -= y;
            }
        }
        data.extend(cents);
    }
    bank.assign(
        store,
        &HostBank {
            levels: bank.levels(),
            codes: bank.codes(),
            dim,
            data,
        },
    )
}

/// Per-level code hit counts for one bank over an epoch.
#[derive(Debug, Clone)]
pub struct CodeUsage {
    levels: usize,
    codes: usize,
    counts: Vec<u64>,
}

impl CodeUsage {
    pub fn new(levels: usize, codes: usize) -> Self {
        Self {
            levels,
            codes,
            counts: vec![0; levels * codes],
        }
    }

    pub fn record(&mut self, codes: &[u32]) {
        for (l, &c) in codes.iter().enumerate() {
            self.counts[l * self.codes + c as usize] += 1;
        }
    }

    /// Fraction of codes used at each level.
    pub fn utilization(&self) -> Vec<f64> {
        (0..self.levels)
            .map(|l| {
                let used = self.counts[l * self.codes..(l + 1) * self.codes].iter().filter(|&&c| c > 0).count();
                used as f64 / self.codes as f64
            })
            .collect()
    }

    pub fn dead(&self) -> Vec<(usize, usize)> {
        (0..self.levels)
            .flat_map(|l| (0..self.codes).map(move |c| (l, c)))
            .filter(|&(l, c)| self.counts[l * self.codes + c] == 0)
            .collect()
    }

    pub fn reset(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
    }
}

/// Replaces every code unused this epoch by a random residual from
/// `pool[l]` (row-major residuals entering level `l`). Returns the number
/// of codes re-seeded.
pub fn reseed_dead_codes(
    bank: &CodebookBank,
    store: &ParamStore,
    usage: &CodeUsage,
    pool: &[Vec<f64>],
    rng: &mut Rng,
) -> Result<usize> {
    let dead = usage.dead();
    if dead.is_empty() {
        return Ok(0);
    }
    let dim = bank.dim();
    let mut host = bank.to_host()?;
    let mut n = 0;
    for (l, c) in dead {
        let rows = pool.get(l).map_or(0, |p| p.len() / dim);
        if rows == 0 {
            continue;
        }
        let pick = rng.random_range(0..rows);
        host.code_mut(l, c).copy_from_slice(&pool[l][pick * dim..(pick + 1) * dim]);
        n += 1;
    }
    bank.assign(store, &host)?;
    Ok(n)
}
