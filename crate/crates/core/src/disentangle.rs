//! Modality-specific and behavior-aligned encoders, the learnable item ID
//! table, and the CLUB mutual-information upper bound used to push the two
//! encoders' outputs apart.

use std::f64::consts::PI;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Init, Mlp, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
        }
    }
}

/// Outputs of one modality's encoder pair for a batch.
#[derive(Debug, Clone)]
pub struct EncoderPairOutput {
    /// Modality-specific representation; absent when the specific encoder
    /// has been ablated away.
    pub z_specific: Option<Tensor>,
    pub z_behavior: Tensor,
    pub modality: Modality,
}

/// The specific / behavior-aligned encoder pair of one modality.
#[derive(Debug, Clone)]
pub struct ModalityEncoders {
    pub modality: Modality,
    pub specific: Option<Mlp>,
    pub behavior: Mlp,
}

impl ModalityEncoders {
    /// Two-layer MLPs with hidden width `2 * dim`.
    pub fn new(store: &ParamStore, modality: Modality, in_dim: usize, dim: usize, with_specific: bool) -> Result<Self> {
        let m = modality.name();
        let specific = if with_specific {
            Some(Mlp::new(store, &format!("enc.{m}.specific"), in_dim, 2 * dim, dim)?)
        } else {
            None
        };
        Ok(Self {
            modality,
            specific,
            behavior: Mlp::new(store, &format!("enc.{m}.behavior"), in_dim, 2 * dim, dim)?,
        })
    }

    pub fn encode_pair(&self, x: &Tensor) -> Result<EncoderPairOutput> {
        let z_behavior = self.behavior.forward(x)?;
        let z_specific = self.specific.as_ref().map(|e| e.forward(x)).transpose()?;
        Ok(EncoderPairOutput {
            z_specific,
            z_behavior,
            modality: self.modality,
        })
    }
}

/// Learnable per-item ID representation, initialized in `(0, 0.01)`.
#[derive(Debug, Clone)]
pub struct IdEmbedding {
    table: Tensor,
}

impl IdEmbedding {
    pub const NAME: &'static str = "id_emb";

    pub fn new(store: &ParamStore, n_items: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: store.param(Self::NAME, &[n_items, dim], Init::Uniform { lo: 0.0, hi: 0.01 })?,
        })
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn lookup(&self, ids: &Tensor) -> Result<Tensor> {
        Ok(self.table.index_select(ids, 0)?)
    }
}

/// Variational conditional `q(z_specific | z_behavior)`: a diagonal
/// Gaussian whose mean and log-variance are MLPs of the behavior vector.
#[derive(Debug, Clone)]
pub struct GaussianEstimator {
    pub mean: Mlp,
    pub logvar: Mlp,
    pub logvar_bound: f64,
}

impl GaussianEstimator {
    pub const LOGVAR_BOUND: f64 = 8.0;

    pub fn new(store: &ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            mean: Mlp::new(store, &format!("{name}.mean"), dim, dim, dim)?,
            logvar: Mlp::new(store, &format!("{name}.logvar"), dim, dim, dim)?,
            logvar_bound: Self::LOGVAR_BOUND,
        })
    }

    pub fn from_parts(mean: Mlp, logvar: Mlp) -> Self {
        Self {
            mean,
            logvar,
            logvar_bound: Self::LOGVAR_BOUND,
        }
    }

    /// Mean and clamped log-variance for each conditioning row.
    pub fn params(&self, z_behavior: &Tensor) -> Result<(Tensor, Tensor)> {
        let mu = self.mean.forward(z_behavior)?;
        let lv = self
            .logvar
            .forward(z_behavior)?
            .clamp(-self.logvar_bound, self.logvar_bound)?;
        Ok((mu, lv))
    }

    /// `log q(z_specific[i] | z_behavior[i])` for aligned rows, shape `[B]`.
    pub fn log_density(&self, z_behavior: &Tensor, z_specific: &Tensor) -> Result<Tensor> {
        check_aligned(z_behavior, z_specific)?;
        let (mu, lv) = self.params(z_behavior)?;
        gaussian_log_density(z_specific, &mu, &lv)
    }

    /// Matrix `M[i][j] = log q(z_specific[j] | z_behavior[i])`, shape `[B, B]`.
    pub fn log_density_matrix(&self, z_behavior: &Tensor, z_specific: &Tensor) -> Result<Tensor> {
        check_aligned(z_behavior, z_specific)?;
        let (mu, lv) = self.params(z_behavior)?;
        gaussian_log_density(&z_specific.unsqueeze(0)?, &mu.unsqueeze(1)?, &lv.unsqueeze(1)?)
    }
}

/// `-0.5 * sum_d [ (y - mu)^2 exp(-lv) + lv + ln 2pi ]` over the last dim,
/// with broadcasting between `y` and `(mu, lv)`.
fn gaussian_log_density(y: &Tensor, mu: &Tensor, lv: &Tensor) -> Result<Tensor> {
    let sq = y.broadcast_sub(mu)?.sqr()?;
    let scaled = sq.broadcast_mul(&lv.neg()?.exp()?)?;
    let per_dim = scaled.broadcast_add(lv)?.affine(1.0, (2.0 * PI).ln())?;
    Ok((per_dim.sum(D::Minus1)? * -0.5)?)
}

fn check_aligned(a: &Tensor, b: &Tensor) -> Result<()> {
    let (na, da) = a.dims2()?;
    let (nb, db) = b.dims2()?;
    if na != nb {
        return Err(Error::Misaligned(format!("batch sizes differ: {na} vs {nb}")));
    }
    if da != db {
        return Err(Error::DimMismatch { expected: da, got: db });
    }
    if na == 0 {
        return Err(Error::Precondition("empty batch".into()));
    }
    Ok(())
}

/// CLUB upper bound for one modality:
/// `(1/N) sum_i [ log q(zs_i|zb_i) - (1/N) sum_j log q(zs_j|zb_i) ]`.
///
/// Written as the mean over `(i, j)` of `M[i][i] - M[i][j]`, so the single
/// sample case and a batch of identical specific vectors both give exactly 0.
pub fn club_mim_loss(z_behavior: &Tensor, z_specific: &Tensor, estimator: &GaussianEstimator) -> Result<Tensor> {
    let m = estimator.log_density_matrix(z_behavior, z_specific)?;
    let n = m.dim(0)?;
    let eye = Tensor::eye(n, m.dtype(), m.device())?;
    let diag = (&m * &eye)?.sum_keepdim(1)?;
    Ok(diag.broadcast_sub(&m)?.mean_all()?)
}

/// Maximum-likelihood objective for the estimator. Inputs are detached so
/// only the estimator's parameters receive gradient.
pub fn estimator_nll_loss(z_behavior: &Tensor, z_specific: &Tensor, estimator: &GaussianEstimator) -> Result<Tensor> {
    let ll = estimator.log_density(&z_behavior.detach(), &z_specific.detach())?;
    Ok(ll.mean_all()?.neg()?)
}
