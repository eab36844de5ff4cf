use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::Stage1Config;
use crate::contrastive::{SequenceEncoder, SequenceEncoderConfig};
use crate::data::Dataset;
use crate::disentangle::{GaussianEstimator, IdEmbedding, Modality, ModalityEncoders};
use crate::error::{Error, Result};
use crate::nn::{to_f64_vec, ParamStore};
use crate::quantizer::{rq_quantize, CodebookSet, HostBank, ReconDecoder, SemanticIdTable, Signal};

const PARAMS_FILE: &str = "stage1.safetensors";
const CONFIG_FILE: &str = "stage1_config.json";
const META_FILE: &str = "stage1_meta.json";

/// Catalog-wide modality inputs, one row per item.
#[derive(Debug, Clone)]
pub struct Catalog {
    pub text: Tensor,
    pub image: Tensor,
}

impl Catalog {
    pub fn from_dataset(ds: &Dataset, dtype: DType) -> Result<Self> {
        let n = ds.n_items();
        let text: Vec<f32> = ds.items.iter().flat_map(|i| i.text_emb.iter().copied()).collect();
        let image: Vec<f32> = ds.items.iter().flat_map(|i| i.image_emb.iter().copied()).collect();
        Ok(Self {
            text: Tensor::from_vec(text, (n, ds.text_dim), &Device::Cpu)?.to_dtype(dtype)?,
            image: Tensor::from_vec(image, (n, ds.image_dim), &Device::Cpu)?.to_dtype(dtype)?,
        })
    }

    pub fn n_items(&self) -> usize {
        self.text.dims()[0]
    }

    pub fn modality(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Text => &self.text,
            Modality::Image => &self.image,
        }
    }
}

/// Encoder outputs for a set of items.
#[derive(Debug, Clone)]
pub struct SignalForward {
    /// One `[U, D]` tensor per retained signal.
    pub z: Vec<Tensor>,
    /// Per retained modality.
    pub behavior: Vec<Tensor>,
    pub specific: Vec<Option<Tensor>>,
    pub inputs: Vec<Tensor>,
}

/// Codes and quantized item vectors for the whole catalog.
#[derive(Debug, Clone)]
pub struct CatalogCodes {
    pub table: SemanticIdTable,
    /// Row-major `[n_items, S * D]` concatenation of each signal's quantized vector.
    pub vectors: Vec<f64>,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_items: usize,
    pub text_dim: usize,
    pub image_dim: usize,
}

pub struct Stage1Model {
    pub cfg: Stage1Config,
    pub shape: ModelShape,
    pub store: ParamStore,
    pub signals: Vec<Signal>,
    pub modalities: Vec<Modality>,
    pub id_emb: Option<IdEmbedding>,
    pub encoders: Vec<ModalityEncoders>,
    pub estimators: Vec<GaussianEstimator>,
    pub decoders: Vec<ReconDecoder>,
    pub codebooks: CodebookSet,
    pub seq: Option<SequenceEncoder>,
}

impl Stage1Model {
    pub const ESTIMATOR_PREFIX: &'static str = "est.";

    pub fn new(cfg: &Stage1Config, shape: ModelShape, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(cfg.seed, dtype);
        let signals = cfg.signals();
        let modalities = cfg.modalities();
        let d = cfg.dim;
        let id_emb = if signals.contains(&Signal::Id) {
            Some(IdEmbedding::new(&store, shape.n_items, d)?)
        } else {
            None
        };
        let in_dim = |m: Modality| match m {
            Modality::Text => shape.text_dim,
            Modality::Image => shape.image_dim,
        };
        let encoders = modalities
            .iter()
            .map(|&m| ModalityEncoders::new(&store, m, in_dim(m), d, cfg.uses_specific()))
            .collect::<Result<Vec<_>>>()?;
        let estimators = if cfg.uses_mim() {
            modalities
                .iter()
                .map(|m| GaussianEstimator::new(&store, &format!("{}{}", Self::ESTIMATOR_PREFIX, m.name()), d))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let decoders = modalities
            .iter()
            .map(|&m| ReconDecoder::new(&store, m, d, in_dim(m), cfg.uses_specific()))
            .collect::<Result<Vec<_>>>()?;
        let codebooks = CodebookSet::new(&store, &signals, !cfg.ablation.no_shared_codebook, cfg.levels, cfg.codes, d)?;
        let seq = if cfg.uses_rec() {
            let sc = SequenceEncoderConfig {
                io_dim: signals.len() * d,
                model_dim: cfg.seq_dim,
                heads: cfg.seq_heads,
                layers: cfg.seq_layers,
                max_len: cfg.max_len,
            };
            Some(SequenceEncoder::new(&store, "seq", sc)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            shape,
            store,
            signals,
            modalities,
            id_emb,
            encoders,
            estimators,
            decoders,
            codebooks,
            seq,
        })
    }

    pub fn for_dataset(cfg: &Stage1Config, ds: &Dataset) -> Result<Self> {
        let shape = ModelShape {
            n_items: ds.n_items(),
            text_dim: ds.text_dim,
            image_dim: ds.image_dim,
        };
        Self::new(cfg, shape, DType::F32)
    }

    /// Runs every retained encoder on `items`.
    pub fn forward(&self, items: &[u32], catalog: &Catalog) -> Result<SignalForward> {
        let idx = Tensor::from_vec(items.to_vec(), items.len(), &Device::Cpu)?;
        let mut behavior = Vec::new();
        let mut specific = Vec::new();
        let mut inputs = Vec::new();
        for enc in &self.encoders {
            let x = catalog.modality(enc.modality).index_select(&idx, 0)?;
            let out = enc.encode_pair(&x)?;
            behavior.push(out.z_behavior);
            specific.push(out.z_specific);
            inputs.push(x);
        }
        let mut z = Vec::with_capacity(self.signals.len());
        for s in &self.signals {
            z.push(match s.modality() {
                None => self
                    .id_emb
                    .as_ref()
                    .ok_or_else(|| Error::Config("ID signal without ID table".into()))?
                    .lookup(&idx)?,
                Some(m) => {
                    let k = self.modality_index(m)?;
                    behavior[k].clone()
                }
            });
        }
        Ok(SignalForward {
            z,
            behavior,
            specific,
            inputs,
        })
    }

    pub fn modality_index(&self, m: Modality) -> Result<usize> {
        self.modalities
            .iter()
            .position(|&x| x == m)
            .ok_or_else(|| Error::Config(format!("modality {} is not part of the model", m.name())))
    }

    pub fn host_banks(&self) -> Result<Vec<HostBank>> {
        self.codebooks.banks().iter().map(|b| b.to_host()).collect()
    }

    /// Behavior vectors of every item, per signal, as host rows.
    pub fn catalog_signals(&self, catalog: &Catalog) -> Result<Vec<Vec<f64>>> {
        let n = catalog.n_items();
        let mut out = vec![Vec::with_capacity(n * self.cfg.dim); self.signals.len()];
        let all: Vec<u32> = (0..n as u32).collect();
        for chunk in all.chunks(1024) {
            let fwd = self.forward(chunk, catalog)?;
            for (s, z) in fwd.z.iter().enumerate() {
                out[s].extend(to_f64_vec(z)?);
            }
        }
        Ok(out)
    }

    /// Quantizes every item's signals against the current codebooks and
    /// assembles the semantic-ID table.
    pub fn quantize_catalog(&self, catalog: &Catalog) -> Result<CatalogCodes> {
        let n = catalog.n_items();
        let d = self.cfg.dim;
        let banks = self.host_banks()?;
        let signals = self.catalog_signals(catalog)?;
        let s_count = self.signals.len();
        let mut per_signal = vec![Vec::with_capacity(n); s_count];
        let mut vectors = vec![0.0; n * s_count * d];
        for (s, rows) in signals.iter().enumerate() {
            let bank = &banks[self.codebooks.bank_index(self.signals[s])?];
            for (i, z) in rows.chunks_exact(d).enumerate() {
                let q = rq_quantize(z, bank)?;
                let start = i * s_count * d + s * d;
                vectors[start..start + d].copy_from_slice(&q.quantized);
                per_signal[s].push(q.codes);
            }
        }
        let table = SemanticIdTable::from_signal_codes(&self.signals, self.cfg.levels, self.cfg.codes, &per_signal)?;
        Ok(CatalogCodes {
            table,
            vectors,
            width: s_count * d,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.save(&dir.join(PARAMS_FILE))?;
        crate::artifacts::write_json(&dir.join(CONFIG_FILE), &self.cfg)?;
        let meta = Meta {
            shape: self.shape,
            params: self.store.shape_manifest(),
            checksum: self.store.checksum()?,
        };
        crate::artifacts::write_json(&dir.join(META_FILE), &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let cfg: Stage1Config = serde_json::from_str(&read(CONFIG_FILE)?)?;
        let meta: Meta = serde_json::from_str(&read(META_FILE)?)?;
        let mut model = Self::new(&cfg, meta.shape, DType::F32)?;
        if model.store.shape_manifest() != meta.params {
            return Err(Error::Precondition(format!("checkpoint in {} does not match its config", dir.display())));
        }
        model.store.load(&dir.join(PARAMS_FILE))?;
        Ok(model)
    }

    pub fn exists(dir: &Path) -> bool {
        dir.join(PARAMS_FILE).exists() && dir.join(CONFIG_FILE).exists()
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    shape: ModelShape,
    params: std::collections::BTreeMap<String, Vec<usize>>,
    checksum: String,
}
