use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::beam::{generate, BeamConfig, Decoding};
use super::model::Generator;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub beam_size: usize,
    pub top_k: usize,
    pub samples: usize,
    /// Mean over repeats of the per-sample latency.
    pub mean_latency_s: f64,
    /// Standard deviation across repeats.
    pub std: f64,
    pub repeats: Vec<f64>,
    pub hardware: String,
}

pub fn hardware_description() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{cpu}; {threads} hardware threads; {}-{}", std::env::consts::OS, std::env::consts::ARCH)
}

/// Per-sample generation latency (one history per call) for each beam size,
/// after one warm-up pass.
pub fn benchmark_inference(
    model: &Generator,
    dec: &Decoding<'_>,
    histories: &[&[u32]],
    beam_sizes: &[usize],
    top_k: usize,
    repeats: usize,
) -> Result<Vec<TimingReport>> {
    if histories.is_empty() || repeats == 0 {
        return Err(Error::Precondition("benchmark needs histories and at least one repeat".into()));
    }
    let mut out = Vec::new();
    for &beam_size in beam_sizes {
        let cfg = BeamConfig {
            beam_size,
            top_k,
            constrained: false,
        };
        generate(model, dec, &histories[..1], &cfg)?;
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            for h in histories {
                generate(model, dec, std::slice::from_ref(h), &cfg)?;
            }
            times.push(start.elapsed().as_secs_f64() / histories.len() as f64);
        }
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / times.len() as f64;
        out.push(TimingReport {
            beam_size,
            top_k,
            samples: histories.len(),
            mean_latency_s: mean,
            std: var.sqrt(),
            repeats: times,
            hardware: hardware_description(),
        });
    }
    Ok(out)
}
