use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::pipeline::{generate_and_evaluate, tokenize, EvalConfig, IdBundle};
use super::report::{MetricReport, RunMetrics};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::stage1::Stage1Config;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoMim,
    NoRec,
    NoUnified,
    /// Similarity embedding frozen at ones.
    S,
    /// Sub-token embeddings inherited from the stage-1 codebooks.
    E,
    NoId,
    NoText,
    NoImage,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::NoMim,
        Variant::NoRec,
        Variant::NoUnified,
        Variant::S,
        Variant::E,
        Variant::NoId,
        Variant::NoText,
        Variant::NoImage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMim => "no-mim",
            Variant::NoRec => "no-rec",
            Variant::NoUnified => "no-u",
            Variant::S => "s",
            Variant::E => "e",
            Variant::NoId => "no-id",
            Variant::NoText => "no-text",
            Variant::NoImage => "no-image",
        }
    }

    /// Applies the variant to base configurations.
    pub fn apply(self, s1: &mut Stage1Config, gen: &mut GeneratorConfig) {
        let a = &mut s1.ablation;
        match self {
            Variant::Full => {}
            Variant::NoMim => a.no_mim = true,
            Variant::NoRec => a.no_rec = true,
            Variant::NoUnified => a.no_shared_codebook = true,
            Variant::S => gen.freeze_sim_ones = true,
            Variant::E => gen.inherit_codebooks = true,
            Variant::NoId => a.drop_id = true,
            Variant::NoText => a.drop_text = true,
            Variant::NoImage => a.drop_image = true,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .trim()
            .to_lowercase()
            .replace('¬', "no")
            .chars()
            .filter(|c| c.is_alphanumeric())
            .collect();
        Ok(match key.as_str() {
            "full" => Variant::Full,
            "nomim" => Variant::NoMim,
            "norec" => Variant::NoRec,
            "nou" | "nounified" | "noshared" => Variant::NoUnified,
            "s" => Variant::S,
            "e" => Variant::E,
            "noid" => Variant::NoId,
            "notext" => Variant::NoText,
            "noimage" => Variant::NoImage,
            _ => return Err(Error::Config(format!("unknown variant '{s}'"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SweepParam {
    /// Codebook levels L.
    Levels,
    /// Codes per level N.
    Codes,
    /// Codebook dimension D.
    Dim,
    /// Similarity buckets K.
    Buckets,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Levels => "L",
            SweepParam::Codes => "N",
            SweepParam::Dim => "D",
            SweepParam::Buckets => "K",
        }
    }

    pub fn apply(self, value: usize, s1: &mut Stage1Config, gen: &mut GeneratorConfig) -> Result<()> {
        match self {
            SweepParam::Levels => s1.levels = value,
            SweepParam::Codes => s1.codes = value,
            SweepParam::Dim => s1.dim = value,
            SweepParam::Buckets => {
                gen.k = u16::try_from(value).map_err(|_| Error::Config(format!("K = {value} is too large")))?;
            }
        }
        Ok(())
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "L" | "l" | "levels" => SweepParam::Levels,
            "N" | "n" | "codes" => SweepParam::Codes,
            "D" | "d" | "dim" => SweepParam::Dim,
            "K" | "k" | "buckets" => SweepParam::Buckets,
            _ => return Err(Error::Config(format!("unknown sweep parameter '{s}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub sweeps: Vec<Sweep>,
    pub stage1: Stage1Config,
    pub generator: GeneratorConfig,
    pub eval: EvalConfig,
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() && self.sweeps.is_empty() {
            return Err(Error::Config("nothing to run: no variants and no sweeps".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        for (i, v) in self.variants.iter().enumerate() {
            if self.variants[..i].contains(v) {
                return Err(Error::Config(format!("variant {v} listed twice")));
            }
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(Error::Config(format!("seed {s} listed twice")));
            }
        }
        if self.stage1.ablation != Default::default() || self.generator.freeze_sim_ones || self.generator.inherit_codebooks {
            return Err(Error::Config(
                "base configuration already carries ablation switches; select variants instead".into(),
            ));
        }
        for sw in &self.sweeps {
            if sw.values.is_empty() {
                return Err(Error::Config(format!("sweep over {} has no values", sw.param.name())));
            }
        }
        self.eval.validate()
    }

    fn configs(&self, variant: Variant, seed: u64, sweep: Option<(SweepParam, usize)>) -> Result<(Stage1Config, GeneratorConfig)> {
        let mut s1 = self.stage1.clone();
        let mut g = self.generator.clone();
        variant.apply(&mut s1, &mut g);
        if let Some((p, v)) = sweep {
            p.apply(v, &mut s1, &mut g)?;
        }
        s1.seed = seed;
        g.seed = seed;
        s1.validate()?;
        Ok((s1, g))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: usize,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: SweepParam,
    pub points: Vec<SweepPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub ablation: Option<MetricReport>,
    pub sweeps: Vec<SweepReport>,
    /// Wall-clock seconds of the whole suite.
    pub elapsed_s: f64,
}

/// Trains and evaluates every (variant, seed) pair, reusing one tokenizer
/// across variants that only differ in the generator, then every sweep
/// point on the full model.
pub fn run_ablation_suite(ds: &Dataset, suite: &SuiteConfig) -> Result<SuiteReport> {
    suite.validate()?;
    let start = std::time::Instant::now();
    let mut cache: HashMap<String, IdBundle> = HashMap::new();
    let mut run = |s1: &Stage1Config, g: &GeneratorConfig, label: &str| -> Result<RunMetrics> {
        let key = serde_json::to_string(s1)?;
        if !cache.contains_key(&key) {
            log::info!("training tokenizer for {label} (seed {})", s1.seed);
            cache.clear();
            cache.insert(key.clone(), IdBundle::of(&tokenize(ds, s1)?)?);
        }
        log::info!("training generator for {label} (seed {})", g.seed);
        let out = generate_and_evaluate(ds, &cache[&key], g, &suite.eval, label)?;
        log::info!("{label} seed {}: {:?}", g.seed, out.metrics.metrics);
        Ok(out.metrics)
    };
    let ablation = if suite.variants.is_empty() {
        None
    } else {
        let mut runs = Vec::new();
        // Seed-major so variants sharing a tokenizer run back to back.
        let mut order = suite.variants.clone();
        order.sort_by_key(|v| generator_only(*v));
        for &seed in &suite.seeds {
            for &v in &order {
                let (s1, g) = suite.configs(v, seed, None)?;
                runs.push(run(&s1, &g, v.name())?);
            }
        }
        runs.sort_by_key(|r| {
            (
                suite.variants.iter().position(|v| v.name() == r.variant),
                r.seed,
            )
        });
        let baseline = if suite.variants.contains(&Variant::Full) { "full" } else { suite.variants[0].name() };
        Some(MetricReport::from_runs(runs, baseline)?)
    };
    let mut sweeps = Vec::new();
    for sw in &suite.sweeps {
        let mut points = Vec::new();
        for &value in &sw.values {
            let mut runs = Vec::new();
            for &seed in &suite.seeds {
                let (s1, g) = suite.configs(Variant::Full, seed, Some((sw.param, value)))?;
                let label = format!("{}={value}", sw.param.name());
                runs.push(run(&s1, &g, &label)?);
            }
            let label = runs[0].variant.clone();
            points.push(SweepPoint {
                value,
                report: MetricReport::from_runs(runs, &label)?,
            });
        }
        sweeps.push(SweepReport { param: sw.param, points });
    }
    Ok(SuiteReport {
        ablation,
        sweeps,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

/// Variants that reuse the full model's tokenizer sort after it.
fn generator_only(v: Variant) -> (bool, bool) {
    (!matches!(v, Variant::Full | Variant::S | Variant::E), v != Variant::Full)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("¬MIM".parse::<Variant>().unwrap(), Variant::NoMim);
        assert_eq!("¬U".parse::<Variant>().unwrap(), Variant::NoUnified);
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn conflicting_suites_are_rejected() {
        let base = SuiteConfig {
            variants: vec![Variant::Full, Variant::S],
            seeds: vec![1, 2],
            sweeps: vec![],
            stage1: Stage1Config::default(),
            generator: GeneratorConfig::default(),
            eval: EvalConfig::default(),
        };
        assert!(base.validate().is_ok());
        let mut c = base.clone();
        c.variants.push(Variant::S);
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.stage1.ablation.no_mim = true;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.seeds.clear();
        assert!(c.validate().is_err());
        let mut c = base;
        c.variants = vec![Variant::NoRec, Variant::NoId];
        assert!(c.configs(Variant::NoId, 1, None).is_ok());
    }
}
