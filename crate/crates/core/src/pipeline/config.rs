use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::SourceMix;
use crate::error::{Error, Result};
use crate::filters::{AdaptiveRegionFilter, AestheticBand};
use crate::lart::LartConfig;
use crate::providers::remote::RemoteConfig;
use crate::r2t::R2tConfig;
use crate::saig::{SaigConfig, DEFAULT_MAX_PAIRS, DEFAULT_TOP_P};
use crate::tinynn::OptimizerConfig;

/// The shipped default configuration.
pub const DEFAULT_CONFIG: &str = include_str!("../../data/default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub providers: ProviderConfig,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub saig: SaigSection,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub filters: FilterConfig,
    #[serde(default)]
    pub r2t: R2tConfig,
    #[serde(default)]
    pub lart: LartConfig,
    #[serde(default)]
    pub mix: SourceMix,
    #[serde(default)]
    pub parallelism: ParallelismConfig,
    #[serde(default)]
    pub synthbench: SynthbenchConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProviderConfig {
    Synthetic(SyntheticProviders),
    Remote(RemoteConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticProviders {
    pub base_categories: usize,
    pub novel_categories: usize,
    pub dim: usize,
    pub world_seed: u64,
    /// Weight of the category-private feature component; lower values make
    /// novel categories easier to reach from base supervision.
    pub private_weight: f64,
}

impl Default for SyntheticProviders {
    fn default() -> Self {
        Self { base_categories: 16, novel_categories: 8, dim: 64, world_seed: 0x5EED, private_weight: 0.5 }
    }
}

/// Where images and captions come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Manifest path; when absent a synthetic corpus is sampled.
    pub manifest: Option<PathBuf>,
    pub synthetic_scenes: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { manifest: None, synthetic_scenes: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaigSection {
    pub checkpoint: PathBuf,
    pub model: SaigConfig,
    pub optimizer: OptimizerConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for SaigSection {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("saig.ckpt"),
            model: SaigConfig::default(),
            optimizer: OptimizerConfig::default(),
            steps: 5000,
            batch_size: 8,
            train_scenes: 2000,
            eval_scenes: 300,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub top_p: f64,
    pub max_pairs: usize,
    pub samples_per_image: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { top_p: DEFAULT_TOP_P, max_pairs: DEFAULT_MAX_PAIRS, samples_per_image: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub aesthetic: AestheticBand,
    pub adaptive: AdaptiveRegionFilter,
    /// Lexicon JSON; the bundled one is used when absent.
    pub lexicon: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParallelismConfig {
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    /// Fraction of images allowed to fail before a run reports failure.
    pub max_skip_rate: f64,
}

impl Default for ParallelismConfig {
    fn default() -> Self {
        Self { threads: 0, max_skip_rate: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthbenchConfig {
    pub seeds: Vec<u64>,
    /// Captioned images per seed.
    pub images: usize,
    /// Novel-category test objects per seed.
    pub test_objects: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub fractions: Vec<f64>,
    pub saig_steps: usize,
    /// Contrastive temperature for the head.
    pub tau: f64,
    /// Std of the head's initial weights, times `1/sqrt(feature_dim)`.
    pub init_scale: f64,
    pub weight_decay: f64,
    /// Queue texts whose cosine with the anchor text reaches this are not
    /// used as negatives.
    pub queue_mask_cosine: f64,
    /// Adjacent regions drawn around each anchor.
    pub adjacents: usize,
    /// Largest shift of an adjacent box, as a fraction of the anchor's size.
    pub adjacent_shift: f64,
    /// Jitter of evaluation boxes around the ground truth.
    pub eval_jitter: f64,
}

impl Default for SynthbenchConfig {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            images: 150,
            test_objects: 400,
            steps: 600,
            batch_size: 32,
            lr: 3e-3,
            fractions: vec![0.25, 0.5, 0.75, 1.0],
            saig_steps: 400,
            tau: 5.0,
            init_scale: 0.01,
            weight_decay: 0.0,
            queue_mask_cosine: 0.5,
            adjacents: 4,
            adjacent_shift: 0.15,
            eval_jitter: 0.15,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&std::fs::read_to_string(path)?)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn default_synthetic() -> Self {
        Self::from_toml(DEFAULT_CONFIG).expect("shipped config is valid")
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.saig.checkpoint);
        if let Some(p) = self.corpus.manifest.as_mut() {
            fix(p);
        }
        if let Some(p) = self.filters.lexicon.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.providers {
            ProviderConfig::Synthetic(s) => {
                if s.base_categories == 0 || s.dim == 0 {
                    return Err(Error::Config("synthetic world needs base categories and a positive dim".into()));
                }
                if !(s.private_weight >= 0.0 && s.private_weight.is_finite()) {
                    return Err(Error::Config("providers.private_weight must be finite and non-negative".into()));
                }
                if s.dim != self.saig.model.transformer.dim {
                    return Err(Error::Config(format!(
                        "embedding dim {} differs from saig dim {}",
                        s.dim, self.saig.model.transformer.dim
                    )));
                }
            }
            ProviderConfig::Remote(r) => {
                if r.dim != self.saig.model.transformer.dim {
                    return Err(Error::Config(format!(
                        "embedding dim {} differs from saig dim {}",
                        r.dim, self.saig.model.transformer.dim
                    )));
                }
            }
        }
        self.saig.model.validate()?;
        self.saig.optimizer.validate()?;
        if self.saig.batch_size == 0 || self.saig.train_scenes == 0 {
            return Err(Error::Config("saig.batch_size and saig.train_scenes must be at least 1".into()));
        }
        if !(self.sampler.top_p > 0.0 && self.sampler.top_p <= 1.0) {
            return Err(Error::Config(format!("sampler.top_p {} outside (0, 1]", self.sampler.top_p)));
        }
        if self.sampler.max_pairs == 0 || self.sampler.samples_per_image == 0 {
            return Err(Error::Config("sampler.max_pairs and samples_per_image must be at least 1".into()));
        }
        self.filters.aesthetic.validate()?;
        self.filters.adaptive.validate()?;
        self.r2t.validate()?;
        self.lart.validate()?;
        self.mix.validate()?;
        if !(0.0..=1.0).contains(&self.parallelism.max_skip_rate) {
            return Err(Error::Config("parallelism.max_skip_rate outside [0, 1]".into()));
        }
        let sb = &self.synthbench;
        if sb.seeds.is_empty() || sb.batch_size == 0 || sb.images == 0 || sb.test_objects == 0 {
            return Err(Error::Config("synthbench needs seeds, images, test objects and a batch size".into()));
        }
        if !(sb.lr > 0.0) || sb.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config("synthbench lr must be positive and fractions in (0, 1]".into()));
        }
        if !(sb.tau > 0.0 && sb.tau.is_finite()) || !(sb.init_scale >= 0.0) || !(sb.weight_decay >= 0.0) {
            return Err(Error::Config("synthbench tau must be positive, init_scale and weight_decay non-negative".into()));
        }
        if !(-1.0..=1.0).contains(&sb.queue_mask_cosine) {
            return Err(Error::Config("synthbench.queue_mask_cosine outside [-1, 1]".into()));
        }
        if !(0.0..1.0).contains(&sb.adjacent_shift) || !(0.0..1.0).contains(&sb.eval_jitter) {
            return Err(Error::Config("synthbench adjacent_shift and eval_jitter must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Stable hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", crate::providers::stable_hash(&[json.as_bytes()]))
    }
}
