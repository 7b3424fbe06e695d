//! End-to-end orchestration: corpus loading, T2R and R2T generation, SAIG
//! training and the synthetic benchmark.

mod config;
mod losscheck;
pub mod synthbench;
mod t2r;

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

pub use config::*;
pub use losscheck::{loss_check, LossCheckReport};
pub use t2r::{phrase_pool, t2r_image, T2rImage, T2rStats};

use crate::dataset::{CorpusManifest, CorpusRecord, ImageRef, PairRecord};
use crate::error::{Error, Result};
use crate::filters::HierarchyLexicon;
use crate::providers::remote::remote_suite;
use crate::providers::synth::{allocation_task, render, sample_corpus, suite_for, AllocationExample, Registry, SynthWorld, WorldConfig};
use crate::providers::{stable_hash, Image, ProviderSuite};
use crate::r2t::{generate_r2t, R2tStats};
use crate::saig::{accuracy, LabeledScene, SaigModel, SceneInput, Trainer};

/// Providers, lexicon and (for synthetic runs) the world behind them.
#[derive(Clone)]
pub struct Runtime {
    pub config: PipelineConfig,
    pub suite: ProviderSuite,
    pub world: Option<Arc<SynthWorld>>,
    pub lexicon: HierarchyLexicon,
}

impl Runtime {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let (suite, world) = match &config.providers {
            ProviderConfig::Synthetic(s) => {
                let world = Arc::new(synthetic_world(s)?);
                (suite_for(world.clone(), config.seed), Some(world))
            }
            ProviderConfig::Remote(r) => (remote_suite(r.clone()), None),
        };
        let lexicon = match &config.filters.lexicon {
            Some(p) => HierarchyLexicon::load(p)?,
            None => HierarchyLexicon::default(),
        };
        Ok(Self { config, suite, world, lexicon })
    }

    pub fn world(&self) -> Result<&Arc<SynthWorld>> {
        self.world
            .as_ref()
            .ok_or_else(|| Error::Config("this operation needs synthetic providers".into()))
    }

    /// The configured manifest, or a synthetic corpus over the visible categories.
    pub fn corpus(&self) -> Result<CorpusManifest> {
        if let Some(path) = &self.config.corpus.manifest {
            return CorpusManifest::load(path);
        }
        let world = self.world()?;
        synthetic_corpus(world.visible(), self.config.corpus.synthetic_scenes, self.config.seed)
    }

    pub fn load_image(&self, record: &CorpusRecord) -> Result<Image> {
        match &record.image_ref {
            ImageRef::Path { path } => load_png(path),
            ImageRef::Synth { scene, seed } => {
                let world = self.world()?;
                if let Some(o) = scene.objects.iter().find(|o| world.visible().get(&o.category).is_none()) {
                    return Err(Error::InvalidArgument(format!(
                        "image `{}` contains `{}`, which generation may not see",
                        record.image_id, o.category
                    )));
                }
                render(scene, &world.registry, *seed)
            }
        }
    }

    /// Runs `f` on a pool sized by the parallelism config and provider limits.
    pub fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        let mut threads = self.config.parallelism.threads;
        if threads == 0 {
            threads = rayon::current_num_threads();
        }
        threads = threads.min(self.suite.max_in_flight).max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(pool.install(f))
    }
}

pub fn synthetic_world(s: &SyntheticProviders) -> Result<SynthWorld> {
    let registry = Registry::generate(s.base_categories, s.novel_categories)?;
    SynthWorld::new(
        registry,
        WorldConfig { dim: s.dim, seed: s.world_seed, private_weight: s.private_weight, ..WorldConfig::default() },
    )
}

pub fn synthetic_corpus(registry: &Registry, scenes: usize, seed: u64) -> Result<CorpusManifest> {
    let records = sample_corpus(registry, scenes, seed)
        .into_iter()
        .enumerate()
        .map(|(i, s)| CorpusRecord {
            image_id: format!("synth-{i:05}"),
            image_ref: ImageRef::Synth { scene: s.scene, seed: s.render_seed },
            caption: s.caption,
        })
        .collect();
    CorpusManifest::new(records)
}

fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::InvalidArgument(format!("cannot read image {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Image::new(w, h, img.into_raw()))
}

/// Per-image seed derived from the run seed and the image id.
pub fn image_seed(seed: u64, image_id: &str, sample: usize) -> u64 {
    stable_hash(&[&seed.to_le_bytes(), image_id.as_bytes(), &(sample as u64).to_le_bytes()])
}

/// Output of a generation run: records ordered by image id plus counters.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RunOutput<S> {
    pub records: Vec<PairRecord>,
    pub stats: S,
    pub images: usize,
    /// Images skipped because a provider failed.
    pub failed_images: usize,
}

impl<S> RunOutput<S> {
    pub fn skip_rate(&self) -> f64 {
        if self.images == 0 { 0.0 } else { self.failed_images as f64 / self.images as f64 }
    }
}

fn sorted_by_id(corpus: &CorpusManifest) -> Vec<&CorpusRecord> {
    let mut items: Vec<&CorpusRecord> = corpus.records.iter().collect();
    items.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    items
}

/// Text-to-region generation over a corpus with a trained guider.
pub fn run_t2r(rt: &Runtime, corpus: &CorpusManifest, model: &SaigModel) -> Result<RunOutput<T2rStats>> {
    let items = sorted_by_id(corpus);
    let pool = phrase_pool(rt, &items)?;
    let results: Vec<Result<T2rImage>> = rt.install(|| {
        items
            .par_iter()
            .map(|rec| {
                let image = rt.load_image(rec)?;
                t2r_image(rt, model, &pool, rec, &image)
            })
            .collect()
    })?;
    let mut out: RunOutput<T2rStats> = RunOutput { images: items.len(), ..RunOutput::default() };
    for (rec, r) in items.iter().zip(results) {
        match r {
            Ok(img) => {
                out.stats.merge(&img.stats);
                out.records.extend(img.records);
            }
            Err(e) => {
                log::warn!("t2r skipped `{}`: {e}", rec.image_id);
                out.failed_images += 1;
            }
        }
    }
    Ok(out)
}

/// Region-to-text generation over a corpus.
pub fn run_r2t(rt: &Runtime, corpus: &CorpusManifest) -> Result<RunOutput<R2tStats>> {
    let items = sorted_by_id(corpus);
    let results: Vec<Result<(Vec<PairRecord>, R2tStats)>> = rt.install(|| {
        items
            .par_iter()
            .map(|rec| {
                let image = rt.load_image(rec)?;
                generate_r2t(&image, &rec.image_id, &rt.suite, &rt.config.r2t)
            })
            .collect()
    })?;
    let mut out: RunOutput<R2tStats> = RunOutput { images: items.len(), ..RunOutput::default() };
    for (rec, r) in items.iter().zip(results) {
        match r {
            Ok((records, stats)) => {
                out.stats.merge(&stats);
                out.records.extend(records);
            }
            Err(e) => {
                log::warn!("r2t skipped `{}`: {e}", rec.image_id);
                out.failed_images += 1;
            }
        }
    }
    Ok(out)
}

/// Builds guider training scenes from synthetic allocation examples.
pub fn labeled_scenes(suite: &ProviderSuite, world: &SynthWorld, examples: &[AllocationExample]) -> Result<Vec<LabeledScene>> {
    examples
        .par_iter()
        .map(|e| {
            let img = render(&e.sample.scene, &world.registry, e.sample.render_seed)?;
            let boxes: Vec<_> = e.boxes.iter().map(|b| b.bbox).collect();
            let phrases = e
                .phrases
                .iter()
                .map(|p| suite.text_encoder.embed_text(p).map(|v| v.into_vec()))
                .collect::<std::result::Result<_, _>>()?;
            Ok(LabeledScene {
                input: SceneInput {
                    caption: suite.text_encoder.embed_text(&e.sample.caption)?.into_vec(),
                    canvas: suite.embed_canvas(&img, &boxes)?.into_vec(),
                    phrases,
                    boxes,
                },
                gold: e.gold.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SaigTrainReport {
    pub steps: usize,
    pub final_loss: f64,
    pub eval_accuracy: f64,
}

/// Trains a guider on the visible categories of the synthetic world.
pub fn train_saig(rt: &Runtime, steps: usize, seed: u64) -> Result<(SaigModel, SaigTrainReport)> {
    let world = rt.world()?;
    let section = &rt.config.saig;
    let train = labeled_scenes(&rt.suite, world, &allocation_task(world.visible(), section.train_scenes, seed))?;
    let eval = labeled_scenes(
        &rt.suite,
        world,
        &allocation_task(world.visible(), section.eval_scenes.max(1), seed ^ 0xE7A1),
    )?;
    let mut model = SaigModel::new(section.model)?;
    let mut trainer = Trainer::new(&model, section.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut final_loss = f64::NAN;
    for step in 0..steps {
        let mut batch = Vec::with_capacity(section.batch_size);
        while batch.len() < section.batch_size {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(train[order.pop().expect("non-empty")].clone());
        }
        final_loss = trainer.train_step(&mut model, &batch)?;
        if step.is_multiple_of(500) {
            log::info!("saig step {step}: loss {final_loss:.4}");
        }
    }
    let eval_accuracy = accuracy(&model, &eval)?;
    Ok((model, SaigTrainReport { steps, final_loss, eval_accuracy }))
}
