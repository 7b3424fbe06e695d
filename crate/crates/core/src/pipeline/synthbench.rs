//! Synthetic benchmark: trains a linear region-embedding head on frozen
//! backbone features under several data arms and measures novel-category
//! region-to-text retrieval.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{phrase_pool, synthetic_corpus, t2r_image, train_saig, PipelineConfig, ProviderConfig, Runtime, SynthbenchConfig};
use crate::dataset::{interleave, route_record, route_source, DataSource, LossBranch, PairRecord, Provenance, StreamStep};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::lart::{lart_loss, plain_region_text_loss, Adjacent, Anchor, LartBatch, LartConfig, TextQueue};
use crate::providers::synth::{render, sample_objects, Registry, SynthScene, SynthWorld, BACKGROUND_WEIGHT, COLOR_WEIGHT};
use crate::providers::{stable_hash, Embedding, Image};
use crate::r2t::generate_r2t;
use crate::tinynn::{adamw_step, AdamState, Grads, OptimizerConfig, ParamSet, Tensor2D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Plain,
    Lart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arm {
    pub name: &'static str,
    pub t2r: bool,
    pub r2t: bool,
    pub loss: Loss,
}

pub const ARMS: [Arm; 5] = [
    Arm { name: "cap", t2r: false, r2t: false, loss: Loss::Plain },
    Arm { name: "cap+t2r", t2r: true, r2t: false, loss: Loss::Plain },
    Arm { name: "cap+r2t", t2r: false, r2t: true, loss: Loss::Plain },
    Arm { name: "cap+both", t2r: true, r2t: true, loss: Loss::Plain },
    Arm { name: "cap+both+lart", t2r: true, r2t: true, loss: Loss::Lart },
];

/// A training pair with the image its box refers to.
#[derive(Debug, Clone)]
struct TrainPair {
    image: Arc<Image>,
    record: PairRecord,
    text_emb: Vec<f64>,
}

/// Frozen backbone: pixel-weighted category, color and background features
/// of the region plus Gaussian noise.
pub fn backbone_features(world: &SynthWorld, image: &Image, region: &BBox, rng: &mut impl Rng) -> Vec<f64> {
    let space = &world.space;
    let fd = world.config.feature_dim;
    let mut f = vec![0.0; fd];
    let (x0, y0, x1, y1) = image.span(region);
    let total = ((x1 - x0) * (y1 - y0)) as f64;
    let Some(labels) = image.labels() else {
        return f;
    };
    let mut counts = vec![0usize; labels.objects.len() + 1];
    for y in y0..y1 {
        for x in x0..x1 {
            counts[image.label(x, y) as usize] += 1;
        }
    }
    let bg = &space.background_features[(image.fingerprint() % space.background_features.len() as u64) as usize];
    let mut add = |v: &[f64], w: f64| f.iter_mut().zip(v).for_each(|(a, b)| *a += w * b);
    add(bg, BACKGROUND_WEIGHT * counts[0] as f64 / total);
    for (obj, &n) in labels.objects.iter().zip(&counts[1..]) {
        if n == 0 {
            continue;
        }
        let frac = n as f64 / total;
        if let Some(c) = world.registry.index_of(&obj.category) {
            add(&space.features[c], frac);
        }
        add(&space.color_features[obj.color.index()], COLOR_WEIGHT * frac);
    }
    let noise = Normal::new(0.0, world.config.feature_noise).expect("finite std");
    f.iter_mut().for_each(|v| *v += noise.sample(rng));
    f
}

/// `b` with its corner and size each moved by up to `shift` of its extent.
fn jittered(b: &BBox, shift: f64, rng: &mut impl Rng) -> Option<BBox> {
    let mut s = |extent: f64| rng.random_range(-shift..=shift) * extent;
    let (dx, dy, dw, dh) = (s(b.w()), s(b.h()), s(b.w()), s(b.h()));
    BBox::new(b.x() + dx, b.y() + dy, b.w() + dw, b.h() + dh).ok()
}

/// Linear map from backbone features to the text embedding space.
struct Head {
    params: ParamSet,
    state: AdamState,
    optimizer: OptimizerConfig,
}

impl Head {
    fn new(dim: usize, feature_dim: usize, sb: &SynthbenchConfig, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, sb.init_scale / (feature_dim as f64).sqrt()).expect("finite std");
        let w: Vec<f64> = (0..dim * feature_dim).map(|_| normal.sample(rng)).collect();
        let mut params = ParamSet::new();
        params.add("head", Tensor2D::new(dim, feature_dim, w).expect("finite init"));
        let state = AdamState::new(&params);
        let optimizer = OptimizerConfig { lr: sb.lr, weight_decay: sb.weight_decay, ..OptimizerConfig::default() };
        Self { params, state, optimizer }
    }

    fn weight(&self) -> &Tensor2D {
        self.params.get(self.params.ids().next().expect("one parameter"))
    }

    fn embed(&self, features: &[f64]) -> Vec<f64> {
        let w = self.weight();
        (0..w.rows()).map(|r| w.row(r).iter().zip(features).map(|(a, b)| a * b).sum()).collect()
    }

    /// Accumulates `grad ⊗ features` into the weight gradient.
    fn accumulate(grads: &mut Grads, id: crate::tinynn::ParamId, grad: &[f64], features: &[f64]) {
        let g = grads.get_mut(id);
        for (r, gr) in grad.iter().enumerate() {
            if *gr == 0.0 {
                continue;
            }
            g.row_mut(r).iter_mut().zip(features).for_each(|(a, f)| *a += gr * f);
        }
    }
}

/// Training data and test set shared by every arm of one seed.
struct SeedData {
    world: Arc<SynthWorld>,
    caption: Vec<TrainPair>,
    t2r: Vec<TrainPair>,
    r2t: Vec<TrainPair>,
    detection_len: usize,
    test: Vec<(Arc<Image>, BBox, usize)>,
    novel_texts: Vec<Embedding>,
    saig_accuracy: f64,
}

fn pair(rt: &Runtime, image: &Arc<Image>, record: PairRecord) -> Result<TrainPair> {
    let text_emb = rt.suite.text_encoder.embed_text(&record.text)?.into_vec();
    Ok(TrainPair { image: image.clone(), record, text_emb })
}

fn seed_runtime(base: &PipelineConfig, seed: u64) -> Result<Runtime> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    match &mut cfg.providers {
        ProviderConfig::Synthetic(s) => s.world_seed = stable_hash(&[&s.world_seed.to_le_bytes(), &seed.to_le_bytes()]),
        ProviderConfig::Remote(_) => return Err(Error::Config("synthbench needs synthetic providers".into())),
    }
    Runtime::new(cfg)
}

fn prepare(base: &PipelineConfig, seed: u64) -> Result<SeedData> {
    let rt = seed_runtime(base, seed)?;
    let world = rt.world()?.clone();
    let sb = &base.synthbench;

    let corpus = synthetic_corpus(world.visible(), sb.images, seed)?;
    // Generation must never see a novel category.
    for rec in &corpus.records {
        let crate::dataset::ImageRef::Synth { scene, .. } = &rec.image_ref else { unreachable!() };
        assert!(scene.objects.iter().all(|o| world.visible().get(&o.category).is_some()));
        assert!(world.registry.novel().all(|c| !rec.caption.contains(&c.name)));
    }
    let images: Vec<Arc<Image>> = corpus
        .records
        .par_iter()
        .map(|r| rt.load_image(r).map(Arc::new))
        .collect::<Result<_>>()?;

    let mut caption = Vec::new();
    for (rec, img) in corpus.records.iter().zip(&images) {
        caption.push(pair(&rt, img, PairRecord::from_caption(&rec.image_id, &rec.caption, img.width(), img.height()))?);
    }

    let (model, report) = train_saig(&rt, sb.saig_steps, seed)?;
    let items: Vec<_> = corpus.records.iter().collect();
    let pool = phrase_pool(&rt, &items)?;
    let generated: Vec<_> = corpus
        .records
        .par_iter()
        .zip(&images)
        .map(|(rec, img)| t2r_image(&rt, &model, &pool, rec, img))
        .collect::<Result<_>>()?;
    let mut t2r = Vec::new();
    for g in generated {
        for s in g.samples {
            let img = Arc::new(s.image);
            for r in s.records {
                t2r.push(pair(&rt, &img, r)?);
            }
        }
    }

    let captioned: Vec<_> = corpus
        .records
        .par_iter()
        .zip(&images)
        .map(|(rec, img)| generate_r2t(img, &rec.image_id, &rt.suite, &base.r2t))
        .collect::<Result<_>>()?;
    let mut r2t = Vec::new();
    for ((records, _), img) in captioned.into_iter().zip(&images) {
        for r in records {
            r2t.push(pair(&rt, img, r)?);
        }
    }

    let novel: Vec<_> = world.registry.novel().cloned().collect();
    let novel_registry = Registry::new(novel.clone())?;
    let novel_texts = novel
        .iter()
        .map(|c| rt.suite.text_encoder.embed_text(&c.name))
        .collect::<std::result::Result<_, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7E57);
    let mut test = Vec::new();
    while test.len() < sb.test_objects {
        let count = rng.random_range(1..=3);
        let objects = sample_objects(&novel_registry, count, &mut rng);
        let scene = SynthScene::new(objects.clone());
        let img = Arc::new(render(&scene, &world.registry, rng.random())?);
        for o in &objects {
            let Some(jb) = jittered(&o.bbox, sb.eval_jitter, &mut rng) else { continue };
            let label = novel.iter().position(|c| c.name == o.category).expect("novel object");
            test.push((img.clone(), jb, label));
        }
    }
    test.truncate(sb.test_objects);

    Ok(SeedData {
        world,
        caption,
        t2r,
        r2t,
        detection_len: corpus.records.len(),
        test,
        novel_texts,
        saig_accuracy: report.eval_accuracy,
    })
}

fn train_arm(data: &SeedData, pairs: &[&TrainPair], arm: Arm, cfg: &PipelineConfig, seed: u64) -> Result<f64> {
    let sb = &cfg.synthbench;
    // Captions repeat category words, so near-duplicate queue texts would
    // act as false negatives.
    let lart_cfg = LartConfig {
        tau: sb.tau,
        mask_queue_duplicates: true,
        queue_mask_cosine: Some(sb.queue_mask_cosine),
        ..cfg.lart
    };
    let world = &data.world;
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&[&seed.to_le_bytes(), arm.name.as_bytes()]));
    let mut head = Head::new(world.dim(), world.config.feature_dim, sb, &mut ChaCha8Rng::seed_from_u64(seed));
    let id = head.params.ids().next().expect("one parameter");
    let mut queue = TextQueue::new(lart_cfg.queue_len)?;

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let mut stream = interleave(data.detection_len, pairs.len(), cfg.mix, seed)?;
    for _ in 0..sb.steps {
        let mut batch: Vec<&TrainPair> = Vec::with_capacity(sb.batch_size);
        while batch.len() < sb.batch_size {
            match stream.next().expect("endless stream") {
                // The detector branch is frozen in this benchmark.
                StreamStep::Detection(_) => debug_assert_eq!(route_source(DataSource::Detection), LossBranch::Detector),
                StreamStep::Pair(i) => batch.push(pairs[order[i]]),
            }
        }
        let mut anchors = Vec::with_capacity(batch.len());
        let mut feats = Vec::with_capacity(batch.len());
        for p in &batch {
            debug_assert!(matches!(route_record(&p.record), LossBranch::Lart { .. }));
            let f = backbone_features(world, &p.image, &p.record.bbox, &mut rng);
            let mut adjacents = Vec::with_capacity(sb.adjacents);
            let mut adj_feats = Vec::with_capacity(sb.adjacents);
            while adjacents.len() < sb.adjacents {
                let Some(b) = jittered(&p.record.bbox, sb.adjacent_shift, &mut rng) else { continue };
                let af = backbone_features(world, &p.image, &b, &mut rng);
                adjacents.push(Adjacent { region: head.embed(&af), iou: iou(&b, &p.record.bbox) });
                adj_feats.push(af);
            }
            anchors.push(Anchor {
                region: head.embed(&f),
                text: p.record.text.clone(),
                text_embedding: p.text_emb.clone(),
                adjacents,
            });
            feats.push((f, adj_feats));
        }
        let batch_loss = LartBatch { anchors };
        let out = match arm.loss {
            Loss::Lart => lart_loss(&batch_loss, &queue, &lart_cfg)?,
            Loss::Plain => plain_region_text_loss(&batch_loss, &queue, &lart_cfg)?,
        };
        let mut grads = Grads::zeros_like(&head.params);
        for (i, (f, adj)) in feats.iter().enumerate() {
            Head::accumulate(&mut grads, id, &out.anchor_grads[i], f);
            for (g, af) in out.adjacent_grads[i].iter().zip(adj) {
                Head::accumulate(&mut grads, id, g, af);
            }
        }
        adamw_step(&mut head.params, &grads, &mut head.state, &head.optimizer)?;
        queue.push_all(batch.iter().map(|p| (p.record.text.clone(), p.text_emb.clone())))?;
    }

    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE7A1);
    let mut hits = 0;
    for (img, b, label) in &data.test {
        let r = head.embed(&backbone_features(world, img, b, &mut eval_rng));
        let r = Embedding::normalized(r)?;
        let pred = data
            .novel_texts
            .iter()
            .enumerate()
            .max_by(|a, b| r.cosine(a.1).total_cmp(&r.cosine(b.1)).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("novel categories");
        hits += usize::from(pred == *label);
    }
    Ok(hits as f64 / data.test.len() as f64)
}

/// Pairs for an arm: every caption pair plus a prefix of the generated
/// pairs in a seeded order, so smaller fractions are nested in larger ones.
fn arm_pairs(data: &SeedData, arm: Arm, fraction: f64, seed: u64) -> Vec<&TrainPair> {
    let mut generated: Vec<&TrainPair> = Vec::new();
    if arm.t2r {
        generated.extend(&data.t2r);
    }
    if arm.r2t {
        generated.extend(&data.r2t);
    }
    generated.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xF4AC));
    let keep = ((fraction * generated.len() as f64).round() as usize).min(generated.len());
    data.caption.iter().chain(generated.into_iter().take(keep)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub arms: Vec<(String, f64)>,
    /// Accuracy of the full arm at each generated-data fraction.
    pub fractions: Vec<(f64, f64)>,
    pub pairs: PairCounts,
    pub saig_accuracy: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PairCounts {
    pub cap: usize,
    pub t2r: usize,
    pub r2t: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub median: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub chance: f64,
    pub arms: Vec<Summary>,
    pub fractions: Vec<(f64, Summary)>,
    pub per_seed: Vec<SeedResult>,
}

impl Report {
    pub fn arm(&self, name: &str) -> Option<&Summary> {
        self.arms.iter().find(|a| a.name == name)
    }
}

fn summarize(name: impl Into<String>, values: &[f64]) -> Summary {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    let mean = v.iter().sum::<f64>() / n as f64;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    Summary { name: name.into(), median, mean, std }
}

pub fn run_seed(cfg: &PipelineConfig, seed: u64) -> Result<SeedResult> {
    let data = prepare(cfg, seed)?;
    let mut arms = Vec::new();
    for arm in ARMS {
        let pairs = arm_pairs(&data, arm, 1.0, seed);
        arms.push((arm.name.to_owned(), train_arm(&data, &pairs, arm, cfg, seed)?));
    }
    let full = ARMS[ARMS.len() - 1];
    let mut fractions = Vec::new();
    for &f in &cfg.synthbench.fractions {
        let acc = if f == 1.0 {
            arms.last().expect("arms").1
        } else {
            train_arm(&data, &arm_pairs(&data, full, f, seed), full, cfg, seed)?
        };
        fractions.push((f, acc));
    }
    let counts = PairCounts {
        cap: data.caption.len(),
        t2r: data.t2r.len(),
        r2t: data.r2t.len(),
    };
    debug_assert!(data.t2r.iter().all(|p| p.record.provenance == Provenance::T2r));
    log::info!("synthbench seed {seed}: {arms:?}");
    Ok(SeedResult { seed, arms, fractions, pairs: counts, saig_accuracy: data.saig_accuracy })
}

/// Runs every seed and aggregates per-arm and per-fraction statistics.
pub fn synthbench(cfg: &PipelineConfig) -> Result<Report> {
    cfg.validate()?;
    let per_seed: Vec<SeedResult> = cfg
        .synthbench
        .seeds
        .par_iter()
        .map(|&s| run_seed(cfg, s))
        .collect::<Result<_>>()?;
    let arms = ARMS
        .iter()
        .enumerate()
        .map(|(i, a)| summarize(a.name, &per_seed.iter().map(|s| s.arms[i].1).collect::<Vec<_>>()))
        .collect();
    let fractions = cfg
        .synthbench
        .fractions
        .iter()
        .enumerate()
        .map(|(i, &f)| (f, summarize(format!("{f}"), &per_seed.iter().map(|s| s.fractions[i].1).collect::<Vec<_>>())))
        .collect();
    let novel = match &cfg.providers {
        ProviderConfig::Synthetic(s) => s.novel_categories.max(1),
        ProviderConfig::Remote(_) => 1,
    };
    Ok(Report {
        config_hash: cfg.hash(),
        seeds: cfg.synthbench.seeds.clone(),
        chance: 1.0 / novel as f64,
        arms,
        fractions,
        per_seed,
    })
}
