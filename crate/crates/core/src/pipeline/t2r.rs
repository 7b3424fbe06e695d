use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::Serialize;

use super::{image_seed, Runtime};
use crate::dataset::{CorpusRecord, PairRecord, Provenance};
use crate::error::Result;
use crate::filters::phrase_filter;
use crate::geometry::{nms, ScoredBox};
use crate::providers::{Embedding, Image, Inpainter, LocalityChecked};
use crate::saig::{sample_layout, Assignment, SaigModel, SceneInput};

/// Every filtered phrase of the corpus, embedded; the reference set of the
/// adaptive region filter.
#[derive(Debug, Clone)]
pub struct PhrasePool {
    pub texts: Vec<String>,
    pub embeddings: Vec<Embedding>,
}

pub fn phrase_pool(rt: &Runtime, items: &[&CorpusRecord]) -> Result<PhrasePool> {
    let per_image: Vec<Vec<String>> = rt.install(|| {
        items
            .par_iter()
            .map(|rec| match rt.suite.phrase_extractor.extract(&rec.caption) {
                Ok(p) => phrase_filter(&p, &rt.lexicon),
                Err(e) => {
                    log::debug!("phrase pool: `{}` skipped: {e}", rec.image_id);
                    Vec::new()
                }
            })
            .collect()
    })?;
    let texts: Vec<String> = per_image.into_iter().flatten().collect::<BTreeSet<_>>().into_iter().collect();
    let embeddings = texts
        .iter()
        .map(|t| rt.suite.text_encoder.embed_text(t))
        .collect::<std::result::Result<_, _>>()?;
    Ok(PhrasePool { texts, embeddings })
}

/// Stage counters. Every sampled assignment ends in exactly one of
/// `inpaint_failed`, `aesthetic_dropped`, `region_dropped` or `emitted`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct T2rStats {
    pub images: usize,
    pub no_proposals: usize,
    pub no_phrases: usize,
    pub phrases_extracted: usize,
    pub phrases_kept: usize,
    pub layouts: usize,
    pub assignments: usize,
    pub inpaint_failed: usize,
    pub aesthetic_dropped: usize,
    pub region_dropped: usize,
    pub emitted: usize,
}

impl T2rStats {
    pub fn merge(&mut self, o: &T2rStats) {
        self.images += o.images;
        self.no_proposals += o.no_proposals;
        self.no_phrases += o.no_phrases;
        self.phrases_extracted += o.phrases_extracted;
        self.phrases_kept += o.phrases_kept;
        self.layouts += o.layouts;
        self.assignments += o.assignments;
        self.inpaint_failed += o.inpaint_failed;
        self.aesthetic_dropped += o.aesthetic_dropped;
        self.region_dropped += o.region_dropped;
        self.emitted += o.emitted;
    }

    pub fn reconciles(&self) -> bool {
        self.assignments == self.inpaint_failed + self.aesthetic_dropped + self.region_dropped + self.emitted
    }
}

/// One generated image and the pairs that survived filtering on it.
#[derive(Debug, Clone)]
pub struct T2rSample {
    pub image: Image,
    pub records: Vec<PairRecord>,
}

#[derive(Debug, Clone, Default)]
pub struct T2rImage {
    pub samples: Vec<T2rSample>,
    pub records: Vec<PairRecord>,
    pub stats: T2rStats,
}

/// Text-to-region generation for one image.
pub fn t2r_image(rt: &Runtime, model: &SaigModel, pool: &PhrasePool, rec: &CorpusRecord, image: &Image) -> Result<T2rImage> {
    let cfg = &rt.config;
    let suite = &rt.suite;
    let mut out = T2rImage::default();
    out.stats.images = 1;

    let confident: Vec<ScoredBox> = suite
        .proposal_gen
        .propose(image)?
        .into_iter()
        .filter(|p| p.score >= cfg.r2t.min_confidence)
        .collect();
    let proposals = nms(&confident, cfg.r2t.dedup_iou)?;
    if proposals.is_empty() {
        out.stats.no_proposals = 1;
        return Ok(out);
    }

    let extracted = suite.phrase_extractor.extract(&rec.caption)?;
    out.stats.phrases_extracted = extracted.len();
    let mut phrases = phrase_filter(&extracted, &rt.lexicon);
    let mut seen = BTreeSet::new();
    phrases.retain(|p| seen.insert(p.clone()));
    out.stats.phrases_kept = phrases.len();
    if phrases.is_empty() {
        out.stats.no_phrases = 1;
        return Ok(out);
    }

    let boxes: Vec<_> = proposals.iter().map(|p| p.bbox).collect();
    let priors: Vec<f64> = proposals.iter().map(|p| p.score).collect();
    let phrase_embs: Vec<Embedding> = phrases
        .iter()
        .map(|p| suite.text_encoder.embed_text(p))
        .collect::<std::result::Result<_, _>>()?;
    let input = SceneInput {
        caption: suite.text_encoder.embed_text(&rec.caption)?.into_vec(),
        canvas: suite.embed_canvas(image, &boxes)?.into_vec(),
        phrases: phrase_embs.iter().map(|e| e.as_slice().to_vec()).collect(),
        boxes: boxes.clone(),
    };
    let alloc = model.allocate(&model.build_scene(&input)?, &priors)?;
    let inpainter = LocalityChecked(suite.inpainter.clone());

    for sample in 0..cfg.sampler.samples_per_image {
        let layout_seed = image_seed(cfg.seed, &rec.image_id, sample);
        let layout = sample_layout(&alloc, &phrases, cfg.sampler.top_p, cfg.sampler.max_pairs, layout_seed)?;
        out.stats.layouts += 1;
        out.stats.assignments += layout.assignments.len();

        let mut canvas = image.clone();
        let mut placed: Vec<&Assignment> = Vec::new();
        for a in &layout.assignments {
            match inpainter.inpaint(&canvas, &boxes[a.box_index], &a.phrase) {
                Ok(next) => {
                    canvas = next;
                    placed.push(a);
                }
                Err(e) => {
                    log::debug!("inpaint `{}` in `{}` failed: {e}", a.phrase, rec.image_id);
                    out.stats.inpaint_failed += 1;
                }
            }
        }
        if placed.is_empty() {
            continue;
        }
        if !cfg.filters.aesthetic.contains(suite.aesthetic_scorer.score(&canvas)?) {
            out.stats.aesthetic_dropped += placed.len();
            continue;
        }

        let mut records = Vec::new();
        for a in placed {
            let region = suite.vision_encoder.embed_image(&canvas.crop(&boxes[a.box_index]))?;
            let verdict = cfg.filters.adaptive.judge(&region, &phrase_embs[a.phrase_index], &pool.embeddings)?;
            if !verdict.kept {
                out.stats.region_dropped += 1;
                continue;
            }
            out.stats.emitted += 1;
            records.push(PairRecord {
                image_id: rec.image_id.clone(),
                bbox: boxes[a.box_index],
                image_width: image.width(),
                image_height: image.height(),
                text: a.phrase.clone(),
                provenance: Provenance::T2r,
                quality: verdict.margin(),
                layout_seed: Some(layout_seed),
            });
        }
        if !records.is_empty() {
            out.records.extend(records.iter().cloned());
            out.samples.push(T2rSample { image: canvas, records });
        }
    }
    Ok(out)
}
