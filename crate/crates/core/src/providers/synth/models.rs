//! Provider implementations backed by the synthetic world's ground truth.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::render::{draw_glyph, repaint_background};
use super::world::{SynthWorld, BACKGROUND_WEIGHT, COLOR_WEIGHT, WORD_WEIGHT};
use crate::geometry::{iou, BBox, ScoredBox, PROPOSAL_MIN_CONFIDENCE};
use crate::providers::{
    stable_hash, AestheticScorer, Captioner, Color, Embedding, Image, Inpainter, PhraseExtractor,
    ProposalGenerator, ProviderError, ProviderResult, SynthObject, TextEncoder, VisionEncoder,
};

/// Words carrying no content for the synthetic encoders.
pub const STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "on", "in", "at", "and", "with", "this", "that", "is", "are", "image",
    "shows", "photo", "picture", "there", "some", "its", "to", "next", "near", "by",
];

/// Abstract nouns the synthetic phrase extractor picks up besides objects.
pub const ABSTRACT_NOUNS: &[&str] = &[
    "day", "morning", "evening", "sunday", "event", "party", "weather", "beauty", "meeting",
];

/// Caption returned for crops with no visible object.
pub const BACKGROUND_CAPTION: &str = "a plain background";

/// Lowercased alphanumeric words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// A category word and optional color parsed from free text.
fn parse_object(world: &SynthWorld, text: &str) -> Option<(usize, Option<Color>)> {
    let words = tokenize(text);
    let cat = words.iter().find_map(|w| world.registry.index_of(w))?;
    let color = words.iter().find_map(|w| Color::from_name(w));
    Some((cat, color))
}

fn add_scaled(acc: &mut [f64], v: &[f64], s: f64) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += s * b;
    }
}

pub struct SynthTextEncoder {
    world: Arc<SynthWorld>,
}

impl TextEncoder for SynthTextEncoder {
    fn dim(&self) -> usize {
        self.world.dim()
    }

    fn embed_text(&self, text: &str) -> ProviderResult<Embedding> {
        let space = &self.world.space;
        let d = self.world.dim();
        let mut acc = vec![0.0; d];
        for w in tokenize(text) {
            if let Some(c) = self.world.registry.index_of(&w) {
                add_scaled(&mut acc, &space.text[c], 1.0);
            } else if let Some(color) = Color::from_name(&w) {
                add_scaled(&mut acc, &space.color_text[color.index()], COLOR_WEIGHT);
            } else if !STOPWORDS.contains(&w.as_str()) {
                add_scaled(&mut acc, &space.word(&w, d), WORD_WEIGHT);
            }
        }
        if acc.iter().all(|&v| v == 0.0) {
            acc = space.word(text, d);
        }
        Embedding::normalized(acc)
    }
}

/// Embeds an image as the pixel-weighted mix of its visible objects' text
/// directions plus a background direction.
pub struct SynthVisionEncoder {
    world: Arc<SynthWorld>,
}

impl VisionEncoder for SynthVisionEncoder {
    fn dim(&self) -> usize {
        self.world.dim()
    }

    fn embed_image(&self, image: &Image) -> ProviderResult<Embedding> {
        let labels = image
            .labels()
            .ok_or_else(|| ProviderError::Unsupported("image without synthetic labels".into()))?;
        let space = &self.world.space;
        let total = image.pixel_count() as f64;
        let counts = image.label_counts();
        let mut acc = vec![0.0; self.world.dim()];
        add_scaled(&mut acc, &space.background_text, BACKGROUND_WEIGHT * counts[0] as f64 / total);
        for (obj, &n) in labels.objects.iter().zip(&counts[1..]) {
            if n == 0 {
                continue;
            }
            let frac = n as f64 / total;
            if let Some(c) = self.world.registry.index_of(&obj.category) {
                add_scaled(&mut acc, &space.text[c], frac);
            }
            add_scaled(&mut acc, &space.color_text[obj.color.index()], COLOR_WEIGHT * frac);
        }
        Embedding::normalized(acc)
    }
}

/// Index into `objects` of the object covering the most pixels, with its
/// pixel fraction.
pub fn dominant_object(image: &Image) -> Option<(usize, f64)> {
    let counts = image.label_counts();
    let (idx, &n) = counts[1..].iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
    (n > 0).then(|| (idx, n as f64 / image.pixel_count() as f64))
}

/// Describes the dominant object. Depending on a hash of the prompt and crop
/// the caption is exact, drops the color, or names a wrong object.
pub struct SynthCaptioner {
    world: Arc<SynthWorld>,
    seed: u64,
}

impl Captioner for SynthCaptioner {
    fn caption(&self, crop: &Image, prompt: &str) -> ProviderResult<String> {
        let labels = crop
            .labels()
            .ok_or_else(|| ProviderError::Unsupported("image without synthetic labels".into()))?;
        let Some((idx, _)) = dominant_object(crop) else {
            return Ok(BACKGROUND_CAPTION.to_owned());
        };
        let obj = &labels.objects[idx];
        let h = stable_hash(&[
            &self.seed.to_le_bytes(),
            prompt.as_bytes(),
            &crop.fingerprint().to_le_bytes(),
        ]);
        let roll = h % 100;
        Ok(if roll < 55 {
            format!("a {} {}", obj.color.name(), obj.category)
        } else if roll < 80 {
            format!("a {}", obj.category)
        } else {
            let vocab = self.world.visible().categories();
            let mut pick = &vocab[(h >> 8) as usize % vocab.len()].name;
            if *pick == obj.category {
                pick = &vocab[((h >> 8) as usize + 1) % vocab.len()].name;
            }
            let color = Color::ALL[(h >> 16) as usize % Color::ALL.len()];
            format!("a {} {}", color.name(), pick)
        })
    }
}

/// Draws the phrase's glyph inside the box over fresh background.
pub struct SynthInpainter {
    world: Arc<SynthWorld>,
    seed: u64,
}

impl Inpainter for SynthInpainter {
    fn inpaint(&self, image: &Image, region: &BBox, text: &str) -> ProviderResult<Image> {
        if image.labels().is_none() {
            return Err(ProviderError::Unsupported("image without synthetic labels".into()));
        }
        let (cat, color) = parse_object(&self.world, text)
            .ok_or_else(|| ProviderError::FailedRegion(format!("no known object in `{text}`")))?;
        let h = stable_hash(&[
            &self.seed.to_le_bytes(),
            &image.fingerprint().to_le_bytes(),
            text.as_bytes(),
            &region.to_array().map(f64::to_bits).iter().flat_map(|b| b.to_le_bytes()).collect::<Vec<_>>(),
        ]);
        let color = color.unwrap_or(Color::ALL[h as usize % Color::ALL.len()]);
        let category = &self.world.registry.categories()[cat];
        let mut out = image.clone();
        let labels = out.labels_mut().expect("checked above");
        if labels.objects.len() + 1 >= u16::MAX as usize {
            return Err(ProviderError::FailedRegion("label space exhausted".into()));
        }
        labels.objects.push(SynthObject {
            category: category.name.clone(),
            color,
            bbox: *region,
        });
        let id = labels.objects.len() as u16;
        repaint_background(&mut out, region, h);
        draw_glyph(&mut out, region, category.glyph, color, id);
        Ok(out)
    }
}

/// Objects showing at least this fraction of their box are considered visible.
pub const VISIBLE_FRACTION: f64 = 0.2;

/// Indices of objects that are still visible in the image.
pub fn visible_objects(image: &Image) -> Vec<usize> {
    let Some(labels) = image.labels() else {
        return vec![];
    };
    let counts = image.label_counts();
    labels
        .objects
        .iter()
        .enumerate()
        .filter(|(i, o)| {
            let (x0, y0, x1, y1) = image.span(&o.bbox);
            let area = ((x1 - x0) * (y1 - y0)) as f64;
            counts[i + 1] as f64 >= VISIBLE_FRACTION * area && counts[i + 1] > 0
        })
        .map(|(i, _)| i)
        .collect()
}

/// Text prompts the class-agnostic proposal model is queried with.
pub const PROPOSAL_PROMPTS: [&str; 2] = ["all objects", "all entities"];

/// Ground-truth boxes jittered by up to ±10% of their extent; confidence is
/// the IoU with the truth, clipped to [0.3, 1].
pub struct SynthProposals {
    seed: u64,
}

pub const PROPOSAL_JITTER: f64 = 0.1;

impl ProposalGenerator for SynthProposals {
    fn propose(&self, image: &Image) -> ProviderResult<Vec<ScoredBox>> {
        let Some(labels) = image.labels() else {
            return Err(ProviderError::Unsupported("image without synthetic labels".into()));
        };
        let mut out = Vec::new();
        for i in visible_objects(image) {
            let truth = labels.objects[i].bbox;
            for prompt in PROPOSAL_PROMPTS {
                let h = stable_hash(&[
                    &self.seed.to_le_bytes(),
                    &image.fingerprint().to_le_bytes(),
                    &(i as u64).to_le_bytes(),
                    prompt.as_bytes(),
                ]);
                let mut rng = ChaCha8Rng::seed_from_u64(h);
                let mut jit = |extent: f64| rng.random_range(-PROPOSAL_JITTER..=PROPOSAL_JITTER) * extent;
                let (dx, dy, dw, dh) = (jit(truth.w()), jit(truth.h()), jit(truth.w()), jit(truth.h()));
                let Ok(b) = BBox::new(truth.x() + dx, truth.y() + dy, truth.w() + dw, truth.h() + dh)
                else {
                    continue;
                };
                let score = iou(&b, &truth).clamp(PROPOSAL_MIN_CONFIDENCE, 1.0);
                out.push(ScoredBox::new(b, score).expect("score clipped to unit interval"));
            }
        }
        Ok(out)
    }
}

/// Extracts "color category" noun phrases and a few abstract nouns.
pub struct SynthPhraseExtractor {
    world: Arc<SynthWorld>,
}

impl PhraseExtractor for SynthPhraseExtractor {
    fn extract(&self, caption: &str) -> ProviderResult<Vec<String>> {
        let words = tokenize(caption);
        let mut out: Vec<String> = Vec::new();
        for (i, w) in words.iter().enumerate() {
            let phrase = if self.world.registry.index_of(w).is_some() {
                match i.checked_sub(1).map(|j| &words[j]) {
                    Some(prev) if Color::from_name(prev).is_some() => format!("{prev} {w}"),
                    _ => w.clone(),
                }
            } else if ABSTRACT_NOUNS.contains(&w.as_str()) {
                w.clone()
            } else {
                continue;
            };
            if !out.contains(&phrase) {
                out.push(phrase);
            }
        }
        Ok(out)
    }
}

/// Maps clutter (visible object count) to a score in [0, 9].
pub struct SynthAesthetics {
    seed: u64,
}

impl AestheticScorer for SynthAesthetics {
    fn score(&self, image: &Image) -> ProviderResult<f64> {
        let n = visible_objects(image).len() as f64;
        let h = stable_hash(&[&self.seed.to_le_bytes(), &image.fingerprint().to_le_bytes()]);
        let noise = (h % 10_001) as f64 / 10_000.0 - 0.5;
        Ok((1.0 + 1.1 * n + noise).clamp(0.0, 9.0))
    }
}

pub(super) fn build(world: Arc<SynthWorld>, seed: u64) -> crate::providers::ProviderSuite {
    crate::providers::ProviderSuite {
        text_encoder: Arc::new(SynthTextEncoder { world: world.clone() }),
        vision_encoder: Arc::new(SynthVisionEncoder { world: world.clone() }),
        captioner: Arc::new(SynthCaptioner { world: world.clone(), seed }),
        inpainter: Arc::new(SynthInpainter { world: world.clone(), seed }),
        proposal_gen: Arc::new(SynthProposals { seed }),
        phrase_extractor: Arc::new(SynthPhraseExtractor { world }),
        aesthetic_scorer: Arc::new(SynthAesthetics { seed }),
        max_in_flight: usize::MAX,
    }
}
