//! Region-to-text generation: caption enlarged proposal crops under a prompt
//! ensemble and keep the caption closest to the crop in embedding space.

use serde::{Deserialize, Serialize};

use crate::dataset::{PairRecord, Provenance};
use crate::error::{Error, Result};
use crate::geometry::{enlarge, nms, ScoredBox};
use crate::providers::{Image, ProviderResult, ProviderSuite};

/// Proposal confidence below which a box is discarded.
pub const DEFAULT_MIN_CONFIDENCE: f64 = 0.3;
pub const DEDUP_IOU: f64 = 0.1;
pub const DEFAULT_ENLARGE: f64 = 1.2;
/// Captioner attempts per prompt.
pub const CAPTION_ATTEMPTS: usize = 2;

/// Three distinct captioning prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct PromptEnsemble([String; 3]);

impl Default for PromptEnsemble {
    fn default() -> Self {
        Self(["The image shows".into(), "A photo of".into(), "This is a picture of".into()])
    }
}

impl PromptEnsemble {
    pub fn new(prompts: [String; 3]) -> Result<Self> {
        if prompts.iter().any(|p| p.trim().is_empty()) {
            return Err(Error::Config("prompts must be non-empty".into()));
        }
        if prompts[0] == prompts[1] || prompts[0] == prompts[2] || prompts[1] == prompts[2] {
            return Err(Error::Config("prompts must be distinct".into()));
        }
        Ok(Self(prompts))
    }

    pub fn prompts(&self) -> &[String; 3] {
        &self.0
    }
}

impl TryFrom<Vec<String>> for PromptEnsemble {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        let n = v.len();
        let arr: [String; 3] = v
            .try_into()
            .map_err(|_| Error::Config(format!("expected 3 prompts, got {n}")))?;
        Self::new(arr)
    }
}

impl From<PromptEnsemble> for Vec<String> {
    fn from(e: PromptEnsemble) -> Self {
        e.0.into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionCandidate {
    pub text: String,
    /// Cosine similarity between the crop and the caption.
    pub similarity: f64,
    pub prompt_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionChoice {
    pub selected: usize,
    pub candidates: Vec<CaptionCandidate>,
}

impl CaptionChoice {
    pub fn best(&self) -> &CaptionCandidate {
        &self.candidates[self.selected]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct R2tConfig {
    pub prompts: PromptEnsemble,
    pub min_confidence: f64,
    pub dedup_iou: f64,
    pub enlarge: f64,
}

impl Default for R2tConfig {
    fn default() -> Self {
        Self {
            prompts: PromptEnsemble::default(),
            min_confidence: DEFAULT_MIN_CONFIDENCE,
            dedup_iou: DEDUP_IOU,
            enlarge: DEFAULT_ENLARGE,
        }
    }
}

impl R2tConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(Error::Config(format!("min_confidence {} outside [0, 1]", self.min_confidence)));
        }
        if !(0.0..=1.0).contains(&self.dedup_iou) {
            return Err(Error::Config(format!("dedup_iou {} outside [0, 1]", self.dedup_iou)));
        }
        if !(self.enlarge >= 1.0 && self.enlarge.is_finite()) {
            return Err(Error::Config(format!("enlarge {} must be at least 1", self.enlarge)));
        }
        Ok(())
    }
}

pub fn dedup_proposals(boxes: &[ScoredBox]) -> Vec<ScoredBox> {
    nms(boxes, DEDUP_IOU).expect("constant threshold is valid")
}

fn with_retry<T>(mut call: impl FnMut() -> ProviderResult<T>) -> ProviderResult<T> {
    let mut last = None;
    for _ in 0..CAPTION_ATTEMPTS {
        match call() {
            Ok(v) => return Ok(v),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Captions the crop once per prompt and selects the most similar caption.
///
/// Returns `None` when every prompt fails; ties go to the earlier prompt.
pub fn caption_region(crop: &Image, ensemble: &PromptEnsemble, suite: &ProviderSuite) -> Option<CaptionChoice> {
    let crop_emb = match with_retry(|| suite.vision_encoder.embed_image(crop)) {
        Ok(e) => e,
        Err(e) => {
            log::warn!("skipping region: crop embedding failed: {e}");
            return None;
        }
    };
    let mut candidates = Vec::with_capacity(3);
    for (i, prompt) in ensemble.prompts().iter().enumerate() {
        let attempt = with_retry(|| suite.captioner.caption(crop, prompt))
            .and_then(|text| with_retry(|| suite.text_encoder.embed_text(&text)).map(|e| (text, e)));
        match attempt {
            Ok((text, emb)) => candidates.push(CaptionCandidate {
                similarity: crop_emb.cosine(&emb).clamp(-1.0, 1.0),
                text,
                prompt_index: i,
            }),
            Err(e) => log::debug!("prompt `{prompt}` failed: {e}"),
        }
    }
    if candidates.is_empty() {
        log::warn!("skipping region: captioner failed on every prompt");
        return None;
    }
    let mut selected = 0;
    for (i, c) in candidates.iter().enumerate() {
        if c.similarity > candidates[selected].similarity {
            selected = i;
        }
    }
    Some(CaptionChoice { selected, candidates })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct R2tStats {
    pub proposals: usize,
    pub confident: usize,
    pub deduped: usize,
    pub captioned: usize,
    pub skipped: usize,
    pub selected_similarity_sum: f64,
    pub other_similarity_sum: f64,
    pub other_candidates: usize,
}

impl R2tStats {
    pub fn merge(&mut self, o: &R2tStats) {
        self.proposals += o.proposals;
        self.confident += o.confident;
        self.deduped += o.deduped;
        self.captioned += o.captioned;
        self.skipped += o.skipped;
        self.selected_similarity_sum += o.selected_similarity_sum;
        self.other_similarity_sum += o.other_similarity_sum;
        self.other_candidates += o.other_candidates;
    }

    pub fn mean_selected_similarity(&self) -> f64 {
        if self.captioned == 0 { 0.0 } else { self.selected_similarity_sum / self.captioned as f64 }
    }

    pub fn mean_other_similarity(&self) -> f64 {
        if self.other_candidates == 0 { 0.0 } else { self.other_similarity_sum / self.other_candidates as f64 }
    }
}

/// Captioned region pairs for one image. The recorded box is the original
/// proposal; only the crop is enlarged.
pub fn generate_r2t(
    image: &Image,
    image_id: &str,
    suite: &ProviderSuite,
    cfg: &R2tConfig,
) -> Result<(Vec<PairRecord>, R2tStats)> {
    let mut stats = R2tStats::default();
    let proposals = with_retry(|| suite.proposal_gen.propose(image))?;
    stats.proposals = proposals.len();
    let confident: Vec<ScoredBox> = proposals.into_iter().filter(|p| p.score >= cfg.min_confidence).collect();
    stats.confident = confident.len();
    let regions = nms(&confident, cfg.dedup_iou)?;
    stats.deduped = regions.len();

    let mut pairs = Vec::with_capacity(regions.len());
    for region in &regions {
        let crop = image.crop(&enlarge(&region.bbox, cfg.enlarge)?);
        let Some(choice) = caption_region(&crop, &cfg.prompts, suite) else {
            stats.skipped += 1;
            continue;
        };
        stats.captioned += 1;
        let best = choice.best();
        stats.selected_similarity_sum += best.similarity;
        for (i, c) in choice.candidates.iter().enumerate() {
            if i != choice.selected {
                stats.other_similarity_sum += c.similarity;
                stats.other_candidates += 1;
            }
        }
        pairs.push(PairRecord {
            image_id: image_id.to_owned(),
            bbox: region.bbox,
            image_width: image.width(),
            image_height: image.height(),
            text: best.text.clone(),
            provenance: Provenance::R2t,
            quality: best.similarity,
            layout_seed: None,
        });
    }
    Ok((pairs, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::providers::{Captioner, Embedding, ProviderError};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn ensemble_validation() {
        assert_eq!(PromptEnsemble::default().prompts()[0], "The image shows");
        assert!(PromptEnsemble::new(["a".into(), "a".into(), "b".into()]).is_err());
        assert!(PromptEnsemble::new(["a".into(), " ".into(), "b".into()]).is_err());
        assert!(serde_json::from_str::<PromptEnsemble>(r#"["a","b"]"#).is_err());
        let e: PromptEnsemble = serde_json::from_str(r#"["a","b","c"]"#).unwrap();
        assert_eq!(serde_json::to_string(&e).unwrap(), r#"["a","b","c"]"#);
    }

    #[test]
    fn dedup_cases() {
        let a = ScoredBox::new(BBox::new(0.0, 0.0, 0.2, 0.2).unwrap(), 0.9).unwrap();
        let b = ScoredBox::new(BBox::new(0.5, 0.5, 0.2, 0.2).unwrap(), 0.8).unwrap();
        assert_eq!(dedup_proposals(&[a, b]).len(), 2);
        let near = ScoredBox::new(BBox::new(0.0, 0.0, 0.2, 0.18).unwrap(), 0.95).unwrap();
        assert_eq!(dedup_proposals(&[a, near]), vec![near]);
    }

    struct ListCaptioner(Vec<&'static str>);

    impl Captioner for ListCaptioner {
        fn caption(&self, _: &Image, prompt: &str) -> ProviderResult<String> {
            let i = ["The image shows", "A photo of", "This is a picture of"]
                .iter()
                .position(|p| *p == prompt)
                .unwrap();
            Ok(self.0[i].to_owned())
        }
    }

    struct Flaky(AtomicUsize);

    impl Captioner for Flaky {
        fn caption(&self, _: &Image, _: &str) -> ProviderResult<String> {
            let n = self.0.fetch_add(1, Ordering::SeqCst);
            if n.is_multiple_of(2) {
                Err(ProviderError::Timeout { endpoint: "caption".into() })
            } else {
                Ok("a red square".into())
            }
        }
    }

    struct Broken;

    impl Captioner for Broken {
        fn caption(&self, _: &Image, _: &str) -> ProviderResult<String> {
            Err(ProviderError::Timeout { endpoint: "caption".into() })
        }
    }

    fn synth_crop() -> (ProviderSuite, Image) {
        use crate::providers::synth::{render, synth_suite, Registry, SynthScene};
        use crate::providers::{Color, SynthObject};
        let registry = Registry::generate(6, 0).unwrap();
        let (world, suite) = synth_suite(registry, 64, 3).unwrap();
        let name = world.registry.categories()[0].name.clone();
        let obj = SynthObject { category: name, color: Color::Red, bbox: BBox::new(0.2, 0.2, 0.5, 0.5).unwrap() };
        let scene = SynthScene::new(vec![obj]);
        let img = render(&scene, &world.registry, 1).unwrap();
        let crop = img.crop(&BBox::new(0.2, 0.2, 0.5, 0.5).unwrap());
        (suite, crop)
    }

    #[test]
    fn selects_the_matching_caption() {
        let (mut suite, crop) = synth_crop();
        let name = crop.labels().unwrap().objects[0].category.clone();
        let right: &'static str = Box::leak(format!("a red {name}").into_boxed_str());
        suite.captioner = Arc::new(ListCaptioner(vec!["a dog", right, "a blue zorblax"]));
        let choice = caption_region(&crop, &PromptEnsemble::default(), &suite).unwrap();
        assert_eq!(choice.best().text, right);
        assert_eq!(choice.selected, 1);
        assert!(choice.candidates.iter().all(|c| c.similarity <= choice.best().similarity));

        suite.captioner = Arc::new(ListCaptioner(vec![right; 3]));
        let choice = caption_region(&crop, &PromptEnsemble::default(), &suite).unwrap();
        assert_eq!(choice.selected, 0);
    }

    #[test]
    fn retries_once_then_skips() {
        let (mut suite, crop) = synth_crop();
        suite.captioner = Arc::new(Flaky(AtomicUsize::new(0)));
        assert_eq!(caption_region(&crop, &PromptEnsemble::default(), &suite).unwrap().candidates.len(), 3);
        suite.captioner = Arc::new(Broken);
        assert!(caption_region(&crop, &PromptEnsemble::default(), &suite).is_none());
    }

    #[test]
    fn similarity_is_cosine_of_provider_embeddings() {
        let (suite, crop) = synth_crop();
        let choice = caption_region(&crop, &PromptEnsemble::default(), &suite).unwrap();
        let v = suite.vision_encoder.embed_image(&crop).unwrap();
        for c in &choice.candidates {
            let t: Embedding = suite.text_encoder.embed_text(&c.text).unwrap();
            assert!((v.cosine(&t) - c.similarity).abs() < 1e-12);
        }
    }
}
