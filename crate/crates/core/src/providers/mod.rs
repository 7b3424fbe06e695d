//! Interfaces to the external models the pipeline depends on.
//!
//! Each model is a small trait; a [`ProviderSuite`] bundles one of each. Two
//! suites ship: [`synth::synth_suite`], a deterministic world that implements
//! every provider from ground truth, and [`remote::remote_suite`], a JSON/HTTP
//! client for real model services.

pub mod image;
pub mod remote;
pub mod synth;

use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use self::image::{Color, Image, LabelLayer, SynthObject};
use crate::geometry::{BBox, ScoredBox};

/// Tolerance on the norm of an embedding returned by an encoder.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Remote vectors within this distance of unit norm are renormalized
/// client-side; anything further off is rejected.
pub const RENORMALIZE_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("{endpoint}: timed out")]
    Timeout { endpoint: String },

    #[error("{endpoint}: HTTP status {status}")]
    Status { endpoint: String, status: u16 },

    #[error("{endpoint}: malformed response: {message}")]
    Malformed { endpoint: String, message: String },

    #[error("{endpoint}: transport failure: {message}")]
    Transport { endpoint: String, message: String },

    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("embedding norm {norm} too far from 1")]
    NotUnitNorm { norm: f64 },

    #[error("inpainting failed for region: {0}")]
    FailedRegion(String),

    #[error("inpainter modified {changed} pixels outside the target box")]
    LocalityViolation { changed: usize },

    #[error("unsupported input: {0}")]
    Unsupported(String),
}

impl ProviderError {
    /// Whether a retry may succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            ProviderError::Timeout { .. } | ProviderError::Transport { .. } => true,
            ProviderError::Status { status, .. } => *status >= 500 || *status == 429,
            _ => false,
        }
    }
}

pub type ProviderResult<T> = Result<T, ProviderError>;

/// A unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `values`; fails on a zero or non-finite vector.
    pub fn normalized(mut values: Vec<f64>) -> ProviderResult<Self> {
        let n = crate::tinynn::tensor::norm(&values);
        if !n.is_finite() || n == 0.0 {
            return Err(ProviderError::NotUnitNorm { norm: n });
        }
        for v in &mut values {
            *v /= n;
        }
        Ok(Self(values))
    }

    /// Accepts a vector that is already unit norm within [`UNIT_NORM_TOL`].
    pub fn from_unit(values: Vec<f64>) -> ProviderResult<Self> {
        let n = crate::tinynn::tensor::norm(&values);
        if (n - 1.0).abs() > UNIT_NORM_TOL || !n.is_finite() {
            return Err(ProviderError::NotUnitNorm { norm: n });
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        crate::tinynn::tensor::dot(&self.0, &other.0).clamp(-1.0, 1.0)
    }
}

pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> ProviderResult<Embedding>;
}

/// Embeds a whole image; callers crop or obscure first.
pub trait VisionEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_image(&self, image: &Image) -> ProviderResult<Embedding>;
}

pub trait Captioner: Send + Sync {
    fn caption(&self, crop: &Image, prompt: &str) -> ProviderResult<String>;
}

/// Replaces the content of `region` with `text`; pixels outside the region
/// must come back unchanged.
pub trait Inpainter: Send + Sync {
    fn inpaint(&self, image: &Image, region: &BBox, text: &str) -> ProviderResult<Image>;
}

pub trait ProposalGenerator: Send + Sync {
    fn propose(&self, image: &Image) -> ProviderResult<Vec<ScoredBox>>;
}

pub trait PhraseExtractor: Send + Sync {
    fn extract(&self, caption: &str) -> ProviderResult<Vec<String>>;
}

pub trait AestheticScorer: Send + Sync {
    fn score(&self, image: &Image) -> ProviderResult<f64>;
}

/// One implementation of every model the pipeline calls.
#[derive(Clone)]
pub struct ProviderSuite {
    pub text_encoder: Arc<dyn TextEncoder>,
    pub vision_encoder: Arc<dyn VisionEncoder>,
    pub captioner: Arc<dyn Captioner>,
    pub inpainter: Arc<dyn Inpainter>,
    pub proposal_gen: Arc<dyn ProposalGenerator>,
    pub phrase_extractor: Arc<dyn PhraseExtractor>,
    pub aesthetic_scorer: Arc<dyn AestheticScorer>,
    /// Concurrent calls the backing services tolerate.
    pub max_in_flight: usize,
}

impl ProviderSuite {
    pub fn dim(&self) -> usize {
        self.text_encoder.dim()
    }

    /// Embeds the canvas: the image with every proposal interior obscured.
    pub fn embed_canvas(&self, image: &Image, proposals: &[BBox]) -> ProviderResult<Embedding> {
        self.vision_encoder.embed_image(&obscure(image, proposals))
    }
}

/// Mid-gray used to obscure proposal interiors.
pub const OBSCURE_RGB: [u8; 3] = [128, 128, 128];

/// Fills every box with mid-gray and clears its ground-truth labels.
pub fn obscure(image: &Image, boxes: &[BBox]) -> Image {
    let mut out = image.clone();
    for b in boxes {
        out.fill_region(b, OBSCURE_RGB);
    }
    out
}

/// Wraps an inpainter and rejects results that touch pixels outside the box.
pub struct LocalityChecked<I>(pub I);

impl<I: Inpainter> Inpainter for LocalityChecked<I> {
    fn inpaint(&self, image: &Image, region: &BBox, text: &str) -> ProviderResult<Image> {
        let out = self.0.inpaint(image, region, text)?;
        let changed = image.changed_outside(&out, region);
        if changed > 0 {
            return Err(ProviderError::LocalityViolation { changed });
        }
        Ok(out)
    }
}

impl Inpainter for Arc<dyn Inpainter> {
    fn inpaint(&self, image: &Image, region: &BBox, text: &str) -> ProviderResult<Image> {
        (**self).inpaint(image, region, text)
    }
}

/// Platform-independent 64-bit hash of byte strings.
pub fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_normalization() {
        let e = Embedding::normalized(vec![3.0, 4.0]).unwrap();
        assert_eq!(e.as_slice(), &[0.6, 0.8]);
        assert!(Embedding::normalized(vec![0.0, 0.0]).is_err());
        assert!(Embedding::from_unit(vec![1.0, 0.1]).is_err());
        assert!(Embedding::from_unit(vec![0.6, 0.8]).is_ok());
    }

    #[test]
    fn stable_hash_is_length_prefixed() {
        assert_ne!(stable_hash(&[b"ab", b"c"]), stable_hash(&[b"a", b"bc"]));
        assert_eq!(stable_hash(&[b"x"]), stable_hash(&[b"x"]));
    }

    #[test]
    fn transient_classification() {
        let e = ProviderError::Status { endpoint: "/x".into(), status: 503 };
        assert!(e.is_transient());
        let e = ProviderError::Status { endpoint: "/x".into(), status: 400 };
        assert!(!e.is_transient());
        assert!(!ProviderError::DimensionMismatch { expected: 1, got: 2 }.is_transient());
    }
}
