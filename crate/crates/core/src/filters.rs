//! Quality filters: aesthetic band, adaptive region-text similarity and the
//! phrase hypernym filter.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::providers::Embedding;

/// Keeps images whose aesthetic score lies strictly inside `(t1, t2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AestheticBand {
    pub t1: f64,
    pub t2: f64,
}

impl Default for AestheticBand {
    fn default() -> Self {
        Self { t1: 3.0, t2: 6.0 }
    }
}

impl AestheticBand {
    pub fn new(t1: f64, t2: f64) -> Result<Self> {
        let band = Self { t1, t2 };
        band.validate()?;
        Ok(band)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t1.is_finite() && self.t2.is_finite() && self.t1 < self.t2) {
            return Err(Error::Config(format!("aesthetic band ({}, {}) is empty", self.t1, self.t2)));
        }
        Ok(())
    }

    pub fn contains(&self, score: f64) -> bool {
        self.t1 < score && score < self.t2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition<T> {
    pub kept: Vec<T>,
    pub dropped: Vec<T>,
}

/// Splits scored items by the band, preserving input order in both halves.
pub fn aesthetic_filter<T>(items: impl IntoIterator<Item = (T, f64)>, band: &AestheticBand) -> Partition<(T, f64)> {
    let (kept, dropped) = items.into_iter().partition(|(_, s)| band.contains(*s));
    Partition { kept, dropped }
}

/// Per-region similarity cutoff at the top `top_fraction` of a phrase pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptiveRegionFilter {
    pub top_fraction: f64,
    /// Pools smaller than this use `fallback_threshold` instead.
    pub min_pool: usize,
    pub fallback_threshold: f64,
}

impl Default for AdaptiveRegionFilter {
    fn default() -> Self {
        Self { top_fraction: 0.05, min_pool: 20, fallback_threshold: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionVerdict {
    pub kept: bool,
    /// Similarity of the region with its paired phrase.
    pub similarity: f64,
    pub cutoff: f64,
}

impl RegionVerdict {
    pub fn margin(&self) -> f64 {
        self.similarity - self.cutoff
    }
}

impl AdaptiveRegionFilter {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(Error::Config(format!("top_fraction {} outside (0, 1]", self.top_fraction)));
        }
        if !self.fallback_threshold.is_finite() {
            return Err(Error::Config("fallback_threshold must be finite".into()));
        }
        Ok(())
    }

    /// The `ceil(top_fraction·n)`-th largest similarity, or the fallback
    /// threshold for small pools.
    pub fn cutoff(&self, pool_similarities: &[f64]) -> Result<f64> {
        if pool_similarities.is_empty() {
            return Err(Error::Empty("phrase pool"));
        }
        if pool_similarities.len() < self.min_pool {
            return Ok(self.fallback_threshold);
        }
        let mut sorted = pool_similarities.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let slots = ((self.top_fraction * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
        Ok(sorted[slots - 1])
    }

    /// Keeps the pair iff the region is at least as similar to its phrase as
    /// to the cutoff phrase of the pool.
    pub fn judge(&self, region: &Embedding, paired: &Embedding, pool: &[Embedding]) -> Result<RegionVerdict> {
        for e in std::iter::once(paired).chain(pool) {
            if e.dim() != region.dim() {
                return Err(Error::DimensionMismatch { expected: region.dim(), got: e.dim(), context: "phrase pool" });
            }
        }
        let sims: Vec<f64> = pool.iter().map(|p| region.cosine(p)).collect();
        let cutoff = self.cutoff(&sims)?;
        let similarity = region.cosine(paired);
        Ok(RegionVerdict { kept: similarity >= cutoff, similarity, cutoff })
    }
}

/// Hypernym sets used to accept or reject extracted phrases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchyLexicon {
    pub allowance: BTreeSet<String>,
    pub forbidden: BTreeSet<String>,
    /// Phrase to its ancestor labels.
    pub hypernyms: HashMap<String, BTreeSet<String>>,
}

/// The bundled lexicon.
pub const DEFAULT_LEXICON: &str = include_str!("../data/lexicon.json");

impl Default for HierarchyLexicon {
    fn default() -> Self {
        Self::from_json(DEFAULT_LEXICON).expect("bundled lexicon is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhraseVerdict {
    Keep,
    /// Ancestors hit both lists.
    Conflict,
    /// Ancestors hit only the forbidden list.
    Forbidden,
    /// Ancestors hit neither list.
    NotAllowed,
    /// No hypernym entry for the phrase or its head noun.
    Uncovered,
}

impl HierarchyLexicon {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut lex: Self = serde_json::from_str(text)?;
        lex.hypernyms = lex
            .hypernyms
            .into_iter()
            .map(|(k, v)| (k.trim().to_lowercase(), v))
            .collect();
        lex.validate()?;
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(both) = self.allowance.intersection(&self.forbidden).next() {
            return Err(Error::Config(format!("`{both}` is both allowed and forbidden")));
        }
        Ok(())
    }

    /// Ancestors of the phrase, falling back to its last word.
    pub fn ancestors(&self, phrase: &str) -> Option<&BTreeSet<String>> {
        let key = phrase.trim().to_lowercase();
        self.hypernyms
            .get(&key)
            .or_else(|| key.split_whitespace().last().and_then(|head| self.hypernyms.get(head)))
    }

    pub fn judge(&self, phrase: &str) -> PhraseVerdict {
        let Some(anc) = self.ancestors(phrase) else {
            return PhraseVerdict::Uncovered;
        };
        let allowed = anc.iter().any(|a| self.allowance.contains(a));
        let forbidden = anc.iter().any(|a| self.forbidden.contains(a));
        match (allowed, forbidden) {
            (true, false) => PhraseVerdict::Keep,
            (true, true) => PhraseVerdict::Conflict,
            (false, true) => PhraseVerdict::Forbidden,
            (false, false) => PhraseVerdict::NotAllowed,
        }
    }
}

/// Phrases whose ancestors reach an allowed label and no forbidden one.
pub fn phrase_filter<S: AsRef<str>>(phrases: &[S], lex: &HierarchyLexicon) -> Vec<String> {
    phrases
        .iter()
        .map(AsRef::as_ref)
        .filter(|p| match lex.judge(p) {
            PhraseVerdict::Keep => true,
            PhraseVerdict::Uncovered => {
                log::debug!("dropping phrase `{p}`: no hypernym entry");
                false
            }
            _ => false,
        })
        .map(str::to_owned)
        .collect()
}
