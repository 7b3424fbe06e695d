//! Category registry and the latent semantic space shared by the synthetic
//! encoders.
//!
//! Every category owns a latent vector `z`. Its text direction is
//! `normalize(B·z + λ·p)` in the `dim`-sized joint space and its detector
//! feature direction is `A·z + λ·q` in the `feature_dim`-sized backbone space,
//! with `A`, `B` shared random projections and `p`, `q` category-private noise.
//! A region head that learns `A → B` on base categories therefore transfers to
//! novel ones through the shared latent part only.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::super::{stable_hash, Color};
use crate::error::{Error, Result};
use crate::tinynn::tensor::norm;

/// Names handed out to generated categories, in order.
pub const CATEGORY_NAMES: [&str; 24] = [
    "square", "circle", "triangle", "diamond", "cross", "ring", "bar", "pillar", "kite", "wheel",
    "arrow", "star", "heart", "moon", "leaf", "bell", "crown", "drop", "key", "lamp", "shell",
    "flag", "gear", "boat",
];

/// Drawing primitive for a category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Glyph {
    Square,
    Circle,
    Triangle,
    Diamond,
    Cross,
    Ring,
    HBar,
    VBar,
}

impl Glyph {
    const ALL: [Glyph; 8] = [
        Glyph::Square,
        Glyph::Circle,
        Glyph::Triangle,
        Glyph::Diamond,
        Glyph::Cross,
        Glyph::Ring,
        Glyph::HBar,
        Glyph::VBar,
    ];

    /// Whether local coordinates `(u, v) ∈ [0,1)²` fall on the glyph.
    pub fn covers(self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        let r2 = du * du + dv * dv;
        match self {
            Glyph::Square => true,
            Glyph::Circle => r2 <= 0.25,
            Glyph::Triangle => v >= 2.0 * du.abs(),
            Glyph::Diamond => du.abs() + dv.abs() <= 0.5,
            Glyph::Cross => du.abs() < 0.17 || dv.abs() < 0.17,
            Glyph::Ring => (0.09..=0.25).contains(&r2),
            Glyph::HBar => dv.abs() < 0.25,
            Glyph::VBar => du.abs() < 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Novel,
}

/// Typical placement of a category: center and extent, normalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutPrior {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub glyph: Glyph,
    pub prior: LayoutPrior,
    pub split: Split,
}

fn halton(mut i: usize, base: usize) -> f64 {
    let (mut f, mut r) = (1.0, 0.0);
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// The category vocabulary, split into disjoint base and novel sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    categories: Vec<Category>,
}

impl Registry {
    pub fn new(categories: Vec<Category>) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::Empty("category registry"));
        }
        let mut seen = HashMap::new();
        for (i, c) in categories.iter().enumerate() {
            if seen.insert(c.name.clone(), i).is_some() {
                return Err(Error::Config(format!("category `{}` listed twice", c.name)));
            }
            if c.name.split_whitespace().count() != 1 || Color::from_name(&c.name).is_some() {
                return Err(Error::Config(format!(
                    "category name `{}` must be one word and not a color",
                    c.name
                )));
            }
        }
        Ok(Self { categories })
    }

    /// `n_base` base categories followed by `n_novel` novel ones, with layout
    /// priors spread over the image by a Halton sequence.
    pub fn generate(n_base: usize, n_novel: usize) -> Result<Self> {
        let n = n_base + n_novel;
        let sizes = [(0.16, 0.16), (0.26, 0.18), (0.18, 0.26), (0.3, 0.3), (0.22, 0.22)];
        let categories = (0..n)
            .map(|i| {
                let name = CATEGORY_NAMES
                    .get(i)
                    .map_or_else(|| format!("glyph{i}"), |s| (*s).to_owned());
                let (w, h) = sizes[i % sizes.len()];
                let cx = 0.5 * w + (1.0 - w) * (0.1 + 0.8 * halton(i + 1, 2));
                let cy = 0.5 * h + (1.0 - h) * (0.1 + 0.8 * halton(i + 1, 3));
                Category {
                    name,
                    glyph: Glyph::ALL[i % Glyph::ALL.len()],
                    prior: LayoutPrior { cx, cy, w, h },
                    split: if i < n_base { Split::Base } else { Split::Novel },
                }
            })
            .collect();
        Self::new(categories)
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn get(&self, name: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.name == name)
    }

    pub fn base(&self) -> impl Iterator<Item = &Category> {
        self.categories.iter().filter(|c| c.split == Split::Base)
    }

    pub fn novel(&self) -> impl Iterator<Item = &Category> {
        self.categories.iter().filter(|c| c.split == Split::Novel)
    }

    /// The registry as seen by generation: base categories only.
    pub fn visible(&self) -> Registry {
        Registry {
            categories: self.base().cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    /// Joint text/vision embedding width.
    pub dim: usize,
    pub latent_dim: usize,
    /// Width of detector backbone region features.
    pub feature_dim: usize,
    /// Weight of the category-private component relative to the shared one.
    pub private_weight: f64,
    /// Std of per-region backbone feature noise.
    pub feature_noise: f64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            latent_dim: 8,
            feature_dim: 32,
            private_weight: 1.0,
            feature_noise: 0.1,
            seed: 0x5EED,
        }
    }
}

/// Relative weights of the pieces that make up a synthetic embedding.
pub const COLOR_WEIGHT: f64 = 0.5;
pub const WORD_WEIGHT: f64 = 0.25;
pub const BACKGROUND_WEIGHT: f64 = 0.35;

/// Directions of every category, color and background in both spaces.
#[derive(Debug, Clone)]
pub struct SemanticSpace {
    pub text: Vec<Vec<f64>>,
    pub color_text: Vec<Vec<f64>>,
    pub background_text: Vec<f64>,
    pub features: Vec<Vec<f64>>,
    pub color_features: Vec<Vec<f64>>,
    pub background_features: Vec<Vec<f64>>,
    word_seed: u64,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v * scale
        })
        .collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    for x in &mut v {
        *x /= n;
    }
    v
}

fn project(m: &[Vec<f64>], z: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum()).collect()
}

impl SemanticSpace {
    pub fn new(registry: &Registry, cfg: &WorldConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let k = cfg.latent_dim;
        let s = 1.0 / (k as f64).sqrt();
        let b: Vec<Vec<f64>> = (0..cfg.dim).map(|_| gaussian(&mut rng, k, s)).collect();
        let a: Vec<Vec<f64>> = (0..cfg.feature_dim).map(|_| gaussian(&mut rng, k, s)).collect();
        let mut text = Vec::new();
        let mut features = Vec::new();
        for _ in registry.categories() {
            let z = gaussian(&mut rng, k, 1.0);
            let zn = norm(&z);
            let z: Vec<f64> = z.iter().map(|v| v / zn).collect();
            let shared_t = unit(project(&b, &z));
            let private_t = unit(gaussian(&mut rng, cfg.dim, 1.0));
            text.push(unit(
                shared_t
                    .iter()
                    .zip(&private_t)
                    .map(|(x, y)| x + cfg.private_weight * y)
                    .collect(),
            ));
            let shared_f = unit(project(&a, &z));
            let private_f = unit(gaussian(&mut rng, cfg.feature_dim, 1.0));
            features.push(unit(
                shared_f
                    .iter()
                    .zip(&private_f)
                    .map(|(x, y)| x + cfg.private_weight * y)
                    .collect(),
            ));
        }
        let color_text = Color::ALL.iter().map(|_| unit(gaussian(&mut rng, cfg.dim, 1.0))).collect();
        let color_features = Color::ALL
            .iter()
            .map(|_| unit(gaussian(&mut rng, cfg.feature_dim, 1.0)))
            .collect();
        let background_text = unit(gaussian(&mut rng, cfg.dim, 1.0));
        let background_features = (0..4)
            .map(|_| unit(gaussian(&mut rng, cfg.feature_dim, 1.0)))
            .collect();
        Self {
            text,
            color_text,
            background_text,
            features,
            color_features,
            background_features,
            word_seed: cfg.seed ^ 0x9E37_79B9_7F4A_7C15,
        }
    }

    /// Deterministic direction for a word outside the vocabulary.
    pub fn word(&self, word: &str, dim: usize) -> Vec<f64> {
        let seed = stable_hash(&[&self.word_seed.to_le_bytes(), word.as_bytes()]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        unit(gaussian(&mut rng, dim, 1.0))
    }
}

/// A registry plus its semantic space.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub config: WorldConfig,
    pub registry: Registry,
    pub space: SemanticSpace,
    visible: Registry,
}

impl SynthWorld {
    pub fn new(registry: Registry, config: WorldConfig) -> Result<Self> {
        if config.dim == 0 || config.latent_dim == 0 || config.feature_dim == 0 {
            return Err(Error::Config("world dimensions must be positive".into()));
        }
        let space = SemanticSpace::new(&registry, &config);
        let visible = registry.visible();
        Ok(Self {
            config,
            registry,
            space,
            visible,
        })
    }

    /// Registry restricted to what generation may see.
    pub fn visible(&self) -> &Registry {
        &self.visible
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }
}
