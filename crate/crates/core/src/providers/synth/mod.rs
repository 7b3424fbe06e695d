//! A deterministic world of colored glyphs that implements every provider.
//!
//! Images carry a per-pixel label layer, so encoders, the captioner and the
//! proposal generator can answer from ground truth while the pipeline treats
//! them as opaque models.

pub mod corpus;
pub mod models;
pub mod render;
pub mod world;

use std::sync::Arc;

pub use corpus::{allocation_task, sample_corpus, sample_objects, AllocationExample, SynthSample};
pub use render::{render, SynthScene};
pub use world::{Category, Glyph, Registry, Split, SynthWorld, WorldConfig, BACKGROUND_WEIGHT, COLOR_WEIGHT};

use super::ProviderSuite;
use crate::error::Result;

/// Builds a world over `registry` with embedding width `dim` and returns it
/// with a provider suite backed by it.
pub fn synth_suite(registry: Registry, dim: usize, seed: u64) -> Result<(Arc<SynthWorld>, ProviderSuite)> {
    let world = Arc::new(SynthWorld::new(
        registry,
        WorldConfig {
            dim,
            seed,
            ..WorldConfig::default()
        },
    )?);
    let suite = suite_for(world.clone(), seed);
    Ok((world, suite))
}

/// Provider suite over an existing world.
pub fn suite_for(world: Arc<SynthWorld>, seed: u64) -> ProviderSuite {
    models::build(world, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{iou, BBox};
    use crate::providers::{Color, LocalityChecked, Inpainter, SynthObject};

    fn suite(n: usize) -> (Arc<SynthWorld>, ProviderSuite) {
        synth_suite(Registry::generate(n, 0).unwrap(), 64, 7).unwrap()
    }

    #[test]
    fn agreement_matrix_is_diagonal_dominant() {
        let (world, s) = suite(10);
        let cats = world.registry.categories();
        let mut min_margin = f64::INFINITY;
        for (ci, cat) in cats.iter().enumerate() {
            for color in [Color::Red, Color::Blue, Color::Yellow] {
                let b = BBox::new(0.2, 0.2, 0.6, 0.6).unwrap();
                let scene = SynthScene::new(vec![SynthObject {
                    category: cat.name.clone(),
                    color,
                    bbox: b,
                }]);
                let img = render(&scene, &world.registry, ci as u64).unwrap();
                let v = s.vision_encoder.embed_image(&img.crop(&b)).unwrap();
                let sims: Vec<f64> = cats
                    .iter()
                    .map(|c| {
                        let t = s
                            .text_encoder
                            .embed_text(&format!("a {} {}", color.name(), c.name))
                            .unwrap();
                        v.cosine(&t)
                    })
                    .collect();
                for (cj, &sim) in sims.iter().enumerate() {
                    if cj != ci {
                        min_margin = min_margin.min(sims[ci] - sim);
                    }
                }
            }
        }
        assert!(min_margin >= 0.3, "margin {min_margin}");
    }

    #[test]
    fn inpainting_is_local_and_recognizable() {
        let (world, s) = suite(6);
        let sample = &sample_corpus(&world.registry, 1, 3)[0];
        let img = render(&sample.scene, &world.registry, sample.render_seed).unwrap();
        let region = BBox::new(0.1, 0.15, 0.4, 0.3).unwrap();
        let checked = LocalityChecked(s.inpainter.clone());
        let out = checked.inpaint(&img, &region, "a blue circle").unwrap();
        assert_eq!(img.changed_outside(&out, &region), 0);
        let crop = out.crop(&region);
        let (idx, _) = models::dominant_object(&crop).unwrap();
        assert_eq!(crop.labels().unwrap().objects[idx].category, "circle");
        assert!(matches!(
            s.inpainter.inpaint(&img, &region, "a purple dragon"),
            Err(crate::providers::ProviderError::FailedRegion(_))
        ));
    }

    #[test]
    fn proposals_match_ground_truth() {
        let (world, s) = suite(10);
        let reg = &world.registry;
        let objects = vec![
            ("square", BBox::new(0.05, 0.05, 0.3, 0.3).unwrap()),
            ("circle", BBox::new(0.6, 0.1, 0.3, 0.25).unwrap()),
            ("diamond", BBox::new(0.3, 0.6, 0.35, 0.3).unwrap()),
        ];
        let scene = SynthScene::new(
            objects
                .iter()
                .map(|(c, b)| SynthObject { category: (*c).into(), color: Color::Green, bbox: *b })
                .collect(),
        );
        let img = render(&scene, reg, 0).unwrap();
        let props = s.proposal_gen.propose(&img).unwrap();
        assert!(props.len() >= 3);
        for (_, truth) in &objects {
            assert!(props.iter().any(|p| iou(&p.bbox, truth) >= 0.5));
        }
        for p in &props {
            assert!((0.3..=1.0).contains(&p.score));
        }
    }

    #[test]
    fn captions_name_the_dominant_object() {
        let (world, s) = suite(6);
        let b = BBox::new(0.2, 0.2, 0.5, 0.5).unwrap();
        let scene = SynthScene::new(vec![SynthObject { category: "ring".into(), color: Color::Pink, bbox: b }]);
        let img = render(&scene, &world.registry, 1).unwrap();
        let mut hits = 0;
        for k in 0..40 {
            let c = s.captioner.caption(&img.crop(&b), &format!("prompt {k}")).unwrap();
            hits += c.contains("ring") as usize;
        }
        assert!(hits >= 25, "{hits}");
        let bg = render(&SynthScene::new(vec![]), &world.registry, 1).unwrap();
        assert_eq!(s.captioner.caption(&bg, "x").unwrap(), models::BACKGROUND_CAPTION);
    }

    #[test]
    fn phrase_extraction_and_text_encoding() {
        let (_, s) = suite(6);
        let p = s
            .phrase_extractor
            .extract("A red square and a circle on a sunny day, red square")
            .unwrap();
        assert_eq!(p, vec!["red square", "circle", "day"]);
        let e = s.text_encoder.embed_text("").unwrap();
        assert!((crate::tinynn::tensor::norm(e.as_slice()) - 1.0).abs() < 1e-12);
    }
}
