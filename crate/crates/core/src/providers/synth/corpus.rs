//! Random scenes, captions and allocation tasks drawn from the world.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::render::SynthScene;
use super::world::{Category, Registry};
use crate::geometry::{iou, BBox, ScoredBox};
use crate::providers::{Color, SynthObject};

/// Placement noise around a category's layout prior.
pub const CENTER_JITTER: f64 = 0.04;
pub const SIZE_JITTER: f64 = 0.1;

/// Largest IoU allowed between two objects of one scene.
pub const MAX_OBJECT_OVERLAP: f64 = 0.2;

const FILLERS: [&str; 6] = [
    "",
    " on a sunny day",
    " at a party",
    " in the morning",
    " at an outdoor event",
    " in beautiful weather",
];

/// Samples a box for `category` near its layout prior.
pub fn sample_box(category: &Category, rng: &mut impl Rng) -> BBox {
    let p = category.prior;
    let w = p.w * rng.random_range(1.0 - SIZE_JITTER..=1.0 + SIZE_JITTER);
    let h = p.h * rng.random_range(1.0 - SIZE_JITTER..=1.0 + SIZE_JITTER);
    let cx = p.cx + rng.random_range(-CENTER_JITTER..=CENTER_JITTER);
    let cy = p.cy + rng.random_range(-CENTER_JITTER..=CENTER_JITTER);
    BBox::from_corners(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
        .expect("prior boxes are well inside the canvas")
}

/// Up to `count` objects of distinct categories from `registry`, placed near
/// their priors and overlapping each other by at most [`MAX_OBJECT_OVERLAP`].
pub fn sample_objects(registry: &Registry, count: usize, rng: &mut impl Rng) -> Vec<SynthObject> {
    let mut cats: Vec<&Category> = registry.categories().iter().collect();
    cats.shuffle(rng);
    let mut objects: Vec<SynthObject> = Vec::new();
    for cat in cats {
        if objects.len() == count {
            break;
        }
        for _ in 0..8 {
            let b = sample_box(cat, rng);
            if objects.iter().all(|o| iou(&o.bbox, &b) <= MAX_OBJECT_OVERLAP) {
                objects.push(SynthObject {
                    category: cat.name.clone(),
                    color: Color::ALL[rng.random_range(0..Color::ALL.len())],
                    bbox: b,
                });
                break;
            }
        }
    }
    objects
}

/// Caption naming the one or two largest objects, plus optional filler.
pub fn describe(objects: &[SynthObject], rng: &mut impl Rng) -> String {
    let mut by_size: Vec<&SynthObject> = objects.iter().collect();
    by_size.sort_by(|a, b| b.bbox.area().total_cmp(&a.bbox.area()));
    let named = by_size.len().min(rng.random_range(1..=2));
    let mut text = by_size[..named]
        .iter()
        .map(|o| format!("a {} {}", o.color.name(), o.category))
        .collect::<Vec<_>>()
        .join(" and ");
    if text.is_empty() {
        text = "an empty scene".into();
    }
    text.push_str(FILLERS[rng.random_range(0..FILLERS.len())]);
    text
}

/// One captioned synthetic image.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub scene: SynthScene,
    pub render_seed: u64,
    pub caption: String,
}

/// `n` scenes of 2–4 objects drawn from `registry`.
pub fn sample_corpus(registry: &Registry, n: usize, seed: u64) -> Vec<SynthSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let count = rng.random_range(2..=4);
            let objects = sample_objects(registry, count, &mut rng);
            let caption = describe(&objects, &mut rng);
            SynthSample {
                scene: SynthScene::new(objects),
                render_seed: rng.random(),
                caption,
            }
        })
        .collect()
}

/// A supervised allocation example: which phrase belongs in which box.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationExample {
    pub sample: SynthSample,
    pub phrases: Vec<String>,
    pub boxes: Vec<ScoredBox>,
    /// `gold[n]` indexes the phrase generated for `boxes[n]`.
    pub gold: Vec<usize>,
}

/// Scenes with 2 or 3 objects; phrases are the objects' names in shuffled
/// order, boxes their placements with a proposal-like confidence.
pub fn allocation_task(registry: &Registry, n: usize, seed: u64) -> Vec<AllocationExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let count = rng.random_range(2..=3);
        let objects = sample_objects(registry, count, &mut rng);
        if objects.len() < 2 {
            continue;
        }
        let caption = describe(&objects, &mut rng);
        let mut order: Vec<usize> = (0..objects.len()).collect();
        order.shuffle(&mut rng);
        let phrases = order
            .iter()
            .map(|&i| format!("{} {}", objects[i].color.name(), objects[i].category))
            .collect();
        let mut gold = vec![0; objects.len()];
        for (slot, &i) in order.iter().enumerate() {
            gold[i] = slot;
        }
        let boxes = objects
            .iter()
            .map(|o| ScoredBox::new(o.bbox, rng.random_range(0.5..=1.0)).expect("unit score"))
            .collect();
        out.push(AllocationExample {
            sample: SynthSample {
                scene: SynthScene::new(objects),
                render_seed: rng.random(),
                caption,
            },
            phrases,
            boxes,
            gold,
        });
    }
    out
}
