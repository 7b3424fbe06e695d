use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::world::{Glyph, Registry};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::providers::{Color, Image, LabelLayer, SynthObject};

pub const DEFAULT_CANVAS: u32 = 64;

/// Gray levels of the background texture. Palette colors are never gray, so a
/// colored pixel always belongs to an object.
pub const BACKGROUND_LEVELS: std::ops::RangeInclusive<u8> = 70..=130;

/// A synthetic image described by its objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthScene {
    pub width: u32,
    pub height: u32,
    pub objects: Vec<SynthObject>,
}

impl SynthScene {
    pub fn new(objects: Vec<SynthObject>) -> Self {
        Self {
            width: DEFAULT_CANVAS,
            height: DEFAULT_CANVAS,
            objects,
        }
    }

    pub fn validate(&self, registry: &Registry) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("scene canvas must be non-empty".into()));
        }
        if self.objects.len() >= u16::MAX as usize {
            return Err(Error::InvalidArgument("too many objects in scene".into()));
        }
        for o in &self.objects {
            if registry.get(&o.category).is_none() {
                return Err(Error::InvalidArgument(format!(
                    "unknown category `{}`",
                    o.category
                )));
            }
        }
        Ok(())
    }
}

fn background_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rasterizes a scene: seeded gray texture, then each object's glyph in order.
pub fn render(scene: &SynthScene, registry: &Registry, seed: u64) -> Result<Image> {
    scene.validate(registry)?;
    let (w, h) = (scene.width, scene.height);
    let mut rng = background_rng(seed);
    let mut rgb = Vec::with_capacity((w * h * 3) as usize);
    for _ in 0..w * h {
        let g = rng.random_range(BACKGROUND_LEVELS);
        rgb.extend_from_slice(&[g, g, g]);
    }
    let mut image = Image::new(w, h, rgb).with_labels(LabelLayer {
        ids: vec![0; (w * h) as usize],
        objects: scene.objects.clone(),
    });
    for (i, o) in scene.objects.iter().enumerate() {
        let glyph = registry.get(&o.category).expect("validated").glyph;
        draw_glyph(&mut image, &o.bbox, glyph, o.color, i as u16 + 1);
    }
    Ok(image)
}

/// Paints `glyph` into the pixels of `region`, setting their label to `id`.
/// Touches nothing outside the region's pixel span.
pub fn draw_glyph(image: &mut Image, region: &BBox, glyph: Glyph, color: Color, id: u16) {
    let (x0, y0, x1, y1) = image.span(region);
    let (iw, ih) = (image.width() as f64, image.height() as f64);
    for y in y0..y1 {
        for x in x0..x1 {
            let u = ((x as f64 + 0.5) / iw - region.x()) / region.w();
            let v = ((y as f64 + 0.5) / ih - region.y()) / region.h();
            if glyph.covers(u.clamp(0.0, 0.999_999), v.clamp(0.0, 0.999_999)) {
                image.set_pixel(x, y, color.rgb());
                image.set_label(x, y, id);
            }
        }
    }
}

/// Redraws background texture inside `region` only, clearing its labels.
pub fn repaint_background(image: &mut Image, region: &BBox, seed: u64) {
    let (x0, y0, x1, y1) = image.span(region);
    let mut rng = background_rng(seed);
    for y in y0..y1 {
        for x in x0..x1 {
            let g = rng.random_range(BACKGROUND_LEVELS);
            image.set_pixel(x, y, [g, g, g]);
            image.set_label(x, y, 0);
        }
    }
}
