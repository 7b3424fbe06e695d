use serde::{Deserialize, Serialize};

use super::stable_hash;
use crate::geometry::BBox;

/// Named palette colors used by the synthetic world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
    Cyan,
    Pink,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Orange,
        Color::Cyan,
        Color::Pink,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
            Color::Cyan => "cyan",
            Color::Pink => "pink",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [40, 80, 220],
            Color::Yellow => [230, 210, 40],
            Color::Purple => [150, 60, 190],
            Color::Orange => [240, 140, 30],
            Color::Cyan => [40, 200, 210],
            Color::Pink => [240, 120, 180],
        }
    }

    pub fn from_name(name: &str) -> Option<Color> {
        Color::ALL.into_iter().find(|c| c.name() == name)
    }

    pub fn index(self) -> usize {
        Color::ALL.iter().position(|&c| c == self).expect("palette color")
    }
}

/// A ground-truth object placed in a synthetic image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthObject {
    pub category: String,
    pub color: Color,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// Per-pixel object ids for a synthetic image: 0 is background, `i + 1`
/// refers to `objects[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelLayer {
    pub ids: Vec<u16>,
    pub objects: Vec<SynthObject>,
}

/// An RGB raster, optionally carrying the synthetic world's label layer.
///
/// Real photographs have no label layer; synthetic providers read it to know
/// which object each pixel shows.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: u32,
    height: u32,
    rgb: Vec<u8>,
    labels: Option<LabelLayer>,
}

impl Image {
    /// Panics if `rgb` does not hold `width·height·3` bytes.
    pub fn new(width: u32, height: u32, rgb: Vec<u8>) -> Self {
        assert_eq!(rgb.len(), (width * height * 3) as usize, "rgb buffer size");
        Self {
            width,
            height,
            rgb,
            labels: None,
        }
    }

    pub fn with_labels(mut self, labels: LabelLayer) -> Self {
        assert_eq!(labels.ids.len(), (self.width * self.height) as usize, "label buffer size");
        self.labels = Some(labels);
        self
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn rgb(&self) -> &[u8] {
        &self.rgb
    }

    pub fn labels(&self) -> Option<&LabelLayer> {
        self.labels.as_ref()
    }

    pub fn labels_mut(&mut self) -> Option<&mut LabelLayer> {
        self.labels.as_mut()
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.rgb[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn label(&self, x: u32, y: u32) -> u16 {
        self.labels
            .as_ref()
            .map_or(0, |l| l.ids[(y * self.width + x) as usize])
    }

    pub fn set_label(&mut self, x: u32, y: u32, id: u16) {
        let w = self.width;
        if let Some(l) = self.labels.as_mut() {
            l.ids[(y * w + x) as usize] = id;
        }
    }

    /// Pixel span of a box, widened to at least one pixel.
    pub fn span(&self, region: &BBox) -> (u32, u32, u32, u32) {
        let (mut x0, mut y0, mut x1, mut y1) = region.pixel_span(self.width, self.height);
        if x1 <= x0 {
            x0 = x0.min(self.width - 1);
            x1 = x0 + 1;
        }
        if y1 <= y0 {
            y0 = y0.min(self.height - 1);
            y1 = y0 + 1;
        }
        (x0, y0, x1, y1)
    }

    pub fn crop(&self, region: &BBox) -> Image {
        let (x0, y0, x1, y1) = self.span(region);
        let (w, h) = (x1 - x0, y1 - y0);
        let mut rgb = Vec::with_capacity((w * h * 3) as usize);
        let mut ids = Vec::with_capacity((w * h) as usize);
        for y in y0..y1 {
            let start = ((y * self.width + x0) * 3) as usize;
            rgb.extend_from_slice(&self.rgb[start..start + (w * 3) as usize]);
            if let Some(l) = &self.labels {
                let s = (y * self.width + x0) as usize;
                ids.extend_from_slice(&l.ids[s..s + w as usize]);
            }
        }
        Image {
            width: w,
            height: h,
            rgb,
            labels: self.labels.as_ref().map(|l| LabelLayer {
                ids,
                objects: l.objects.clone(),
            }),
        }
    }

    /// Paints a box with a flat color and marks it as background.
    pub fn fill_region(&mut self, region: &BBox, rgb: [u8; 3]) {
        let (x0, y0, x1, y1) = self.span(region);
        for y in y0..y1 {
            for x in x0..x1 {
                self.set_pixel(x, y, rgb);
                self.set_label(x, y, 0);
            }
        }
    }

    /// Counts pixels outside `region` whose RGB differs from `other`.
    pub fn changed_outside(&self, other: &Image, region: &BBox) -> usize {
        if self.width != other.width || self.height != other.height {
            return (self.width * self.height) as usize;
        }
        let (x0, y0, x1, y1) = self.span(region);
        let mut changed = 0;
        for y in 0..self.height {
            for x in 0..self.width {
                let inside = x >= x0 && x < x1 && y >= y0 && y < y1;
                if !inside && self.pixel(x, y) != other.pixel(x, y) {
                    changed += 1;
                }
            }
        }
        changed
    }

    /// Pixel counts per label id (index 0 is background).
    pub fn label_counts(&self) -> Vec<usize> {
        let Some(l) = &self.labels else {
            return vec![(self.width * self.height) as usize];
        };
        let mut counts = vec![0usize; l.objects.len() + 1];
        for &id in &l.ids {
            counts[id as usize] += 1;
        }
        counts
    }

    pub fn fingerprint(&self) -> u64 {
        stable_hash(&[
            &self.width.to_le_bytes(),
            &self.height.to_le_bytes(),
            &self.rgb,
        ])
    }

    pub fn pixel_count(&self) -> usize {
        (self.width * self.height) as usize
    }
}
