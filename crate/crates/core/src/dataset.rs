//! Corpora, generated pair files and training-source routing.
//!
//! Pair files are JSON lines: a header `{"schema": "rtgen/1"}` followed by one
//! [`PairRecord`] per line. Corpus manifests are a single JSON document.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::providers::synth::SynthScene;

pub const SCHEMA_VERSION: &str = "rtgen/1";

/// Where a region-text pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    T2r,
    R2t,
    /// The image-caption pair itself, treated as a full-image region.
    Cap,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::T2r => "t2r",
            Provenance::R2t => "r2t",
            Provenance::Cap => "cap",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t2r" => Ok(Provenance::T2r),
            "r2t" => Ok(Provenance::R2t),
            "cap" => Ok(Provenance::Cap),
            other => Err(Error::UnknownProvenance(other.to_owned())),
        }
    }
}

/// One generated (or caption-derived) region-text pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub image_id: String,
    /// Normalized box; multiply by the image size for pixels.
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub image_width: u32,
    pub image_height: u32,
    pub text: String,
    pub provenance: Provenance,
    /// Selection similarity or filter margin.
    pub quality: f64,
    /// Layout sampling seed; present on t2r records only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout_seed: Option<u64>,
}

impl PairRecord {
    /// The caption as a full-image pair.
    pub fn from_caption(image_id: &str, caption: &str, width: u32, height: u32) -> Self {
        Self {
            image_id: image_id.to_owned(),
            bbox: BBox::full(),
            image_width: width,
            image_height: height,
            text: caption.to_owned(),
            provenance: Provenance::Cap,
            quality: 1.0,
            layout_seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.quality.is_finite() {
            return Err(Error::NonFinite("pair quality"));
        }
        if self.provenance == Provenance::Cap && self.bbox != BBox::full() {
            return Err(Error::InvalidArgument("caption pairs must use the full-image box".into()));
        }
        if self.layout_seed.is_some() != (self.provenance == Provenance::T2r) {
            return Err(Error::InvalidArgument("layout_seed is required on t2r pairs and only there".into()));
        }
        Ok(())
    }

    /// Box in pixel coordinates of the source image.
    pub fn pixel_box(&self) -> [f64; 4] {
        self.bbox.to_pixels(self.image_width, self.image_height)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
}

fn header_line() -> String {
    serde_json::to_string(&Header { schema: SCHEMA_VERSION.into() }).expect("header serializes")
}

/// Serializes records to any writer, header first.
pub fn write_pairs_to<W: Write>(records: &[PairRecord], mut w: W) -> Result<usize> {
    writeln!(w, "{}", header_line())?;
    for r in records {
        r.validate()?;
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(records.len())
}

pub fn write_pairs(records: &[PairRecord], path: &Path) -> Result<usize> {
    write_pairs_to(records, BufWriter::new(File::create(path)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadMode {
    /// Abort on the first malformed line.
    Strict,
    /// Skip malformed lines and count them.
    Lenient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReadOutcome {
    pub records: Vec<PairRecord>,
    /// 1-based line numbers that were skipped in lenient mode.
    pub skipped: Vec<usize>,
}

pub fn read_pairs_from<R: BufRead>(reader: R, source: &Path, mode: ReadMode) -> Result<ReadOutcome> {
    let malformed = |line: usize, message: String| Error::MalformedLine {
        path: source.to_path_buf(),
        line,
        message,
    };
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| malformed(1, "missing schema header".into()))??;
    let header: Header = serde_json::from_str(&header).map_err(|e| malformed(1, e.to_string()))?;
    if header.schema != SCHEMA_VERSION {
        return Err(Error::SchemaVersion { expected: SCHEMA_VERSION.into(), found: header.schema });
    }
    let mut out = ReadOutcome { records: vec![], skipped: vec![] };
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<PairRecord>(&line)
            .map_err(|e| e.to_string())
            .and_then(|r| r.validate().map(|_| r).map_err(|e| e.to_string()));
        match (parsed, mode) {
            (Ok(r), _) => out.records.push(r),
            (Err(e), ReadMode::Strict) => return Err(malformed(lineno, e)),
            (Err(e), ReadMode::Lenient) => {
                log::warn!("{}:{lineno}: skipping malformed record: {e}", source.display());
                out.skipped.push(lineno);
            }
        }
    }
    Ok(out)
}

pub fn read_pairs(path: &Path, mode: ReadMode) -> Result<ReadOutcome> {
    read_pairs_from(BufReader::new(File::open(path)?), path, mode)
}

/// How to obtain the pixels of a corpus image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ImageRef {
    /// An image file (PNG), relative paths resolved against the manifest.
    Path { path: PathBuf },
    /// A synthetic scene rendered with the given background seed.
    Synth { scene: SynthScene, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub image_id: String,
    pub image_ref: ImageRef,
    #[serde(default)]
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub schema: String,
    pub records: Vec<CorpusRecord>,
}

impl CorpusManifest {
    pub fn new(records: Vec<CorpusRecord>) -> Result<Self> {
        let m = Self { schema: SCHEMA_VERSION.into(), records };
        m.validate()?;
        Ok(m)
    }

    /// Checks the schema and image id uniqueness; warns about empty captions.
    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::SchemaVersion { expected: SCHEMA_VERSION.into(), found: self.schema.clone() });
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.image_id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate image_id `{}`", r.image_id)));
            }
            if r.caption.trim().is_empty() {
                log::warn!("image `{}` has an empty caption", r.image_id);
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut m: Self = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        m.validate()?;
        let base = path.parent().unwrap_or(Path::new(""));
        for r in &mut m.records {
            if let ImageRef::Path { path } = &mut r.image_ref {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

/// Which dataset a training item is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DataSource {
    Detection,
    Pairs(Provenance),
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "detection" {
            Ok(DataSource::Detection)
        } else {
            s.parse().map(DataSource::Pairs)
        }
    }
}

/// The loss an item trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossBranch {
    /// Box regression and classification on annotated detection data.
    Detector,
    /// The region-text contrastive loss. `full_image` marks caption pairs,
    /// whose region is the whole image.
    Lart { full_image: bool },
}

pub fn route_source(source: DataSource) -> LossBranch {
    match source {
        DataSource::Detection => LossBranch::Detector,
        DataSource::Pairs(p) => LossBranch::Lart { full_image: p == Provenance::Cap },
    }
}

pub fn route_record(record: &PairRecord) -> LossBranch {
    route_source(DataSource::Pairs(record.provenance))
}

/// Ratio of detection steps to region-text steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceMix {
    pub detection: u32,
    pub region_text: u32,
}

impl Default for SourceMix {
    fn default() -> Self {
        Self { detection: 1, region_text: 4 }
    }
}

impl SourceMix {
    pub fn validate(&self) -> Result<()> {
        if self.detection == 0 && self.region_text == 0 {
            return Err(Error::Config("source mix must have a positive component".into()));
        }
        Ok(())
    }

    pub fn window(&self) -> usize {
        (self.detection + self.region_text) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamStep {
    /// Index into the detection stream.
    Detection(usize),
    /// Index into the pair stream.
    Pair(usize),
}

/// Endless step sequence honoring the mix exactly in every window of
/// `detection + region_text` steps; slot order within a window is shuffled
/// by the seed and each stream is cycled through in order.
#[derive(Debug, Clone)]
pub struct Interleave {
    mix: SourceMix,
    detection_len: usize,
    pair_len: usize,
    rng: ChaCha8Rng,
    window: Vec<bool>,
    pos: usize,
    next_detection: usize,
    next_pair: usize,
}

pub fn interleave(detection_len: usize, pair_len: usize, mix: SourceMix, seed: u64) -> Result<Interleave> {
    mix.validate()?;
    if mix.detection > 0 && detection_len == 0 {
        return Err(Error::Empty("detection stream"));
    }
    if mix.region_text > 0 && pair_len == 0 {
        return Err(Error::Empty("region-text stream"));
    }
    Ok(Interleave {
        mix,
        detection_len,
        pair_len,
        rng: ChaCha8Rng::seed_from_u64(seed),
        window: Vec::new(),
        pos: 0,
        next_detection: 0,
        next_pair: 0,
    })
}

impl Iterator for Interleave {
    type Item = StreamStep;

    fn next(&mut self) -> Option<StreamStep> {
        if self.pos == self.window.len() {
            self.window.clear();
            self.window.extend(std::iter::repeat_n(true, self.mix.detection as usize));
            self.window.extend(std::iter::repeat_n(false, self.mix.region_text as usize));
            self.window.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let is_detection = self.window[self.pos];
        self.pos += 1;
        Some(if is_detection {
            let i = self.next_detection;
            self.next_detection = (i + 1) % self.detection_len;
            StreamStep::Detection(i)
        } else {
            let i = self.next_pair;
            self.next_pair = (i + 1) % self.pair_len;
            StreamStep::Pair(i)
        })
    }
}
