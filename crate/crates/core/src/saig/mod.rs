//! Scene-aware allocation of caption phrases to proposal boxes.
//!
//! A scene is the token sequence `[caption, canvas, phrases…, boxes…]`. Text and
//! image tokens come from the encoders; each box token is a three-layer SiLU
//! MLP applied to the box's Fourier features. After the transformer, every box
//! output token is dotted with the raw phrase embeddings and softmaxed over
//! phrases, giving `P(phrase | box, scene)`. Multiplying by the box's proposal
//! confidence gives the joint used for layout sampling.

mod sampling;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use sampling::{sample_layout, Assignment, Layout, NUCLEUS_TOLERANCE};

use crate::error::{Error, Result};
use crate::geometry::{fourier_embed, fourier_len, BBox, DEFAULT_FREQUENCIES};
use crate::tinynn::tensor::softmax;
use crate::tinynn::{adamw_step, checkpoint, AdamState, Encoder, Grads, Graph, Linear, NodeId, OptimizerConfig, ParamSet, Tensor2D, TransformerConfig};

/// Default nucleus mass for layout sampling.
pub const DEFAULT_TOP_P: f64 = 0.9;
/// Default number of box/phrase assignments drawn per layout.
pub const DEFAULT_MAX_PAIRS: usize = 3;
/// Boxes with a lower prior are dropped before allocation.
pub const MIN_PRIOR: f64 = 0.3;
/// Tolerance on probability rows summing to one.
pub const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaigConfig {
    pub transformer: TransformerConfig,
    /// Fourier frequencies per box coordinate.
    pub frequencies: usize,
    pub seed: u64,
}

impl Default for SaigConfig {
    fn default() -> Self {
        Self {
            transformer: TransformerConfig::default(),
            frequencies: DEFAULT_FREQUENCIES,
            seed: 0,
        }
    }
}

impl SaigConfig {
    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        if self.frequencies == 0 {
            return Err(Error::Config("saig.frequencies must be at least 1".into()));
        }
        Ok(())
    }
}

/// Raw inputs of one scene: encoder outputs plus the candidate boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneInput {
    pub caption: Vec<f64>,
    /// Embedding of the image with proposal interiors obscured.
    pub canvas: Vec<f64>,
    pub phrases: Vec<Vec<f64>>,
    pub boxes: Vec<BBox>,
}

/// A scene with the supervised phrase index for every box.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub input: SceneInput,
    pub gold: Vec<usize>,
}

/// The token sequence fed to the transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTokens {
    pub caption_emb: Vec<f64>,
    pub canvas_emb: Vec<f64>,
    pub phrase_embs: Vec<Vec<f64>>,
    pub box_embs: Vec<Vec<f64>>,
}

impl SceneTokens {
    pub fn len(&self) -> usize {
        2 + self.phrase_embs.len() + self.box_embs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Tokens as rows, in order caption, canvas, phrases, boxes.
    pub fn to_tensor(&self) -> Tensor2D {
        let mut rows: Vec<&[f64]> = vec![&self.caption_emb, &self.canvas_emb];
        rows.extend(self.phrase_embs.iter().map(Vec::as_slice));
        rows.extend(self.box_embs.iter().map(Vec::as_slice));
        Tensor2D::from_rows(&rows)
    }
}

/// `P(phrase | box, scene)`, box priors and their product.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationMatrix {
    pub probs: Tensor2D,
    pub priors: Vec<f64>,
    pub joint: Tensor2D,
}

impl AllocationMatrix {
    pub fn new(probs: Tensor2D, priors: Vec<f64>) -> Result<Self> {
        if probs.rows() != priors.len() {
            return Err(Error::DimensionMismatch {
                expected: probs.rows(),
                got: priors.len(),
                context: "allocation priors",
            });
        }
        if let Some(p) = priors.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!("box prior {p} outside [0, 1]")));
        }
        let mut joint = probs.clone();
        for (n, &p) in priors.iter().enumerate() {
            joint.row_mut(n).iter_mut().for_each(|v| *v *= p);
        }
        Ok(Self { probs, priors, joint })
    }

    pub fn boxes(&self) -> usize {
        self.probs.rows()
    }

    pub fn phrases(&self) -> usize {
        self.probs.cols()
    }
}

fn check_dim(v: &[f64], d: usize, context: &'static str) -> Result<()> {
    if v.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: v.len(), context });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(context));
    }
    Ok(())
}

/// The guider network and its parameters.
#[derive(Debug, Clone)]
pub struct SaigModel {
    pub params: ParamSet,
    pub config: SaigConfig,
    encoder: Encoder,
    box_mlp: [Linear; 3],
}

impl SaigModel {
    pub fn new(config: SaigConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let d = config.transformer.dim;
        let fe = fourier_len(config.frequencies);
        let box_mlp = [
            Linear::new(&mut params, "box_mlp.fc1", fe, d, &mut rng),
            Linear::new(&mut params, "box_mlp.fc2", d, d, &mut rng),
            Linear::new(&mut params, "box_mlp.fc3", d, d, &mut rng),
        ];
        let encoder = Encoder::new(&mut params, "encoder", &config.transformer, &mut rng)?;
        Ok(Self { params, config, encoder, box_mlp })
    }

    pub fn dim(&self) -> usize {
        self.config.transformer.dim
    }

    pub fn box_mlp(&self) -> &[Linear; 3] {
        &self.box_mlp
    }

    fn fourier_rows(&self, boxes: &[BBox]) -> Result<Tensor2D> {
        let rows = boxes
            .iter()
            .map(|b| fourier_embed(b, self.config.frequencies).map(|f| f.into_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor2D::from_rows(&rows))
    }

    fn box_tokens(&self, g: &mut Graph<'_>, boxes: &[BBox]) -> Result<NodeId> {
        let x = g.input(self.fourier_rows(boxes)?);
        let h = self.box_mlp[0].forward(g, x)?;
        let h = g.silu(h);
        let h = self.box_mlp[1].forward(g, h)?;
        let h = g.silu(h);
        self.box_mlp[2].forward(g, h)
    }

    fn validate_input(&self, input: &SceneInput) -> Result<()> {
        if input.phrases.is_empty() {
            return Err(Error::Empty("scene phrases"));
        }
        if input.boxes.is_empty() {
            return Err(Error::Empty("scene boxes"));
        }
        let d = self.dim();
        check_dim(&input.caption, d, "caption embedding")?;
        check_dim(&input.canvas, d, "canvas embedding")?;
        for p in &input.phrases {
            check_dim(p, d, "phrase embedding")?;
        }
        Ok(())
    }

    /// Encodes the boxes and assembles the scene's tokens.
    pub fn build_scene(&self, input: &SceneInput) -> Result<SceneTokens> {
        self.validate_input(input)?;
        let mut g = Graph::new(&self.params);
        let boxes = self.box_tokens(&mut g, &input.boxes)?;
        let b = g.value(boxes);
        Ok(SceneTokens {
            caption_emb: input.caption.clone(),
            canvas_emb: input.canvas.clone(),
            phrase_embs: input.phrases.clone(),
            box_embs: (0..b.rows()).map(|r| b.row(r).to_vec()).collect(),
        })
    }

    /// Box-to-phrase logits (`N×M`) for a token matrix whose first rows are
    /// caption, canvas and the `m` phrases.
    fn logits_from_tokens(&self, g: &mut Graph<'_>, tokens: NodeId, phrases: NodeId, m: usize, n: usize) -> Result<NodeId> {
        let out = self.encoder.forward(g, tokens)?;
        let box_out = g.rows(out, 2 + m, n)?;
        g.matmul_bt(box_out, phrases)
    }

    /// Builds the mean allocation cross-entropy of a batch inside `g` and
    /// returns its node. Parameters are read through `g`.
    pub fn loss_graph(&self, g: &mut Graph<'_>, batch: &[LabeledScene]) -> Result<NodeId> {
        let total: usize = batch.iter().map(|s| s.gold.len()).sum();
        if total == 0 {
            return Err(Error::Empty("training batch"));
        }
        let mut parts = Vec::with_capacity(batch.len());
        for scene in batch {
            let (loss, n) = self.scene_loss(g, scene)?;
            parts.push(g.scale(loss, n as f64 / total as f64));
        }
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = g.add(acc, p)?;
        }
        Ok(acc)
    }

    fn scene_loss(&self, g: &mut Graph<'_>, scene: &LabeledScene) -> Result<(NodeId, usize)> {
        let input = &scene.input;
        self.validate_input(input)?;
        if scene.gold.len() != input.boxes.len() {
            return Err(Error::DimensionMismatch {
                expected: input.boxes.len(),
                got: scene.gold.len(),
                context: "gold allocations",
            });
        }
        let (m, n) = (input.phrases.len(), input.boxes.len());
        let caption = g.input(Tensor2D::row_vector(&input.caption));
        let canvas = g.input(Tensor2D::row_vector(&input.canvas));
        let phrases = g.input(Tensor2D::from_rows(&input.phrases));
        let boxes = self.box_tokens(g, &input.boxes)?;
        let tokens = g.concat_rows(&[caption, canvas, phrases, boxes])?;
        let logits = self.logits_from_tokens(g, tokens, phrases, m, n)?;
        Ok((g.cross_entropy(logits, &scene.gold)?, n))
    }

    /// Allocation probabilities for a scene given per-box priors.
    pub fn allocate(&self, scene: &SceneTokens, priors: &[f64]) -> Result<AllocationMatrix> {
        let d = self.dim();
        let (m, n) = (scene.phrase_embs.len(), scene.box_embs.len());
        if m == 0 {
            return Err(Error::Empty("scene phrases"));
        }
        if n == 0 {
            return Err(Error::Empty("scene boxes"));
        }
        for t in [&scene.caption_emb, &scene.canvas_emb].into_iter().chain(&scene.phrase_embs).chain(&scene.box_embs) {
            check_dim(t, d, "scene token")?;
        }
        if priors.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: priors.len(), context: "allocation priors" });
        }
        let mut g = Graph::new(&self.params);
        let tokens = g.input(scene.to_tensor());
        let phrases = g.input(Tensor2D::from_rows(&scene.phrase_embs));
        let logits = self.logits_from_tokens(&mut g, tokens, phrases, m, n)?;
        let logits = g.value(logits);
        if !logits.is_finite() {
            return Err(Error::NonFinite("allocation logits"));
        }
        let rows: Vec<Vec<f64>> = (0..n).map(|r| softmax(logits.row(r))).collect();
        AllocationMatrix::new(Tensor2D::from_rows(&rows), priors.to_vec())
    }

    /// Predicted phrase per box (argmax of each probability row).
    pub fn predict(&self, input: &SceneInput) -> Result<Vec<usize>> {
        let scene = self.build_scene(input)?;
        let alloc = self.allocate(&scene, &vec![1.0; input.boxes.len()])?;
        Ok((0..alloc.boxes())
            .map(|r| {
                let row = alloc.probs.row(r);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(self.config)?;
        checkpoint::save(&self.params, meta, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = checkpoint::load(path)?;
        let config: SaigConfig = serde_json::from_value(meta)
            .map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
        let mut model = Self::new(config)?;
        checkpoint::restore_into(&mut model.params, &params)?;
        Ok(model)
    }
}

/// Optimizer state for one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub optimizer: OptimizerConfig,
    pub state: AdamState,
}

impl Trainer {
    pub fn new(model: &SaigModel, optimizer: OptimizerConfig) -> Result<Self> {
        optimizer.validate()?;
        Ok(Self { optimizer, state: AdamState::new(&model.params) })
    }

    /// One AdamW step on the mean cross-entropy of `batch`; returns the loss
    /// before the step. Scenes are differentiated in parallel and their
    /// gradients summed in batch order.
    pub fn train_step(&mut self, model: &mut SaigModel, batch: &[LabeledScene]) -> Result<f64> {
        let total: usize = batch.iter().map(|s| s.gold.len()).sum();
        if total == 0 {
            return Err(Error::Empty("training batch"));
        }
        let per_scene: Vec<(f64, Grads)> = batch
            .par_iter()
            .map(|scene| {
                let mut g = Graph::new(&model.params);
                let (loss, n) = model.scene_loss(&mut g, scene)?;
                let w = n as f64 / total as f64;
                let mut grads = g.backward(loss)?.into_params();
                grads.scale(w);
                Ok((g.value(loss).get(0, 0) * w, grads))
            })
            .collect::<Result<_>>()?;
        let mut grads = Grads::zeros_like(&model.params);
        let mut loss = 0.0;
        for (l, g) in &per_scene {
            loss += l;
            grads.add_assign(g);
        }
        adamw_step(&mut model.params, &grads, &mut self.state, &self.optimizer)?;
        Ok(loss)
    }
}

/// Fraction of boxes whose argmax phrase is the gold one.
pub fn accuracy(model: &SaigModel, scenes: &[LabeledScene]) -> Result<f64> {
    let results: Vec<(usize, usize)> = scenes
        .par_iter()
        .map(|s| {
            let pred = model.predict(&s.input)?;
            Ok((pred.iter().zip(&s.gold).filter(|(p, g)| p == g).count(), s.gold.len()))
        })
        .collect::<Result<_>>()?;
    let (hit, total) = results.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if total == 0 {
        return Err(Error::Empty("evaluation scenes"));
    }
    Ok(hit as f64 / total as f64)
}
