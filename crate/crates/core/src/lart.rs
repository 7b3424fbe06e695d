//! Localization-aware region-text contrastive loss.
//!
//! Every anchor region is pulled toward its own text and pushed away from the
//! texts in a FIFO queue filled by earlier batches, with a binary
//! cross-entropy on `τ·cos`. Adjacent regions that overlap the anchor by at
//! least `alpha` IoU act as extra positives for the anchor's text, weighted by
//! their IoU; the others become hard negatives for the anchor's text and every
//! queued text.
//!
//! Region embeddings enter through their cosine with the text, so they need
//! not be normalized; text embeddings must be unit norm.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::providers::UNIT_NORM_TOL;
use crate::tinynn::tensor::{dot, norm, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LartConfig {
    /// Logit scale applied to cosine similarities.
    pub tau: f64,
    /// IoU at or above which an adjacent region counts as positive.
    pub alpha: f64,
    pub queue_len: usize,
    pub loss_weight: f64,
    /// Skip queued texts identical to the anchor's text when forming
    /// negatives. Off by default: the queue is assumed to hold other texts.
    pub mask_queue_duplicates: bool,
    /// Also skip queued texts whose embedding cosine with the anchor's text
    /// reaches this value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub queue_mask_cosine: Option<f64>,
}

impl Default for LartConfig {
    fn default() -> Self {
        Self {
            tau: 50.0,
            alpha: 0.5,
            queue_len: 256,
            loss_weight: 1.0,
            mask_queue_duplicates: false,
            queue_mask_cosine: None,
        }
    }
}

impl LartConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("lart.tau must be positive, got {}", self.tau)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("lart.alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.queue_len == 0 {
            return Err(Error::Config("lart.queue_len must be at least 1".into()));
        }
        if let Some(c) = self.queue_mask_cosine {
            if !(-1.0..=1.0).contains(&c) {
                return Err(Error::Config(format!("lart.queue_mask_cosine {c} outside [-1, 1]")));
            }
        }
        if !(self.loss_weight >= 0.0 && self.loss_weight.is_finite()) {
            return Err(Error::Config("lart.loss_weight must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn check_unit(v: &[f64], what: &'static str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    let n = norm(v);
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::InvalidArgument(format!("{what} has norm {n}, expected 1")));
    }
    Ok(())
}

fn check_region(v: &[f64], dim: usize) -> Result<()> {
    if v.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: v.len(), context: "region embedding" });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("region embedding"));
    }
    if norm(v) == 0.0 {
        return Err(Error::InvalidArgument("zero region embedding".into()));
    }
    Ok(())
}

/// Cosine of `r` with unit `t`, and its gradient with respect to `r`.
fn cosine_grad(r: &[f64], t: &[f64]) -> (f64, Vec<f64>) {
    let n = norm(r);
    let c = dot(r, t) / n;
    let g = r.iter().zip(t).map(|(ri, ti)| ti / n - c * ri / (n * n)).collect();
    (c, g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueueEntry {
    pub text: String,
    pub embedding: Vec<f64>,
}

/// Bounded FIFO of text embeddings from earlier batches.
#[derive(Debug, Clone, PartialEq)]
pub struct TextQueue {
    capacity: usize,
    entries: VecDeque<QueueEntry>,
}

impl TextQueue {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("queue capacity must be at least 1".into()));
        }
        Ok(Self { capacity, entries: VecDeque::with_capacity(capacity) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    /// Appends one entry, evicting the oldest beyond capacity. Call only after
    /// the loss of the batch the text came from has been computed.
    pub fn push(&mut self, text: impl Into<String>, embedding: Vec<f64>) -> Result<()> {
        check_unit(&embedding, "queued text embedding")?;
        if let Some(first) = self.entries.front() {
            if first.embedding.len() != embedding.len() {
                return Err(Error::DimensionMismatch {
                    expected: first.embedding.len(),
                    got: embedding.len(),
                    context: "queued text embedding",
                });
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(QueueEntry { text: text.into(), embedding });
        Ok(())
    }

    pub fn push_all<I>(&mut self, items: I) -> Result<()>
    where
        I: IntoIterator<Item = (String, Vec<f64>)>,
    {
        for (text, emb) in items {
            self.push(text, emb)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adjacent {
    pub region: Vec<f64>,
    /// IoU of this region with the anchor box.
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub region: Vec<f64>,
    pub text: String,
    pub text_embedding: Vec<f64>,
    pub adjacents: Vec<Adjacent>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LartBatch {
    pub anchors: Vec<Anchor>,
}

/// Loss value and gradients with respect to every region embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct LartOutput {
    pub loss: f64,
    pub anchor_grads: Vec<Vec<f64>>,
    /// `adjacent_grads[i][k]` belongs to `anchors[i].adjacents[k]`.
    pub adjacent_grads: Vec<Vec<Vec<f64>>>,
}

fn negatives<'a>(queue: &'a TextQueue, text: &'a str, text_emb: &'a [f64], cfg: &'a LartConfig) -> impl Iterator<Item = &'a QueueEntry> {
    queue.iter().filter(move |e| {
        let duplicate = cfg.mask_queue_duplicates && e.text == text;
        let similar = cfg.queue_mask_cosine.is_some_and(|c| dot(&e.embedding, text_emb) >= c);
        !(duplicate || similar)
    })
}

fn validate_anchor(anchor: &Anchor, queue: &TextQueue) -> Result<()> {
    let d = anchor.text_embedding.len();
    check_unit(&anchor.text_embedding, "anchor text embedding")?;
    check_region(&anchor.region, d)?;
    for adj in &anchor.adjacents {
        check_region(&adj.region, d)?;
        if !(0.0..=1.0).contains(&adj.iou) {
            return Err(Error::InvalidArgument(format!("adjacent IoU {} outside [0, 1]", adj.iou)));
        }
    }
    if let Some(e) = queue.iter().next() {
        if e.embedding.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: e.embedding.len(), context: "queue embedding" });
        }
    }
    Ok(())
}

/// Positive term for the anchor's own text plus one negative term per queued
/// text; returns the value and its gradient with respect to `region`.
fn region_text_terms(region: &[f64], text_emb: &[f64], text: &str, queue: &TextQueue, cfg: &LartConfig) -> (f64, Vec<f64>) {
    let (c, dc) = cosine_grad(region, text_emb);
    let mut loss = softplus(-cfg.tau * c);
    let coef = -cfg.tau * sigmoid(-cfg.tau * c);
    let mut grad: Vec<f64> = dc.iter().map(|g| coef * g).collect();
    for e in negatives(queue, text, text_emb, cfg) {
        let (c, dc) = cosine_grad(region, &e.embedding);
        loss += softplus(cfg.tau * c);
        let coef = cfg.tau * sigmoid(cfg.tau * c);
        grad.iter_mut().zip(&dc).for_each(|(g, d)| *g += coef * d);
    }
    (loss, grad)
}

/// Adjacent-region terms for one anchor with gradients per adjacent region.
fn adjacent_terms(anchor: &Anchor, queue: &TextQueue, cfg: &LartConfig) -> (f64, Vec<Vec<f64>>) {
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(anchor.adjacents.len());
    for adj in &anchor.adjacents {
        let (c, dc) = cosine_grad(&adj.region, &anchor.text_embedding);
        if adj.iou >= cfg.alpha {
            loss += adj.iou * softplus(-cfg.tau * c);
            let coef = -adj.iou * cfg.tau * sigmoid(-cfg.tau * c);
            grads.push(dc.iter().map(|g| coef * g).collect());
        } else {
            loss += softplus(cfg.tau * c);
            let coef = cfg.tau * sigmoid(cfg.tau * c);
            let mut grad: Vec<f64> = dc.iter().map(|g| coef * g).collect();
            for e in negatives(queue, &anchor.text, &anchor.text_embedding, cfg) {
                let (c, dc) = cosine_grad(&adj.region, &e.embedding);
                loss += softplus(cfg.tau * c);
                let coef = cfg.tau * sigmoid(cfg.tau * c);
                grad.iter_mut().zip(&dc).for_each(|(g, d)| *g += coef * d);
            }
            grads.push(grad);
        }
    }
    (loss, grads)
}

/// Region-text binary cross-entropy of one anchor against its text and the queue.
pub fn region_text_loss(anchor: &Anchor, queue: &TextQueue, cfg: &LartConfig) -> Result<f64> {
    validate_anchor(anchor, queue)?;
    Ok(region_text_terms(&anchor.region, &anchor.text_embedding, &anchor.text, queue, cfg).0)
}

/// IoU-weighted positives and hard negatives over the anchor's adjacent regions.
pub fn adjacent_loss(anchor: &Anchor, queue: &TextQueue, cfg: &LartConfig) -> Result<f64> {
    validate_anchor(anchor, queue)?;
    Ok(adjacent_terms(anchor, queue, cfg).0)
}

fn batch_loss(batch: &LartBatch, queue: &TextQueue, cfg: &LartConfig, with_adjacent: bool) -> Result<LartOutput> {
    cfg.validate()?;
    if batch.anchors.is_empty() {
        return Err(Error::Empty("LART batch"));
    }
    let scale = cfg.loss_weight / batch.anchors.len() as f64;
    let mut out = LartOutput { loss: 0.0, anchor_grads: vec![], adjacent_grads: vec![] };
    for anchor in &batch.anchors {
        validate_anchor(anchor, queue)?;
        let (l, g) = region_text_terms(&anchor.region, &anchor.text_embedding, &anchor.text, queue, cfg);
        out.loss += l * scale;
        out.anchor_grads.push(g.into_iter().map(|v| v * scale).collect());
        if with_adjacent {
            let (l, gs) = adjacent_terms(anchor, queue, cfg);
            out.loss += l * scale;
            out.adjacent_grads
                .push(gs.into_iter().map(|g| g.into_iter().map(|v| v * scale).collect()).collect());
        } else {
            let d = anchor.region.len();
            out.adjacent_grads.push(vec![vec![0.0; d]; anchor.adjacents.len()]);
        }
    }
    if !out.loss.is_finite() {
        return Err(Error::NonFinite("LART loss"));
    }
    Ok(out)
}

/// Mean over anchors of region-text plus adjacent loss, times `loss_weight`.
/// The queue is read, never modified.
pub fn lart_loss(batch: &LartBatch, queue: &TextQueue, cfg: &LartConfig) -> Result<LartOutput> {
    batch_loss(batch, queue, cfg, true)
}

/// The same reduction without adjacent regions: a plain region-text
/// contrastive loss. Adjacent gradients are returned as zeros.
pub fn plain_region_text_loss(batch: &LartBatch, queue: &TextQueue, cfg: &LartConfig) -> Result<LartOutput> {
    batch_loss(batch, queue, cfg, false)
}
