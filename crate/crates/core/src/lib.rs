//! Region-text pair generation for open-vocabulary detection.
//!
//! Two generation directions produce `(box, text)` training pairs from
//! image-caption data:
//!
//! * text-to-region (T2R): caption phrases are allocated to proposal boxes by a
//!   scene-aware transformer ([`saig`]), sampled with nucleus sampling and
//!   inpainted into the image, then quality filtered ([`filters`]);
//! * region-to-text (R2T): proposal crops are captioned under a prompt
//!   ensemble and the best caption is selected by embedding similarity
//!   ([`r2t`]).
//!
//! The generated pairs train region embeddings with a localization-aware
//! region-text contrastive loss ([`lart`]). All external models sit behind the
//! [`providers`] traits; a deterministic synthetic world implements every one
//! of them so the whole pipeline runs hermetically.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dataset;
pub mod error;
pub mod filters;
pub mod geometry;
pub mod lart;
pub mod pipeline;
pub mod providers;
pub mod r2t;
pub mod saig;
pub mod tinynn;

pub use error::{Error, Result};
pub use geometry::{BBox, ScoredBox};
