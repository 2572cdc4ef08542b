//! Desk-scale multi-modal dialog response retrieval with prompt tuning.
//!
//! A pair of toy transformer encoders (text and image) is pretrained on
//! single-round text/image pairs, then frozen. Retrieval quality on
//! multi-turn dialogs comes from three tunable additions:
//!
//! * per-layer **domain prompts** prepended inside every encoder layer,
//! * **context prompts** generated from the dialog history by a separate
//!   multi-modal context encoder and inserted mid-stack,
//! * a **mixture of projection** heads, one affine expert per
//!   (input modality, response modality) pair, mapping encoder outputs
//!   into the shared retrieval space.
//!
//! Everything runs on an in-crate f64 tensor kernel with reverse-mode
//! autodiff ([`numerics`]), so every gradient path is checkable against
//! central finite differences.

pub mod checkpoint;
pub mod cpg;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod harness;
pub mod model;
pub mod mop;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
