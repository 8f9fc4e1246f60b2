//! Anchor-based single-shot multi-person 2D/3D pose estimation.
//!
//! The crate covers everything around the network: anchor priors and
//! ground-truth matching ([`anchors`]), the IoU-based box and joint losses
//! with pose-aware readout labels and learned loss weights ([`losses`]),
//! decoding and NMS ([`decode`]), evaluation ([`metrics`]), a synthetic
//! scene generator ([`synthdata`]) and a small training loop around a
//! pluggable [`train::Predictor`].
//!
//! Per-anchor work runs on rayon when the `parallel` feature (default) is
//! enabled. Reductions always happen in index order, so results are
//! bit-identical with and without it.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x >= lo)` also rejects NaN

pub mod anchors;
pub mod decode;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod par;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
