//! Replay-free incremental few-shot learning over a synthetic proposal-feature
//! world.
//!
//! The crate pretrains a small feature pipeline on base classes, distills each
//! base class into a prototype (mean feature plus the frozen model's predicted
//! distribution on it), then enrolls novel classes from K shots without ever
//! touching base data again. Two mechanisms keep that honest:
//!
//! - a prototype-augmented supervised contrastive loss with an IoU gate, which
//!   shapes embeddings of the few novel shots against stored base prototypes;
//! - a Wasserstein calibration loss that pins the fine-tuned classifier's
//!   predictions on base prototypes to their stored distributions, with
//!   entropic-transport dual potentials supplying the gradient.
//!
//! Everything is deterministic given a seed: datasets, training, reports,
//! and plots replay byte-identically.

pub mod error;
pub mod harness;
pub mod hpc;
pub mod otcal;
pub mod protostore;
pub mod registry;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
