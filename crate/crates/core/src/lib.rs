//! Few-shot anomaly detection by dual distillation.
//!
//! A frozen teacher encoder produces multi-scale features; a learnable
//! student decoder is trained to reproduce them on query images
//! (teacher-student distillation) and to agree with its own features of a
//! handful of normal support images (self-distillation, optionally with
//! query-conditioned support weighting). At test time the anomaly map is the
//! per-location dissimilarity between query and support student features.

pub mod backbone;
pub mod episodes;
pub mod image_io;
pub mod checkpoint;
pub mod optim;
pub mod synth;
pub mod train;
pub mod error;
pub mod l2w;
pub mod losses;
pub mod metrics;
pub mod scoring;
pub mod nn;
pub mod pyramid;
pub mod student;

pub use error::{Error, Result};
