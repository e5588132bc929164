//! Multi-granularity distillation for rebalanced vision-language retrieval.
//!
//! The crate bundles a small reverse-mode autodiff engine, a seeded
//! image/text corpus with a tunable modality gap, the student and teacher
//! models, every training objective, the retrieval evaluation protocol and
//! the training loop.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod experiments;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod train;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
