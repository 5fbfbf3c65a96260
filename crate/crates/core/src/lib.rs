//! Zero-shot remote-sensing instance-segmentation head.
//!
//! Everything in this crate is pure computation over in-memory tensors and
//! masks: it builds with `#![no_std]` plus `alloc`. File formats, the run
//! configuration and the command line live in the `zori` companion crate.
//!
//! Module map:
//!
//! * [`tensor`]: embedding matrices, feature maps, binary masks, softmax,
//!   row normalization and mask pooling.
//! * [`dec`]: per-channel similarity/variance scoring of class text
//!   embeddings, top-k channel selection and the refined cosine classifier.
//! * [`kma`]: frozen/trainable partition of backbone channels and a
//!   per-channel affine adapter whose frozen entries never move.
//! * [`cachebank`]: visual-prototype cache bank and prior-injected logits.
//! * [`ensemble`]: geometric fusion of in-vocabulary and prior-injected
//!   class probabilities.
//! * [`eval`]: mask IoU, greedy matching, AP@0.5, Recall@100 and the
//!   seen/unseen harmonic-mean report.
//! * [`protocol`]: seen/unseen splits and annotation filtering.
//! * [`synth`]: seeded fixtures with planted structure.
//! * [`pipeline`]: per-proposal prediction wiring used by the CLI.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod cachebank;
pub mod dec;
pub mod ensemble;
mod error;
pub mod eval;
pub mod kma;
pub mod pipeline;
pub mod protocol;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
