//! Entropy-gated multimodal fusion with subset-consistent calibration and
//! entropy-driven curriculum masking, plus the tooling to train and audit it
//! on synthetic benchmarks.

pub mod curriculum;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod lattice;
pub mod metrics;
pub mod losses;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod uncertainty;

pub use error::{Error, Result};
