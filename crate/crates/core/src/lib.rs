//! Self-supervised contrastive pre-training with decoder-synthesized
//! positive pairs.
//!
//! A momentum-contrast encoder is trained jointly with a decoder. Each
//! feature vector is decoded twice: once as-is and once after Gaussian noise
//! is injected into dimensions that matter little to the contrastive loss
//! (low gradient saliency) or that carry little spread across recent samples
//! (low dispersion). The two decodings form an extra positive pair, which
//! pushes the encoder towards the dimensions that actually discriminate.

pub mod config;
pub mod datagen;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod kernels;
pub mod losses;
pub mod nets;
pub mod optim;
pub mod perturb;
pub mod rng;
pub mod saliency;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Category, Error, Result};
pub use tape::{Grads, Tape, Var};
pub use tensor::{Real, Tensor};
