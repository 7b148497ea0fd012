//! Contrastive mutual-information auto-encoders on a small reverse-mode
//! autodiff core.
//!
//! The crate is organised bottom-up:
//!
//! * [`numcore`]: tensors, the differentiation tape, init, Adam + WSD.
//! * [`distributions`]: diagonal Gaussian encoder, Bernoulli decoder, standard-normal prior.
//! * [`contrastive`]: cosine similarities, the mean-denominator discriminator, InfoNCE.
//! * [`models`]: MLP encoder/decoder, informative embeddings, checkpoints.
//! * [`objectives`]: MIM, cMIM, VAE, cVAE, InfoNCE losses and the training loop.
//! * [`data`]: IDX files, seeded batching, the 2-D toy set.
//! * [`eval`]: probes, z-score/rank aggregation, batch-size slopes, toy geometry.
//! * [`experiments`]: end-to-end drivers used by the CLI and the acceptance suite.

pub mod contrastive;
pub mod data;
pub mod distributions;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod models;
pub mod numcore;
pub mod objectives;

pub use error::{Error, ErrorKind, Result};
pub use numcore::{Param, Scalar, Tape, Tensor, Var};
