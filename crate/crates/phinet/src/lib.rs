//! Desk-scale PhiNet v2: a self-supervised video representation learner with
//! a ViT backbone, a discrete-latent variational objective, an EMA target
//! encoder, and label-propagation evaluation — all on synthetic video.

pub mod error;
pub mod scalar;
pub mod tape;

pub use error::{Error, Result};
pub use scalar::Scalar;
