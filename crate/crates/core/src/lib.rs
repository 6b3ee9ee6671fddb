//! Multi-branch dropout embedding head trained with sub-center ArcFace.
//!
//! The pipeline: features (optionally through a small affine backbone) go
//! into `B` parallel dropout+dense branches whose outputs are summed into a
//! ≤64-d embedding; training uses sub-center ArcFace over softmax
//! cross-entropy in two stages (head only, then everything at a tiny
//! constant learning rate with a larger margin); evaluation is exact cosine
//! kNN with mean precision@k.

pub mod arcface;
mod binio;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod model;
pub mod numerics;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, Result};
