//! Tiny-object detection on a plain ViT backbone.
//!
//! The crate builds the whole pipeline on a small reverse-mode autodiff
//! engine: a toy stride-16 ViT, a spatial adapter that recovers stride-4 and
//! stride-8 detail from the raw image, a multi-scale neck with parallel
//! bi-fusion blocks, a query-based set-prediction head with Hungarian
//! matching, a synthetic tiny-object dataset and COCO-style evaluation.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod flops;
pub mod gradcheck;
pub mod head;
pub mod kernels;
pub mod model;
pub mod neck;
pub mod nn;
pub mod param;
pub mod rng;
pub mod ssa;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use param::{AdamW, ParamId, ParamStore};
pub use tensor::{Init, Shape, Tensor};
