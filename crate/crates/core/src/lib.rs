//! Masked feature-regression pre-training for vision transformers at desk scale.
//!
//! The crate covers the full chain: a small reverse-mode autodiff engine, a
//! vanilla ViT with `[MASK]`-token corruption, block-wise masking, frozen teacher
//! targets, the negative-cosine pretext loss, AdamW with warmup + cosine decay,
//! a synthetic data pipeline, linear probing, and a toy contrastive
//! image-text stage initialized from the pre-trained encoder.

pub mod autodiff;
pub mod checkpoint;
pub mod clip;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod masking;
pub mod mim;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod probe;
pub mod records;
pub mod rng;
pub mod runner;
pub mod teacher;
pub mod tensor;
pub mod vit;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use rng::Prng;
pub use tensor::{DType, Scalar, Tensor};
