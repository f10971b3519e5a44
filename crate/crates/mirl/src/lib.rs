//! Desk-scale masked image residual learning.
//!
//! A self-contained implementation of segmented masked-autoencoder
//! pre-training for vision transformers, in which shallow encoder segments
//! reconstruct the main component of masked image patches and deep segments
//! reconstruct the residual. Includes the baselines (plain masked
//! autoencoding, independent multi-decoders, coarse/fine targets), optional
//! feature-level and perceptual objectives, the training machinery (AdamW,
//! schedules, EMA, layer-wise learning-rate decay, checkpoints), and the
//! diagnostic probes (tail re-initialization sweeps, truncated pre-training,
//! gradient-norm instrumentation, reconstruction dumps).
//!
//! Everything runs on a small double-precision reverse-mode tape
//! ([`diffcore`]) whose gradients are certified against central finite
//! differences.

pub mod decoder;
pub mod data;
pub mod harness;
pub mod objectives;
pub mod probes;
pub mod training;
pub mod diffcore;
pub mod encoder;
pub mod tokenizer;
mod error;
pub mod rng;

pub use error::{MirlError, Result};
