//! Adaptive scope selection for RL fine-tuning of diffusion models.
//!
//! A small conditional denoiser is pretrained on a toy Gaussian-mixture task
//! and then fine-tuned with a clipped policy-gradient objective on a subset
//! of its denoising steps. The subset is chosen per prompt from the
//! trajectory of one-shot clean-sample estimates.

// Negated float comparisons below deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![cfg_attr(test, allow(clippy::excessive_precision))]

pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod finetune;
pub mod gauss;
pub mod mdp;
pub mod reward;
pub mod rng;
pub mod schedule;
pub mod scope;

pub use error::{Error, Result};
