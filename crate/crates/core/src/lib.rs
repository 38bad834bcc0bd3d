//! Desk-scale lab for two-stage policy optimization of a structured-output
//! VQA policy: supervised fine-tuning followed by group-relative policy
//! optimization, adversarial variants of both stages, a gradient attack
//! suite and a randomized-smoothing certifier.

pub mod attacks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod format;
pub mod grpo;
pub mod harness;
pub mod hash;
pub mod optim;
pub mod perturb;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod sft;
pub mod smoothing;
pub mod synthenv;

pub use error::{Error, Result};
