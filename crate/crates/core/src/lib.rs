//! CTC maximum-likelihood training combined with self-critical policy
//! gradient on edit-distance rewards.
//!
//! The loss layer ([`ctc`], [`policy`]) works purely on logits, so it can be
//! tested without any model. [`model`] maps feature maps to logits and back
//! propagates logit gradients to parameters; [`trainer`] ties both together
//! with the optimizer and schedules. [`synthdata`] writes corpora in the
//! [`dataset`] format for desk-scale experiments.

pub mod alphabet;
pub mod benchmark;
pub mod ctc;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod policy;
pub mod rng;
pub mod sampler;
pub mod synthdata;
pub mod trainer;

pub use alphabet::{collapse, Alphabet, Path, Transcription, BLANK};
pub use ctc::{ctc_brute_force, ctc_forward, ctc_grad, log_softmax, LogitSeq, LossGrad};
pub use error::{Error, Result};
