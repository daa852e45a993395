//! Adversarial training for multi-exit neural networks.
//!
//! A multi-exit network attaches a classifier after every trunk block, so a
//! prediction can be served from any prefix of the model. Because the
//! prefixes share parameters, an adversarial example aimed at one exit tends
//! to fool the others too. This crate implements, end to end at desk scale:
//!
//! - a small reverse-mode differentiation core ([`tape`]) over dense `f32`
//!   tensors ([`tensor`]);
//! - the multi-exit MLP itself with a binary checkpoint format ([`net`]);
//! - PGD-based single, max-average, and average attacks ([`attack`]);
//! - the training objectives: plain adversarial training, self-distillation
//!   (SKD), clean-to-adversarial distillation (ARD), neighbor knowledge
//!   distillation, and exit-wise orthogonal knowledge distillation
//!   ([`loss`]);
//! - an SGD trainer with step-decay schedule and bitwise-resumable
//!   checkpoints ([`train`]);
//! - anytime / budgeted inference and the adversarial-transferability map
//!   ([`eval`]);
//! - dataset ingestion for IDX files and a synthetic generator ([`data`]);
//! - the experiment config format and report writers ([`config`],
//!   [`report`]), and a finite-difference gradient checker ([`gradcheck`]).

pub mod attack;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod net;
pub mod report;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
