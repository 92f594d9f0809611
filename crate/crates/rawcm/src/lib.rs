//! rawcm: a raw-waveform anti-spoofing countermeasure toolkit.
//!
//! The crate bundles everything needed to train and evaluate a RawNet2-style
//! countermeasure against a classical LFCC-GMM baseline on a synthetic,
//! desk-scale corpus:
//!
//! - a minimal reverse-mode autodiff engine ([`tensor`]) with the exact ops
//!   the model needs, plus ADAM;
//! - a fixed sinc band-pass filterbank front-end ([`sinc`]) on Mel,
//!   inverse-Mel, or linear frequency scales;
//! - the RawNet2-style network ([`model`]): residual blocks with filter-wise
//!   feature-map scaling, GRU aggregation, two-class output;
//! - audio/protocol plumbing and a synthetic corpus generator ([`data`]);
//! - training with checkpointing ([`train`]);
//! - EER and min t-DCF scoring ([`metrics`]);
//! - the LFCC-GMM baseline ([`baseline`]) and score-level fusion ([`fusion`]).

pub mod baseline;
pub mod cli;
pub mod data;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod sinc;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
