//! Attribute generated text to training sub-datasets by probing the
//! multi-head-attention activations of a language model.
//!
//! Pipeline: activation dumps ([`activation_io`]) are reduced to fixed-size
//! token selections ([`extraction`]), classified by an LSTM-over-layers probe
//! ([`probe`]), and screened for out-of-distribution responses by a
//! contrastive projector with Mahalanobis scoring ([`filter`]).
//! [`infometrics`] ranks extraction strategies by a mutual-information score
//! and [`causality`] checks how attention and FFN sub-layers shape token
//! covariance. [`toy_lm`] provides a self-contained activation source.

pub mod activation_io;
pub mod causality;
pub mod cli;
pub mod config;
pub mod error;
pub mod extraction;
pub mod filter;
pub mod infometrics;
pub mod numerics;
pub mod par;
pub mod pipeline;
pub mod probe;
pub mod toy_lm;

pub use error::{Error, Result};
