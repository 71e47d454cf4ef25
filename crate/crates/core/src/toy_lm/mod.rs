//! Seeded forward-only mini-transformer and a synthetic Markov corpus, so the
//! whole pipeline runs without an external model.

mod corpus;
mod model;

pub use corpus::{generate_corpus, mixture_sequence, SyntheticCorpusSpec};
pub use model::{ToyLm, ToyLmConfig, Trace};

use crate::activation_io::ActivationTensor;
use crate::error::Result;

/// Anything that can turn a token sequence into per-layer MHA activations.
pub trait Prefiller: Sync {
    fn prefill(&self, tokens: &[u32]) -> Result<ActivationTensor>;

    /// Token id used by span masking.
    fn mask_token(&self) -> u32;
}
