//! LSTM language models that condition on predicted future vectors.
//!
//! A reversed-order LSTM LM summarizes the remainder of a sentence in its
//! top hidden state (the future vector). A causal predictor learns to
//! estimate that vector from the history, and two word models use it: an
//! enhanced LM fed with the frozen predictor's output, and a multi-task LM
//! that learns both objectives with one shared trunk. Models are evaluated
//! by perplexity, by BLEU of greedy continuations and by WER after n-best
//! rescoring.

pub mod corpus;
pub mod eval;
pub mod error;
pub mod lstm;
pub mod math;
pub mod models;
pub mod rescoring;

pub use error::{Error, Result};
