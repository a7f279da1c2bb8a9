//! The trainable language models and everything they share.
//!
//! * [`LstmLm`]: embedding, LSTM stack, softmax head. Trained either on
//!   sentences as written (the baseline) or on reversed sentences, in which
//!   case its top hidden layer is the future-vector extractor.
//! * [`FvPredictor`]: reads the history and regresses the extractor's
//!   future vector for the next position.
//! * [`EnhancedLm`]: a baseline-shaped LM whose input at each step is the
//!   word embedding concatenated with the frozen predictor's output.
//! * [`MultiTaskLm`]: a shared trunk with a word branch and a future-vector
//!   branch, trained on `CE + λ·MSE` and feeding its own previous
//!   prediction back into the trunk.

mod checkpoint;
mod components;
mod enhanced;
mod lm;
mod multitask;
mod predictor;
mod train;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSequence, BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::lstm::LstmState;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_any, load_checkpoint, save_checkpoint, AnyModel,
    CheckpointMeta, Checkpointable, Precision, FORMAT_VERSION, MAGIC,
};
pub use checkpoint::write_atomic;
pub use components::{Embedding, LinearHead, SoftmaxHead};
pub use enhanced::{train_enhanced, EnhancedLm};
pub use lm::{extract_future_vectors, train_lm, Direction, LstmLm};
pub use multitask::{train_mt, MultiTaskLm};
pub use predictor::{train_fv_predictor, FvPredictor};
pub use train::{EpochLog, LossParts, StepLog, TrainLog, TrainObserver, Trained};

/// Smallest probability used inside a logarithm.
pub const PROB_FLOOR: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    Baseline,
    Reversed,
    FvPredictor,
    Enhanced,
    MultiTask,
}

impl Architecture {
    pub const ALL: [Architecture; 5] = [
        Architecture::Baseline,
        Architecture::Reversed,
        Architecture::FvPredictor,
        Architecture::Enhanced,
        Architecture::MultiTask,
    ];

    pub fn tag(self) -> u8 {
        match self {
            Architecture::Baseline => 1,
            Architecture::Reversed => 2,
            Architecture::FvPredictor => 3,
            Architecture::Enhanced => 4,
            Architecture::MultiTask => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Architecture::ALL.into_iter().find(|a| a.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Baseline => "baseline",
            Architecture::Reversed => "reversed",
            Architecture::FvPredictor => "fv-predictor",
            Architecture::Enhanced => "enhanced",
            Architecture::MultiTask => "mt",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Architecture::ALL.into_iter().find(|a| a.name() == name)
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Optimization settings. None of these values come from a published recipe;
/// they are the defaults of this toolkit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of sentences (taken from the end of the corpus) held out for
    /// model selection. Zero selects on the training set.
    pub validation_fraction: f64,
    /// Learning rate multiplier applied after an epoch that fails to improve
    /// the validation metric. Training then resumes from the best parameters
    /// seen so far.
    pub lr_decay: f64,
    /// Half-width of the uniform weight initialization.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1.0,
            clip_norm: 5.0,
            epochs: 10,
            seed: 1,
            validation_fraction: 0.1,
            lr_decay: 0.5,
            init_scale: 0.08,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub mt_shared_layers: usize,
    pub mt_branch_layers: usize,
    pub lambda_mt: f64,
    pub fv_dim: usize,
    pub train: TrainConfig,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            embed_dim: 300,
            hidden_dim: 300,
            num_layers: 3,
            mt_shared_layers: 2,
            mt_branch_layers: 1,
            lambda_mt: 1.0,
            fv_dim: 300,
            train: TrainConfig::default(),
        }
    }
}

impl LmConfig {
    /// Small uniform configuration: `layers` layers of `width` cells with a
    /// `width`-dimensional embedding and future vector.
    pub fn sized(width: usize, layers: usize) -> Self {
        LmConfig {
            embed_dim: width,
            hidden_dim: width,
            num_layers: layers,
            mt_shared_layers: layers.saturating_sub(1).max(1),
            mt_branch_layers: 1,
            fv_dim: width,
            ..LmConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("mt_shared_layers", self.mt_shared_layers),
            ("mt_branch_layers", self.mt_branch_layers),
            ("fv_dim", self.fv_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.lambda_mt >= 0.0) || !self.lambda_mt.is_finite() {
            return Err(Error::Config(format!("lambda_mt must be >= 0, got {}", self.lambda_mt)));
        }
        let t = &self.train;
        if !(t.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", t.learning_rate)));
        }
        if !(t.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be > 0, got {}", t.clip_norm)));
        }
        if !(0.0..1.0).contains(&t.validation_fraction) {
            return Err(Error::Config(format!(
                "validation_fraction must be in [0, 1), got {}",
                t.validation_fraction
            )));
        }
        if !(t.lr_decay > 0.0 && t.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay must be in (0, 1], got {}", t.lr_decay)));
        }
        if !(t.init_scale >= 0.0) {
            return Err(Error::Config(format!("init_scale must be >= 0, got {}", t.init_scale)));
        }
        Ok(())
    }

    pub(crate) fn validate_mt(&self) -> Result<()> {
        self.validate()?;
        if self.mt_shared_layers + self.mt_branch_layers != self.num_layers {
            return Err(Error::Config(format!(
                "mt_shared_layers ({}) + mt_branch_layers ({}) must equal num_layers ({})",
                self.mt_shared_layers, self.mt_branch_layers, self.num_layers
            )));
        }
        Ok(())
    }
}

/// A future vector: either extracted from the reversed LM or predicted.
#[derive(Clone, Debug, PartialEq)]
pub struct FutureVector(pub Vec<f64>);

impl FutureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Recurrent state of an incremental decode.
#[derive(Clone, Debug)]
pub struct DecodeState {
    pub stacks: Vec<Vec<LstmState>>,
    /// Extra input carried between steps (the multi-task model's own
    /// previous future-vector prediction).
    pub feed: Vec<f64>,
}

/// Incremental next-token prediction shared by every word-predicting model.
pub trait LanguageModel: Send + Sync {
    fn architecture(&self) -> Architecture;

    fn vocab_size(&self) -> usize;

    fn vocab_hash(&self) -> u64;

    fn start(&self) -> DecodeState;

    /// Consumes `token` and returns the distribution over the next token.
    fn step(&self, state: &mut DecodeState, token: usize) -> Result<Vec<f64>>;
}

fn check_sequence(model: &dyn LanguageModel, seq: &TokenSequence) -> Result<()> {
    let n = model.vocab_size();
    if let Some(&bad) = seq.ids().iter().find(|&&i| i >= n) {
        return Err(Error::Validation(format!(
            "token id {bad} out of range for vocabulary of {n}"
        )));
    }
    Ok(())
}

/// Next-token distributions `p_0 .. p_{T-2}`; `p_i` predicts `ids[i + 1]`.
pub fn lm_forward(model: &dyn LanguageModel, seq: &TokenSequence) -> Result<Vec<Vec<f64>>> {
    check_sequence(model, seq)?;
    let ids = seq.ids();
    let mut state = model.start();
    ids[..ids.len() - 1]
        .iter()
        .map(|&t| model.step(&mut state, t))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CeLoss {
    /// Mean of `-ln p[target]` over positions.
    pub loss: f64,
    /// Positions whose target probability fell below [`PROB_FLOOR`].
    pub clamped: usize,
}

pub fn ce_loss(predicted: &[Vec<f64>], targets: &[usize]) -> Result<CeLoss> {
    if predicted.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} distributions but {} targets",
            predicted.len(),
            targets.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Validation("cross entropy of an empty sequence".into()));
    }
    let mut total = 0.0;
    let mut clamped = 0;
    for (p, &t) in predicted.iter().zip(targets) {
        let pt = *p.get(t).ok_or_else(|| {
            Error::Validation(format!("target {t} outside a distribution of {}", p.len()))
        })?;
        if pt < PROB_FLOOR {
            clamped += 1;
        }
        total -= pt.max(PROB_FLOOR).ln();
    }
    Ok(CeLoss {
        loss: total / targets.len() as f64,
        clamped,
    })
}

/// Mean over positions of the per-dimension mean squared error.
pub fn mse_loss(predicted: &[FutureVector], targets: &[FutureVector]) -> Result<f64> {
    if predicted.len() != targets.len() || predicted.is_empty() {
        return Err(Error::shape(format!(
            "{} predictions for {} targets",
            predicted.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (y, z) in predicted.iter().zip(targets) {
        if y.dim() != z.dim() {
            return Err(Error::shape(format!("future vectors of dim {} and {}", y.dim(), z.dim())));
        }
        let sq: f64 = y.0.iter().zip(&z.0).map(|(a, b)| (a - b) * (a - b)).sum();
        total += sq / y.dim() as f64;
    }
    Ok(total / predicted.len() as f64)
}

/// Total natural-log probability of every predicted position, `</s>`
/// included.
pub fn score_sequence(model: &dyn LanguageModel, seq: &TokenSequence) -> Result<f64> {
    check_sequence(model, seq)?;
    let ids = seq.ids();
    let mut state = model.start();
    let mut total = 0.0;
    for w in ids.windows(2) {
        let p = model.step(&mut state, w[0])?;
        total += p[w[1]].max(PROB_FLOOR).ln();
    }
    Ok(total)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Greedy continuation of `history` (which must start with `<s>`).
///
/// Appends the most likely token until `</s>` or `max_len` tokens. The
/// returned ids exclude the history and the closing `</s>`.
pub fn greedy_continue(
    model: &dyn LanguageModel,
    history: &[usize],
    max_len: usize,
) -> Result<Vec<usize>> {
    if history.first() != Some(&BOS_ID) {
        return Err(Error::Validation("history must begin with <s>".into()));
    }
    if max_len == 0 {
        return Err(Error::Validation("max_len must be at least 1".into()));
    }
    let n = model.vocab_size();
    if let Some(&bad) = history.iter().find(|&&i| i >= n) {
        return Err(Error::Validation(format!("token id {bad} out of range")));
    }
    let mut state = model.start();
    let mut p = Vec::new();
    for &t in history {
        p = model.step(&mut state, t)?;
    }
    let mut out = Vec::new();
    while out.len() < max_len {
        let next = argmax(&p);
        if next == EOS_ID {
            break;
        }
        out.push(next);
        if out.len() == max_len {
            break;
        }
        p = model.step(&mut state, next)?;
    }
    Ok(out)
}
