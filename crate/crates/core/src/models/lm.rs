use crate::corpus::{reverse_sequence, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::lstm::LstmStack;
use crate::math::{prefixed, prefixed_mut, Matrix, Parameters};
use crate::models::components::{Embedding, SoftmaxHead};
use crate::models::train::{self, init_rng, LossParts, Objective, Selection, TrainObserver, Trained};
use crate::models::{Architecture, DecodeState, FutureVector, LanguageModel, LmConfig, PROB_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reversed,
}

/// Embedding, LSTM stack and softmax head.
///
/// With `Direction::Reversed` the model is trained on reversed sentences
/// and serves as the future-vector extractor. Its [`LanguageModel`] view
/// always consumes tokens in the order it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLm {
    pub direction: Direction,
    pub config: LmConfig,
    pub vocab_hash: u64,
    pub embedding: Embedding,
    pub stack: LstmStack,
    pub head: SoftmaxHead,
}

impl LstmLm {
    pub fn new(direction: Direction, config: &LmConfig, vocab: &Vocabulary) -> Result<Self> {
        LstmLm::with_vocab_size(direction, config, vocab.len(), vocab.hash())
    }

    pub fn with_vocab_size(
        direction: Direction,
        config: &LmConfig,
        vocab_size: usize,
        vocab_hash: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = init_rng(config.train.seed);
        let scale = config.train.init_scale;
        let embedding = Embedding::uniform(vocab_size, config.embed_dim, scale, &mut rng);
        let stack = LstmStack::uniform(config.embed_dim, config.hidden_dim, config.num_layers, scale, &mut rng)?;
        let head = SoftmaxHead::uniform(vocab_size, config.hidden_dim, scale, &mut rng);
        Ok(LstmLm {
            direction,
            config: config.clone(),
            vocab_hash,
            embedding,
            stack,
            head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        LstmLm {
            direction: self.direction,
            config: self.config.clone(),
            vocab_hash: self.vocab_hash,
            embedding: Embedding {
                table: Matrix::zeros(self.embedding.table.rows(), self.embedding.table.cols()),
            },
            stack: self.stack.zeros_like(),
            head: SoftmaxHead {
                w: Matrix::zeros(self.head.w.rows(), self.head.w.cols()),
                b: Matrix::zeros(self.head.b.rows(), 1),
            },
        }
    }

    fn check_ids(&self, seq: &TokenSequence) -> Result<()> {
        let n = self.embedding.table.rows();
        match seq.ids().iter().find(|&&i| i >= n) {
            Some(bad) => Err(Error::Validation(format!(
                "token id {bad} out of range for vocabulary of {n}"
            ))),
            None => Ok(()),
        }
    }

    /// Top-layer hidden states after each input token `ids[0..T-1]`.
    pub fn hidden_states(&self, seq: &TokenSequence) -> Result<Vec<Vec<f64>>> {
        self.check_ids(seq)?;
        let ids = seq.ids();
        let inputs: Vec<Vec<f64>> = ids[..ids.len() - 1]
            .iter()
            .map(|&t| self.embedding.lookup(t).to_vec())
            .collect();
        let (out, _) = self.stack.sequence_forward(&inputs, &self.stack.zero_states())?;
        Ok(out)
    }

    /// CE of one sentence; accumulates its gradient when `grads` is given.
    pub fn sentence_loss(&self, seq: &TokenSequence, grads: Option<&mut LstmLm>) -> Result<LossParts> {
        self.check_ids(seq)?;
        let ids = seq.ids();
        let steps = ids.len() - 1;
        let inputs: Vec<Vec<f64>> = ids[..steps]
            .iter()
            .map(|&t| self.embedding.lookup(t).to_vec())
            .collect();
        let (hs, caches) = self.stack.sequence_forward(&inputs, &self.stack.zero_states())?;
        let probs: Vec<Vec<f64>> = hs.iter().map(|h| self.head.forward(h)).collect();
        let mut ce = 0.0;
        for (p, &t) in probs.iter().zip(&ids[1..]) {
            ce -= p[t].max(PROB_FLOOR).ln();
        }
        ce /= steps as f64;

        if let Some(grads) = grads {
            let scale = 1.0 / steps as f64;
            let dh: Vec<Vec<f64>> = (0..steps)
                .map(|t| self.head.backward(&hs[t], &probs[t], ids[t + 1], scale, &mut grads.head))
                .collect();
            let dx = self.stack.sequence_backward_into(&caches, &dh, &mut grads.stack)?;
            for (t, d) in dx.iter().enumerate() {
                grads.embedding.accumulate(ids[t], d);
            }
        }
        Ok(LossParts {
            ce,
            mse: 0.0,
            total: ce,
            positions: steps,
        })
    }
}

impl Parameters for LstmLm {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        prefixed("embedding", self.embedding.blocks())
            .chain(prefixed("lstm", self.stack.blocks()))
            .chain(prefixed("head", self.head.blocks()))
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        prefixed_mut("embedding", self.embedding.blocks_mut())
            .chain(prefixed_mut("lstm", self.stack.blocks_mut()))
            .chain(prefixed_mut("head", self.head.blocks_mut()))
            .collect()
    }
}

impl LanguageModel for LstmLm {
    fn architecture(&self) -> Architecture {
        match self.direction {
            Direction::Forward => Architecture::Baseline,
            Direction::Reversed => Architecture::Reversed,
        }
    }

    fn vocab_size(&self) -> usize {
        self.embedding.table.rows()
    }

    fn vocab_hash(&self) -> u64 {
        self.vocab_hash
    }

    fn start(&self) -> DecodeState {
        DecodeState {
            stacks: vec![self.stack.zero_states()],
            feed: Vec::new(),
        }
    }

    fn step(&self, state: &mut DecodeState, token: usize) -> Result<Vec<f64>> {
        if token >= self.vocab_size() {
            return Err(Error::Validation(format!("token id {token} out of range")));
        }
        let (h, _) = self.stack.step(self.embedding.lookup(token), &mut state.stacks[0])?;
        Ok(self.head.forward(&h))
    }
}

/// Trains a baseline (`Forward`) or extractor (`Reversed`) model.
pub fn train_lm(
    sentences: &[TokenSequence],
    vocab: &Vocabulary,
    config: &LmConfig,
    direction: Direction,
    observer: &mut dyn TrainObserver,
) -> Result<Trained<LstmLm>> {
    let model = LstmLm::new(direction, config, vocab)?;
    let data: Vec<TokenSequence> = match direction {
        Direction::Forward => sentences.to_vec(),
        Direction::Reversed => sentences.iter().map(reverse_sequence).collect(),
    };
    let accumulate = |m: &LstmLm, s: &TokenSequence, g: &mut LstmLm| m.sentence_loss(s, Some(g));
    let evaluate = |m: &LstmLm, s: &TokenSequence| m.sentence_loss(s, None);
    train::run(
        model,
        &data,
        &config.train,
        Objective {
            accumulate: &accumulate,
            evaluate: &evaluate,
            zeros_like: &LstmLm::zeros_like,
            selection: Selection::Perplexity,
        },
        observer,
    )
}

/// Future vectors of `seq` from a reversed-order extractor.
///
/// Entry `k` belongs to position `k + 1` of `seq` and is the extractor's
/// top hidden state after reading `ids[T-1], ids[T-2], ..., ids[k+1]` (the
/// closing `</s>` is read as the reversed sentence's `<s>`). It therefore
/// depends only on the suffix starting at position `k + 1`. A sequence of
/// `T` tokens yields `T - 1` vectors.
pub fn extract_future_vectors(extractor: &LstmLm, seq: &TokenSequence) -> Result<Vec<FutureVector>> {
    if extractor.direction != Direction::Reversed {
        return Err(Error::Config(
            "future vectors must come from a reversed-order model".into(),
        ));
    }
    let reversed = reverse_sequence(seq);
    let mut hs = extractor.hidden_states(&reversed)?;
    hs.reverse();
    Ok(hs.into_iter().map(FutureVector).collect())
}
