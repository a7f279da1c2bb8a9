use crate::corpus::{TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::lstm::LstmStack;
use crate::math::{prefixed, prefixed_mut, Matrix, Parameters};
use crate::models::components::{Embedding, SoftmaxHead};
use crate::models::predictor::FvPredictor;
use crate::models::train::{self, init_rng, LossParts, Objective, Selection, TrainObserver, Trained};
use crate::models::{Architecture, DecodeState, FutureVector, LanguageModel, LmConfig, PROB_FLOOR};

/// LM whose step-`i` input is `[f(x_i); y_{i+1}]`, with `y_{i+1}` from a
/// frozen [`FvPredictor`] that has read `x_0..=x_i`.
///
/// Only the embedding, stack and head are trainable; [`Parameters`] does
/// not expose the predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct EnhancedLm {
    pub config: LmConfig,
    pub vocab_hash: u64,
    pub predictor: FvPredictor,
    pub embedding: Embedding,
    pub stack: LstmStack,
    pub head: SoftmaxHead,
}

impl EnhancedLm {
    pub fn new(config: &LmConfig, vocab: &Vocabulary, predictor: FvPredictor) -> Result<Self> {
        EnhancedLm::with_vocab_size(config, vocab.len(), vocab.hash(), predictor)
    }

    pub fn with_vocab_size(
        config: &LmConfig,
        vocab_size: usize,
        vocab_hash: u64,
        predictor: FvPredictor,
    ) -> Result<Self> {
        config.validate()?;
        if predictor.vocab_size() != vocab_size {
            return Err(Error::Config(format!(
                "predictor vocabulary has {} words, model vocabulary {vocab_size}",
                predictor.vocab_size()
            )));
        }
        let mut rng = init_rng(config.train.seed);
        let scale = config.train.init_scale;
        let embedding = Embedding::uniform(vocab_size, config.embed_dim, scale, &mut rng);
        let stack = LstmStack::uniform(
            config.embed_dim + predictor.fv_dim(),
            config.hidden_dim,
            config.num_layers,
            scale,
            &mut rng,
        )?;
        let head = SoftmaxHead::uniform(vocab_size, config.hidden_dim, scale, &mut rng);
        Ok(EnhancedLm {
            config: config.clone(),
            vocab_hash,
            predictor,
            embedding,
            stack,
            head,
        })
    }

    pub fn fv_dim(&self) -> usize {
        self.predictor.fv_dim()
    }

    pub fn zeros_like(&self) -> Self {
        EnhancedLm {
            config: self.config.clone(),
            vocab_hash: self.vocab_hash,
            predictor: self.predictor.clone(),
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

    fn input(&self, token: usize, y: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.embedding.dim() + y.len());
        x.extend_from_slice(self.embedding.lookup(token));
        x.extend_from_slice(y);
        x
    }

    /// Next-token distributions and the predicted future vectors that fed them.
    pub fn forward(&self, seq: &TokenSequence) -> Result<(Vec<Vec<f64>>, Vec<FutureVector>)> {
        let ys = self.predictor.predict(seq)?;
        let ids = seq.ids();
        let inputs: Vec<Vec<f64>> = ids[..ids.len() - 1]
            .iter()
            .zip(&ys)
            .map(|(&t, y)| self.input(t, y.as_slice()))
            .collect();
        let (hs, _) = self.stack.sequence_forward(&inputs, &self.stack.zero_states())?;
        Ok((hs.iter().map(|h| self.head.forward(h)).collect(), ys))
    }

    pub fn sentence_loss(&self, seq: &TokenSequence, grads: Option<&mut EnhancedLm>) -> Result<LossParts> {
        let ys = self.predictor.predict(seq)?;
        let ids = seq.ids();
        let steps = ids.len() - 1;
        let inputs: Vec<Vec<f64>> = ids[..steps]
            .iter()
            .zip(&ys)
            .map(|(&t, y)| self.input(t, y.as_slice()))
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
            let e = self.embedding.dim();
            // the future-vector part of dx stops here: the predictor is frozen
            for (t, d) in dx.iter().enumerate() {
                grads.embedding.accumulate(ids[t], &d[..e]);
            }
        }
        Ok(LossParts {
            ce,
            mse: 0.0,
            total: ce,
            positions: steps,
        })
    }

    /// Every block including the frozen predictor's, for persistence.
    pub(crate) fn all_blocks(&self) -> Vec<(String, &Matrix)> {
        let mut b = self.blocks();
        b.extend(prefixed("predictor", self.predictor.blocks()));
        b
    }

    pub(crate) fn all_blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut b: Vec<(String, &mut Matrix)> = prefixed_mut("embedding", self.embedding.blocks_mut())
            .chain(prefixed_mut("lstm", self.stack.blocks_mut()))
            .chain(prefixed_mut("head", self.head.blocks_mut()))
            .collect();
        b.extend(prefixed_mut("predictor", self.predictor.blocks_mut()));
        b
    }
}

impl Parameters for EnhancedLm {
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

impl LanguageModel for EnhancedLm {
    fn architecture(&self) -> Architecture {
        Architecture::Enhanced
    }

    fn vocab_size(&self) -> usize {
        self.embedding.table.rows()
    }

    fn vocab_hash(&self) -> u64 {
        self.vocab_hash
    }

    fn start(&self) -> DecodeState {
        DecodeState {
            stacks: vec![self.predictor.stack.zero_states(), self.stack.zero_states()],
            feed: Vec::new(),
        }
    }

    fn step(&self, state: &mut DecodeState, token: usize) -> Result<Vec<f64>> {
        if token >= self.vocab_size() {
            return Err(Error::Validation(format!("token id {token} out of range")));
        }
        let y = self.predictor.step(token, &mut state.stacks[0])?;
        let x = self.input(token, &y);
        let (h, _) = self.stack.step(&x, &mut state.stacks[1])?;
        Ok(self.head.forward(&h))
    }
}

/// CE training of an enhanced LM on top of a frozen predictor.
pub fn train_enhanced(
    sentences: &[TokenSequence],
    vocab: &Vocabulary,
    predictor: &FvPredictor,
    config: &LmConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Trained<EnhancedLm>> {
    if predictor.vocab_hash != vocab.hash() {
        return Err(Error::Config("the predictor was trained with a different vocabulary".into()));
    }
    let model = EnhancedLm::new(config, vocab, predictor.clone())?;
    let accumulate = |m: &EnhancedLm, s: &TokenSequence, g: &mut EnhancedLm| m.sentence_loss(s, Some(g));
    let evaluate = |m: &EnhancedLm, s: &TokenSequence| m.sentence_loss(s, None);
    train::run(
        model,
        sentences,
        &config.train,
        Objective {
            accumulate: &accumulate,
            evaluate: &evaluate,
            zeros_like: &EnhancedLm::zeros_like,
            selection: Selection::Perplexity,
        },
        observer,
    )
}
