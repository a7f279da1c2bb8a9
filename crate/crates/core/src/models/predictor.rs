use crate::corpus::{TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::lstm::{LstmStack, LstmState};
use crate::math::{prefixed, prefixed_mut, Matrix, Parameters};
use crate::models::components::{mse_grad, Embedding, LinearHead};
use crate::models::lm::{extract_future_vectors, LstmLm};
use crate::models::train::{self, init_rng, LossParts, Objective, Selection, TrainObserver, Trained};
use crate::models::{FutureVector, LmConfig};

/// Causal regressor of future vectors: at step `i` it reads `x_i` and
/// emits `y_{i+1} = W h_i + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct FvPredictor {
    pub config: LmConfig,
    pub vocab_hash: u64,
    pub embedding: Embedding,
    pub stack: LstmStack,
    pub head: LinearHead,
}

impl FvPredictor {
    pub fn new(config: &LmConfig, vocab: &Vocabulary) -> Result<Self> {
        FvPredictor::with_vocab_size(config, vocab.len(), vocab.hash())
    }

    pub fn with_vocab_size(config: &LmConfig, vocab_size: usize, vocab_hash: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = init_rng(config.train.seed);
        let scale = config.train.init_scale;
        let embedding = Embedding::uniform(vocab_size, config.embed_dim, scale, &mut rng);
        let stack = LstmStack::uniform(config.embed_dim, config.hidden_dim, config.num_layers, scale, &mut rng)?;
        let head = LinearHead::uniform(config.fv_dim, config.hidden_dim, scale, &mut rng);
        Ok(FvPredictor {
            config: config.clone(),
            vocab_hash,
            embedding,
            stack,
            head,
        })
    }

    pub fn fv_dim(&self) -> usize {
        self.head.output_dim()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.table.rows()
    }

    pub fn zeros_like(&self) -> Self {
        FvPredictor {
            config: self.config.clone(),
            vocab_hash: self.vocab_hash,
            embedding: Embedding {
                table: Matrix::zeros(self.embedding.table.rows(), self.embedding.table.cols()),
            },
            stack: self.stack.zeros_like(),
            head: LinearHead {
                w: Matrix::zeros(self.head.w.rows(), self.head.w.cols()),
                b: Matrix::zeros(self.head.b.rows(), 1),
            },
        }
    }

    fn check_ids(&self, seq: &TokenSequence) -> Result<()> {
        let n = self.vocab_size();
        match seq.ids().iter().find(|&&i| i >= n) {
            Some(bad) => Err(Error::Validation(format!(
                "token id {bad} out of range for vocabulary of {n}"
            ))),
            None => Ok(()),
        }
    }

    /// One incremental step: consume `token`, return the next prediction.
    pub fn step(&self, token: usize, states: &mut [LstmState]) -> Result<Vec<f64>> {
        let (h, _) = self.stack.step(self.embedding.lookup(token), states)?;
        Ok(self.head.forward(&h))
    }

    /// Predictions for positions `1..T`, aligned with
    /// [`extract_future_vectors`]: entry `k` is computed from `ids[..=k]`.
    pub fn predict(&self, seq: &TokenSequence) -> Result<Vec<FutureVector>> {
        self.check_ids(seq)?;
        let ids = seq.ids();
        let mut states = self.stack.zero_states();
        ids[..ids.len() - 1]
            .iter()
            .map(|&t| self.step(t, &mut states).map(FutureVector))
            .collect()
    }

    pub fn sentence_loss(
        &self,
        seq: &TokenSequence,
        targets: &[FutureVector],
        grads: Option<&mut FvPredictor>,
    ) -> Result<LossParts> {
        self.check_ids(seq)?;
        let ids = seq.ids();
        let steps = ids.len() - 1;
        if targets.len() != steps {
            return Err(Error::shape(format!("{} targets for {steps} predictions", targets.len())));
        }
        let inputs: Vec<Vec<f64>> = ids[..steps]
            .iter()
            .map(|&t| self.embedding.lookup(t).to_vec())
            .collect();
        let (hs, caches) = self.stack.sequence_forward(&inputs, &self.stack.zero_states())?;
        let scale = 1.0 / steps as f64;
        let mut mse = 0.0;
        let mut dys = Vec::with_capacity(steps);
        for (h, z) in hs.iter().zip(targets) {
            let y = self.head.forward(h);
            if z.dim() != y.len() {
                return Err(Error::Config(format!(
                    "future vector has dim {} but the predictor emits {}",
                    z.dim(),
                    y.len()
                )));
            }
            let (l, dy) = mse_grad(&y, z.as_slice(), scale);
            mse += l;
            dys.push(dy);
        }
        mse *= scale;

        if let Some(grads) = grads {
            let dh: Vec<Vec<f64>> = hs
                .iter()
                .zip(&dys)
                .map(|(h, dy)| self.head.backward(h, dy, &mut grads.head))
                .collect();
            let dx = self.stack.sequence_backward_into(&caches, &dh, &mut grads.stack)?;
            for (t, d) in dx.iter().enumerate() {
                grads.embedding.accumulate(ids[t], d);
            }
        }
        Ok(LossParts {
            ce: 0.0,
            mse,
            total: mse,
            positions: steps,
        })
    }
}

impl Parameters for FvPredictor {
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

pub(crate) fn check_extractor(extractor: &LstmLm, fv_dim: usize, vocab: &Vocabulary) -> Result<()> {
    if extractor.direction != crate::models::Direction::Reversed {
        return Err(Error::Config("the extractor must be a reversed-order model".into()));
    }
    if extractor.stack.output_dim() != fv_dim {
        return Err(Error::Config(format!(
            "fv_dim is {fv_dim} but the extractor's top layer is {} wide",
            extractor.stack.output_dim()
        )));
    }
    if extractor.embedding.table.rows() != vocab.len() {
        return Err(Error::Config(format!(
            "extractor vocabulary has {} words, corpus vocabulary {}",
            extractor.embedding.table.rows(),
            vocab.len()
        )));
    }
    Ok(())
}

/// Trains the predictor on MSE against the frozen extractor's vectors.
pub fn train_fv_predictor(
    sentences: &[TokenSequence],
    vocab: &Vocabulary,
    extractor: &LstmLm,
    config: &LmConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Trained<FvPredictor>> {
    config.validate()?;
    check_extractor(extractor, config.fv_dim, vocab)?;
    let model = FvPredictor::new(config, vocab)?;
    let accumulate = |m: &FvPredictor, s: &TokenSequence, g: &mut FvPredictor| {
        let z = extract_future_vectors(extractor, s)?;
        m.sentence_loss(s, &z, Some(g))
    };
    let evaluate = |m: &FvPredictor, s: &TokenSequence| {
        let z = extract_future_vectors(extractor, s)?;
        m.sentence_loss(s, &z, None)
    };
    train::run(
        model,
        sentences,
        &config.train,
        Objective {
            accumulate: &accumulate,
            evaluate: &evaluate,
            zeros_like: &FvPredictor::zeros_like,
            selection: Selection::Mse,
        },
        observer,
    )
}
