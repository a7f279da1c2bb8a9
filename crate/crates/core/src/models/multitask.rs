use crate::corpus::{TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::lstm::{LstmStack, StackBackprop, StepCache};
use crate::math::{prefixed, prefixed_mut, Matrix, Parameters};
use crate::models::components::{mse_grad, Embedding, LinearHead, SoftmaxHead};
use crate::models::lm::{extract_future_vectors, LstmLm};
use crate::models::predictor::check_extractor;
use crate::models::train::{self, init_rng, LossParts, Objective, Selection, TrainObserver, Trained};
use crate::models::{Architecture, DecodeState, FutureVector, LanguageModel, LmConfig, PROB_FLOOR};

/// Shared trunk with a word branch and a future-vector branch.
///
/// At step `i` the trunk reads `[f(x_i); y_i]` where `y_i` is the model's
/// own future-vector prediction from the previous step (`y_0 = 0`). The
/// word branch yields the next-token distribution and the future-vector
/// branch yields `y_{i+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiTaskLm {
    pub config: LmConfig,
    pub vocab_hash: u64,
    pub embedding: Embedding,
    pub trunk: LstmStack,
    pub word_branch: LstmStack,
    pub word_head: SoftmaxHead,
    pub fv_branch: LstmStack,
    pub fv_head: LinearHead,
}

struct StepRecord {
    trunk: Vec<StepCache>,
    word: Vec<StepCache>,
    fv: Vec<StepCache>,
    v: Vec<f64>,
    u: Vec<f64>,
    p: Vec<f64>,
    y: Vec<f64>,
}

impl MultiTaskLm {
    pub fn new(config: &LmConfig, vocab: &Vocabulary) -> Result<Self> {
        MultiTaskLm::with_vocab_size(config, vocab.len(), vocab.hash())
    }

    pub fn with_vocab_size(config: &LmConfig, vocab_size: usize, vocab_hash: u64) -> Result<Self> {
        config.validate_mt()?;
        let mut rng = init_rng(config.train.seed);
        let scale = config.train.init_scale;
        let (e, h, f) = (config.embed_dim, config.hidden_dim, config.fv_dim);
        let embedding = Embedding::uniform(vocab_size, e, scale, &mut rng);
        let trunk = LstmStack::uniform(e + f, h, config.mt_shared_layers, scale, &mut rng)?;
        let word_branch = LstmStack::uniform(h, h, config.mt_branch_layers, scale, &mut rng)?;
        let word_head = SoftmaxHead::uniform(vocab_size, h, scale, &mut rng);
        let fv_branch = LstmStack::uniform(h, h, config.mt_branch_layers, scale, &mut rng)?;
        let fv_head = LinearHead::uniform(f, h, scale, &mut rng);
        Ok(MultiTaskLm {
            config: config.clone(),
            vocab_hash,
            embedding,
            trunk,
            word_branch,
            word_head,
            fv_branch,
            fv_head,
        })
    }

    pub fn fv_dim(&self) -> usize {
        self.fv_head.output_dim()
    }

    pub fn zeros_like(&self) -> Self {
        MultiTaskLm {
            config: self.config.clone(),
            vocab_hash: self.vocab_hash,
            embedding: Embedding {
                table: Matrix::zeros(self.embedding.table.rows(), self.embedding.table.cols()),
            },
            trunk: self.trunk.zeros_like(),
            word_branch: self.word_branch.zeros_like(),
            word_head: SoftmaxHead {
                w: Matrix::zeros(self.word_head.w.rows(), self.word_head.w.cols()),
                b: Matrix::zeros(self.word_head.b.rows(), 1),
            },
            fv_branch: self.fv_branch.zeros_like(),
            fv_head: LinearHead {
                w: Matrix::zeros(self.fv_head.w.rows(), self.fv_head.w.cols()),
                b: Matrix::zeros(self.fv_head.b.rows(), 1),
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

    fn run(&self, ids: &[usize]) -> Result<Vec<StepRecord>> {
        let mut trunk_s = self.trunk.zero_states();
        let mut word_s = self.word_branch.zero_states();
        let mut fv_s = self.fv_branch.zero_states();
        let mut y = vec![0.0; self.fv_dim()];
        let mut out = Vec::with_capacity(ids.len());
        for &t in ids {
            let mut x = self.embedding.lookup(t).to_vec();
            x.extend_from_slice(&y);
            let (s, trunk) = self.trunk.step(&x, &mut trunk_s)?;
            let (v, word) = self.word_branch.step(&s, &mut word_s)?;
            let (u, fv) = self.fv_branch.step(&s, &mut fv_s)?;
            let p = self.word_head.forward(&v);
            y = self.fv_head.forward(&u);
            out.push(StepRecord {
                trunk,
                word,
                fv,
                v,
                u,
                p,
                y: y.clone(),
            });
        }
        Ok(out)
    }

    /// Next-token distributions and the model's own future-vector
    /// predictions; entry `i` of both is computed from `ids[..=i]`.
    pub fn forward(&self, seq: &TokenSequence) -> Result<(Vec<Vec<f64>>, Vec<FutureVector>)> {
        self.check_ids(seq)?;
        let ids = seq.ids();
        let recs = self.run(&ids[..ids.len() - 1])?;
        Ok(recs.into_iter().map(|r| (r.p, FutureVector(r.y))).unzip())
    }

    /// `CE + λ·MSE` of one sentence. Without targets the objective is CE
    /// alone and the reported MSE is zero.
    pub fn sentence_loss(
        &self,
        seq: &TokenSequence,
        targets: Option<&[FutureVector]>,
        grads: Option<&mut MultiTaskLm>,
    ) -> Result<LossParts> {
        self.check_ids(seq)?;
        let ids = seq.ids();
        let steps = ids.len() - 1;
        if let Some(z) = targets {
            if z.len() != steps {
                return Err(Error::shape(format!("{} targets for {steps} predictions", z.len())));
            }
            if let Some(bad) = z.iter().find(|v| v.dim() != self.fv_dim()) {
                return Err(Error::Config(format!(
                    "future vector has dim {} but the model emits {}",
                    bad.dim(),
                    self.fv_dim()
                )));
            }
        }
        let recs = self.run(&ids[..steps])?;
        let scale = 1.0 / steps as f64;
        let lambda = self.config.lambda_mt;

        let mut ce = 0.0;
        for (r, &t) in recs.iter().zip(&ids[1..]) {
            ce -= r.p[t].max(PROB_FLOOR).ln();
        }
        ce *= scale;
        let mut mse = 0.0;
        let mut mse_dy = Vec::new();
        if let Some(z) = targets {
            for (r, z) in recs.iter().zip(z) {
                let (l, dy) = mse_grad(&r.y, z.as_slice(), scale * lambda);
                mse += l;
                mse_dy.push(dy);
            }
            mse *= scale;
        }
        let parts = LossParts {
            ce,
            mse,
            total: ce + lambda * mse,
            positions: steps,
        };

        let Some(grads) = grads else {
            return Ok(parts);
        };
        let e = self.embedding.dim();
        let use_mse = targets.is_some() && lambda != 0.0;
        let mut trunk_bp = StackBackprop::new(&self.trunk);
        let mut word_bp = StackBackprop::new(&self.word_branch);
        let mut fv_bp = StackBackprop::new(&self.fv_branch);
        // gradient on y_{t+1} arriving through the next step's trunk input
        let mut carried: Option<Vec<f64>> = None;
        for t in (0..steps).rev() {
            let r = &recs[t];
            let dy = match (use_mse, carried.take()) {
                (true, Some(mut c)) => {
                    for (a, b) in c.iter_mut().zip(&mse_dy[t]) {
                        *a += b;
                    }
                    Some(c)
                }
                (true, None) => Some(mse_dy[t].clone()),
                (false, c) => c,
            };
            let mut ds = match dy {
                Some(dy) => {
                    let du = self.fv_head.backward(&r.u, &dy, &mut grads.fv_head);
                    fv_bp.step(&self.fv_branch, &r.fv, &du, &mut grads.fv_branch)?
                }
                None => {
                    let du = vec![0.0; r.u.len()];
                    fv_bp.step(&self.fv_branch, &r.fv, &du, &mut grads.fv_branch)?
                }
            };
            let dv = self.word_head.backward(&r.v, &r.p, ids[t + 1], scale, &mut grads.word_head);
            let ds_word = word_bp.step(&self.word_branch, &r.word, &dv, &mut grads.word_branch)?;
            for (a, b) in ds.iter_mut().zip(&ds_word) {
                *a += b;
            }
            let dx = trunk_bp.step(&self.trunk, &r.trunk, &ds, &mut grads.trunk)?;
            grads.embedding.accumulate(ids[t], &dx[..e]);
            // y_0 is a constant
            if t > 0 {
                carried = Some(dx[e..].to_vec());
            }
        }
        Ok(parts)
    }
}

impl Parameters for MultiTaskLm {
    fn blocks(&self) -> Vec<(String, &Matrix)> {
        prefixed("embedding", self.embedding.blocks())
            .chain(prefixed("trunk", self.trunk.blocks()))
            .chain(prefixed("word_branch", self.word_branch.blocks()))
            .chain(prefixed("word_head", self.word_head.blocks()))
            .chain(prefixed("fv_branch", self.fv_branch.blocks()))
            .chain(prefixed("fv_head", self.fv_head.blocks()))
            .collect()
    }

    fn blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        prefixed_mut("embedding", self.embedding.blocks_mut())
            .chain(prefixed_mut("trunk", self.trunk.blocks_mut()))
            .chain(prefixed_mut("word_branch", self.word_branch.blocks_mut()))
            .chain(prefixed_mut("word_head", self.word_head.blocks_mut()))
            .chain(prefixed_mut("fv_branch", self.fv_branch.blocks_mut()))
            .chain(prefixed_mut("fv_head", self.fv_head.blocks_mut()))
            .collect()
    }
}

impl LanguageModel for MultiTaskLm {
    fn architecture(&self) -> Architecture {
        Architecture::MultiTask
    }

    fn vocab_size(&self) -> usize {
        self.embedding.table.rows()
    }

    fn vocab_hash(&self) -> u64 {
        self.vocab_hash
    }

    fn start(&self) -> DecodeState {
        DecodeState {
            stacks: vec![
                self.trunk.zero_states(),
                self.word_branch.zero_states(),
                self.fv_branch.zero_states(),
            ],
            feed: vec![0.0; self.fv_dim()],
        }
    }

    fn step(&self, state: &mut DecodeState, token: usize) -> Result<Vec<f64>> {
        if token >= self.vocab_size() {
            return Err(Error::Validation(format!("token id {token} out of range")));
        }
        let mut x = self.embedding.lookup(token).to_vec();
        x.extend_from_slice(&state.feed);
        let (s, _) = self.trunk.step(&x, &mut state.stacks[0])?;
        let (v, _) = self.word_branch.step(&s, &mut state.stacks[1])?;
        let (u, _) = self.fv_branch.step(&s, &mut state.stacks[2])?;
        state.feed = self.fv_head.forward(&u);
        Ok(self.word_head.forward(&v))
    }
}

/// Trains the multi-task model on `CE + λ·MSE` against the extractor's
/// future vectors. With no extractor the objective is CE alone.
pub fn train_mt(
    sentences: &[TokenSequence],
    vocab: &Vocabulary,
    extractor: Option<&LstmLm>,
    config: &LmConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Trained<MultiTaskLm>> {
    config.validate_mt()?;
    if let Some(ext) = extractor {
        check_extractor(ext, config.fv_dim, vocab)?;
    }
    let model = MultiTaskLm::new(config, vocab)?;
    let targets = |s: &TokenSequence| -> Result<Option<Vec<FutureVector>>> {
        extractor.map(|ext| extract_future_vectors(ext, s)).transpose()
    };
    let accumulate = |m: &MultiTaskLm, s: &TokenSequence, g: &mut MultiTaskLm| {
        let z = targets(s)?;
        m.sentence_loss(s, z.as_deref(), Some(g))
    };
    let evaluate = |m: &MultiTaskLm, s: &TokenSequence| {
        let z = targets(s)?;
        m.sentence_loss(s, z.as_deref(), None)
    };
    train::run(
        model,
        sentences,
        &config.train,
        Objective {
            accumulate: &accumulate,
            evaluate: &evaluate,
            zeros_like: &MultiTaskLm::zeros_like,
            selection: Selection::Perplexity,
        },
        observer,
    )
}
