//! Per-sentence SGD shared by every architecture.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::math::{sgd_step, OptimizerState, Parameters};
use crate::models::TrainConfig;

/// Losses of one sentence. `total` is the quantity whose gradient is taken.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub ce: f64,
    pub mse: f64,
    pub total: f64,
    pub positions: usize,
}

#[derive(Clone, Copy, Debug, Default)]
struct Totals {
    ce: f64,
    mse: f64,
    positions: usize,
}

impl Totals {
    fn add(&mut self, p: &LossParts) {
        self.ce += p.ce * p.positions as f64;
        self.mse += p.mse * p.positions as f64;
        self.positions += p.positions;
    }

    fn mean_ce(&self) -> f64 {
        self.ce / self.positions.max(1) as f64
    }

    fn mean_mse(&self) -> f64 {
        self.mse / self.positions.max(1) as f64
    }
}

/// One optimizer update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    /// Index of the sentence in the training set (not the shuffled order).
    pub sentence: usize,
    pub ce: f64,
    pub mse: f64,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce: f64,
    pub mse: f64,
    pub ppl: f64,
    pub valid_ce: f64,
    pub valid_mse: f64,
    pub valid_ppl: f64,
    pub learning_rate: f64,
    pub improved: bool,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "epoch={} ce={:.6} mse={:.6} ppl={:.4} valid_ce={:.6} valid_mse={:.6} valid_ppl={:.4} lr={}",
            self.epoch,
            self.ce,
            self.mse,
            self.ppl,
            self.valid_ce,
            self.valid_mse,
            self.valid_ppl,
            self.learning_rate
        )
    }
}

pub trait TrainObserver {
    fn on_step(&mut self, _step: &StepLog) {}
    fn on_epoch(&mut self, _epoch: &EpochLog) {}
}

impl TrainObserver for () {}

/// Records every step and epoch.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl TrainObserver for TrainLog {
    fn on_step(&mut self, step: &StepLog) {
        self.steps.push(*step);
    }

    fn on_epoch(&mut self, epoch: &EpochLog) {
        self.epochs.push(*epoch);
    }
}

impl<F: FnMut(&EpochLog)> TrainObserver for F {
    fn on_epoch(&mut self, epoch: &EpochLog) {
        self(epoch)
    }
}

#[derive(Clone, Debug)]
pub struct Trained<M> {
    /// Parameters from the epoch with the best validation metric.
    pub model: M,
    pub best_epoch: usize,
    pub epochs: Vec<EpochLog>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Selection {
    Perplexity,
    Mse,
}

pub(crate) fn split_validation(
    sequences: &[TokenSequence],
    fraction: f64,
) -> (&[TokenSequence], &[TokenSequence]) {
    let n = sequences.len();
    let held = ((n as f64) * fraction).round() as usize;
    let held = held.min(n.saturating_sub(1));
    if held == 0 {
        (sequences, sequences)
    } else {
        sequences.split_at(n - held)
    }
}

pub(crate) fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66_D1CE_4E5B)
}

pub(crate) fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) struct Objective<'a, M> {
    pub accumulate: &'a (dyn Fn(&M, &TokenSequence, &mut M) -> Result<LossParts> + Sync),
    pub evaluate: &'a (dyn Fn(&M, &TokenSequence) -> Result<LossParts> + Sync),
    pub zeros_like: &'a dyn Fn(&M) -> M,
    pub selection: Selection,
}

fn evaluate_set<M: Sync>(
    model: &M,
    data: &[TokenSequence],
    evaluate: &(dyn Fn(&M, &TokenSequence) -> Result<LossParts> + Sync),
) -> Result<Totals> {
    let parts: Vec<LossParts> = data
        .par_iter()
        .map(|s| evaluate(model, s))
        .collect::<Result<_>>()?;
    let mut t = Totals::default();
    for p in &parts {
        t.add(p);
    }
    Ok(t)
}

pub(crate) fn run<M>(
    mut model: M,
    sequences: &[TokenSequence],
    cfg: &TrainConfig,
    objective: Objective<'_, M>,
    observer: &mut dyn TrainObserver,
) -> Result<Trained<M>>
where
    M: Parameters + Clone + Sync,
{
    if sequences.is_empty() {
        return Err(Error::Validation("training corpus is empty".into()));
    }
    let (train, valid) = split_validation(sequences, cfg.validation_fraction);
    let mut opt = OptimizerState::new(cfg.learning_rate, cfg.clip_norm)?;
    let mut rng = shuffle_rng(cfg.seed);
    let mut grads = (objective.zeros_like)(&model);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, M)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut totals = Totals::default();
        for &idx in &order {
            grads.zero();
            let parts = (objective.accumulate)(&model, &train[idx], &mut grads)?;
            if !parts.total.is_finite() {
                return Err(Error::Training(format!(
                    "loss diverged at epoch {epoch}, sentence {idx}"
                )));
            }
            // step on the summed per-token loss, not the sentence mean
            grads.scale(parts.positions as f64);
            let grad_norm = sgd_step(&mut model, &grads, &opt).map_err(|e| match e {
                Error::Training(m) => {
                    Error::Training(format!("{m} at epoch {epoch}, sentence {idx}"))
                }
                other => other,
            })?;
            totals.add(&parts);
            observer.on_step(&StepLog {
                epoch,
                sentence: idx,
                ce: parts.ce,
                mse: parts.mse,
                total: parts.total,
                grad_norm,
            });
        }

        let v = evaluate_set(&model, valid, objective.evaluate)?;
        let metric = match objective.selection {
            Selection::Perplexity => v.mean_ce(),
            Selection::Mse => v.mean_mse(),
        };
        let improved = match &best {
            None => metric.is_finite(),
            Some((b, _, _)) => metric < *b,
        };
        let log = EpochLog {
            epoch,
            ce: totals.mean_ce(),
            mse: totals.mean_mse(),
            ppl: totals.mean_ce().exp(),
            valid_ce: v.mean_ce(),
            valid_mse: v.mean_mse(),
            valid_ppl: v.mean_ce().exp(),
            learning_rate: opt.learning_rate,
            improved,
        };
        observer.on_epoch(&log);
        log::info!("{}", log.line());
        epochs.push(log);
        if improved {
            best = Some((metric, epoch, model.clone()));
        } else {
            // resume from the best parameters with a smaller step
            opt.learning_rate *= cfg.lr_decay;
            if let Some((_, _, m)) = &best {
                model = m.clone();
            }
        }
    }

    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model, 0),
    };
    Ok(Trained {
        model,
        best_epoch,
        epochs,
    })
}
