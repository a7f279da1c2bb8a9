//! Perplexity, corpus BLEU and the greedy-continuation protocol.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use rayon::prelude::*;

use crate::corpus::{TokenSequence, BOS_ID};
use crate::error::{Error, Result};
use crate::models::{greedy_continue, score_sequence, LanguageModel};

/// History lengths evaluated by default.
pub const HISTORY_LENGTHS: [usize; 5] = [0, 1, 2, 3, 5];

pub const BLEU_ORDER: usize = 4;

/// `exp` of the mean per-token cross entropy over every predicted
/// position (`</s>` included).
pub fn perplexity(model: &dyn LanguageModel, corpus: &[TokenSequence]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Validation("perplexity of an empty corpus".into()));
    }
    let scores: Vec<f64> = corpus
        .par_iter()
        .map(|s| score_sequence(model, s))
        .collect::<Result<_>>()?;
    let positions: usize = corpus.iter().map(TokenSequence::num_predictions).sum();
    let total: f64 = scores.iter().sum();
    Ok((-total / positions as f64).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    pub score: f64,
    /// Modified precisions for orders 1..=4, after smoothing.
    pub precisions: [f64; BLEU_ORDER],
    /// Clipped matches and candidate n-gram totals per order.
    pub matches: [usize; BLEU_ORDER],
    pub totals: [usize; BLEU_ORDER],
    pub brevity_penalty: f64,
    pub hypothesis_length: usize,
    pub reference_length: usize,
}

impl BleuReport {
    /// `BP · exp(¼ Σ ln p_n)` from the stored components.
    pub fn recompute(&self) -> f64 {
        let log_mean = self.precisions.iter().map(|p| p.ln()).sum::<f64>() / BLEU_ORDER as f64;
        self.brevity_penalty * log_mean.exp()
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4.
///
/// Clipped n-gram matches and candidate counts are summed over the corpus.
/// An order `n >= 2` with no match uses `(0 + 1) / (total + 1)`; unigram
/// precision is never smoothed, so a corpus with no shared word scores 0.
/// The brevity penalty is `exp(1 - r/c)` when `c < r`, and an empty
/// hypothesis side scores 0.
pub fn bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<BleuReport> {
    if hypotheses.is_empty() {
        return Err(Error::Validation("BLEU of an empty hypothesis list".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Validation(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; BLEU_ORDER];
    let mut totals = [0usize; BLEU_ORDER];
    let mut c = 0;
    let mut r = 0;
    for (h, rf) in hypotheses.iter().zip(references) {
        c += h.len();
        r += rf.len();
        for n in 1..=BLEU_ORDER {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            for (g, k) in hc {
                matches[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += k;
            }
        }
    }
    let mut precisions = [0.0; BLEU_ORDER];
    for n in 0..BLEU_ORDER {
        precisions[n] = if n > 0 && matches[n] == 0 {
            1.0 / (totals[n] as f64 + 1.0)
        } else if totals[n] == 0 {
            0.0
        } else {
            matches[n] as f64 / totals[n] as f64
        };
    }
    let brevity_penalty = if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    let mut report = BleuReport {
        score: 0.0,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hypothesis_length: c,
        reference_length: r,
    };
    report.score = report.recompute();
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryResult {
    pub history_length: usize,
    pub bleu: BleuReport,
    /// Sentences scored at this length.
    pub evaluated: usize,
    /// Sentences with fewer interior tokens than the history length.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqPredReport {
    pub results: Vec<HistoryResult>,
    pub perplexity: f64,
}

impl SeqPredReport {
    pub fn bleu_at(&self, history_length: usize) -> Option<f64> {
        self.results
            .iter()
            .find(|r| r.history_length == history_length)
            .map(|r| r.bleu.score)
    }

    /// Rows of `model,metric,history_length,value`.
    pub fn csv_rows(&self, model: &str) -> Vec<String> {
        let mut rows: Vec<String> = self
            .results
            .iter()
            .map(|r| format!("{model},bleu,{},{:.6}", r.history_length, r.bleu.score))
            .collect();
        rows.push(format!("{model},ppl,,{:.6}", self.perplexity));
        rows
    }
}

pub const CSV_HEADER: &str = "model,metric,history_length,value";

/// Aligned text table with one row per model: PPL, then BLEU per history
/// length. All reports must use the same history lengths.
pub fn render_table(reports: &[(&str, &SeqPredReport)]) -> String {
    let Some((_, first)) = reports.first() else {
        return String::new();
    };
    let width = reports.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = write!(out, "{:<width$}  {:>10}", "model", "PPL");
    for r in &first.results {
        let _ = write!(out, "  {:>8}", format!("BLEU@{}", r.history_length));
    }
    out.push('\n');
    for (name, rep) in reports {
        let _ = write!(out, "{:<width$}  {:>10.3}", name, rep.perplexity);
        for r in &rep.results {
            let _ = write!(out, "  {:>8.4}", r.bleu.score);
        }
        out.push('\n');
    }
    out
}

fn check_history_lengths(lengths: &[usize]) -> Result<()> {
    if lengths.is_empty() {
        return Err(Error::Validation("no history lengths given".into()));
    }
    for (i, l) in lengths.iter().enumerate() {
        if lengths[..i].contains(l) {
            return Err(Error::Validation(format!("history length {l} given twice")));
        }
    }
    Ok(())
}

/// Greedy continuation scored by BLEU at each history length.
///
/// For length `L` the history is `<s>` plus the first `L` interior tokens,
/// the hypothesis is the greedy continuation and the reference is the rest
/// of the interior. Sentences with fewer than `L` interior tokens are
/// skipped. `max_len` caps each continuation; `None` uses twice the
/// reference length plus 5.
pub fn sequence_prediction_eval(
    model: &dyn LanguageModel,
    corpus: &[TokenSequence],
    history_lengths: &[usize],
    max_len: Option<usize>,
) -> Result<SeqPredReport> {
    check_history_lengths(history_lengths)?;
    if max_len == Some(0) {
        return Err(Error::Validation("max_len must be at least 1".into()));
    }
    let perplexity = perplexity(model, corpus)?;
    let mut results = Vec::with_capacity(history_lengths.len());
    for &l in history_lengths {
        let usable: Vec<&TokenSequence> = corpus.iter().filter(|s| s.interior().len() >= l).collect();
        let skipped = corpus.len() - usable.len();
        let pairs: Vec<(Vec<usize>, Vec<usize>)> = usable
            .par_iter()
            .map(|s| {
                let interior = s.interior();
                let mut history = vec![BOS_ID];
                history.extend_from_slice(&interior[..l]);
                let reference = interior[l..].to_vec();
                let cap = max_len.unwrap_or(2 * reference.len() + 5);
                greedy_continue(model, &history, cap).map(|h| (h, reference))
            })
            .collect::<Result<_>>()?;
        if pairs.is_empty() {
            return Err(Error::Validation(format!(
                "no sentence has at least {l} tokens"
            )));
        }
        let (hyps, refs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        results.push(HistoryResult {
            history_length: l,
            bleu: bleu(&hyps, &refs)?,
            evaluated: hyps.len(),
            skipped,
        });
    }
    Ok(SeqPredReport {
        results,
        perplexity,
    })
}
