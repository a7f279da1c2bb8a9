//! N-best rescoring with interpolated LM scores, and WER.
//!
//! N-best file: one hypothesis per line,
//! `utterance_id<TAB>acoustic_score<TAB>text`, optionally with the first-pass
//! LM score as an extra field: `utterance_id<TAB>acoustic<TAB>lm<TAB>text`.
//! Reference file: `utterance_id<TAB>text`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::{Vocabulary, UNK_ID};
use crate::error::{Error, Result};
use crate::models::{score_sequence, LanguageModel};

#[derive(Clone, Debug, PartialEq)]
pub struct NBestEntry {
    pub utterance_id: String,
    /// Natural-log acoustic score.
    pub acoustic_score: f64,
    pub original_lm_score: Option<f64>,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NBestList {
    pub utterance_id: String,
    /// In decoder order; index = original rank.
    pub entries: Vec<NBestEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for LineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

/// Parsed n-best lists plus every line that could not be parsed.
#[derive(Clone, Debug, PartialEq)]
pub struct NBestFile {
    pub lists: Vec<NBestList>,
    pub errors: Vec<LineError>,
}

fn parse_score(field: &str, what: &str) -> std::result::Result<f64, String> {
    match field.trim().parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(v) => Err(format!("{what} {v} is not finite")),
        Err(_) => Err(format!("{what} {:?} is not a number", field.trim())),
    }
}

fn parse_entry(line: &str) -> std::result::Result<NBestEntry, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    let (id, acoustic, lm, text) = match fields.as_slice() {
        [id, a, t] => (*id, *a, None, *t),
        [id, a, l, t] => (*id, *a, Some(*l), *t),
        _ => return Err(format!("expected 3 or 4 tab-separated fields, found {}", fields.len())),
    };
    let id = id.trim();
    if id.is_empty() {
        return Err("empty utterance id".into());
    }
    Ok(NBestEntry {
        utterance_id: id.to_string(),
        acoustic_score: parse_score(acoustic, "acoustic score")?,
        original_lm_score: lm.map(|l| parse_score(l, "LM score")).transpose()?,
        text: text.split_whitespace().collect::<Vec<_>>().join(" "),
    })
}

/// Groups hypotheses by utterance in order of first appearance. Blank
/// lines are ignored; malformed lines are collected with their 1-based
/// line numbers.
pub fn parse_nbest(text: &str) -> Result<NBestFile> {
    let mut lists: Vec<NBestList> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_entry(line) {
            Ok(e) => {
                let k = *index.entry(e.utterance_id.clone()).or_insert_with(|| {
                    lists.push(NBestList {
                        utterance_id: e.utterance_id.clone(),
                        entries: Vec::new(),
                    });
                    lists.len() - 1
                });
                lists[k].entries.push(e);
            }
            Err(message) => errors.push(LineError { line: i + 1, message }),
        }
    }
    if lists.is_empty() {
        let detail = errors.first().map(|e| format!(" (first problem: {e})")).unwrap_or_default();
        return Err(Error::Format(format!("no parsable n-best entries{detail}")));
    }
    Ok(NBestFile { lists, errors })
}

pub fn load_nbest(path: &Path) -> Result<NBestFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_nbest(&text).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_nbest(lists: &[NBestList]) -> String {
    let mut out = String::new();
    for e in lists.iter().flat_map(|l| &l.entries) {
        let _ = match e.original_lm_score {
            Some(lm) => writeln!(out, "{}\t{}\t{}\t{}", e.utterance_id, e.acoustic_score, lm, e.text),
            None => writeln!(out, "{}\t{}\t{}", e.utterance_id, e.acoustic_score, e.text),
        };
    }
    out
}

/// Reference transcripts keyed by utterance id.
pub fn parse_references(text: &str) -> Result<BTreeMap<String, String>> {
    let mut refs = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, words) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("line {}: expected id<TAB>text", i + 1)))?;
        let id = id.trim().to_string();
        let words = words.split_whitespace().collect::<Vec<_>>().join(" ");
        if refs.insert(id.clone(), words).is_some() {
            return Err(Error::Format(format!("line {}: duplicate reference for {id}", i + 1)));
        }
    }
    Ok(refs)
}

pub fn load_references(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_references(&text).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Interpolation {
    /// Weighted sum of log-probabilities.
    #[default]
    Log,
    /// Log of the weighted sum of probabilities.
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RescoreConfig {
    pub lm_scale: f64,
    /// One weight per model; empty means equal weights.
    pub weights: Vec<f64>,
    pub interpolation: Interpolation,
}

impl Default for RescoreConfig {
    fn default() -> Self {
        RescoreConfig {
            lm_scale: 1.0,
            weights: Vec::new(),
            interpolation: Interpolation::Log,
        }
    }
}

impl RescoreConfig {
    /// The weights for `n` models, validated.
    pub fn resolved_weights(&self, n: usize) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(Error::Config("rescoring needs at least one model".into()));
        }
        if !(self.lm_scale >= 0.0) || !self.lm_scale.is_finite() {
            return Err(Error::Config(format!("lm_scale must be >= 0, got {}", self.lm_scale)));
        }
        if self.weights.is_empty() {
            return Ok(vec![1.0 / n as f64; n]);
        }
        if self.weights.len() != n {
            return Err(Error::Config(format!(
                "{} weights for {n} models",
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("model weights must be non-negative".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("model weights sum to {sum}, not 1")));
        }
        Ok(self.weights.clone())
    }
}

/// Combines per-model log-probabilities.
pub fn interpolate(scores: &[f64], weights: &[f64], mode: Interpolation) -> f64 {
    match mode {
        Interpolation::Log => scores.iter().zip(weights).map(|(s, w)| w * s).sum(),
        Interpolation::Linear => {
            let terms: Vec<f64> = scores
                .iter()
                .zip(weights)
                .filter(|(_, w)| **w > 0.0)
                .map(|(s, w)| w.ln() + s)
                .collect();
            let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return m;
            }
            m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
        }
    }
}

/// LM scores of one hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredHypothesis {
    pub rank: usize,
    pub acoustic_score: f64,
    /// Natural-log probability under each model.
    pub model_scores: Vec<f64>,
    pub combined_lm: f64,
    pub oov: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredList {
    pub utterance_id: String,
    pub hypotheses: Vec<ScoredHypothesis>,
}

impl ScoredList {
    pub fn total(&self, rank: usize, lm_scale: f64) -> f64 {
        let h = &self.hypotheses[rank];
        h.acoustic_score + lm_scale * h.combined_lm
    }

    /// Best total; ties go to the earliest rank.
    pub fn select(&self, lm_scale: f64) -> usize {
        let mut best = 0;
        for r in 1..self.hypotheses.len() {
            if self.total(r, lm_scale) > self.total(best, lm_scale) {
                best = r;
            }
        }
        best
    }
}

fn check_models(models: &[&dyn LanguageModel], vocab: &Vocabulary) -> Result<()> {
    for (k, m) in models.iter().enumerate() {
        if m.vocab_size() != vocab.len() || m.vocab_hash() != vocab.hash() {
            return Err(Error::Config(format!(
                "model {k} ({}) was trained with a different vocabulary",
                m.architecture()
            )));
        }
    }
    Ok(())
}

/// Scores every hypothesis with every model. Scale-independent, so one
/// scoring pass serves any number of `lm_scale` values.
pub fn score_lists(
    lists: &[NBestList],
    models: &[&dyn LanguageModel],
    vocab: &Vocabulary,
    config: &RescoreConfig,
) -> Result<Vec<ScoredList>> {
    let weights = config.resolved_weights(models.len())?;
    check_models(models, vocab)?;
    lists
        .par_iter()
        .map(|list| {
            if list.entries.is_empty() {
                return Err(Error::Validation(format!("empty n-best list for {}", list.utterance_id)));
            }
            let mut oov_total = 0;
            let hypotheses = list
                .entries
                .iter()
                .enumerate()
                .map(|(rank, e)| {
                    let seq = vocab.encode(&e.text);
                    let oov = seq.interior().iter().filter(|&&t| t == UNK_ID).count();
                    oov_total += oov;
                    let model_scores = models
                        .iter()
                        .map(|m| score_sequence(*m, &seq))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(ScoredHypothesis {
                        rank,
                        acoustic_score: e.acoustic_score,
                        combined_lm: interpolate(&model_scores, &weights, config.interpolation),
                        model_scores,
                        oov,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if oov_total > 0 {
                log::info!("{}: {oov_total} out-of-vocabulary tokens mapped to <unk>", list.utterance_id);
            }
            Ok(ScoredList {
                utterance_id: list.utterance_id.clone(),
                hypotheses,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RescoreResult {
    pub scored: Vec<ScoredList>,
    /// Chosen rank per utterance, in input order.
    pub selections: Vec<usize>,
    pub lm_scale: f64,
}

impl RescoreResult {
    /// Chosen hypotheses in the n-best wire format.
    pub fn selection_file(&self, lists: &[NBestList]) -> String {
        let chosen: Vec<NBestList> = lists
            .iter()
            .zip(&self.selections)
            .map(|(l, &r)| NBestList {
                utterance_id: l.utterance_id.clone(),
                entries: vec![l.entries[r].clone()],
            })
            .collect();
        write_nbest(&chosen)
    }

    /// One row per (utterance, hypothesis, model) plus the combined row.
    pub fn audit_file(&self, model_names: &[String]) -> String {
        let mut out = String::from("utterance_id\trank\tmodel\tlm_score\tacoustic_score\ttotal\tselected\n");
        for (list, &sel) in self.scored.iter().zip(&self.selections) {
            for h in &list.hypotheses {
                let total = list.total(h.rank, self.lm_scale);
                let chosen = u8::from(h.rank == sel);
                for (k, s) in h.model_scores.iter().enumerate() {
                    let name = model_names.get(k).map(String::as_str).unwrap_or("?");
                    let _ = writeln!(
                        out,
                        "{}\t{}\t{name}\t{s}\t{}\t{total}\t{chosen}",
                        list.utterance_id, h.rank, h.acoustic_score
                    );
                }
                let _ = writeln!(
                    out,
                    "{}\t{}\tcombined\t{}\t{}\t{total}\t{chosen}",
                    list.utterance_id, h.rank, h.combined_lm, h.acoustic_score
                );
            }
        }
        out
    }
}

/// Picks `acoustic + lm_scale · combined LM score` per utterance.
pub fn rescore(
    lists: &[NBestList],
    models: &[&dyn LanguageModel],
    vocab: &Vocabulary,
    config: &RescoreConfig,
) -> Result<RescoreResult> {
    let scored = score_lists(lists, models, vocab, config)?;
    let selections = scored.iter().map(|s| s.select(config.lm_scale)).collect();
    Ok(RescoreResult {
        scored,
        selections,
        lm_scale: config.lm_scale,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WerStats {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_length: usize,
}

impl WerStats {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn rate(&self) -> f64 {
        self.errors() as f64 / self.reference_length as f64
    }

    fn add(&mut self, o: &WerStats) {
        self.substitutions += o.substitutions;
        self.insertions += o.insertions;
        self.deletions += o.deletions;
        self.reference_length += o.reference_length;
    }
}

/// Unit-cost edit distance.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Minimum-edit alignment of `hypothesis` against `reference`, with the
/// error breakdown recovered by backtrace.
pub fn wer<T: PartialEq>(hypothesis: &[T], reference: &[T]) -> Result<WerStats> {
    if reference.is_empty() {
        return Err(Error::Validation("WER against an empty reference".into()));
    }
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut stats = WerStats {
        reference_length: n,
        ..WerStats::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]) {
            if reference[i - 1] != hypothesis[j - 1] {
                stats.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            stats.deletions += 1;
            i -= 1;
        } else {
            stats.insertions += 1;
            j -= 1;
        }
    }
    Ok(stats)
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RescoreEvaluation {
    pub selected: WerStats,
    /// Best achievable choice in every list.
    pub oracle: WerStats,
    /// Worst achievable choice in every list.
    pub anti_oracle: WerStats,
    /// WER of each model used alone with the same scale.
    pub per_model: Vec<WerStats>,
    pub result: RescoreResult,
}

impl RescoreEvaluation {
    pub fn wer(&self) -> f64 {
        self.selected.rate()
    }
}

/// Error counts of every hypothesis, per list.
fn list_errors(lists: &[NBestList], refs: &BTreeMap<String, String>) -> Result<Vec<Vec<WerStats>>> {
    lists
        .iter()
        .map(|l| {
            let r = refs.get(&l.utterance_id).ok_or_else(|| {
                Error::Validation(format!("no reference for utterance {}", l.utterance_id))
            })?;
            let r = words(r);
            l.entries.iter().map(|e| wer(&words(&e.text), &r)).collect()
        })
        .collect()
}

fn corpus_stats(errors: &[Vec<WerStats>], picks: impl Iterator<Item = usize>) -> WerStats {
    let mut t = WerStats::default();
    for (e, p) in errors.iter().zip(picks) {
        t.add(&e[p]);
    }
    t
}

fn oracle_picks(errors: &[Vec<WerStats>], worst: bool) -> Vec<usize> {
    errors
        .iter()
        .map(|e| {
            let mut best = 0;
            for (k, s) in e.iter().enumerate() {
                let better = if worst {
                    s.errors() > e[best].errors()
                } else {
                    s.errors() < e[best].errors()
                };
                if better {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Corpus WER of the rescored selections, with oracle, anti-oracle and
/// single-model diagnostics.
pub fn evaluate_rescoring(
    lists: &[NBestList],
    references: &BTreeMap<String, String>,
    models: &[&dyn LanguageModel],
    vocab: &Vocabulary,
    config: &RescoreConfig,
) -> Result<RescoreEvaluation> {
    let errors = list_errors(lists, references)?;
    let result = rescore(lists, models, vocab, config)?;
    let selected = corpus_stats(&errors, result.selections.iter().copied());
    let oracle = corpus_stats(&errors, oracle_picks(&errors, false).into_iter());
    let anti_oracle = corpus_stats(&errors, oracle_picks(&errors, true).into_iter());
    let per_model = (0..models.len())
        .map(|k| {
            let picks = result.scored.iter().map(|s| {
                let mut best = 0;
                for h in &s.hypotheses {
                    let t = h.acoustic_score + config.lm_scale * h.model_scores[k];
                    let b = &s.hypotheses[best];
                    if t > b.acoustic_score + config.lm_scale * b.model_scores[k] {
                        best = h.rank;
                    }
                }
                best
            });
            corpus_stats(&errors, picks)
        })
        .collect();
    Ok(RescoreEvaluation {
        selected,
        oracle,
        anti_oracle,
        per_model,
        result,
    })
}

/// `lm_scale` values 0.5, 0.6, ..., 2.0.
pub fn lm_scale_grid() -> Vec<f64> {
    (5..=20).map(|k| k as f64 / 10.0).collect()
}

/// Corpus WER at every grid scale; the best is the lowest WER, ties going
/// to the smaller scale.
pub fn tune_lm_scale(
    lists: &[NBestList],
    references: &BTreeMap<String, String>,
    models: &[&dyn LanguageModel],
    vocab: &Vocabulary,
    config: &RescoreConfig,
) -> Result<(f64, Vec<(f64, f64)>)> {
    let errors = list_errors(lists, references)?;
    let scored = score_lists(lists, models, vocab, config)?;
    let curve: Vec<(f64, f64)> = lm_scale_grid()
        .into_iter()
        .map(|s| (s, corpus_stats(&errors, scored.iter().map(|l| l.select(s))).rate()))
        .collect();
    let mut best = curve[0];
    for &p in &curve[1..] {
        if p.1 < best.1 {
            best = p;
        }
    }
    Ok((best.0, curve))
}

/// One row of a system comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemRow {
    pub system: String,
    pub wer: f64,
    pub oracle_wer: f64,
    pub anti_oracle_wer: f64,
}

/// Evaluates each named model combination with equal weights.
pub fn compare_systems(
    lists: &[NBestList],
    references: &BTreeMap<String, String>,
    systems: &[(String, Vec<&dyn LanguageModel>)],
    vocab: &Vocabulary,
    lm_scale: f64,
    interpolation: Interpolation,
) -> Result<Vec<SystemRow>> {
    let config = RescoreConfig {
        lm_scale,
        weights: Vec::new(),
        interpolation,
    };
    systems
        .iter()
        .map(|(name, models)| {
            let e = evaluate_rescoring(lists, references, models, vocab, &config)?;
            Ok(SystemRow {
                system: name.clone(),
                wer: e.selected.rate(),
                oracle_wer: e.oracle.rate(),
                anti_oracle_wer: e.anti_oracle.rate(),
            })
        })
        .collect()
}

/// Aligned text table of WER percentages.
pub fn render_systems(rows: &[SystemRow]) -> String {
    let width = rows.iter().map(|r| r.system.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$}  {:>8}  {:>8}  {:>8}\n", "system", "WER(%)", "oracle", "anti");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>8.2}  {:>8.2}  {:>8.2}",
            r.system,
            100.0 * r.wer,
            100.0 * r.oracle_wer,
            100.0 * r.anti_oracle_wer
        );
    }
    out
}
