//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Environment:
//! * `FVLM_PTB_DIR`: directory holding `ptb.train.txt`, `ptb.valid.txt` and
//!   `ptb.test.txt`; the trend experiment uses it instead of the built-in
//!   synthetic corpus.
//! * `FVLM_TREND_SCALE`: `full` (5k sentences, vocab 5k, 2x128 models) or
//!   `quick` (the default; 1.5k sentences, vocab 2k, 2x32 models).

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use fvlm::corpus::{encode_all, reverse_sequence, read_sentences, TokenSequence, Vocabulary};
use fvlm::eval::{bleu, perplexity, render_table, sequence_prediction_eval, SeqPredReport, HISTORY_LENGTHS};
use fvlm::models::{
    encode_checkpoint, extract_future_vectors, lm_forward, train_enhanced, train_fv_predictor, train_lm,
    train_mt, Direction, EnhancedLm, FutureVector, FvPredictor, LanguageModel, LmConfig, LstmLm,
    MultiTaskLm, Precision, TrainLog,
};
use fvlm::rescoring::{
    compare_systems, edit_distance, evaluate_rescoring, render_systems, rescore, wer, Interpolation,
    NBestEntry, NBestList, RescoreConfig,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn fmt_err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

#[derive(Default)]
struct Shared {
    overfit_baseline: Option<(Vocabulary, LstmLm)>,
}

// ---------------------------------------------------------------- gradients

fn small_config(seed: u64) -> LmConfig {
    let mut cfg = LmConfig::sized(6, 2);
    cfg.embed_dim = 5;
    cfg.fv_dim = 4;
    cfg.lambda_mt = 1.0;
    cfg.train.init_scale = 0.4;
    cfg.train.seed = seed;
    cfg
}

fn random_targets(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<FutureVector> {
    (0..n)
        .map(|_| FutureVector((0..dim).map(|_| rng.gen_range(-0.9..0.9)).collect()))
        .collect()
}

fn gradient_correctness(_: &mut Shared) -> Outcome {
    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-5;
    let start = Instant::now();
    let vocab_size = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut checked = 0;
    for instance in 0..3u64 {
        let cfg = small_config(10 + instance);
        let seq = random_sequence(&mut rng, vocab_size, 4);
        let steps = seq.num_predictions();

        let base = LstmLm::with_vocab_size(Direction::Forward, &cfg, vocab_size, 0).map_err(fmt_err)?;
        let mut g = base.zeros_like();
        base.sentence_loss(&seq, Some(&mut g)).map_err(fmt_err)?;
        let r = check_gradients(&base, &g, &|m: &LstmLm| m.sentence_loss(&seq, None).unwrap().total, EPS);
        checked += r.checked;
        worst.push((format!("baseline {}", r.worst), r.max_rel));

        let rev = LstmLm::with_vocab_size(Direction::Reversed, &cfg, vocab_size, 0).map_err(fmt_err)?;
        let rseq = reverse_sequence(&seq);
        let mut g = rev.zeros_like();
        rev.sentence_loss(&rseq, Some(&mut g)).map_err(fmt_err)?;
        let r = check_gradients(&rev, &g, &|m: &LstmLm| m.sentence_loss(&rseq, None).unwrap().total, EPS);
        checked += r.checked;
        worst.push((format!("reversed {}", r.worst), r.max_rel));

        let pred = FvPredictor::with_vocab_size(&cfg, vocab_size, 0).map_err(fmt_err)?;
        let z = random_targets(&mut rng, steps, cfg.fv_dim);
        let mut g = pred.zeros_like();
        pred.sentence_loss(&seq, &z, Some(&mut g)).map_err(fmt_err)?;
        let r = check_gradients(
            &pred,
            &g,
            &|m: &FvPredictor| m.sentence_loss(&seq, &z, None).unwrap().total,
            EPS,
        );
        checked += r.checked;
        worst.push((format!("fv-predictor {}", r.worst), r.max_rel));

        let mut ecfg = cfg.clone();
        ecfg.train.seed += 100;
        let enh = EnhancedLm::with_vocab_size(&ecfg, vocab_size, 0, pred.clone()).map_err(fmt_err)?;
        let mut g = enh.zeros_like();
        enh.sentence_loss(&seq, Some(&mut g)).map_err(fmt_err)?;
        let r = check_gradients(&enh, &g, &|m: &EnhancedLm| m.sentence_loss(&seq, None).unwrap().total, EPS);
        checked += r.checked;
        worst.push((format!("enhanced {}", r.worst), r.max_rel));

        let mt = MultiTaskLm::with_vocab_size(&cfg, vocab_size, 0).map_err(fmt_err)?;
        let mut g = mt.zeros_like();
        mt.sentence_loss(&seq, Some(&z), Some(&mut g)).map_err(fmt_err)?;
        let r = check_gradients(
            &mt,
            &g,
            &|m: &MultiTaskLm| m.sentence_loss(&seq, Some(&z), None).unwrap().total,
            EPS,
        );
        checked += r.checked;
        worst.push((format!("mt {}", r.worst), r.max_rel));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let (what, max_rel) = worst
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    ensure!(max_rel < TOL, "max relative error {max_rel:.3e} >= {TOL:e} at {what}");
    ensure!(elapsed < 60.0, "took {elapsed:.1}s");
    Ok(format!(
        "5 architectures x 3 instances, {checked} parameters, max rel err {max_rel:.2e}, {elapsed:.1}s"
    ))
}

// ------------------------------------------------------------------ overfit

fn overfit_config(seed: u64) -> LmConfig {
    let mut cfg = LmConfig::sized(64, 2);
    cfg.train.validation_fraction = 0.0;
    cfg.train.seed = seed;
    cfg.train.init_scale = 0.1;
    cfg
}

/// Well inside the 500-epoch budget.
const OVERFIT_EPOCHS: usize = 200;
const OVERFIT_TARGET: f64 = 1.2;

/// Epoch at which the observer first saw a training PPL below the target.
struct FirstBelow(Option<usize>);

impl fvlm::models::TrainObserver for FirstBelow {
    fn on_epoch(&mut self, e: &fvlm::models::EpochLog) {
        if self.0.is_none() && e.valid_ppl < OVERFIT_TARGET {
            self.0 = Some(e.epoch);
        }
    }
}

fn overfit(shared: &mut Shared) -> Outcome {
    let (vocab, seqs) = toy_corpus();
    let mut cfg = overfit_config(5);
    let mut lines = Vec::new();

    let t = Instant::now();
    cfg.train.epochs = OVERFIT_EPOCHS;
    let mut seen = FirstBelow(None);
    let base = train_lm(&seqs, &vocab, &cfg, Direction::Forward, &mut seen).map_err(fmt_err)?;
    let ppl = perplexity(&base.model, &seqs).map_err(fmt_err)?;
    let secs = t.elapsed().as_secs_f64();
    ensure!(ppl < OVERFIT_TARGET, "baseline training PPL {ppl:.4}");
    ensure!(secs < 120.0, "baseline took {secs:.1}s");
    lines.push(format!("baseline {ppl:.4} (below {OVERFIT_TARGET} at epoch {:?}, {secs:.0}s)", seen.0));
    shared.overfit_baseline = Some((vocab.clone(), base.model));

    let mut aux = cfg.clone();
    aux.train.epochs = 40;
    let rev = train_lm(&seqs, &vocab, &aux, Direction::Reversed, &mut ()).map_err(fmt_err)?;
    let pred = train_fv_predictor(&seqs, &vocab, &rev.model, &aux, &mut ()).map_err(fmt_err)?;

    let t = Instant::now();
    let mut seen = FirstBelow(None);
    let enh = train_enhanced(&seqs, &vocab, &pred.model, &cfg, &mut seen).map_err(fmt_err)?;
    let ppl = perplexity(&enh.model, &seqs).map_err(fmt_err)?;
    let secs = t.elapsed().as_secs_f64();
    ensure!(ppl < OVERFIT_TARGET, "enhanced training PPL {ppl:.4}");
    ensure!(secs < 120.0, "enhanced took {secs:.1}s");
    lines.push(format!("enhanced {ppl:.4} (epoch {:?}, {secs:.0}s)", seen.0));

    let t = Instant::now();
    let mut seen = FirstBelow(None);
    let mt = train_mt(&seqs, &vocab, Some(&rev.model), &cfg, &mut seen).map_err(fmt_err)?;
    let ppl = perplexity(&mt.model, &seqs).map_err(fmt_err)?;
    let secs = t.elapsed().as_secs_f64();
    ensure!(ppl < OVERFIT_TARGET, "mt training PPL {ppl:.4}");
    ensure!(secs < 120.0, "mt took {secs:.1}s");
    lines.push(format!("mt {ppl:.4} (epoch {:?}, {secs:.0}s)", seen.0));
    Ok(lines.join("; "))
}

// ------------------------------------------------------ baseline equivalence

fn baseline_equivalence(_: &mut Shared) -> Outcome {
    let vocab_size = 20;
    let mut cfg = LmConfig::sized(8, 2);
    cfg.embed_dim = 6;
    cfg.fv_dim = 5;
    cfg.train.init_scale = 0.5;
    let base = LstmLm::with_vocab_size(Direction::Forward, &cfg, vocab_size, 0).map_err(fmt_err)?;
    let mut pcfg = cfg.clone();
    pcfg.train.seed = 77;
    let pred = FvPredictor::with_vocab_size(&pcfg, vocab_size, 0).map_err(fmt_err)?;
    let mut enh = EnhancedLm::with_vocab_size(&cfg, vocab_size, 0, pred).map_err(fmt_err)?;
    enh.embedding = base.embedding.clone();
    enh.head = base.head.clone();
    let e = cfg.embed_dim;
    for (l, (dst, src)) in enh.stack.layers_mut().iter_mut().zip(base.stack.layers()).enumerate() {
        if l > 0 {
            *dst = src.clone();
            continue;
        }
        let (h, ws, wd) = (cfg.hidden_dim, src, &mut *dst);
        for (d, s) in [
            (&mut wd.w_xi, &ws.w_xi),
            (&mut wd.w_xf, &ws.w_xf),
            (&mut wd.w_xc, &ws.w_xc),
            (&mut wd.w_xo, &ws.w_xo),
        ] {
            for r in 0..h {
                for c in 0..d.cols() {
                    d.set(r, c, if c < e { s.get(r, c) } else { 0.0 });
                }
            }
        }
        for (d, s) in [
            (&mut wd.w_hi, &ws.w_hi),
            (&mut wd.w_hf, &ws.w_hf),
            (&mut wd.w_hc, &ws.w_hc),
            (&mut wd.w_ho, &ws.w_ho),
            (&mut wd.w_ci, &ws.w_ci),
            (&mut wd.w_cf, &ws.w_cf),
            (&mut wd.w_co, &ws.w_co),
            (&mut wd.b_i, &ws.b_i),
            (&mut wd.b_f, &ws.b_f),
            (&mut wd.b_c, &ws.b_c),
            (&mut wd.b_o, &ws.b_o),
        ] {
            *d = s.clone();
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut positions = 0;
    for _ in 0..100 {
        let seq = random_sequence(&mut rng, vocab_size, 10);
        let a = lm_forward(&base, &seq).map_err(fmt_err)?;
        let b = lm_forward(&enh, &seq).map_err(fmt_err)?;
        for (pa, pb) in a.iter().zip(&b) {
            ensure!(
                pa.iter().zip(pb).all(|(x, y)| x.to_bits() == y.to_bits()),
                "distributions differ on {:?}",
                seq.ids()
            );
            positions += 1;
        }
    }
    Ok(format!("100 sequences, {positions} distributions bit-identical"))
}

// ---------------------------------------------------------------- causality

fn causality(_: &mut Shared) -> Outcome {
    let vocab_size = 20;
    let cfg = small_config(3);
    let base = LstmLm::with_vocab_size(Direction::Forward, &cfg, vocab_size, 0).map_err(fmt_err)?;
    let rev = LstmLm::with_vocab_size(Direction::Reversed, &cfg, vocab_size, 0).map_err(fmt_err)?;
    let pred = FvPredictor::with_vocab_size(&small_config(4), vocab_size, 0).map_err(fmt_err)?;
    let enh = EnhancedLm::with_vocab_size(&small_config(5), vocab_size, 0, pred).map_err(fmt_err)?;
    let mt = MultiTaskLm::with_vocab_size(&small_config(6), vocab_size, 0).map_err(fmt_err)?;
    let models: [&dyn LanguageModel; 4] = [&base, &rev, &enh, &mt];
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut compared = 0;
    let mut probe = 0;
    while probe < 100 {
        let model = models[probe % 4];
        let seq = random_sequence(&mut rng, vocab_size, 9);
        if seq.interior().len() < 2 {
            continue;
        }
        probe += 1;
        let ids = seq.ids();
        // edit position j for sure and later interior positions at random
        let j = rng.gen_range(2..ids.len() - 1);
        let mut changed = ids.to_vec();
        for (k, t) in changed.iter_mut().enumerate().take(ids.len() - 1).skip(j) {
            if k == j || rng.gen_bool(0.5) {
                *t = 3 + (*t - 3 + rng.gen_range(1..vocab_size - 3)) % (vocab_size - 3);
            }
        }
        let other = TokenSequence::new(changed, vocab_size).map_err(fmt_err)?;
        let a = lm_forward(model, &seq).map_err(fmt_err)?;
        let b = lm_forward(model, &other).map_err(fmt_err)?;
        for k in 0..j {
            ensure!(
                a[k].iter().zip(&b[k]).all(|(x, y)| x.to_bits() == y.to_bits()),
                "{} changed p_{k} after editing position {j}",
                model.architecture()
            );
            compared += 1;
        }
        ensure!(a[j] != b[j], "{} ignored the edited token", model.architecture());
    }
    Ok(format!("baseline/reversed/enhanced/mt, 100 probes, {compared} past distributions unchanged"))
}

// ------------------------------------------------------------ suffix purity

fn suffix_purity(_: &mut Shared) -> Outcome {
    let vocab_size = 20;
    let ext = LstmLm::with_vocab_size(Direction::Reversed, &small_config(8), vocab_size, 0).map_err(fmt_err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut probes = 0;
    while probes < 100 {
        let seq = random_sequence(&mut rng, vocab_size, 10);
        let ids = seq.ids();
        if ids.len() < 4 {
            continue;
        }
        // z for position i (entry i-1) must ignore x_1..x_{i-1}
        let i = rng.gen_range(2..ids.len());
        let mut changed = ids.to_vec();
        for t in changed[1..i].iter_mut() {
            *t = rng.gen_range(3..vocab_size);
        }
        let other = TokenSequence::new(changed, vocab_size).map_err(fmt_err)?;
        let a = extract_future_vectors(&ext, &seq).map_err(fmt_err)?;
        let b = extract_future_vectors(&ext, &other).map_err(fmt_err)?;
        ensure!(
            a[i - 1].0.iter().zip(&b[i - 1].0).all(|(x, y)| x.to_bits() == y.to_bits()),
            "z at position {i} depends on the prefix of {:?}",
            ids
        );
        probes += 1;
    }
    Ok("100 probes, extracted vectors exactly prefix-invariant".into())
}

// -------------------------------------------------------- multi-task losses

fn mt_loss_identity(_: &mut Shared) -> Outcome {
    let (vocab, seqs) = toy_corpus();
    let mut cfg = LmConfig::sized(12, 2);
    cfg.train.epochs = 3;
    cfg.train.validation_fraction = 0.2;
    let ext = train_lm(&seqs, &vocab, &cfg, Direction::Reversed, &mut ()).map_err(fmt_err)?;

    let mut worst: f64 = 0.0;
    let mut steps = 0;
    for lambda in [1.0, 0.3] {
        cfg.lambda_mt = lambda;
        let mut log = TrainLog::default();
        train_mt(&seqs, &vocab, Some(&ext.model), &cfg, &mut log).map_err(fmt_err)?;
        ensure!(log.steps.iter().any(|s| s.mse > 0.0), "no MSE was logged");
        steps += log.steps.len();
        for s in &log.steps {
            let gap = (s.total - (s.ce + lambda * s.mse)).abs();
            worst = worst.max(gap);
            ensure!(gap <= 1e-10, "epoch {} sentence {}: gap {gap:e}", s.epoch, s.sentence);
        }
    }

    cfg.lambda_mt = 0.0;
    let mut with_zero = TrainLog::default();
    let a = train_mt(&seqs, &vocab, Some(&ext.model), &cfg, &mut with_zero).map_err(fmt_err)?;
    let mut ce_only = TrainLog::default();
    let b = train_mt(&seqs, &vocab, None, &cfg, &mut ce_only).map_err(fmt_err)?;
    ensure!(with_zero.steps.len() == ce_only.steps.len(), "step counts differ");
    for (x, y) in with_zero.steps.iter().zip(&ce_only.steps) {
        ensure!(
            x.ce.to_bits() == y.ce.to_bits() && x.total.to_bits() == y.total.to_bits(),
            "lambda=0 diverged from CE-only at epoch {} sentence {}",
            x.epoch,
            x.sentence
        );
    }
    let bytes_a = encode_checkpoint(&a.model, Precision::F64).map_err(fmt_err)?;
    let bytes_b = encode_checkpoint(&b.model, Precision::F64).map_err(fmt_err)?;
    ensure!(bytes_a == bytes_b, "lambda=0 and CE-only checkpoints differ");
    Ok(format!(
        "max |total - (ce + lambda*mse)| = {worst:.1e} over {steps} steps; lambda=0 matches CE-only bit for bit"
    ))
}

// --------------------------------------------------------------------- BLEU

/// `exp(1 - 4/3)`: every precision of "the cat sat" against
/// "the cat sat down" is 1 (p4 = (0 + 1) / (0 + 1)); only the brevity
/// penalty remains.
const CAT_SAT_BLEU: f64 = 0.716_531_310_573_789_3;

fn bleu_oracle(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let words = |s: &str| s.split_whitespace().map(String::from).collect::<Vec<_>>();
    for _ in 0..20 {
        let n = rng.gen_range(1..12);
        let h: Vec<u32> = (0..n).map(|_| rng.gen_range(0..6)).collect();
        let r = bleu(&[h.clone()], &[h]).map_err(fmt_err)?;
        ensure!(r.score == 1.0, "bleu(h, h) = {}", r.score);
    }
    let cat = bleu(&[words("the cat sat")], &[words("the cat sat down")]).map_err(fmt_err)?;
    ensure!((cat.score - CAT_SAT_BLEU).abs() < 1e-9, "cat example {}", cat.score);

    let pairs: Vec<(Vec<u32>, Vec<u32>)> = (0..30)
        .map(|_| {
            let r: Vec<u32> = (0..rng.gen_range(1..10)).map(|_| rng.gen_range(0..8)).collect();
            let h: Vec<u32> = (0..rng.gen_range(1..10)).map(|_| rng.gen_range(0..8)).collect();
            (h, r)
        })
        .collect();
    let (h, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
    let reference = bleu(&h, &r).map_err(fmt_err)?;
    ensure!(
        (reference.score - reference.recompute()).abs() < 1e-12,
        "stored components disagree with the score"
    );
    let mut shuffled = pairs.clone();
    for _ in 0..20 {
        shuffled.shuffle(&mut rng);
        let (h, r): (Vec<_>, Vec<_>) = shuffled.iter().cloned().unzip();
        let s = bleu(&h, &r).map_err(fmt_err)?;
        ensure!(s.score.to_bits() == reference.score.to_bits(), "shuffle changed the score");
    }
    Ok(format!(
        "identity 1.0; cat example {:.16} (expected {CAT_SAT_BLEU}); 20 shuffles invariant",
        cat.score
    ))
}

// ---------------------------------------------------------------------- WER

/// Exhaustive search over every edit script (no memoization).
fn brute_force_distance(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = brute_force_distance(ra, rb) + usize::from(x != y);
            let del = brute_force_distance(ra, b) + 1;
            let ins = brute_force_distance(a, rb) + 1;
            sub.min(del).min(ins)
        }
    }
}

fn corrupt(rng: &mut ChaCha8Rng, words: &[String], pool: &[String], edits: usize) -> Vec<String> {
    let mut w = words.to_vec();
    for _ in 0..edits {
        match rng.gen_range(0..3) {
            0 if !w.is_empty() => {
                let i = rng.gen_range(0..w.len());
                w[i] = pool.choose(rng).unwrap().clone();
            }
            1 if w.len() > 1 => {
                w.remove(rng.gen_range(0..w.len()));
            }
            _ => {
                let i = rng.gen_range(0..=w.len());
                w.insert(i, pool.choose(rng).unwrap().clone());
            }
        }
    }
    w
}

/// Lists of `n` hypotheses per reference. The reference itself is one
/// of them; the acoustic score prefers fewer edits, with noise.
fn make_nbest(
    rng: &mut ChaCha8Rng,
    references: &[String],
    pool: &[String],
    n: usize,
    noise: f64,
) -> (Vec<NBestList>, BTreeMap<String, String>) {
    let mut lists = Vec::new();
    let mut refs = BTreeMap::new();
    for (u, r) in references.iter().enumerate() {
        let id = format!("utt{u:03}");
        let words: Vec<String> = r.split_whitespace().map(String::from).collect();
        let mut hyps: Vec<(Vec<String>, usize)> = vec![(words.clone(), 0)];
        while hyps.len() < n {
            let e = rng.gen_range(1..=4);
            hyps.push((corrupt(rng, &words, pool, e), e));
        }
        hyps.shuffle(rng);
        let mut entries: Vec<NBestEntry> = hyps
            .into_iter()
            .map(|(w, e)| NBestEntry {
                utterance_id: id.clone(),
                acoustic_score: -(e as f64) + noise * rng.gen_range(-1.0..1.0),
                original_lm_score: None,
                text: w.join(" "),
            })
            .collect();
        entries.sort_by(|a, b| b.acoustic_score.total_cmp(&a.acoustic_score));
        lists.push(NBestList {
            utterance_id: id.clone(),
            entries,
        });
        refs.insert(id, r.clone());
    }
    (lists, refs)
}

fn wer_oracle(_: &mut Shared) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    for _ in 0..500 {
        let a: Vec<u8> = (0..rng.gen_range(0..=6)).map(|_| rng.gen_range(0..4)).collect();
        let b: Vec<u8> = (0..rng.gen_range(1..=6)).map(|_| rng.gen_range(0..4)).collect();
        let brute = brute_force_distance(&a, &b);
        ensure!(edit_distance(&a, &b) == brute, "DP {a:?} vs {b:?}");
        ensure!(edit_distance(&b, &a) == brute, "asymmetric on {a:?} {b:?}");
        let s = wer(&a, &b).map_err(fmt_err)?;
        ensure!(s.errors() == brute, "backtrace counts {s:?} for {a:?} vs {b:?}");
    }

    // Synthetic 100-utterance, 10-best comparison of model combinations.
    let train = synthetic_corpus(800, 25, 4, 5);
    let test = synthetic_corpus(100, 25, 4, 6);
    let vocab = Vocabulary::build(
        train.sentences.iter().chain(&test.sentences).map(String::as_str),
        10_000,
        1,
    )
    .map_err(fmt_err)?;
    let seqs = encode_all(&vocab, &train.sentences);
    let mut cfg = LmConfig::sized(16, 2);
    cfg.train.epochs = 3;
    let base = train_lm(&seqs, &vocab, &cfg, Direction::Forward, &mut ()).map_err(fmt_err)?.model;
    let rev = train_lm(&seqs, &vocab, &cfg, Direction::Reversed, &mut ()).map_err(fmt_err)?.model;
    let pred = train_fv_predictor(&seqs, &vocab, &rev, &cfg, &mut ()).map_err(fmt_err)?.model;
    let enh = train_enhanced(&seqs, &vocab, &pred, &cfg, &mut ()).map_err(fmt_err)?.model;
    let mt = train_mt(&seqs, &vocab, Some(&rev), &cfg, &mut ()).map_err(fmt_err)?.model;

    let pool: Vec<String> = vocab.words()[3..].to_vec();
    let (lists, refs) = make_nbest(&mut rng, &test.sentences, &pool, 10, 1.5);
    let systems: Vec<(String, Vec<&dyn LanguageModel>)> = vec![
        ("LSTM".into(), vec![&base]),
        ("FV-LSTM".into(), vec![&enh]),
        ("LSTM+FV-LSTM".into(), vec![&base, &enh]),
        ("LSTM+FV-LSTM+FV-MT".into(), vec![&base, &enh, &mt]),
    ];
    let rows = compare_systems(&lists, &refs, &systems, &vocab, 1.0, Interpolation::Log).map_err(fmt_err)?;
    print!("{}", indent(&render_systems(&rows)));
    for r in &rows {
        ensure!(
            r.oracle_wer <= r.wer && r.wer <= r.anti_oracle_wer,
            "ordering violated for {}: {} {} {}",
            r.system,
            r.oracle_wer,
            r.wer,
            r.anti_oracle_wer
        );
    }
    Ok(format!(
        "500 pairs match brute force; {} systems on 100 x 10-best satisfy oracle <= selected <= anti-oracle",
        rows.len()
    ))
}

fn indent(s: &str) -> String {
    s.lines().map(|l| format!("    {l}\n")).collect()
}

// ---------------------------------------------------------------- rescoring

fn rescoring_contracts(shared: &mut Shared) -> Outcome {
    let (vocab, lm) = match shared.overfit_baseline.take() {
        Some(v) => v,
        None => {
            let (vocab, seqs) = toy_corpus();
            let mut cfg = overfit_config(5);
            cfg.train.epochs = OVERFIT_EPOCHS;
            let m = train_lm(&seqs, &vocab, &cfg, Direction::Forward, &mut ()).map_err(fmt_err)?;
            (vocab, m.model)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let pool: Vec<String> = vocab.words()[3..].to_vec();
    // acoustic noise wide enough that the acoustic ranking alone makes errors
    let (lists, refs) = make_nbest(&mut rng, &toy_sentences(), &pool, 10, 2.5);

    let zero = RescoreConfig {
        lm_scale: 0.0,
        ..RescoreConfig::default()
    };
    let r = rescore(&lists, &[&lm], &vocab, &zero).map_err(fmt_err)?;
    for (l, &sel) in lists.iter().zip(&r.selections) {
        let mut best = 0;
        for (k, e) in l.entries.iter().enumerate() {
            if e.acoustic_score > l.entries[best].acoustic_score {
                best = k;
            }
        }
        ensure!(sel == best, "{}: lm_scale 0 picked {sel}, acoustic argmax {best}", l.utterance_id);
    }

    let single = rescore(&lists, &[&lm], &vocab, &RescoreConfig::default()).map_err(fmt_err)?;
    let double = rescore(&lists, &[&lm, &lm], &vocab, &RescoreConfig::default()).map_err(fmt_err)?;
    ensure!(single.selections == double.selections, "duplicating the model changed selections");
    for (a, b) in single.scored.iter().zip(&double.scored) {
        for (x, y) in a.hypotheses.iter().zip(&b.hypotheses) {
            ensure!((x.combined_lm - y.combined_lm).abs() <= 1e-12, "combined scores differ");
        }
    }

    let eval = evaluate_rescoring(&lists, &refs, &[&lm], &vocab, &RescoreConfig::default()).map_err(fmt_err)?;
    ensure!(eval.selected.errors() == 0, "constructed scenario WER {:.4}", eval.wer());
    let acoustic_only = evaluate_rescoring(&lists, &refs, &[&lm], &vocab, &zero).map_err(fmt_err)?;
    ensure!(acoustic_only.selected.errors() > 0, "scenario too easy: acoustic scores alone give WER 0");
    Ok(format!(
        "lm_scale 0 = acoustic argmax; duplicate model identical; overfit LM WER {:.2}% (acoustic only {:.2}%)",
        100.0 * eval.wer(),
        100.0 * acoustic_only.wer()
    ))
}

// ---------------------------------------------------------------- the trend

struct TrendScale {
    name: &'static str,
    train: usize,
    held_out: usize,
    vocab: usize,
    width: usize,
    epochs: usize,
    learning_rate: f64,
    topics: usize,
    content: usize,
}

const FULL: TrendScale = TrendScale {
    name: "full",
    train: 5000,
    held_out: 500,
    vocab: 5000,
    width: 128,
    epochs: 12,
    learning_rate: 0.2,
    topics: 20,
    content: 30,
};

const QUICK: TrendScale = TrendScale {
    name: "quick",
    train: 1500,
    held_out: 300,
    vocab: 2000,
    width: 32,
    epochs: 25,
    learning_rate: 0.2,
    topics: 8,
    content: 20,
};

struct TrendData {
    source: String,
    train: Vec<String>,
    valid: Vec<String>,
    test: Vec<String>,
}

fn ptb_data(dir: &PathBuf, scale: &TrendScale) -> std::result::Result<TrendData, String> {
    let read = |name: &str| read_sentences(&dir.join(name)).map_err(fmt_err);
    let mut train = read("ptb.train.txt")?;
    let mut valid = read("ptb.valid.txt")?;
    let mut test = read("ptb.test.txt")?;
    train.truncate(scale.train);
    valid.truncate(scale.held_out);
    test.truncate(scale.held_out);
    Ok(TrendData {
        source: format!("PTB subset from {}", dir.display()),
        train,
        valid,
        test,
    })
}

fn synthetic_data(scale: &TrendScale) -> TrendData {
    let all = synthetic_corpus(scale.train + 2 * scale.held_out, scale.content, scale.topics, 2024).sentences;
    let (train, rest) = all.split_at(scale.train);
    let (valid, test) = rest.split_at(scale.held_out);
    TrendData {
        source: "synthetic topic corpus (PTB not available)".into(),
        train: train.to_vec(),
        valid: valid.to_vec(),
        test: test.to_vec(),
    }
}

fn trend(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let scale = match std::env::var("FVLM_TREND_SCALE").as_deref() {
        Ok("full") => &FULL,
        _ => &QUICK,
    };
    let data = match std::env::var_os("FVLM_PTB_DIR") {
        Some(dir) => ptb_data(&PathBuf::from(dir), scale)?,
        None => synthetic_data(scale),
    };
    let vocab = Vocabulary::build(data.train.iter().map(String::as_str), scale.vocab, 1).map_err(fmt_err)?;
    let mut all = data.train.clone();
    all.extend(data.valid.iter().cloned());
    let seqs = encode_all(&vocab, &all);
    let valid = &seqs[data.train.len()..];
    let test = encode_all(&vocab, &data.test);

    let mut cfg = LmConfig::sized(scale.width, 2);
    cfg.train.epochs = scale.epochs;
    cfg.train.learning_rate = scale.learning_rate;
    cfg.train.validation_fraction = data.valid.len() as f64 / all.len() as f64;
    let base = train_lm(&seqs, &vocab, &cfg, Direction::Forward, &mut ()).map_err(fmt_err)?.model;
    let rev = train_lm(&seqs, &vocab, &cfg, Direction::Reversed, &mut ()).map_err(fmt_err)?.model;
    let pred = train_fv_predictor(&seqs, &vocab, &rev, &cfg, &mut ()).map_err(fmt_err)?.model;
    let enh = train_enhanced(&seqs, &vocab, &pred, &cfg, &mut ()).map_err(fmt_err)?.model;
    let mt = train_mt(&seqs, &vocab, Some(&rev), &cfg, &mut ()).map_err(fmt_err)?.model;

    let models: [(&str, &dyn LanguageModel); 3] = [("LSTM", &base), ("FV-LSTM", &enh), ("FV-MT", &mt)];
    let mut reports: Vec<(&str, SeqPredReport)> = Vec::new();
    for (name, m) in models {
        reports.push((name, sequence_prediction_eval(m, &test, &HISTORY_LENGTHS, None).map_err(fmt_err)?));
    }
    let table: Vec<(&str, &SeqPredReport)> = reports.iter().map(|(n, r)| (*n, r)).collect();
    print!("{}", indent(&render_table(&table)));
    let secs = start.elapsed().as_secs_f64();

    let ppls: Vec<f64> = models
        .iter()
        .map(|(_, m)| perplexity(*m, valid))
        .collect::<Result<_, _>>()
        .map_err(fmt_err)?;
    ensure!(ppls.iter().all(|p| p.is_finite()), "non-finite perplexity {ppls:?}");
    let (lo, hi) = ppls
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &p| (lo.min(p), hi.max(p)));
    ensure!(hi <= 1.1 * lo, "perplexities {ppls:?} are not within 10% of each other");
    for (name, r) in &reports {
        let b: Vec<f64> = r.results.iter().map(|x| x.bleu.score).collect();
        ensure!(
            b.windows(2).all(|w| w[1] >= w[0]),
            "{name}: BLEU decreases with history length: {b:?}"
        );
    }
    ensure!(secs < 7200.0, "took {secs:.0}s");
    Ok(format!(
        "{} scale on {}: validation PPL {:.1}/{:.1}/{:.1}, BLEU non-decreasing for all, {secs:.0}s",
        scale.name, data.source, ppls[0], ppls[1], ppls[2]
    ))
}

// -------------------------------------------------------------- determinism

fn determinism(_: &mut Shared) -> Outcome {
    let (vocab, seqs) = toy_corpus();
    let mut cfg = LmConfig::sized(8, 2);
    cfg.train.epochs = 2;
    let run = || -> std::result::Result<Vec<Vec<u8>>, String> {
        let base = train_lm(&seqs, &vocab, &cfg, Direction::Forward, &mut ()).map_err(fmt_err)?.model;
        let rev = train_lm(&seqs, &vocab, &cfg, Direction::Reversed, &mut ()).map_err(fmt_err)?.model;
        let pred = train_fv_predictor(&seqs, &vocab, &rev, &cfg, &mut ()).map_err(fmt_err)?.model;
        let enh = train_enhanced(&seqs, &vocab, &pred, &cfg, &mut ()).map_err(fmt_err)?.model;
        let mt = train_mt(&seqs, &vocab, Some(&rev), &cfg, &mut ()).map_err(fmt_err)?.model;
        Ok(vec![
            encode_checkpoint(&base, Precision::F64).map_err(fmt_err)?,
            encode_checkpoint(&rev, Precision::F64).map_err(fmt_err)?,
            encode_checkpoint(&pred, Precision::F64).map_err(fmt_err)?,
            encode_checkpoint(&enh, Precision::F64).map_err(fmt_err)?,
            encode_checkpoint(&mt, Precision::F64).map_err(fmt_err)?,
        ])
    };
    let a = run()?;
    let b = run()?;
    for (k, (x, y)) in a.iter().zip(&b).enumerate() {
        ensure!(x == y, "checkpoint {k} differs between identical runs");
    }
    Ok("5 architectures retrained with the same seed give byte-identical checkpoints".into())
}

// --------------------------------------------------------------------- main

type Criterion = fn(&mut Shared) -> Outcome;

fn main() {
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [(&str, Criterion); 11] = [
        ("gradient-correctness", gradient_correctness),
        ("overfit", overfit),
        ("baseline-equivalence", baseline_equivalence),
        ("causality", causality),
        ("suffix-purity", suffix_purity),
        ("mt-loss-identity", mt_loss_identity),
        ("bleu-oracle", bleu_oracle),
        ("wer-oracle", wer_oracle),
        ("rescoring-contracts", rescoring_contracts),
        ("trend-experiment", trend),
        ("determinism", determinism),
    ];
    let mut shared = Shared::default();
    let mut failed = 0;
    let mut ran = 0;
    for (name, run) in criteria {
        if let Some(f) = &filter {
            if !name.contains(f.as_str()) {
                continue;
            }
        }
        ran += 1;
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| run(&mut shared)))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                Err(format!("panicked: {msg}"))
            });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} [{secs:.1}s]: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
