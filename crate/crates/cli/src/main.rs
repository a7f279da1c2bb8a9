//! `fvlm`: vocabulary building, training, future-vector extraction,
//! generation, perplexity, sequence-prediction BLEU and n-best rescoring.

mod config;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand};
use fvlm::corpus::{encode_all, read_sentences, Vocabulary, BOS_ID};
use fvlm::eval::{render_table, sequence_prediction_eval, SeqPredReport, CSV_HEADER, HISTORY_LENGTHS};
use fvlm::models::{
    extract_future_vectors, greedy_continue, load_any, load_checkpoint, save_checkpoint, train_enhanced,
    train_fv_predictor, train_lm, train_mt, write_atomic, AnyModel, Architecture, Checkpointable, Direction,
    FvPredictor, LanguageModel, LmConfig, LstmLm, Precision, TrainConfig,
};
use fvlm::rescoring::{
    evaluate_rescoring, load_nbest, load_references, rescore, tune_lm_scale, Interpolation, RescoreConfig,
};

use config::{List, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "fvlm", version, about = "LSTM language models with future vectors")]
struct Cli {
    /// `key = value` config file; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads for evaluation and scoring.
    #[arg(long, global = true, default_value_t = 1, value_name = "N")]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a frequency-ranked vocabulary from a corpus.
    BuildVocab(BuildVocabArgs),
    /// Train one architecture and write its checkpoint.
    Train(TrainArgs),
    /// Write the future vectors a reversed LM extracts from each sentence.
    ExtractFv(ExtractArgs),
    /// Greedily continue histories with a language model.
    Generate(GenerateArgs),
    /// Perplexity of a language model on a corpus.
    EvalPpl(EvalPplArgs),
    /// BLEU of greedy continuations at several history lengths.
    EvalBleu(EvalBleuArgs),
    /// Rescore n-best lists and write the selections.
    Rescore(RescoreArgs),
    /// Word error rate of rescored n-best lists against references.
    EvalWer(EvalWerArgs),
}

#[derive(Args, Debug)]
struct BuildVocabArgs {
    /// Training corpus, one sentence per line.
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
    /// Where to write the vocabulary.
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
    /// Largest vocabulary size, reserved tokens included [default: 10000].
    #[arg(long, value_name = "N")]
    max_vocab: Option<usize>,
    /// Drop words seen fewer times than this [default: 1].
    #[arg(long, value_name = "N")]
    min_count: Option<usize>,
}

fn arch_parser() -> impl clap::builder::TypedValueParser<Value = Architecture> {
    PossibleValuesParser::new(Architecture::ALL.map(Architecture::name))
        .map(|s| Architecture::from_name(&s).expect("listed above"))
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Architecture to train.
    #[arg(long, value_parser = arch_parser())]
    arch: Architecture,
    /// Training corpus, one sentence per line.
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
    /// Vocabulary file.
    #[arg(long, value_name = "FILE")]
    vocab: Option<PathBuf>,
    /// Where to write the checkpoint.
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
    /// Reversed LM checkpoint (fv-predictor and mt).
    #[arg(long, value_name = "FILE")]
    extractor: Option<PathBuf>,
    /// Future-vector predictor checkpoint (enhanced).
    #[arg(long, value_name = "FILE")]
    predictor: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    /// Word embedding size [default: 300].
    #[arg(long, value_name = "N")]
    embed_dim: Option<usize>,
    /// LSTM cells per layer [default: 300].
    #[arg(long, value_name = "N")]
    hidden_dim: Option<usize>,
    /// Stacked LSTM layers [default: 3].
    #[arg(long, value_name = "N")]
    num_layers: Option<usize>,
    /// Shared trunk layers of the multi-task model [default: 2].
    #[arg(long, value_name = "N")]
    mt_shared_layers: Option<usize>,
    /// Layers in each multi-task branch [default: 1].
    #[arg(long, value_name = "N")]
    mt_branch_layers: Option<usize>,
    /// Weight of the future-vector loss in multi-task training [default: 1].
    #[arg(long, value_name = "X")]
    lambda_mt: Option<f64>,
    /// Future-vector size [default: hidden-dim].
    #[arg(long, value_name = "N")]
    fv_dim: Option<usize>,
    /// Initial SGD step size [default: 1].
    #[arg(long, value_name = "X")]
    learning_rate: Option<f64>,
    /// Global gradient-norm clip [default: 5].
    #[arg(long, value_name = "X")]
    clip_norm: Option<f64>,
    /// Passes over the training data [default: 10].
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    /// Random seed; FVLM_SEED overrides the config file [default: 1].
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Tail fraction of the corpus held out for model selection [default: 0.1].
    #[arg(long, value_name = "X")]
    validation_fraction: Option<f64>,
    /// Step-size multiplier after an epoch without improvement [default: 0.5].
    #[arg(long, value_name = "X")]
    lr_decay: Option<f64>,
    /// Half-width of the uniform initialization [default: 0.08].
    #[arg(long, value_name = "X")]
    init_scale: Option<f64>,
    /// Checkpoint float width: f64 or f32 [default: f64].
    #[arg(long, value_name = "P")]
    precision: Option<String>,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    /// Reversed LM checkpoint.
    #[arg(long, value_name = "FILE")]
    extractor: Option<PathBuf>,
    /// Vocabulary file.
    #[arg(long, value_name = "FILE")]
    vocab: Option<PathBuf>,
    /// Sentences to extract from.
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
    /// Where to write the vectors.
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Language model checkpoint.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Vocabulary file.
    #[arg(long, value_name = "FILE")]
    vocab: Option<PathBuf>,
    /// One history per line; an empty line starts from `<s>` alone.
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
    /// Where to write the continuations (standard output if absent).
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
    /// Most tokens generated per history [default: 50].
    #[arg(long, value_name = "N")]
    max_len: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalPplArgs {
    /// Language model checkpoint.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Vocabulary file.
    #[arg(long, value_name = "FILE")]
    vocab: Option<PathBuf>,
    /// Evaluation sentences.
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalBleuArgs {
    /// Language model checkpoint; repeat to compare several.
    #[arg(long, value_name = "FILE", required = true)]
    model: Vec<PathBuf>,
    /// Vocabulary file.
    #[arg(long, value_name = "FILE")]
    vocab: Option<PathBuf>,
    /// Evaluation sentences.
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
    /// Comma-separated history lengths [default: 0,1,2,3,5].
    #[arg(long, value_name = "LIST")]
    history_lengths: Option<List<usize>>,
    /// Cap on each continuation [default: twice the reference plus 5].
    #[arg(long, value_name = "N")]
    max_len: Option<usize>,
    /// Also write `model,metric,history_length,value` rows here.
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RescoreOptions {
    /// Language model checkpoint; repeat to interpolate several.
    #[arg(long, value_name = "FILE", required = true)]
    model: Vec<PathBuf>,
    /// Vocabulary file.
    #[arg(long, value_name = "FILE")]
    vocab: Option<PathBuf>,
    /// N-best file: `id<TAB>acoustic<TAB>text` per line.
    #[arg(long, value_name = "FILE")]
    nbest: Option<PathBuf>,
    /// Comma-separated interpolation weights summing to 1 [default: equal].
    #[arg(long, value_name = "LIST")]
    weights: Option<List<f64>>,
    /// Multiplier on the combined LM score [default: 1].
    #[arg(long, value_name = "X")]
    lm_scale: Option<f64>,
    /// `log` or `linear` interpolation [default: log].
    #[arg(long, value_name = "MODE")]
    interpolation: Option<String>,
}

#[derive(Args, Debug)]
struct RescoreArgs {
    #[command(flatten)]
    opts: RescoreOptions,
    /// Where to write the selected hypotheses.
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
    /// Where to write one score row per utterance, hypothesis and model.
    #[arg(long, value_name = "FILE")]
    audit: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalWerArgs {
    #[command(flatten)]
    opts: RescoreOptions,
    /// Reference file: `id<TAB>text` per line.
    #[arg(long, value_name = "FILE")]
    references: Option<PathBuf>,
    /// Pick the LM scale from 0.5..2.0 by WER on these references.
    #[arg(long)]
    tune: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| match record.level() {
            log::Level::Info => writeln!(buf, "{}", record.args()),
            level => writeln!(buf, "{}: {}", level.as_str().to_lowercase(), record.args()),
        })
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        bail!("--threads must be at least 1");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("starting the thread pool")?;
    let mut rc = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::BuildVocab(a) => build_vocab(&mut rc, a),
        Command::Train(a) => train(&mut rc, a),
        Command::ExtractFv(a) => extract_fv(&mut rc, a),
        Command::Generate(a) => generate(&mut rc, a),
        Command::EvalPpl(a) => eval_ppl(&mut rc, a),
        Command::EvalBleu(a) => eval_bleu(&mut rc, a),
        Command::Rescore(a) => run_rescore(&mut rc, a),
        Command::EvalWer(a) => eval_wer(&mut rc, a),
    }
}

fn write_output(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn load_vocab(rc: &mut RunConfig, flag: Option<PathBuf>) -> Result<Vocabulary> {
    let path = rc.path("vocab", flag)?;
    Vocabulary::load(&path).with_context(|| format!("loading vocabulary {}", path.display()))
}

fn load_corpus(rc: &mut RunConfig, flag: Option<PathBuf>) -> Result<Vec<String>> {
    let path = rc.path("corpus", flag)?;
    read_sentences(&path).with_context(|| format!("reading corpus {}", path.display()))
}

fn load_lm(path: &Path, vocab: &Vocabulary) -> Result<AnyModel> {
    let model = load_any(path, Some(vocab)).with_context(|| format!("loading {}", path.display()))?;
    if model.as_language_model().is_none() {
        bail!(
            "{} holds a {} model, which does not predict words",
            path.display(),
            model.architecture().name()
        );
    }
    Ok(model)
}

fn lm(model: &AnyModel) -> &dyn LanguageModel {
    model.as_language_model().expect("checked when loading")
}

fn model_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn build_vocab(rc: &mut RunConfig, a: BuildVocabArgs) -> Result<()> {
    let corpus = rc.path("corpus", a.corpus)?;
    let output = rc.path("output", a.output)?;
    let max_vocab = rc.value("max_vocab", a.max_vocab, 10_000)?;
    let min_count = rc.value("min_count", a.min_count, 1)?;
    rc.log();
    let vocab = fvlm::corpus::build_vocab(&corpus, max_vocab, min_count)?;
    write_output(&output, &vocab.to_file_string())?;
    log::info!("wrote {} words to {}", vocab.len(), output.display());
    Ok(())
}

fn parse_precision(s: &str) -> Result<Precision> {
    match s {
        "f64" => Ok(Precision::F64),
        "f32" => Ok(Precision::F32),
        other => bail!("precision must be f64 or f32, got `{other}`"),
    }
}

fn lm_config(rc: &mut RunConfig, m: &ModelArgs) -> Result<LmConfig> {
    let d = LmConfig::default();
    let t = TrainConfig::default();
    let hidden_dim = rc.value("hidden_dim", m.hidden_dim, d.hidden_dim)?;
    Ok(LmConfig {
        embed_dim: rc.value("embed_dim", m.embed_dim, d.embed_dim)?,
        hidden_dim,
        num_layers: rc.value("num_layers", m.num_layers, d.num_layers)?,
        mt_shared_layers: rc.value("mt_shared_layers", m.mt_shared_layers, d.mt_shared_layers)?,
        mt_branch_layers: rc.value("mt_branch_layers", m.mt_branch_layers, d.mt_branch_layers)?,
        lambda_mt: rc.value("lambda_mt", m.lambda_mt, d.lambda_mt)?,
        fv_dim: rc.value("fv_dim", m.fv_dim, hidden_dim)?,
        train: TrainConfig {
            learning_rate: rc.value("learning_rate", m.learning_rate, t.learning_rate)?,
            clip_norm: rc.value("clip_norm", m.clip_norm, t.clip_norm)?,
            epochs: rc.value("epochs", m.epochs, t.epochs)?,
            seed: rc.seed(m.seed, t.seed)?,
            validation_fraction: rc.value("validation_fraction", m.validation_fraction, t.validation_fraction)?,
            lr_decay: rc.value("lr_decay", m.lr_decay, t.lr_decay)?,
            init_scale: rc.value("init_scale", m.init_scale, t.init_scale)?,
        },
    })
}

fn save<M: Checkpointable>(model: &M, path: &Path, precision: Precision) -> Result<()> {
    save_checkpoint(model, path, precision).with_context(|| format!("writing {}", path.display()))
}

fn load_extractor(path: &Path, vocab: &Vocabulary) -> Result<LstmLm> {
    let ext: LstmLm =
        load_checkpoint(path, Some(vocab)).with_context(|| format!("loading extractor {}", path.display()))?;
    if ext.direction != Direction::Reversed {
        bail!("{} is not a reversed LM; train one with `train --arch reversed`", path.display());
    }
    Ok(ext)
}

fn train(rc: &mut RunConfig, a: TrainArgs) -> Result<()> {
    // dependency checks come first so a missing stage fails fast
    let extractor = rc.optional_path("extractor", a.extractor)?;
    let predictor = rc.optional_path("predictor", a.predictor)?;
    match a.arch {
        Architecture::FvPredictor if extractor.is_none() => bail!(
            "--arch fv-predictor needs --extractor: train the reversed LM first (`train --arch reversed`)"
        ),
        Architecture::Enhanced if predictor.is_none() => bail!(
            "--arch enhanced needs --predictor: train the FV-predictor first (`train --arch fv-predictor`)"
        ),
        _ => {}
    }
    let corpus = load_corpus(rc, a.corpus)?;
    let vocab = load_vocab(rc, a.vocab)?;
    let output = rc.path("output", a.output)?;
    let config = lm_config(rc, &a.model)?;
    if a.arch == Architecture::MultiTask && extractor.is_none() && config.lambda_mt != 0.0 {
        bail!("--arch mt needs --extractor unless lambda_mt is 0: train the reversed LM first (`train --arch reversed`)");
    }
    let precision = parse_precision(&rc.value("precision", a.model.precision.clone(), "f64".to_string())?)?;
    rc.log();
    let seqs = encode_all(&vocab, &corpus);
    // the trainer logs one `epoch=` line per epoch
    let mut observer = ();
    let best_epoch = match a.arch {
        Architecture::Baseline | Architecture::Reversed => {
            let dir = if a.arch == Architecture::Baseline {
                Direction::Forward
            } else {
                Direction::Reversed
            };
            let t = train_lm(&seqs, &vocab, &config, dir, &mut observer)?;
            save(&t.model, &output, precision)?;
            t.best_epoch
        }
        Architecture::FvPredictor => {
            let ext = load_extractor(extractor.as_deref().expect("checked above"), &vocab)?;
            let t = train_fv_predictor(&seqs, &vocab, &ext, &config, &mut observer)?;
            save(&t.model, &output, precision)?;
            t.best_epoch
        }
        Architecture::Enhanced => {
            let path = predictor.expect("checked above");
            let pred: FvPredictor = load_checkpoint(&path, Some(&vocab))
                .with_context(|| format!("loading predictor {}", path.display()))?;
            let t = train_enhanced(&seqs, &vocab, &pred, &config, &mut observer)?;
            save(&t.model, &output, precision)?;
            t.best_epoch
        }
        Architecture::MultiTask => {
            let ext = extractor.as_deref().map(|p| load_extractor(p, &vocab)).transpose()?;
            let t = train_mt(&seqs, &vocab, ext.as_ref(), &config, &mut observer)?;
            save(&t.model, &output, precision)?;
            t.best_epoch
        }
    };
    log::info!("best epoch {best_epoch}; wrote {}", output.display());
    Ok(())
}

fn extract_fv(rc: &mut RunConfig, a: ExtractArgs) -> Result<()> {
    let extractor = rc.path("extractor", a.extractor)?;
    let vocab = load_vocab(rc, a.vocab)?;
    let corpus = load_corpus(rc, a.corpus)?;
    let output = rc.path("output", a.output)?;
    rc.log();
    let ext = load_extractor(&extractor, &vocab)?;
    let mut out = String::new();
    for (i, seq) in encode_all(&vocab, &corpus).iter().enumerate() {
        for (k, v) in extract_future_vectors(&ext, seq)?.iter().enumerate() {
            let _ = write!(out, "{i}\t{}\t", k + 1);
            for (j, x) in v.as_slice().iter().enumerate() {
                if j > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{x:e}");
            }
            out.push('\n');
        }
    }
    write_output(&output, &out)?;
    log::info!("wrote future vectors for {} sentences to {}", corpus.len(), output.display());
    Ok(())
}

fn generate(rc: &mut RunConfig, a: GenerateArgs) -> Result<()> {
    let vocab = load_vocab(rc, a.vocab)?;
    let corpus_path = rc.path("corpus", a.corpus)?;
    let output = rc.optional_path("output", a.output)?;
    let max_len = rc.value("max_len", a.max_len, 50)?;
    rc.log();
    let text = std::fs::read_to_string(&corpus_path)
        .with_context(|| format!("reading {}", corpus_path.display()))?;
    let model = load_lm(&a.model, &vocab)?;
    let mut out = String::new();
    for line in text.lines() {
        let mut history = vec![BOS_ID];
        history.extend(line.split_ascii_whitespace().map(|w| vocab.id_or_unk(w)));
        let cont = greedy_continue(lm(&model), &history, max_len)?;
        let _ = writeln!(out, "{}", vocab.decode_ids(&cont));
    }
    match output {
        Some(p) => write_output(&p, &out),
        None => std::io::stdout().write_all(out.as_bytes()).context("writing to standard output"),
    }
}

fn eval_ppl(rc: &mut RunConfig, a: EvalPplArgs) -> Result<()> {
    let vocab = load_vocab(rc, a.vocab)?;
    let corpus = load_corpus(rc, a.corpus)?;
    rc.log();
    let model = load_lm(&a.model, &vocab)?;
    let ppl = fvlm::eval::perplexity(lm(&model), &encode_all(&vocab, &corpus))?;
    println!("ppl={ppl:.6}");
    Ok(())
}

fn eval_bleu(rc: &mut RunConfig, a: EvalBleuArgs) -> Result<()> {
    let vocab = load_vocab(rc, a.vocab)?;
    let corpus = load_corpus(rc, a.corpus)?;
    let lengths = rc.value("history_lengths", a.history_lengths, List(HISTORY_LENGTHS.to_vec()))?;
    let max_len = rc.optional("max_len", a.max_len)?;
    let output = rc.optional_path("output", a.output)?;
    rc.log();
    let seqs = encode_all(&vocab, &corpus);
    let mut reports: Vec<(String, SeqPredReport)> = Vec::new();
    for path in &a.model {
        let model = load_lm(path, &vocab)?;
        let report = sequence_prediction_eval(lm(&model), &seqs, &lengths.0, max_len)?;
        reports.push((model_name(path), report));
    }
    let mut csv = format!("{CSV_HEADER}\n");
    for (name, r) in &reports {
        for row in r.csv_rows(name) {
            csv.push_str(&row);
            csv.push('\n');
        }
    }
    let table: Vec<(&str, &SeqPredReport)> = reports.iter().map(|(n, r)| (n.as_str(), r)).collect();
    print!("{}", render_table(&table));
    if let Some(p) = output {
        write_output(&p, &csv)?;
    }
    Ok(())
}

struct Rescoring {
    models: Vec<AnyModel>,
    names: Vec<String>,
    vocab: Vocabulary,
    lists: Vec<fvlm::rescoring::NBestList>,
    config: RescoreConfig,
}

impl Rescoring {
    fn lms(&self) -> Vec<&dyn LanguageModel> {
        self.models.iter().map(lm).collect()
    }
}

fn rescoring_setup(rc: &mut RunConfig, o: RescoreOptions) -> Result<Rescoring> {
    let vocab = load_vocab(rc, o.vocab)?;
    let nbest = rc.path("nbest", o.nbest)?;
    let d = RescoreConfig::default();
    let weights = rc.optional("weights", o.weights)?;
    let lm_scale = rc.value("lm_scale", o.lm_scale, d.lm_scale)?;
    let interpolation = match rc.value("interpolation", o.interpolation, "log".to_string())?.as_str() {
        "log" => Interpolation::Log,
        "linear" => Interpolation::Linear,
        other => bail!("interpolation must be log or linear, got `{other}`"),
    };
    let file = load_nbest(&nbest).with_context(|| format!("loading {}", nbest.display()))?;
    for e in &file.errors {
        log::warn!("{}: skipped line {}: {}", nbest.display(), e.line, e.message);
    }
    let models = o
        .model
        .iter()
        .map(|p| load_lm(p, &vocab))
        .collect::<Result<Vec<_>>>()?;
    Ok(Rescoring {
        models,
        names: o.model.iter().map(|p| model_name(p)).collect(),
        vocab,
        lists: file.lists,
        config: RescoreConfig {
            lm_scale,
            weights: weights.map(|w| w.0).unwrap_or_default(),
            interpolation,
        },
    })
}

fn run_rescore(rc: &mut RunConfig, a: RescoreArgs) -> Result<()> {
    let output = rc.path("output", a.output)?;
    let audit = rc.optional_path("audit", a.audit)?;
    let r = rescoring_setup(rc, a.opts)?;
    rc.log();
    let result = rescore(&r.lists, &r.lms(), &r.vocab, &r.config)?;
    write_output(&output, &result.selection_file(&r.lists))?;
    if let Some(p) = audit {
        write_output(&p, &result.audit_file(&r.names))?;
    }
    log::info!("rescored {} utterances; wrote {}", r.lists.len(), output.display());
    Ok(())
}

fn eval_wer(rc: &mut RunConfig, a: EvalWerArgs) -> Result<()> {
    let references = rc.path("references", a.references)?;
    let mut r = rescoring_setup(rc, a.opts)?;
    rc.log();
    let refs = load_references(&references).with_context(|| format!("loading {}", references.display()))?;
    if a.tune {
        let (best, curve) = tune_lm_scale(&r.lists, &refs, &r.lms(), &r.vocab, &r.config)?;
        for (s, w) in &curve {
            log::info!("lm_scale={s:.1} wer={:.4}", 100.0 * w);
        }
        log::info!("tuned lm_scale={best:.1}");
        r.config.lm_scale = best;
    }
    let ev = evaluate_rescoring(&r.lists, &refs, &r.lms(), &r.vocab, &r.config)?;
    println!("lm_scale={}", r.config.lm_scale);
    println!("wer={:.4}", 100.0 * ev.wer());
    println!("oracle_wer={:.4}", 100.0 * ev.oracle.rate());
    println!("anti_oracle_wer={:.4}", 100.0 * ev.anti_oracle.rate());
    for (name, s) in r.names.iter().zip(&ev.per_model) {
        println!("wer[{name}]={:.4}", 100.0 * s.rate());
    }
    Ok(())
}
