#![allow(dead_code)]

use fvlm::corpus::{encode_all, TokenSequence, Vocabulary};
use fvlm::math::Parameters;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Entries with |gradient| below this are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-4;

pub struct GradReport {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

/// Central differences on every parameter of `model` against `analytic`.
pub fn check_gradients<M: Parameters + Clone>(
    model: &M,
    analytic: &M,
    loss: &dyn Fn(&M) -> f64,
    eps: f64,
) -> GradReport {
    let mut probe = model.clone();
    let grads = analytic.blocks();
    let mut report = GradReport {
        max_rel: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (b, (name, g)) in grads.iter().enumerate() {
        for i in 0..g.as_slice().len() {
            let orig = probe.blocks_mut()[b].1.as_slice()[i];
            probe.blocks_mut()[b].1.as_mut_slice()[i] = orig + eps;
            let up = loss(&probe);
            probe.blocks_mut()[b].1.as_mut_slice()[i] = orig - eps;
            let down = loss(&probe);
            probe.blocks_mut()[b].1.as_mut_slice()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = g.as_slice()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            report.checked += 1;
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = format!("{name}[{i}]: analytic {a:e} numeric {numeric:e}");
            }
        }
    }
    report
}

pub fn random_sequence(rng: &mut ChaCha8Rng, vocab_size: usize, max_interior: usize) -> TokenSequence {
    let n = rng.gen_range(1..=max_interior);
    let interior: Vec<usize> = (0..n).map(|_| rng.gen_range(3..vocab_size)).collect();
    TokenSequence::from_interior(&interior, vocab_size).unwrap()
}

/// Vocabulary of `n` entries in total (reserved tokens included).
pub fn numbered_vocab(n: usize) -> Vocabulary {
    Vocabulary::from_words((3..n).map(|i| format!("w{i}")))
}

/// Ten sentences of 17 to 47 words over a shared 40-word pool. The
/// first word identifies the sentence and every later word (and the end of
/// the sentence) is determined by the two before it, so the corpus can be
/// memorized exactly; the only irreducible uncertainty is the opening word.
pub fn toy_sentences() -> Vec<String> {
    let pool: Vec<String> = (0..40).map(|i| format!("t{i}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut next: std::collections::HashMap<(String, String), String> = Default::default();
    (0..10)
        .map(|k| {
            let len = rng.gen_range(22..=26);
            let mut words = vec!["<s>".to_string(), format!("start{k}")];
            loop {
                let ctx = (words[words.len() - 2].clone(), words[words.len() - 1].clone());
                let w = match next.get(&ctx) {
                    Some(w) => w.clone(),
                    None if words.len() > len => "</s>".to_string(),
                    None => pool[rng.gen_range(0..pool.len())].clone(),
                };
                next.insert(ctx, w.clone());
                if w == "</s>" {
                    break;
                }
                words.push(w);
            }
            words[1..].join(" ")
        })
        .collect()
}

pub fn toy_corpus() -> (Vocabulary, Vec<TokenSequence>) {
    let sentences = toy_sentences();
    let vocab = Vocabulary::build(sentences.iter().map(String::as_str), 1000, 1).unwrap();
    let seqs = encode_all(&vocab, &sentences);
    (vocab, seqs)
}

/// Topic-structured synthetic text.
///
/// Every sentence draws one of `topics` topics and fills a random template
/// of function words and topic-specific content words (Zipf-distributed
/// within each topic), so the opening words reveal what follows.
pub struct SyntheticCorpus {
    pub sentences: Vec<String>,
}

pub fn synthetic_corpus(num_sentences: usize, content_per_topic: usize, topics: usize, seed: u64) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let function = [
        "the", "a", "of", "to", "in", "and", "that", "for", "on", "with", "as", "by", "at", "from",
        "is", "was", "will", "has", "its", "their",
    ];
    // N = noun, V = verb, A = adjective, F = function word
    let templates: [&str; 6] = [
        "F A N V F N F F N",
        "F N F N V F A N F F A N",
        "N V F F A N F N V F N",
        "F A A N V F N F F N V F A N",
        "F N V F N F A N F F N F N",
        "N F F N V F A N F N F F A N V F N",
    ];
    let classes = ['N', 'V', 'A'];
    let words: Vec<Vec<Vec<String>>> = (0..topics)
        .map(|t| {
            classes
                .iter()
                .map(|c| {
                    (0..content_per_topic)
                        .map(|i| format!("{}{t}x{i}", c.to_ascii_lowercase()))
                        .collect()
                })
                .collect()
        })
        .collect();
    // Zipf weights over each content list
    let weights: Vec<f64> = (1..=content_per_topic).map(|r| 1.0 / r as f64).collect();
    let dist = rand::distributions::WeightedIndex::new(&weights).unwrap();
    let sentences = (0..num_sentences)
        .map(|_| {
            let t = rng.gen_range(0..topics);
            let template = templates.choose(&mut rng).unwrap();
            template
                .split(' ')
                .map(|slot| match slot {
                    "F" => function[rng.gen_range(0..function.len())].to_string(),
                    "N" => words[t][0][rng.sample(&dist)].clone(),
                    "V" => words[t][1][rng.sample(&dist)].clone(),
                    _ => words[t][2][rng.sample(&dist)].clone(),
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    SyntheticCorpus { sentences }
}
