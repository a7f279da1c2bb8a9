//! Vocabulary construction, sentence encoding and sequence reversal.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const BOS_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const UNK_ID: usize = 2;
const RESERVED: [&str; 3] = [BOS, EOS, UNK];

/// Word/id map. Ids are contiguous and the reserved tokens take 0, 1, 2.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from the reserved tokens plus `extra` in order.
    /// Duplicates and reserved strings in `extra` are ignored.
    pub fn from_words<I, S>(extra: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in RESERVED.iter().map(|s| s.to_string()).chain(extra.into_iter().map(Into::into)) {
            if !vocab.index.contains_key(&w) {
                vocab.index.insert(w.clone(), vocab.words.len());
                vocab.words.push(w);
            }
        }
        vocab
    }

    /// Frequency-ranked vocabulary over whitespace-tokenized sentences.
    ///
    /// Keeps at most `max_size` entries including the three reserved tokens
    /// and drops words seen fewer than `min_count` times. Equal counts keep
    /// first-occurrence order.
    pub fn build<'a, I>(sentences: I, max_size: usize, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
        let mut total = 0usize;
        for line in sentences {
            for tok in line.split_ascii_whitespace() {
                total += 1;
                if RESERVED.contains(&tok) {
                    continue;
                }
                let next = counts.len();
                counts.entry(tok).or_insert((0, next)).0 += 1;
            }
        }
        if total == 0 {
            return Err(Error::Validation("corpus contains no tokens".into()));
        }
        let mut ranked: Vec<(&str, usize, usize)> = counts
            .into_iter()
            .filter(|(_, (n, _))| *n >= min_count)
            .map(|(w, (n, first))| (w, n, first))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        let room = max_size.saturating_sub(RESERVED.len());
        Ok(Vocabulary::from_words(ranked.into_iter().take(room).map(|(w, _, _)| w)))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn id_or_unk(&self, word: &str) -> usize {
        self.id(word).unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Stable 64-bit fingerprint of the id assignment.
    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update(b"\n");
        }
        let digest = h.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }

    /// Whitespace tokenization wrapped in `<s>` ... `</s>`. Unknown words and
    /// stray boundary markers in the text become `<unk>`.
    pub fn encode(&self, sentence: &str) -> TokenSequence {
        let mut ids = Vec::with_capacity(sentence.len() / 4 + 2);
        ids.push(BOS_ID);
        ids.extend(sentence.split_ascii_whitespace().map(|w| match self.id_or_unk(w) {
            BOS_ID | EOS_ID => UNK_ID,
            id => id,
        }));
        ids.push(EOS_ID);
        TokenSequence { ids }
    }

    /// Interior tokens joined by single spaces.
    pub fn decode(&self, seq: &TokenSequence) -> String {
        self.decode_ids(seq.interior())
    }

    pub fn decode_ids(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let words: Vec<&str> = text.lines().collect();
        if words.len() < RESERVED.len() || words[..RESERVED.len()] != RESERVED {
            return Err(Error::Format(format!(
                "vocabulary must start with {BOS}, {EOS}, {UNK} on the first three lines"
            )));
        }
        let vocab = Vocabulary::from_words(words.iter().copied());
        if vocab.len() != words.len() {
            return Err(Error::Format("vocabulary lists a word twice".into()));
        }
        Ok(vocab)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::parse(&text)
    }
}

/// `build_vocab` over a corpus file (one sentence per line).
pub fn build_vocab(corpus_path: &Path, max_size: usize, min_count: usize) -> Result<Vocabulary> {
    let text = fs::read_to_string(corpus_path).map_err(|e| Error::io(corpus_path, e))?;
    Vocabulary::build(text.lines(), max_size, min_count)
}

/// Non-blank lines of a corpus file.
pub fn read_sentences(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().to_string())
        .collect())
}

/// Token ids of one sentence: `<s>`, the words, `</s>`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if ids.len() < 2 {
            return Err(Error::Validation(format!("sequence of length {} is too short", ids.len())));
        }
        if ids[0] != BOS_ID || ids[ids.len() - 1] != EOS_ID {
            return Err(Error::Validation("sequence must start with <s> and end with </s>".into()));
        }
        let interior = &ids[1..ids.len() - 1];
        if let Some(&bad) = interior.iter().find(|&&i| i == BOS_ID || i == EOS_ID) {
            return Err(Error::Validation(format!("boundary token {bad} inside the sequence")));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab_size) {
            return Err(Error::Validation(format!(
                "token id {bad} out of range for vocabulary of {vocab_size}"
            )));
        }
        Ok(TokenSequence { ids })
    }

    /// Wraps interior ids in boundary markers.
    pub fn from_interior(interior: &[usize], vocab_size: usize) -> Result<Self> {
        let mut ids = Vec::with_capacity(interior.len() + 2);
        ids.push(BOS_ID);
        ids.extend_from_slice(interior);
        ids.push(EOS_ID);
        TokenSequence::new(ids, vocab_size)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn interior(&self) -> &[usize] {
        &self.ids[1..self.ids.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of next-token predictions an LM makes on this sequence.
    pub fn num_predictions(&self) -> usize {
        self.ids.len() - 1
    }
}

/// Reverses the interior; `<s>` and `</s>` stay at the ends.
pub fn reverse_sequence(seq: &TokenSequence) -> TokenSequence {
    let mut ids = Vec::with_capacity(seq.ids.len());
    ids.push(BOS_ID);
    ids.extend(seq.interior().iter().rev());
    ids.push(EOS_ID);
    TokenSequence { ids }
}

pub fn encode_all(vocab: &Vocabulary, sentences: &[String]) -> Vec<TokenSequence> {
    sentences.iter().map(|s| vocab.encode(s)).collect()
}
