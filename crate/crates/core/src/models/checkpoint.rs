//! Binary model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "FVLM" | u32 format version | u8 architecture tag
//! u32 length | JSON metadata
//! u64 vocabulary hash
//! u32 block count
//! per block: u32 name length | name | u32 rows | u32 cols | u8 float width (4 or 8) | values
//! ```

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::math::{Matrix, Parameters};
use crate::models::{
    Architecture, Direction, EnhancedLm, FvPredictor, LanguageModel, LmConfig, LstmLm, MultiTaskLm,
};

pub const MAGIC: &[u8; 4] = b"FVLM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Metadata stored as JSON after the header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: LmConfig,
    pub vocab_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictor_config: Option<LmConfig>,
}

/// A model that can be written to and rebuilt from a checkpoint.
pub trait Checkpointable: Sized {
    fn kind(&self) -> Architecture;

    fn accepts(arch: Architecture) -> bool;

    fn meta(&self) -> CheckpointMeta;

    fn stored_vocab_hash(&self) -> u64;

    /// Every block needed to restore the model, frozen parts included.
    fn stored_blocks(&self) -> Vec<(String, &Matrix)>;

    fn stored_blocks_mut(&mut self) -> Vec<(String, &mut Matrix)>;

    /// A correctly shaped model whose values are about to be overwritten.
    fn skeleton(arch: Architecture, meta: &CheckpointMeta, vocab_hash: u64) -> Result<Self>;
}

impl Checkpointable for LstmLm {
    fn kind(&self) -> Architecture {
        self.architecture()
    }

    fn accepts(arch: Architecture) -> bool {
        matches!(arch, Architecture::Baseline | Architecture::Reversed)
    }

    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            config: self.config.clone(),
            vocab_size: self.vocab_size(),
            predictor_config: None,
        }
    }

    fn stored_vocab_hash(&self) -> u64 {
        self.vocab_hash
    }

    fn stored_blocks(&self) -> Vec<(String, &Matrix)> {
        self.blocks()
    }

    fn stored_blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        self.blocks_mut()
    }

    fn skeleton(arch: Architecture, meta: &CheckpointMeta, vocab_hash: u64) -> Result<Self> {
        let direction = if arch == Architecture::Reversed {
            Direction::Reversed
        } else {
            Direction::Forward
        };
        LstmLm::with_vocab_size(direction, &meta.config, meta.vocab_size, vocab_hash)
    }
}

impl Checkpointable for FvPredictor {
    fn kind(&self) -> Architecture {
        Architecture::FvPredictor
    }

    fn accepts(arch: Architecture) -> bool {
        arch == Architecture::FvPredictor
    }

    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            config: self.config.clone(),
            vocab_size: self.vocab_size(),
            predictor_config: None,
        }
    }

    fn stored_vocab_hash(&self) -> u64 {
        self.vocab_hash
    }

    fn stored_blocks(&self) -> Vec<(String, &Matrix)> {
        self.blocks()
    }

    fn stored_blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        self.blocks_mut()
    }

    fn skeleton(_: Architecture, meta: &CheckpointMeta, vocab_hash: u64) -> Result<Self> {
        FvPredictor::with_vocab_size(&meta.config, meta.vocab_size, vocab_hash)
    }
}

impl Checkpointable for EnhancedLm {
    fn kind(&self) -> Architecture {
        Architecture::Enhanced
    }

    fn accepts(arch: Architecture) -> bool {
        arch == Architecture::Enhanced
    }

    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            config: self.config.clone(),
            vocab_size: self.vocab_size(),
            predictor_config: Some(self.predictor.config.clone()),
        }
    }

    fn stored_vocab_hash(&self) -> u64 {
        self.vocab_hash
    }

    fn stored_blocks(&self) -> Vec<(String, &Matrix)> {
        self.all_blocks()
    }

    fn stored_blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        self.all_blocks_mut()
    }

    fn skeleton(_: Architecture, meta: &CheckpointMeta, vocab_hash: u64) -> Result<Self> {
        let pc = meta
            .predictor_config
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("enhanced model without predictor configuration".into()))?;
        let predictor = FvPredictor::with_vocab_size(pc, meta.vocab_size, vocab_hash)?;
        EnhancedLm::with_vocab_size(&meta.config, meta.vocab_size, vocab_hash, predictor)
    }
}

impl Checkpointable for MultiTaskLm {
    fn kind(&self) -> Architecture {
        Architecture::MultiTask
    }

    fn accepts(arch: Architecture) -> bool {
        arch == Architecture::MultiTask
    }

    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            config: self.config.clone(),
            vocab_size: self.vocab_size(),
            predictor_config: None,
        }
    }

    fn stored_vocab_hash(&self) -> u64 {
        self.vocab_hash
    }

    fn stored_blocks(&self) -> Vec<(String, &Matrix)> {
        self.blocks()
    }

    fn stored_blocks_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        self.blocks_mut()
    }

    fn skeleton(_: Architecture, meta: &CheckpointMeta, vocab_hash: u64) -> Result<Self> {
        MultiTaskLm::with_vocab_size(&meta.config, meta.vocab_size, vocab_hash)
    }
}

/// Serializes a model to bytes.
pub fn encode_checkpoint<M: Checkpointable>(model: &M, precision: Precision) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(model.kind().tag());
    let meta = serde_json::to_vec(&model.meta()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&model.stored_vocab_hash().to_le_bytes());
    let blocks = model.stored_blocks();
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, m) in blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        match precision {
            Precision::F64 => {
                out.push(8);
                for v in m.as_slice() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Precision::F32 => {
                out.push(4);
                for v in m.as_slice() {
                    out.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

/// Writes a checkpoint atomically: the file appears complete or not at all.
pub fn save_checkpoint<M: Checkpointable>(model: &M, path: &Path, precision: Precision) -> Result<()> {
    let bytes = encode_checkpoint(model, precision)?;
    write_atomic(path, &bytes)
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

struct Decoded {
    arch: Architecture,
    meta: CheckpointMeta,
    vocab_hash: u64,
    blocks: Vec<(String, Matrix)>,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a model file (bad magic)".into()));
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let tag = r.u8("architecture tag")?;
    let arch = Architecture::from_tag(tag)
        .ok_or_else(|| Error::Checkpoint(format!("unknown architecture tag {tag}")))?;
    let meta_len = r.u32("metadata length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    let vocab_hash = r.u64("vocabulary hash")?;
    let count = r.u32("block count")? as usize;
    let mut blocks = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32("block name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "block name")?.to_vec())
            .map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?;
        let rows = r.u32("block rows")? as usize;
        let cols = r.u32("block cols")? as usize;
        let width = r.u8("float width")?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint(format!("block {name} is too large")))?;
        let data: Vec<f64> = match width {
            8 => r
                .take(n.checked_mul(8).unwrap_or(usize::MAX), &name)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            4 => r
                .take(n.checked_mul(4).unwrap_or(usize::MAX), &name)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            w => return Err(Error::Checkpoint(format!("block {name} has float width {w}"))),
        };
        blocks.push((name, Matrix::from_vec(rows, cols, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last block",
            bytes.len() - r.pos
        )));
    }
    Ok(Decoded {
        arch,
        meta,
        vocab_hash,
        blocks,
    })
}

fn restore<M: Checkpointable>(d: Decoded) -> Result<M> {
    let mut model = M::skeleton(d.arch, &d.meta, d.vocab_hash)?;
    let mut stored: HashMap<String, Matrix> = d.blocks.into_iter().collect();
    for (name, slot) in model.stored_blocks_mut() {
        let m = stored
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing block {name}")))?;
        if m.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "block {name} is {}x{} but the configuration implies {}x{}",
                m.rows(),
                m.cols(),
                slot.rows(),
                slot.cols()
            )));
        }
        *slot = m;
    }
    if let Some(extra) = stored.keys().min() {
        return Err(Error::Checkpoint(format!("unexpected block {extra}")));
    }
    Ok(model)
}

fn check_vocab(path: &Path, meta: &CheckpointMeta, hash: u64, vocab: Option<&Vocabulary>) -> Result<()> {
    let Some(v) = vocab else { return Ok(()) };
    if v.len() != meta.vocab_size {
        return Err(Error::Config(format!(
            "{} was trained with {} words but the vocabulary has {}",
            path.display(),
            meta.vocab_size,
            v.len()
        )));
    }
    if v.hash() != hash {
        log::warn!(
            "{} was trained with a different vocabulary of the same size",
            path.display()
        );
    }
    Ok(())
}

fn read_decoded(path: &Path) -> Result<Decoded> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Loads a checkpoint of a specific model type. A file holding another
/// architecture is rejected.
pub fn load_checkpoint<M: Checkpointable>(path: &Path, vocab: Option<&Vocabulary>) -> Result<M> {
    let d = read_decoded(path)?;
    if !M::accepts(d.arch) {
        return Err(Error::Checkpoint(format!(
            "{} holds a {} model",
            path.display(),
            d.arch
        )));
    }
    check_vocab(path, &d.meta, d.vocab_hash, vocab)?;
    restore(d)
}

/// Restores a model from bytes produced by [`encode_checkpoint`].
pub fn decode_checkpoint<M: Checkpointable>(bytes: &[u8]) -> Result<M> {
    let d = decode(bytes)?;
    if !M::accepts(d.arch) {
        return Err(Error::Checkpoint(format!("bytes hold a {} model", d.arch)));
    }
    restore(d)
}

/// Any model, as read from a file of unknown architecture.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Lm(LstmLm),
    Predictor(FvPredictor),
    Enhanced(EnhancedLm),
    MultiTask(MultiTaskLm),
}

impl AnyModel {
    pub fn architecture(&self) -> Architecture {
        match self {
            AnyModel::Lm(m) => m.kind(),
            AnyModel::Predictor(_) => Architecture::FvPredictor,
            AnyModel::Enhanced(_) => Architecture::Enhanced,
            AnyModel::MultiTask(_) => Architecture::MultiTask,
        }
    }

    /// The word-predicting view; `None` for the future-vector predictor.
    pub fn as_language_model(&self) -> Option<&dyn LanguageModel> {
        match self {
            AnyModel::Lm(m) => Some(m),
            AnyModel::Predictor(_) => None,
            AnyModel::Enhanced(m) => Some(m),
            AnyModel::MultiTask(m) => Some(m),
        }
    }
}

pub fn load_any(path: &Path, vocab: Option<&Vocabulary>) -> Result<AnyModel> {
    let d = read_decoded(path)?;
    check_vocab(path, &d.meta, d.vocab_hash, vocab)?;
    Ok(match d.arch {
        Architecture::Baseline | Architecture::Reversed => AnyModel::Lm(restore(d)?),
        Architecture::FvPredictor => AnyModel::Predictor(restore(d)?),
        Architecture::Enhanced => AnyModel::Enhanced(restore(d)?),
        Architecture::MultiTask => AnyModel::MultiTask(restore(d)?),
    })
}
