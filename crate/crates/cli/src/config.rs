//! `key = value` run configuration.
//!
//! Values resolve as command-line flag, then `FVLM_SEED` (seed only), then
//! the config file, then the built-in default. Every resolved value is
//! logged once.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

/// Every key a config file may set. Keys are flag names with `-` replaced
/// by `_`.
pub const KEYS: &[&str] = &[
    // paths
    "corpus",
    "vocab",
    "output",
    "extractor",
    "predictor",
    "nbest",
    "references",
    "audit",
    // vocabulary
    "max_vocab",
    "min_count",
    // model shape
    "embed_dim",
    "hidden_dim",
    "num_layers",
    "mt_shared_layers",
    "mt_branch_layers",
    "lambda_mt",
    "fv_dim",
    // optimization
    "learning_rate",
    "clip_norm",
    "epochs",
    "seed",
    "validation_fraction",
    "lr_decay",
    "init_scale",
    "precision",
    // evaluation and rescoring
    "history_lengths",
    "max_len",
    "lm_scale",
    "weights",
    "interpolation",
];

pub const SEED_ENV: &str = "FVLM_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Flag,
    Env,
    File,
    Default,
}

impl Source {
    fn label(self) -> &'static str {
        match self {
            Source::Flag => "flag",
            Source::Env => "env",
            Source::File => "file",
            Source::Default => "default",
        }
    }
}

#[derive(Debug, Default)]
pub struct RunConfig {
    file: BTreeMap<String, String>,
    file_path: Option<PathBuf>,
    resolved: BTreeMap<String, (String, Source)>,
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected `key = value`", n + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            bail!("config line {}: unknown key `{k}`", n + 1);
        }
        if v.is_empty() {
            bail!("config line {}: empty value for `{k}`", n + 1);
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            bail!("config line {}: `{k}` set twice", n + 1);
        }
    }
    Ok(out)
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let file = parse_config(&text).with_context(|| format!("in {}", path.display()))?;
        Ok(RunConfig {
            file,
            file_path: Some(path.to_path_buf()),
            resolved: BTreeMap::new(),
        })
    }

    fn from_file<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        debug_assert!(KEYS.contains(&key), "unregistered key {key}");
        match self.file.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| anyhow!("config key `{key}`: cannot parse `{v}`: {e}")),
        }
    }

    fn record<T: Display>(&mut self, key: &str, value: &T, source: Source) {
        self.resolved.insert(key.to_string(), (value.to_string(), source));
    }

    /// Flag, then file, then `default`.
    pub fn value<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let (v, src) = match (flag, self.from_file(key)?) {
            (Some(f), _) => (f, Source::Flag),
            (None, Some(f)) => (f, Source::File),
            (None, None) => (default, Source::Default),
        };
        self.record(key, &v, src);
        Ok(v)
    }

    /// Like [`RunConfig::value`] with no default; absence is an error.
    pub fn required<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T::Err: Display,
    {
        self.optional(key, flag)?
            .ok_or_else(|| anyhow!("missing --{} (or `{key}` in the config file)", key.replace('_', "-")))
    }

    pub fn optional<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let v = match flag {
            Some(f) => Some((f, Source::Flag)),
            None => self.from_file(key)?.map(|f| (f, Source::File)),
        };
        Ok(v.map(|(v, src)| {
            self.record(key, &v, src);
            v
        }))
    }

    pub fn path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
        self.required::<String>(key, flag.map(|p| p.display().to_string()))
            .map(PathBuf::from)
    }

    pub fn optional_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>> {
        Ok(self
            .optional::<String>(key, flag.map(|p| p.display().to_string()))?
            .map(PathBuf::from))
    }

    /// The seed: flag, then `FVLM_SEED`, then file, then `default`.
    pub fn seed(&mut self, flag: Option<u64>, default: u64) -> Result<u64> {
        if let Some(s) = flag {
            self.record("seed", &s, Source::Flag);
            return Ok(s);
        }
        if let Ok(v) = std::env::var(SEED_ENV) {
            let s: u64 = v
                .trim()
                .parse()
                .map_err(|e| anyhow!("{SEED_ENV}: cannot parse `{v}`: {e}"))?;
            self.record("seed", &s, Source::Env);
            return Ok(s);
        }
        self.value("seed", None, default)
    }

    /// One line per resolved key, for the run log.
    pub fn summary(&self) -> Vec<String> {
        let mut lines = Vec::with_capacity(self.resolved.len() + 1);
        if let Some(p) = &self.file_path {
            lines.push(format!("config file {}", p.display()));
        }
        for (k, (v, src)) in &self.resolved {
            lines.push(format!("config {k}={v} ({})", src.label()));
        }
        lines
    }

    pub fn log(&self) {
        for line in self.summary() {
            log::info!("{line}");
        }
    }
}

/// Comma-separated list, e.g. `0,1,2,3,5`.
#[derive(Clone, Debug, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: Display,
{
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse().map_err(|e| format!("`{}`: {e}", p.trim())))
            .collect::<std::result::Result<_, _>>()
            .map(List)
    }
}

impl<T: Display> Display for List<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}
