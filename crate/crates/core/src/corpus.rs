//! Corpus ingestion: cleaning, manifests, domain mixing and language sampling.
//!
//! Text is kept byte-faithful. The only transformation applied to a line is
//! the removal of its terminator (`\n` or `\r\n`); no Unicode normalization
//! happens anywhere, because the zero-width joiner must survive untouched.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{rng_for, Rng};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid UTF-8 on line {line}")]
    InvalidUtf8 { line: usize },
    #[error("invalid language code {0:?}: expected non-empty lowercase ASCII")]
    InvalidLangCode(String),
    #[error("language pair mismatch: {left} vs {right}")]
    PairMismatch { left: String, right: String },
    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),
    #[error("out-domain data ({out_len} pairs) is smaller than in-domain data ({in_len} pairs)")]
    OutSmallerThanIn { in_len: usize, out_len: usize },
    #[error("invalid sampling input: {0}")]
    Sampling(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid cleaning pattern {pattern:?}: {source}")]
    Pattern {
        pattern: String,
        #[source]
        source: regex::Error,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// A short lowercase language identifier such as `si`, `ta` or `en`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LangCode(String);

impl LangCode {
    pub fn new(code: impl Into<String>) -> Result<Self, CorpusError> {
        let code = code.into();
        let ok = !code.is_empty()
            && code
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_');
        if ok {
            Ok(Self(code))
        } else {
            Err(CorpusError::InvalidLangCode(code))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for LangCode {
    type Error = CorpusError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<LangCode> for String {
    fn from(value: LangCode) -> Self {
        value.0
    }
}

impl fmt::Display for LangCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A translation direction `src -> tgt`, written `src-tgt` in configs.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Direction {
    pub src: LangCode,
    pub tgt: LangCode,
}

impl Direction {
    pub fn new(src: LangCode, tgt: LangCode) -> Self {
        Self { src, tgt }
    }

    pub fn reversed(&self) -> Self {
        Self::new(self.tgt.clone(), self.src.clone())
    }

    pub fn parse(s: &str) -> Result<Self, CorpusError> {
        let (a, b) = s
            .split_once("-")
            .ok_or_else(|| CorpusError::InvalidLangCode(s.to_string()))?;
        let d = Self::new(LangCode::new(a)?, LangCode::new(b)?);
        if d.src == d.tgt {
            return Err(CorpusError::InvalidDataset(format!(
                "direction {s} has identical source and target"
            )));
        }
        Ok(d)
    }
}

impl TryFrom<String> for Direction {
    type Error = CorpusError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::parse(&value)
    }
}

impl From<Direction> for String {
    fn from(value: Direction) -> Self {
        value.to_string()
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.src, self.tgt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    #[serde(rename = "in")]
    InDomain,
    #[serde(rename = "out")]
    OutDomain,
    /// Only produced by [`upsample_mix`] and CPT mixing, never read from disk.
    Mixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonoDataset {
    pub lang: LangCode,
    pub domain: DomainTag,
    pub lines: Vec<String>,
}

impl MonoDataset {
    pub fn new(lang: LangCode, domain: DomainTag, lines: Vec<String>) -> Result<Self, CorpusError> {
        if let Some(i) = lines.iter().position(|l| l.is_empty()) {
            return Err(CorpusError::InvalidDataset(format!("mono line {} is empty", i + 1)));
        }
        Ok(Self { lang, domain, lines })
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelDataset {
    pub src_lang: LangCode,
    pub tgt_lang: LangCode,
    pub domain: DomainTag,
    pub pairs: Vec<(String, String)>,
}

impl ParallelDataset {
    pub fn new(
        src_lang: LangCode,
        tgt_lang: LangCode,
        domain: DomainTag,
        pairs: Vec<(String, String)>,
    ) -> Result<Self, CorpusError> {
        if src_lang == tgt_lang {
            return Err(CorpusError::InvalidDataset(format!(
                "source and target language are both {src_lang}"
            )));
        }
        if pairs.is_empty() {
            return Err(CorpusError::EmptyDataset("parallel dataset has no pairs"));
        }
        if let Some(i) = pairs.iter().position(|(s, t)| s.is_empty() || t.is_empty()) {
            return Err(CorpusError::InvalidDataset(format!("pair {} has an empty side", i + 1)));
        }
        Ok(Self {
            src_lang,
            tgt_lang,
            domain,
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn direction(&self) -> Direction {
        Direction::new(self.src_lang.clone(), self.tgt_lang.clone())
    }

    /// The same data read in the opposite direction.
    pub fn reversed(&self) -> Self {
        Self {
            src_lang: self.tgt_lang.clone(),
            tgt_lang: self.src_lang.clone(),
            domain: self.domain,
            pairs: self.pairs.iter().map(|(s, t)| (t.clone(), s.clone())).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Cleaning

/// Default patterns. A line matching any of them is dropped.
///
/// 1. blank or whitespace-only lines;
/// 2. lines made only of digits, punctuation, symbols, separators and format
///    characters (covers `12/03/2020`, `...`, `—`, `2021`, `(5)`);
/// 3. and 4. dates written with an English month name and no other words,
///    day-first (`12 March 2020`) or month-first (`March 12, 2020`).
pub const DEFAULT_CLEAN_PATTERNS: &[&str] = &[
    r"^\s*$",
    r"^[\p{N}\p{P}\p{S}\p{Z}\p{Cf}\s]+$",
    r"(?i)^\s*\d{1,2}(st|nd|rd|th)?\s+(jan|feb|mar|apr|may|jun|jul|aug|sep|oct|nov|dec)[a-z]*\.?,?\s+\d{2,4}\s*$",
    r"(?i)^\s*(jan|feb|mar|apr|may|jun|jul|aug|sep|oct|nov|dec)[a-z]*\.?\s+\d{1,2}(st|nd|rd|th)?,?\s+\d{2,4}\s*$",
];

#[derive(Debug, Clone)]
pub struct CleanRules {
    patterns: Vec<Regex>,
}

impl Default for CleanRules {
    fn default() -> Self {
        Self::from_patterns(DEFAULT_CLEAN_PATTERNS).expect("default patterns compile")
    }
}

impl CleanRules {
    pub fn from_patterns<S: AsRef<str>>(patterns: &[S]) -> Result<Self, CorpusError> {
        let patterns = patterns
            .iter()
            .map(|p| {
                Regex::new(p.as_ref()).map_err(|source| CorpusError::Pattern {
                    pattern: p.as_ref().to_string(),
                    source,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { patterns })
    }

    pub fn rejects(&self, line: &str) -> bool {
        line.is_empty() || self.patterns.iter().any(|re| re.is_match(line))
    }
}

/// Drops empty lines and lines matched by `rules`, preserving order.
pub fn clean<S: AsRef<str>>(lines: &[S], rules: &CleanRules) -> Vec<String> {
    lines
        .iter()
        .map(AsRef::as_ref)
        .filter(|l| !rules.rejects(l))
        .map(str::to_string)
        .collect()
}

/// Splits raw bytes into lines, strictly decoding each as UTF-8.
pub fn split_lines(bytes: &[u8]) -> Result<Vec<String>, CorpusError> {
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let body = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    body.split(|&b| b == b'\n')
        .enumerate()
        .map(|(i, raw)| {
            let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
            std::str::from_utf8(raw)
                .map(str::to_string)
                .map_err(|_| CorpusError::InvalidUtf8 { line: i + 1 })
        })
        .collect()
}

pub fn clean_bytes(bytes: &[u8], rules: &CleanRules) -> Result<Vec<String>, CorpusError> {
    Ok(clean(&split_lines(bytes)?, rules))
}

/// Keeps aligned pairs whose sides both survive cleaning.
pub fn clean_pairs(pairs: &[(String, String)], rules: &CleanRules) -> Vec<(String, String)> {
    pairs
        .iter()
        .filter(|(s, t)| !rules.rejects(s) && !rules.rejects(t))
        .cloned()
        .collect()
}

pub fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let bytes = fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    split_lines(&bytes)
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest not found: {0}")]
    NotFound(PathBuf),
    #[error("manifest schema violation at {field}: {message}")]
    Schema { field: String, message: String },
    #[error("unknown language {lang:?} at {field}")]
    UnknownLanguage { field: String, lang: String },
    #[error("data file for {field} does not exist: {path}")]
    MissingData { field: String, path: PathBuf },
    #[error("split error for pair {pair}: {message}")]
    Split { pair: String, message: String },
    #[error("{field}: {source}")]
    Corpus {
        field: String,
        #[source]
        source: CorpusError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonoEntry {
    pub path: PathBuf,
    pub lang: LangCode,
    pub domain: DomainTag,
    /// Lines in the file, filled in by [`load_manifest`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lines: Option<usize>,
}

/// A parallel corpus stored as `<prefix>.<src_lang>` and `<prefix>.<tgt_lang>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelEntry {
    pub prefix: PathBuf,
    pub src_lang: LangCode,
    pub tgt_lang: LangCode,
    pub domain: DomainTag,
    pub split: SplitRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<usize>,
}

impl ParallelEntry {
    pub fn direction(&self) -> Direction {
        Direction::new(self.src_lang.clone(), self.tgt_lang.clone())
    }

    fn unordered(&self) -> (LangCode, LangCode) {
        if self.src_lang <= self.tgt_lang {
            (self.src_lang.clone(), self.tgt_lang.clone())
        } else {
            (self.tgt_lang.clone(), self.src_lang.clone())
        }
    }
}

/// Declares every dataset a run may touch.
///
/// ```toml
/// languages = ["si", "ta", "en"]
/// needs_zwj_repair = ["si"]      # optional; defaults to ["si"] when declared
///
/// [[mono]]
/// path = "mono/gov.si"
/// lang = "si"
/// domain = "in"                  # "in" | "out"
///
/// [[parallel]]
/// prefix = "para/gov.train"      # reads para/gov.train.si and para/gov.train.en
/// src_lang = "si"
/// tgt_lang = "en"
/// domain = "in"
/// split = "train"                # "train" | "valid" | "test"
/// ```
///
/// Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub languages: Vec<LangCode>,
    #[serde(default)]
    pub needs_zwj_repair: Option<Vec<LangCode>>,
    #[serde(default)]
    pub mono: Vec<MonoEntry>,
    #[serde(default)]
    pub parallel: Vec<ParallelEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl CorpusManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn parallel_paths(&self, e: &ParallelEntry) -> (PathBuf, PathBuf) {
        let base = self.resolve(&e.prefix);
        let with = |lang: &LangCode| {
            let mut s = base.clone().into_os_string();
            s.push(format!(".{lang}"));
            PathBuf::from(s)
        };
        (with(&e.src_lang), with(&e.tgt_lang))
    }

    /// Whether decoded output in `lang` should pass through the ZWJ repair.
    pub fn needs_zwj_repair(&self, lang: &LangCode) -> bool {
        match &self.needs_zwj_repair {
            Some(list) => list.contains(lang),
            None => lang.as_str() == "si",
        }
    }

    pub fn load_mono(&self, e: &MonoEntry, rules: &CleanRules) -> Result<MonoDataset, CorpusError> {
        let lines = clean(&read_lines(&self.resolve(&e.path))?, rules);
        MonoDataset::new(e.lang.clone(), e.domain, lines)
    }

    pub fn load_parallel(&self, e: &ParallelEntry, rules: &CleanRules) -> Result<ParallelDataset, CorpusError> {
        let (sp, tp) = self.parallel_paths(e);
        let src = read_lines(&sp)?;
        let tgt = read_lines(&tp)?;
        if src.len() != tgt.len() {
            return Err(CorpusError::InvalidDataset(format!(
                "{} has {} lines but {} has {}",
                sp.display(),
                src.len(),
                tp.display(),
                tgt.len()
            )));
        }
        let pairs: Vec<_> = src.into_iter().zip(tgt).collect();
        ParallelDataset::new(
            e.src_lang.clone(),
            e.tgt_lang.clone(),
            e.domain,
            clean_pairs(&pairs, rules),
        )
    }

    /// Loads the parallel data for `dir`, reading entries declared in either
    /// orientation and flipping them as needed. Several matching entries are
    /// concatenated in manifest order.
    pub fn parallel_for(
        &self,
        dir: &Direction,
        split: SplitRole,
        domain: Option<DomainTag>,
        rules: &CleanRules,
    ) -> Result<Option<ParallelDataset>, CorpusError> {
        let mut out: Option<ParallelDataset> = None;
        for e in &self.parallel {
            if e.split != split || domain.is_some_and(|d| d != e.domain) {
                continue;
            }
            let ds = if e.direction() == *dir {
                self.load_parallel(e, rules)?
            } else if e.direction() == dir.reversed() {
                self.load_parallel(e, rules)?.reversed()
            } else {
                continue;
            };
            match &mut out {
                None => out = Some(ds),
                Some(acc) => {
                    if acc.domain != ds.domain {
                        acc.domain = DomainTag::Mixed;
                    }
                    acc.pairs.extend(ds.pairs)
                }
            }
        }
        Ok(out)
    }
}

fn count_lines(path: &Path) -> Result<usize, CorpusError> {
    let bytes = fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.is_empty() {
        return Ok(0);
    }
    let n = bytes.iter().filter(|&&b| b == b'\n').count();
    Ok(if bytes.ends_with(b"\n") { n } else { n + 1 })
}

/// Reads, validates and line-counts a corpus manifest.
pub fn load_manifest(path: &Path) -> Result<CorpusManifest, ManifestError> {
    let text = fs::read_to_string(path).map_err(|_| ManifestError::NotFound(path.to_path_buf()))?;
    let de = toml::Deserializer::parse(&text).map_err(|e| ManifestError::Schema {
        field: "<root>".into(),
        message: e.to_string(),
    })?;
    let mut manifest: CorpusManifest = serde_path_to_error::deserialize(de).map_err(|e| ManifestError::Schema {
        field: e.path().to_string(),
        message: e.inner().message().to_string(),
    })?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    validate_manifest(&mut manifest)?;
    Ok(manifest)
}

fn validate_manifest(m: &mut CorpusManifest) -> Result<(), ManifestError> {
    let langs: BTreeSet<&LangCode> = m.languages.iter().collect();
    if langs.len() != m.languages.len() {
        return Err(ManifestError::Schema {
            field: "languages".into(),
            message: "duplicate language".into(),
        });
    }
    let check = |field: String, lang: &LangCode| {
        if langs.contains(lang) {
            Ok(())
        } else {
            Err(ManifestError::UnknownLanguage {
                field,
                lang: lang.to_string(),
            })
        }
    };
    if let Some(list) = &m.needs_zwj_repair {
        for (i, l) in list.iter().enumerate() {
            check(format!("needs_zwj_repair[{i}]"), l)?;
        }
    }
    for (i, e) in m.mono.iter().enumerate() {
        check(format!("mono[{i}].lang"), &e.lang)?;
        if e.domain == DomainTag::Mixed {
            return Err(ManifestError::Schema {
                field: format!("mono[{i}].domain"),
                message: "raw datasets cannot be tagged mixed".into(),
            });
        }
    }
    for (i, e) in m.parallel.iter().enumerate() {
        check(format!("parallel[{i}].src_lang"), &e.src_lang)?;
        check(format!("parallel[{i}].tgt_lang"), &e.tgt_lang)?;
        if e.src_lang == e.tgt_lang {
            return Err(ManifestError::Schema {
                field: format!("parallel[{i}].tgt_lang"),
                message: "source and target languages must differ".into(),
            });
        }
        if e.domain == DomainTag::Mixed {
            return Err(ManifestError::Schema {
                field: format!("parallel[{i}].domain"),
                message: "raw datasets cannot be tagged mixed".into(),
            });
        }
    }

    // Every pair with training data needs exactly one valid and one test split.
    let mut splits: BTreeMap<(LangCode, LangCode), [usize; 3]> = BTreeMap::new();
    for e in &m.parallel {
        let c = splits.entry(e.unordered()).or_default();
        c[e.split as usize] += 1;
    }
    for ((a, b), [train, valid, test]) in &splits {
        if *train > 0 && (*valid != 1 || *test != 1) {
            return Err(ManifestError::Split {
                pair: format!("{a}-{b}"),
                message: format!("expected exactly one valid and one test split, found {valid} valid and {test} test"),
            });
        }
    }

    for i in 0..m.mono.len() {
        let field = format!("mono[{i}].path");
        let path = m.resolve(&m.mono[i].path);
        if !path.is_file() {
            return Err(ManifestError::MissingData { field, path });
        }
        let n = count_lines(&path).map_err(|source| ManifestError::Corpus { field, source })?;
        m.mono[i].lines = Some(n);
    }
    for i in 0..m.parallel.len() {
        let (sp, tp) = m.parallel_paths(&m.parallel[i]);
        let mut counts = [0usize; 2];
        for (k, (path, side)) in [(sp, "src_lang"), (tp, "tgt_lang")].into_iter().enumerate() {
            let field = format!("parallel[{i}].prefix ({side})");
            if !path.is_file() {
                return Err(ManifestError::MissingData { field, path });
            }
            counts[k] = count_lines(&path).map_err(|source| ManifestError::Corpus { field, source })?;
        }
        if counts[0] != counts[1] {
            return Err(ManifestError::Schema {
                field: format!("parallel[{i}].prefix"),
                message: format!("unaligned files: {} vs {} lines", counts[0], counts[1]),
            });
        }
        m.parallel[i].pairs = Some(counts[0]);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Mixing and sampling

/// Builds the mixed-domain set: all out-domain pairs plus the in-domain pairs
/// up-sampled to the same size, shuffled with `seed`.
///
/// Up-sampling takes `|out| / |in|` full copies and fills the remainder with
/// a without-replacement sample, so in-domain occurrence counts differ by at
/// most one.
pub fn upsample_mix(
    in_domain: &ParallelDataset,
    out_domain: &ParallelDataset,
    seed: u64,
) -> Result<ParallelDataset, CorpusError> {
    if in_domain.direction() != out_domain.direction() {
        return Err(CorpusError::PairMismatch {
            left: in_domain.direction().to_string(),
            right: out_domain.direction().to_string(),
        });
    }
    if in_domain.is_empty() {
        return Err(CorpusError::EmptyDataset("in-domain data"));
    }
    let (n_in, n_out) = (in_domain.len(), out_domain.len());
    if n_out < n_in {
        return Err(CorpusError::OutSmallerThanIn {
            in_len: n_in,
            out_len: n_out,
        });
    }
    let mut rng = rng_for(seed, &[0x5550]);
    let mut pairs = Vec::with_capacity(2 * n_out);
    pairs.extend(out_domain.pairs.iter().cloned());
    for _ in 0..n_out / n_in {
        pairs.extend(in_domain.pairs.iter().cloned());
    }
    let rem = n_out % n_in;
    pairs.extend(
        rand::seq::index::sample(&mut rng, n_in, rem)
            .into_iter()
            .map(|i| in_domain.pairs[i].clone()),
    );
    pairs.shuffle(&mut rng);
    Ok(ParallelDataset {
        src_lang: in_domain.src_lang.clone(),
        tgt_lang: in_domain.tgt_lang.clone(),
        domain: DomainTag::Mixed,
        pairs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { temperature: 1.5 }
    }
}

/// Temperature-scaled dataset weights `q_i ∝ (n_i / Σn)^(1/T)`.
pub fn temperature_weights(sizes: &[u64], cfg: &SamplingConfig) -> Result<Vec<f64>, CorpusError> {
    if sizes.is_empty() {
        return Err(CorpusError::Sampling("no dataset sizes".into()));
    }
    if sizes.contains(&0) {
        return Err(CorpusError::Sampling("dataset sizes must be positive".into()));
    }
    if !(cfg.temperature > 0.0 && cfg.temperature.is_finite()) {
        return Err(CorpusError::Sampling(format!(
            "temperature must be positive, got {}",
            cfg.temperature
        )));
    }
    let total: f64 = sizes.iter().map(|&s| s as f64).sum();
    if cfg.temperature == 1.0 {
        return Ok(sizes.iter().map(|&s| s as f64 / total).collect());
    }
    let scaled: Vec<f64> = sizes
        .iter()
        .map(|&s| (s as f64 / total).powf(1.0 / cfg.temperature))
        .collect();
    let z: f64 = scaled.iter().sum();
    Ok(scaled.into_iter().map(|q| q / z).collect())
}

/// Draws a dataset index with probability `weights[i]`.
pub fn sample_batch_language(weights: &[f64], rng: &mut Rng) -> usize {
    debug_assert!(!weights.is_empty());
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // Rounding left `u` above the running sum; fall back to the last
    // index with positive weight.
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// A sampler that owns its random stream.
#[derive(Debug, Clone)]
pub struct LanguageSampler {
    weights: Vec<f64>,
    rng: Rng,
}

impl LanguageSampler {
    pub fn new(sizes: &[u64], cfg: &SamplingConfig, seed: u64) -> Result<Self, CorpusError> {
        Ok(Self {
            weights: temperature_weights(sizes, cfg)?,
            rng: rng_for(seed, &[0x7e37]),
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn next_index(&mut self) -> usize {
        sample_batch_language(&self.weights, &mut self.rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lc(s: &str) -> LangCode {
        LangCode::new(s).unwrap()
    }

    fn para(n: usize, tag: &str, domain: DomainTag) -> ParallelDataset {
        let pairs = (0..n).map(|i| (format!("{tag} s{i}"), format!("{tag} t{i}"))).collect();
        ParallelDataset::new(lc("si"), lc("en"), domain, pairs).unwrap()
    }

    fn in_counts(mixed: &ParallelDataset, n_in: usize) -> Vec<usize> {
        (0..n_in)
            .map(|i| {
                let key = format!("in s{i}");
                mixed.pairs.iter().filter(|(s, _)| *s == key).count()
            })
            .collect()
    }

    #[test]
    fn clean_examples() {
        let rules = CleanRules::default();
        assert_eq!(
            clean(&["12/03/2020", "The act is amended."], &rules),
            vec!["The act is amended."]
        );
        assert!(clean::<&str>(&[], &rules).is_empty());
        assert_eq!(
            clean(&["...", "—", "Budget 2021 report"], &rules),
            vec!["Budget 2021 report"]
        );
    }

    #[test]
    fn clean_rule_matches_by_hand() {
        // Each line is tagged with the rule expected to reject it, or None.
        let cases: &[(&str, Option<usize>)] = &[
            ("", Some(0)),
            ("   ", Some(0)),
            ("2021", Some(1)),
            ("12-03-2020", Some(1)),
            ("(5) ...", Some(1)),
            ("Rs. 5000", None),
            ("12 March 2020", Some(2)),
            ("12th mar. 2020", Some(2)),
            ("March 12, 2020", Some(3)),
            ("March 12, 2020 was a Monday", None),
            ("ශ්‍රී ලංකා", None),
            ("\u{200D}", Some(1)),
        ];
        let rules: Vec<CleanRules> = DEFAULT_CLEAN_PATTERNS
            .iter()
            .map(|p| CleanRules::from_patterns(&[*p]).unwrap())
            .collect();
        for (line, expected) in cases {
            // A non-empty line must only be hit by the rule it was written for.
            if let Some(k) = expected {
                assert!(
                    line.is_empty() || rules[*k].patterns[0].is_match(line),
                    "{line:?} should match rule {k}"
                );
            }
            assert_eq!(CleanRules::default().rejects(line), expected.is_some(), "{line:?}");
        }
    }

    #[test]
    fn invalid_utf8_names_line() {
        let err = clean_bytes(b"ok\nfine\n\xff\xfe\n", &CleanRules::default()).unwrap_err();
        assert!(matches!(err, CorpusError::InvalidUtf8 { line: 3 }));
    }

    #[test]
    fn split_lines_handles_crlf_and_missing_newline() {
        assert_eq!(split_lines(b"a\r\nb").unwrap(), vec!["a", "b"]);
        assert_eq!(split_lines(b"a\n\nb\n").unwrap(), vec!["a", "", "b"]);
        assert!(split_lines(b"").unwrap().is_empty());
    }

    #[test]
    fn lang_code_rules() {
        assert!(LangCode::new("si").is_ok());
        assert!(LangCode::new("").is_err());
        assert!(LangCode::new("Si").is_err());
        assert_eq!(Direction::parse("si-en").unwrap().to_string(), "si-en");
        assert!(Direction::parse("si-si").is_err());
    }

    #[test]
    fn upsample_examples() {
        let m = upsample_mix(
            &para(3, "in", DomainTag::InDomain),
            &para(10, "out", DomainTag::OutDomain),
            1,
        )
        .unwrap();
        assert_eq!(m.len(), 20);
        assert_eq!(m.domain, DomainTag::Mixed);
        assert_eq!(in_counts(&m, 3).iter().sum::<usize>(), 10);

        let m = upsample_mix(
            &para(5, "in", DomainTag::InDomain),
            &para(5, "out", DomainTag::OutDomain),
            1,
        )
        .unwrap();
        assert_eq!(m.len(), 10);
        assert_eq!(in_counts(&m, 5), vec![1; 5]);

        let m = upsample_mix(
            &para(4, "in", DomainTag::InDomain),
            &para(10, "out", DomainTag::OutDomain),
            7,
        )
        .unwrap();
        let mut counts = in_counts(&m, 4);
        counts.sort_unstable();
        assert_eq!(counts, vec![2, 2, 3, 3]);
    }

    #[test]
    fn upsample_errors() {
        let a = para(3, "in", DomainTag::InDomain);
        let b = para(10, "out", DomainTag::OutDomain).reversed();
        assert!(matches!(upsample_mix(&a, &b, 0), Err(CorpusError::PairMismatch { .. })));
        let mut empty = para(1, "in", DomainTag::InDomain);
        empty.pairs.clear();
        assert!(matches!(
            upsample_mix(&empty, &para(3, "out", DomainTag::OutDomain), 0),
            Err(CorpusError::EmptyDataset(_))
        ));
    }

    #[test]
    fn temperature_examples() {
        let cfg = SamplingConfig::default();
        assert_eq!(temperature_weights(&[50, 50], &cfg).unwrap(), vec![0.5, 0.5]);
        let t1 = SamplingConfig { temperature: 1.0 };
        assert_eq!(temperature_weights(&[3, 1], &t1).unwrap(), vec![3.0 / 4.0, 1.0 / 4.0]);
        // Independent route: x^(2/3) = cbrt(x^2).
        let a = (0.75f64 * 0.75).cbrt();
        let b = (0.25f64 * 0.25).cbrt();
        let w = temperature_weights(&[75, 25], &cfg).unwrap();
        assert!((w[0] - a / (a + b)).abs() < 1e-12);
        assert!((w[0] - 0.6754).abs() < 1e-4 && (w[1] - 0.3246).abs() < 1e-4);
        assert!(temperature_weights(&[], &cfg).is_err());
        assert!(temperature_weights(&[3, 0], &cfg).is_err());
    }

    #[test]
    fn single_weight_always_zero() {
        let mut rng = rng_for(3, &[]);
        assert!((0..1000).all(|_| sample_batch_language(&[1.0], &mut rng) == 0));
    }

    #[test]
    fn sampler_frequencies_balanced() {
        let mut s = LanguageSampler::new(&[50, 50], &SamplingConfig::default(), 11).unwrap();
        let n = 100_000;
        let ones = (0..n).filter(|_| s.next_index() == 1).count();
        let f = ones as f64 / n as f64;
        assert!((0.49..=0.51).contains(&f), "{f}");
    }

    proptest! {
        #[test]
        fn clean_idempotent_and_order_preserving(lines in prop::collection::vec("[a-c0-9 ./-]{0,6}", 0..30)) {
            let rules = CleanRules::default();
            let once = clean(&lines, &rules);
            prop_assert_eq!(clean(&once, &rules), once.clone());
            // Survivors appear in the input in the same relative order.
            let mut it = lines.iter();
            for kept in &once {
                prop_assert!(it.any(|l| l == kept));
            }
        }

        #[test]
        fn upsample_sizes_and_balance(n_in in 1usize..12, extra in 0usize..30, seed in any::<u64>()) {
            let n_out = n_in + extra;
            let m = upsample_mix(&para(n_in, "in", DomainTag::InDomain), &para(n_out, "out", DomainTag::OutDomain), seed).unwrap();
            prop_assert_eq!(m.len(), 2 * n_out);
            let c = in_counts(&m, n_in);
            prop_assert!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1);
            let again = upsample_mix(&para(n_in, "in", DomainTag::InDomain), &para(n_out, "out", DomainTag::OutDomain), seed).unwrap();
            prop_assert_eq!(m, again);
        }

        #[test]
        fn temperature_scale_invariant(sizes in prop::collection::vec(1u64..1000, 1..6), k in 1u64..50, t in 0.2f64..5.0) {
            let cfg = SamplingConfig { temperature: t };
            let a = temperature_weights(&sizes, &cfg).unwrap();
            let scaled: Vec<u64> = sizes.iter().map(|s| s * k).collect();
            let b = temperature_weights(&scaled, &cfg).unwrap();
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn temperature_flattens(sizes in prop::collection::vec(1u64..1000, 2..6), t in 0.2f64..5.0, dt in 0.01f64..3.0) {
            prop_assume!(sizes.iter().any(|&s| s != sizes[0]));
            let lo = temperature_weights(&sizes, &SamplingConfig { temperature: t }).unwrap();
            let hi = temperature_weights(&sizes, &SamplingConfig { temperature: t + dt }).unwrap();
            let max = |v: &[f64]| v.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert!(max(&hi) <= max(&lo) + 1e-15);
        }
    }
}
