//! Document ingestion, time slicing and train/held-out splitting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::distrib::stream_rng;
use crate::error::CorpusError;

/// A bag-of-words document. `counts` holds `(word, count)` pairs sorted by word, counts ≥ 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub timestamp: i64,
    pub counts: Vec<(u32, u32)>,
}

impl Document {
    /// Builds a document from a token sequence (with repetition).
    pub fn from_tokens(id: impl Into<String>, timestamp: i64, tokens: &[u32]) -> Self {
        let mut map = BTreeMap::new();
        for &t in tokens {
            *map.entry(t).or_insert(0u32) += 1;
        }
        Document {
            id: id.into(),
            timestamp,
            counts: map.into_iter().collect(),
        }
    }

    pub fn from_counts(id: impl Into<String>, timestamp: i64, counts: Vec<(u32, u32)>) -> Self {
        let mut map = BTreeMap::new();
        for (w, c) in counts {
            if c > 0 {
                *map.entry(w).or_insert(0u32) += c;
            }
        }
        Document {
            id: id.into(),
            timestamp,
            counts: map.into_iter().collect(),
        }
    }

    /// Total number of tokens.
    pub fn len(&self) -> u64 {
        self.counts.iter().map(|&(_, c)| c as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Documents partitioned into chronologically ordered slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlicedCorpus {
    pub vocabulary: Vec<String>,
    pub slices: Vec<Vec<Document>>,
    /// `T + 1` boundaries; slice `t` covers `[boundaries[t], boundaries[t + 1])`,
    /// the last slice also includes its upper bound.
    pub boundaries: Vec<f64>,
}

impl SlicedCorpus {
    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn num_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn num_documents(&self) -> usize {
        self.slices.iter().map(Vec::len).sum()
    }

    pub fn num_tokens(&self) -> u64 {
        self.slices.iter().flatten().map(Document::len).sum()
    }

    /// Indices of empty slices.
    pub fn empty_slices(&self) -> Vec<usize> {
        (0..self.slices.len())
            .filter(|&t| self.slices[t].is_empty())
            .collect()
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let v = self.vocabulary.len();
        if v == 0 || self.slices.is_empty() {
            return Err(CorpusError::InvalidArgument("empty vocabulary or no slices".into()));
        }
        if self.boundaries.len() != self.slices.len() + 1 {
            return Err(CorpusError::InvalidArgument("boundary count must be T + 1".into()));
        }
        for (t, docs) in self.slices.iter().enumerate() {
            for d in docs {
                if d.counts.is_empty() {
                    return Err(CorpusError::InvalidArgument(format!("document {} is empty", d.id)));
                }
                if d.counts.iter().any(|&(w, c)| w as usize >= v || c == 0) {
                    return Err(CorpusError::InvalidArgument(format!(
                        "document {} has an out-of-range word or zero count",
                        d.id
                    )));
                }
                let ts = d.timestamp as f64;
                let (lo, hi) = (self.boundaries[t], self.boundaries[t + 1]);
                let last = t + 1 == self.slices.len();
                if ts < lo || ts > hi || (!last && ts >= hi) {
                    return Err(CorpusError::InvalidArgument(format!(
                        "document {} at {} falls outside slice {}",
                        d.id, d.timestamp, t
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Train and held-out parts sharing vocabulary and boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitCorpus {
    pub train: SlicedCorpus,
    pub heldout: SlicedCorpus,
    /// Fraction kept for training.
    pub ratio: f64,
    /// Slices too small to split; they went entirely to `train`.
    pub unsplit_slices: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputFormat {
    Jsonl,
    Tsv,
}

impl InputFormat {
    /// Guess from the file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("txt") => InputFormat::Tsv,
            _ => InputFormat::Jsonl,
        }
    }
}

/// How to cut the time axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SliceSpec {
    Count(usize),
    /// Slice width in seconds.
    Duration(i64),
}

#[derive(Debug, Clone, Default)]
pub struct PreprocessConfig {
    pub stopwords: HashSet<String>,
    /// Minimum number of documents a term must appear in.
    pub min_df: usize,
    /// Maximum fraction of documents a term may appear in.
    pub max_df: f64,
    pub min_token_len: usize,
}

impl PreprocessConfig {
    pub fn new() -> Self {
        PreprocessConfig {
            stopwords: HashSet::new(),
            min_df: 1,
            max_df: 1.0,
            min_token_len: 1,
        }
    }

    /// Reads a stopword list, one term per line (`#` starts a comment).
    pub fn load_stopwords(&mut self, path: &Path) -> Result<(), CorpusError> {
        let text = fs::read_to_string(path)?;
        for line in text.lines() {
            let w = line.trim();
            if !w.is_empty() && !w.starts_with('#') {
                self.stopwords.insert(w.to_lowercase());
            }
        }
        Ok(())
    }
}

/// One raw input record.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub timestamp: i64,
    pub text: String,
}

#[derive(Deserialize)]
struct JsonRecord {
    id: serde_json::Value,
    timestamp: i64,
    text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub records: usize,
    /// Documents left empty by preprocessing.
    pub dropped: usize,
    pub empty_slices: Vec<usize>,
}

pub fn read_records(path: &Path, format: InputFormat) -> Result<Vec<RawRecord>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: lineno,
            reason,
        };
        let rec = match format {
            InputFormat::Jsonl => {
                let r: JsonRecord =
                    serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
                let id = match r.id {
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                };
                RawRecord {
                    id,
                    timestamp: r.timestamp,
                    text: r.text,
                }
            }
            InputFormat::Tsv => {
                let mut parts = line.splitn(3, '\t');
                let (id, ts, text) = match (parts.next(), parts.next(), parts.next()) {
                    (Some(a), Some(b), Some(c)) => (a, b, c),
                    _ => return Err(malformed("expected id<TAB>timestamp<TAB>text".into())),
                };
                let timestamp = ts
                    .trim()
                    .parse::<i64>()
                    .map_err(|e| malformed(format!("timestamp: {e}")))?;
                RawRecord {
                    id: id.to_string(),
                    timestamp,
                    text: text.to_string(),
                }
            }
        };
        out.push(rec);
    }
    Ok(out)
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Builds the vocabulary and maps records to documents. Returns the vocabulary,
/// the surviving documents and the number dropped as empty.
pub fn build_documents(
    records: &[RawRecord],
    config: &PreprocessConfig,
) -> Result<(Vec<String>, Vec<Document>, usize), CorpusError> {
    if !(config.max_df > 0.0 && config.max_df <= 1.0) {
        return Err(CorpusError::InvalidArgument(format!(
            "max_df must lie in (0, 1], got {}",
            config.max_df
        )));
    }
    let tokenized: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            tokenize(&r.text)
                .into_iter()
                .filter(|t| t.chars().count() >= config.min_token_len)
                .filter(|t| !config.stopwords.contains(t))
                .collect()
        })
        .collect();

    let mut df: HashMap<&str, usize> = HashMap::new();
    for toks in &tokenized {
        let uniq: HashSet<&str> = toks.iter().map(String::as_str).collect();
        for t in uniq {
            *df.entry(t).or_insert(0) += 1;
        }
    }
    let n_docs = records.len().max(1) as f64;
    let mut vocabulary: Vec<String> = df
        .iter()
        .filter(|(_, &n)| n >= config.min_df && n as f64 / n_docs <= config.max_df)
        .map(|(t, _)| t.to_string())
        .collect();
    vocabulary.sort();
    let index: HashMap<&str, u32> = vocabulary
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i as u32))
        .collect();

    let mut docs = Vec::with_capacity(records.len());
    let mut dropped = 0;
    for (rec, toks) in records.iter().zip(&tokenized) {
        let ids: Vec<u32> = toks.iter().filter_map(|t| index.get(t.as_str()).copied()).collect();
        if ids.is_empty() {
            dropped += 1;
            continue;
        }
        docs.push(Document::from_tokens(rec.id.clone(), rec.timestamp, &ids));
    }
    if dropped > 0 {
        warn!("{dropped} documents dropped as empty after preprocessing");
    }
    if docs.is_empty() {
        return Err(CorpusError::NoDocuments);
    }
    Ok((vocabulary, docs, dropped))
}

/// Reads, preprocesses and slices a raw document file.
pub fn ingest(
    path: &Path,
    format: InputFormat,
    config: &PreprocessConfig,
    spec: SliceSpec,
) -> Result<(SlicedCorpus, IngestReport), CorpusError> {
    let records = read_records(path, format)?;
    let (vocabulary, docs, dropped) = build_documents(&records, config)?;
    let corpus = slice(vocabulary, docs, spec)?;
    let empty = corpus.empty_slices();
    if !empty.is_empty() {
        warn!("empty slices: {empty:?}");
    }
    Ok((
        corpus,
        IngestReport {
            records: records.len(),
            dropped,
            empty_slices: empty,
        },
    ))
}

/// Cuts documents into equidistant slices between the earliest and latest timestamp.
pub fn slice(
    vocabulary: Vec<String>,
    mut docs: Vec<Document>,
    spec: SliceSpec,
) -> Result<SlicedCorpus, CorpusError> {
    if docs.is_empty() {
        return Err(CorpusError::NoDocuments);
    }
    if vocabulary.is_empty() {
        return Err(CorpusError::InvalidArgument("empty vocabulary".into()));
    }
    docs.sort_by_key(|d| d.timestamp);
    let min = docs.first().unwrap().timestamp;
    let max = docs.last().unwrap().timestamp;
    let span = (max - min) as f64;

    let (t, width) = match spec {
        SliceSpec::Count(0) => {
            return Err(CorpusError::InvalidArgument("slice count must be ≥ 1".into()))
        }
        SliceSpec::Count(t) => {
            if max == min && t > 1 {
                return Err(CorpusError::ZeroWidthRange(t));
            }
            (t, if t == 1 { span.max(0.0) } else { span / t as f64 })
        }
        SliceSpec::Duration(d) if d <= 0 => {
            return Err(CorpusError::InvalidArgument("slice duration must be positive".into()))
        }
        SliceSpec::Duration(d) => (((max - min) / d) as usize + 1, d as f64),
    };

    let boundaries: Vec<f64> = (0..=t)
        .map(|i| if i == t && matches!(spec, SliceSpec::Count(_)) { max as f64 } else { min as f64 + width * i as f64 })
        .collect();
    let mut slices: Vec<Vec<Document>> = vec![Vec::new(); t];
    for d in docs {
        let idx = if width > 0.0 {
            (((d.timestamp - min) as f64 / width).floor() as usize).min(t - 1)
        } else {
            0
        };
        slices[idx].push(d);
    }
    Ok(SlicedCorpus {
        vocabulary,
        slices,
        boundaries,
    })
}

/// Per-slice stratified random split: `round(p · n)` documents stay in training.
pub fn split(corpus: &SlicedCorpus, p: f64, seed: u64) -> Result<SplitCorpus, CorpusError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(CorpusError::InvalidArgument(format!("split ratio must lie in (0, 1), got {p}")));
    }
    let mut train = Vec::with_capacity(corpus.slices.len());
    let mut heldout = Vec::with_capacity(corpus.slices.len());
    let mut unsplit = Vec::new();
    for (t, docs) in corpus.slices.iter().enumerate() {
        let n = docs.len();
        if n < 2 {
            if n == 1 {
                warn!("slice {t} has a single document; kept entirely for training");
            }
            unsplit.push(t);
            train.push(docs.clone());
            heldout.push(Vec::new());
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(seed, t as u64));
        let n_train = ((p * n as f64).round() as usize).clamp(1, n - 1);
        let mut keep: Vec<usize> = order[..n_train].to_vec();
        let mut hold: Vec<usize> = order[n_train..].to_vec();
        keep.sort_unstable();
        hold.sort_unstable();
        train.push(keep.into_iter().map(|i| docs[i].clone()).collect());
        heldout.push(hold.into_iter().map(|i| docs[i].clone()).collect());
    }
    let part = |slices| SlicedCorpus {
        vocabulary: corpus.vocabulary.clone(),
        slices,
        boundaries: corpus.boundaries.clone(),
    };
    Ok(SplitCorpus {
        train: part(train),
        heldout: part(heldout),
        ratio: p,
        unsplit_slices: unsplit,
    })
}

#[derive(Serialize, Deserialize)]
struct ExportRecord {
    id: String,
    timestamp: i64,
    counts: Vec<(u32, u32)>,
}

#[derive(Serialize, Deserialize)]
struct ExportMeta {
    num_slices: usize,
    boundaries: Vec<f64>,
}

/// Writes `vocab.txt`, `meta.json` and `slices/<t>.jsonl` under `dir`.
pub fn export(corpus: &SlicedCorpus, dir: &Path) -> Result<(), CorpusError> {
    fs::create_dir_all(dir.join("slices"))?;
    let mut vocab = BufWriter::new(File::create(dir.join("vocab.txt"))?);
    for term in &corpus.vocabulary {
        writeln!(vocab, "{term}")?;
    }
    vocab.flush()?;
    let meta = ExportMeta {
        num_slices: corpus.slices.len(),
        boundaries: corpus.boundaries.clone(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    for (t, docs) in corpus.slices.iter().enumerate() {
        let mut f = BufWriter::new(File::create(dir.join("slices").join(format!("{t}.jsonl")))?);
        for d in docs {
            let rec = ExportRecord {
                id: d.id.clone(),
                timestamp: d.timestamp,
                counts: d.counts.clone(),
            };
            serde_json::to_writer(&mut f, &rec)?;
            writeln!(f)?;
        }
        f.flush()?;
    }
    Ok(())
}

/// Reads a directory written by [`export`].
pub fn load(dir: &Path) -> Result<SlicedCorpus, CorpusError> {
    let vocab_path = dir.join("vocab.txt");
    if !vocab_path.exists() {
        return Err(CorpusError::Layout(dir.to_path_buf(), "missing vocab.txt".into()));
    }
    let vocabulary: Vec<String> = fs::read_to_string(&vocab_path)?
        .lines()
        .map(str::to_string)
        .collect();
    let meta: Option<ExportMeta> = match fs::read_to_string(dir.join("meta.json")) {
        Ok(s) => Some(serde_json::from_str(&s)?),
        Err(_) => None,
    };
    let num_slices = match &meta {
        Some(m) => m.num_slices,
        None => {
            let mut t = 0;
            while dir.join("slices").join(format!("{t}.jsonl")).exists() {
                t += 1;
            }
            t
        }
    };
    if num_slices == 0 {
        return Err(CorpusError::Layout(dir.to_path_buf(), "no slices".into()));
    }
    let mut slices = Vec::with_capacity(num_slices);
    for t in 0..num_slices {
        let path = dir.join("slices").join(format!("{t}.jsonl"));
        let reader = BufReader::new(File::open(&path)?);
        let mut docs = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            #[derive(Deserialize)]
            struct Rec {
                id: String,
                #[serde(default)]
                timestamp: Option<i64>,
                counts: Vec<(u32, u32)>,
            }
            let rec: Rec = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                path: path.clone(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            docs.push(Document::from_counts(rec.id, rec.timestamp.unwrap_or(t as i64), rec.counts));
        }
        slices.push(docs);
    }
    let boundaries = meta
        .map(|m| m.boundaries)
        .unwrap_or_else(|| (0..=num_slices).map(|t| t as f64).collect());
    let corpus = SlicedCorpus {
        vocabulary,
        slices,
        boundaries,
    };
    corpus.validate()?;
    Ok(corpus)
}
