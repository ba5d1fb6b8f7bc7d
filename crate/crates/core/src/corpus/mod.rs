//! Multi-label corpora: documents, the label vocabulary, the JSON-lines
//! interchange format and the train/validation split.
//!
//! A preprocessed dataset directory contains
//!
//! * `train.jsonl`, `test.jsonl`: one `{"id", "text", "labels": [..]}` object per line;
//! * `labels.json`: the manifest `{"format", "labels": [..], "n_train", "n_test"}`.
//!   The order of `labels` fixes the label indices `0..M`.

pub mod ingest;
pub mod tokenizer;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::{read_to_string, write_file};
use crate::error::{Error, Result};

pub use tokenizer::{make_example, TokenizedExample, Tokenizer};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const LABELS_FILE: &str = "labels.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub labels: BTreeSet<String>,
}

impl Document {
    pub fn new<I, S>(id: impl Into<String>, text: impl Into<String>, labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Document {
            id: id.into(),
            text: text.into(),
            labels: labels.into_iter().map(Into::into).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Rcv1v2,
    Aapd,
    Reuters21578,
    /// Small hand-built corpora used for tests and demos.
    Toy,
}

impl DatasetFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetFormat::Rcv1v2 => "rcv1v2",
            DatasetFormat::Aapd => "aapd",
            DatasetFormat::Reuters21578 => "reuters21578",
            DatasetFormat::Toy => "toy",
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "rcv1v2" => Ok(DatasetFormat::Rcv1v2),
            "aapd" => Ok(DatasetFormat::Aapd),
            "reuters21578" => Ok(DatasetFormat::Reuters21578),
            "toy" => Ok(DatasetFormat::Toy),
            _ => Err(Error::Argument(format!("unknown dataset format `{s}`"))),
        }
    }
}

/// Ordered, fixed set of label names with a name→index map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelVocabulary {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate label `{n}`")));
            }
        }
        Ok(LabelVocabulary { names, index })
    }

    /// Sorted vocabulary over every label seen in `docs`.
    pub fn from_documents<'a>(docs: impl IntoIterator<Item = &'a Document>) -> Self {
        let set: BTreeSet<&str> = docs
            .into_iter()
            .flat_map(|d| d.labels.iter().map(String::as_str))
            .collect();
        Self::new(set).expect("set has no duplicates")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Returns a vocabulary whose position `i` holds `self.names[perm[i]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self::new(perm.iter().map(|&p| self.names[p].clone())).expect("permutation of unique names")
    }
}

/// `y[i] = 1` iff label `i` is in `labels`.
pub fn binarize_labels<'a, I>(labels: I, vocab: &LabelVocabulary) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = &'a String>,
{
    let mut y = vec![0u8; vocab.len()];
    for l in labels {
        let i = vocab.index_of(l).ok_or_else(|| Error::UnknownLabel(l.clone()))?;
        y[i] = 1;
    }
    Ok(y)
}

/// Inverse of [`binarize_labels`].
pub fn decode_labels(y: &[u8], vocab: &LabelVocabulary) -> BTreeSet<String> {
    y.iter()
        .enumerate()
        .filter(|(_, &v)| v != 0)
        .map(|(i, _)| vocab.name(i).to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelManifest {
    pub format: DatasetFormat,
    pub labels: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub format: DatasetFormat,
    pub train: Vec<Document>,
    pub test: Vec<Document>,
    pub vocab: LabelVocabulary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    /// Distinct lower-cased word tokens over train and test.
    pub words: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub labels: usize,
}

impl Dataset {
    pub fn stats(&self) -> DatasetStats {
        let words: BTreeSet<String> = self
            .train
            .iter()
            .chain(&self.test)
            .flat_map(|d| tokenizer::tokenize(&d.text))
            .filter(|t| t.chars().any(char::is_alphanumeric))
            .collect();
        DatasetStats {
            words: words.len(),
            n_train: self.train.len(),
            n_test: self.test.len(),
            labels: self.vocab.len(),
        }
    }

    pub fn find(&self, id: &str) -> Option<&Document> {
        self.train.iter().chain(&self.test).find(|d| d.id == id)
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>10} {:>10} {:>10} {:>6}", "W", "N_train", "N_test", "M")?;
        write!(f, "{:>10} {:>10} {:>10} {:>6}", self.words, self.n_train, self.n_test, self.labels)
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Document>> {
    let text = read_to_string(path)?;
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if doc.text.trim().is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("document `{}` has empty text", doc.id),
            });
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_jsonl(path: &Path, docs: &[Document]) -> Result<()> {
    let mut out = String::new();
    for d in docs {
        out.push_str(&serde_json::to_string(d)?);
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    write_jsonl(&dir.join(TRAIN_FILE), &ds.train)?;
    write_jsonl(&dir.join(TEST_FILE), &ds.test)?;
    let manifest = LabelManifest {
        format: ds.format,
        labels: ds.vocab.names().to_vec(),
        n_train: ds.train.len(),
        n_test: ds.test.len(),
    };
    write_file(&dir.join(LABELS_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

/// Loads a preprocessed dataset directory and checks it against its manifest.
pub fn load_dataset(dir: &Path, format: DatasetFormat) -> Result<Dataset> {
    let manifest_path = dir.join(LABELS_FILE);
    let manifest: LabelManifest = serde_json::from_str(&read_to_string(&manifest_path)?)
        .map_err(|e| Error::Parse {
            path: manifest_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
    if manifest.format != format {
        return Err(Error::Config(format!(
            "{} declares format {}, expected {format}",
            manifest_path.display(),
            manifest.format
        )));
    }
    let vocab = LabelVocabulary::new(manifest.labels)?;
    let train = read_jsonl(&dir.join(TRAIN_FILE))?;
    let test = read_jsonl(&dir.join(TEST_FILE))?;
    for (what, docs, expected) in [("train", &train, manifest.n_train), ("test", &test, manifest.n_test)] {
        if docs.len() != expected {
            return Err(Error::Config(format!(
                "{what} split has {} documents, manifest says {expected}",
                docs.len()
            )));
        }
        for d in docs.iter() {
            if let Some(l) = d.labels.iter().find(|l| vocab.index_of(l).is_none()) {
                return Err(Error::UnknownLabel(l.clone()));
            }
        }
    }
    let before = train.len();
    let train: Vec<Document> = train.into_iter().filter(|d| !d.labels.is_empty()).collect();
    if train.len() < before {
        log::warn!("dropped {} train documents without labels", before - train.len());
    }
    Ok(Dataset {
        format,
        train,
        test,
        vocab,
    })
}

#[derive(Debug, Clone)]
pub struct ValidationSplit {
    pub train: Vec<Document>,
    pub valid: Vec<Document>,
    /// Fraction of labels present in `train` that also occur in `valid`.
    pub valid_label_coverage: f64,
}

/// Deterministic random hold-out of `round(fraction · n)` documents. Both
/// partitions keep the input order.
pub fn split_validation(train: &[Document], fraction: f64, seed: u64) -> Result<ValidationSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Argument(format!("validation fraction {fraction} not in (0, 1)")));
    }
    let n = train.len();
    let n_valid = (fraction * n as f64).round() as usize;
    if n_valid == 0 || n_valid == n {
        return Err(Error::Argument(format!(
            "fraction {fraction} of {n} documents leaves an empty partition"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_valid = vec![false; n];
    for &i in &order[..n_valid] {
        is_valid[i] = true;
    }
    let (valid, rest): (Vec<_>, Vec<_>) = train
        .iter()
        .cloned()
        .zip(is_valid)
        .partition(|(_, v)| *v);
    let train: Vec<Document> = rest.into_iter().map(|(d, _)| d).collect();
    let valid: Vec<Document> = valid.into_iter().map(|(d, _)| d).collect();

    let train_labels: BTreeSet<&String> = train.iter().flat_map(|d| &d.labels).collect();
    let valid_labels: BTreeSet<&String> = valid.iter().flat_map(|d| &d.labels).collect();
    let covered = train_labels.intersection(&valid_labels).count();
    let valid_label_coverage = if train_labels.is_empty() {
        0.0
    } else {
        covered as f64 / train_labels.len() as f64
    };
    Ok(ValidationSplit {
        train,
        valid,
        valid_label_coverage,
    })
}

/// Label frequencies over a document set, in vocabulary order.
pub fn label_counts(docs: &[Document], vocab: &LabelVocabulary) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<String, usize> = vocab.names().iter().map(|n| (n.clone(), 0)).collect();
    for d in docs {
        for l in &d.labels {
            if let Some(c) = counts.get_mut(l) {
                *c += 1;
            }
        }
    }
    counts
}
