//! Pretrained word-vector tables and the label embedding matrix.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::LabelVocabulary;
use crate::error::{Error, Result};
use crate::params::{name_rng, normal};
use crate::tape::Matrix;

/// Standard deviation of random rows for labels with no known token.
pub const OOV_STD: f64 = 0.1;

/// Word vectors in the plain-text `token v1 v2 … vd` format. An optional
/// `<count> <dim>` header line is accepted.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVectors {
    words: Vec<String>,
    index: HashMap<String, usize>,
    matrix: Matrix,
}

impl WordVectors {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut words = Vec::new();
        let mut index = HashMap::new();
        let mut values = Vec::new();
        let mut dim: Option<usize> = None;
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let nums: Vec<&str> = parts.collect();
            if i == 0 && nums.len() == 1 && word.parse::<usize>().is_ok() && nums[0].parse::<usize>().is_ok() {
                continue;
            }
            let row: Vec<f64> = nums
                .iter()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("word vectors line {}: {e}", i + 1)))?;
            match dim {
                None if row.is_empty() => {
                    return Err(Error::Config(format!("word vectors line {}: no values", i + 1)))
                }
                None => dim = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(Error::Config(format!(
                        "word vectors line {}: {} values, expected {d}",
                        i + 1,
                        row.len()
                    )))
                }
                _ => {}
            }
            if index.contains_key(word) {
                continue;
            }
            index.insert(word.to_string(), words.len());
            words.push(word.to_string());
            values.extend(row);
        }
        let dim = dim.ok_or_else(|| Error::Config("word vector table is empty".into()))?;
        let matrix = Matrix::from_shape_vec((words.len(), dim), values).expect("rows of equal width");
        Ok(WordVectors { words, index, matrix })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read word vectors {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn get(&self, word: &str) -> Option<ndarray::ArrayView1<'_, f64>> {
        self.index.get(word).map(|&i| self.matrix.row(i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelProvenance {
    Pretrained,
    Averaged,
    RandomInit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbeddingMatrix {
    pub matrix: Matrix,
    pub provenance: Vec<LabelProvenance>,
}

/// Lower-cases and splits on whitespace, `.`, `-` and `_`.
pub fn label_tokens(name: &str) -> Vec<String> {
    name.to_lowercase()
        .split(|c: char| c.is_whitespace() || matches!(c, '.' | '-' | '_'))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn random_row(dim: usize, seed: u64, name: &str) -> Matrix {
    normal(1, dim, OOV_STD, &mut name_rng(seed, &format!("label:{name}")))
}

/// One row per label in vocabulary order: the label's own vector when the
/// lower-cased name is in the table, else the mean of its known tokens, else
/// a random row seeded by `(seed, label name)`.
pub fn embed_labels(vocab: &LabelVocabulary, vectors: &WordVectors, seed: u64) -> LabelEmbeddingMatrix {
    let dim = vectors.dim();
    let mut matrix = Matrix::zeros((vocab.len(), dim));
    let mut provenance = Vec::with_capacity(vocab.len());
    for (i, name) in vocab.names().iter().enumerate() {
        let mut row = matrix.row_mut(i);
        if let Some(v) = vectors.get(&name.to_lowercase()) {
            row.assign(&v);
            provenance.push(LabelProvenance::Pretrained);
            continue;
        }
        let known: Vec<_> = label_tokens(name).iter().filter_map(|t| vectors.get(t)).collect();
        if known.is_empty() {
            row.assign(&random_row(dim, seed, name).row(0));
            provenance.push(LabelProvenance::RandomInit);
        } else {
            for v in &known {
                row += v;
            }
            row /= known.len() as f64;
            provenance.push(LabelProvenance::Averaged);
        }
    }
    LabelEmbeddingMatrix { matrix, provenance }
}

/// Every row random, as if no label had a pretrained vector.
pub fn random_label_embeddings(vocab: &LabelVocabulary, dim: usize, seed: u64) -> LabelEmbeddingMatrix {
    let mut matrix = Matrix::zeros((vocab.len(), dim));
    for (i, name) in vocab.names().iter().enumerate() {
        matrix.row_mut(i).assign(&random_row(dim, seed, name).row(0));
    }
    LabelEmbeddingMatrix {
        matrix,
        provenance: vec![LabelProvenance::RandomInit; vocab.len()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE: &str = "economy 0.5 -1.0 2.0\nforeign 1.0 2.0 3.0\nexchange 3.0 -2.0 0.5\ncs 9 9 9\n";

    fn vocab(names: &[&str]) -> LabelVocabulary {
        LabelVocabulary::new(names.iter().copied()).unwrap()
    }

    #[test]
    fn exact_match_uses_table_row() {
        let wv = WordVectors::from_text(TABLE).unwrap();
        let e = embed_labels(&vocab(&["Economy"]), &wv, 1);
        assert_eq!(e.matrix.row(0).to_vec(), vec![0.5, -1.0, 2.0]);
        assert_eq!(e.provenance, vec![LabelProvenance::Pretrained]);
    }

    #[test]
    fn multi_token_label_is_token_mean() {
        let wv = WordVectors::from_text(TABLE).unwrap();
        let e = embed_labels(&vocab(&["foreign exchange"]), &wv, 1);
        // (1+3)/2, (2-2)/2, (3+0.5)/2
        assert_eq!(e.matrix.row(0).to_vec(), vec![2.0, 0.0, 1.75]);
        assert_eq!(e.provenance, vec![LabelProvenance::Averaged]);
    }

    #[test]
    fn oov_label_is_seeded_random() {
        let wv = WordVectors::from_text("economy 1 2 3\n").unwrap();
        let v = vocab(&["cs.sy", "economy"]);
        let a = embed_labels(&v, &wv, 42);
        let b = embed_labels(&v, &wv, 42);
        assert_eq!(a.matrix, b.matrix);
        assert_eq!(a.provenance[0], LabelProvenance::RandomInit);
        assert_ne!(a.matrix.row(0).to_vec(), vec![0.0; 3]);
        let c = embed_labels(&v, &wv, 43);
        assert_ne!(a.matrix.row(0), c.matrix.row(0));
    }

    #[test]
    fn rows_follow_vocabulary_permutation() {
        let wv = WordVectors::from_text(TABLE).unwrap();
        let v = vocab(&["economy", "cs.sy", "foreign exchange", "zzz"]);
        let base = embed_labels(&v, &wv, 5);
        let perm = [2, 0, 3, 1];
        let permuted = embed_labels(&v.permuted(&perm), &wv, 5);
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(permuted.matrix.row(i), base.matrix.row(p));
        }
    }

    #[test]
    fn header_line_is_skipped_and_bad_rows_rejected() {
        let wv = WordVectors::from_text("2 2\na 1 2\nb 3 4\n").unwrap();
        assert_eq!((wv.len(), wv.dim()), (2, 2));
        assert!(WordVectors::from_text("a 1 2\nb 3\n").is_err());
        assert!(WordVectors::from_text("").is_err());
        assert!(matches!(WordVectors::load(Path::new("/nonexistent/vectors.txt")), Err(Error::Config(_))));
    }

    #[test]
    fn label_tokens_split_code_like_names() {
        assert_eq!(label_tokens("cs.SY"), vec!["cs", "sy"]);
        assert_eq!(label_tokens("money-fx_x y"), vec!["money", "fx", "x", "y"]);
    }
}
