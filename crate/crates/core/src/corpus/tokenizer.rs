//! Word-level tokenizer shared by the corpus pipeline and the contextual encoder.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{binarize_labels, Document, LabelVocabulary};
use crate::bundle::{read_to_string, write_file};
use crate::error::{Error, Result};
use crate::knowledge::KnowledgeRecord;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
/// Reserved token placed between knowledge passages.
pub const SEP: &str = "[SEP]";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const SEP_ID: usize = 2;

/// Splits lower-cased text into runs of alphanumerics and single punctuation
/// characters. The literal `[SEP]` is kept as one token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for (i, piece) in text.split(SEP).enumerate() {
        if i > 0 {
            out.push(SEP.to_string());
        }
        let mut word = String::new();
        for c in piece.chars() {
            if c.is_alphanumeric() {
                word.extend(c.to_lowercase());
                continue;
            }
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                out.extend(std::iter::once(c.to_lowercase().collect()));
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

/// Fixed token vocabulary. Ids 0, 1, 2 are `[PAD]`, `[UNK]` and `[SEP]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tokenizer {
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = vec![PAD.into(), UNK.into(), SEP.into()];
        let mut index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for w in words {
            let w = w.into();
            if !index.contains_key(&w) {
                index.insert(w.clone(), tokens.len());
                tokens.push(w);
            }
        }
        Tokenizer { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// One token per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        write_file(path, out.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let tokens: Vec<&str> = text.lines().collect();
        if tokens.get(..3) != Some(&[PAD, UNK, SEP][..]) {
            return Err(Error::Config(format!(
                "{} does not start with the reserved tokens",
                path.display()
            )));
        }
        Ok(Tokenizer::new(tokens.into_iter().skip(3)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedExample {
    pub id: String,
    pub doc_ids: Vec<usize>,
    pub know_ids: Vec<usize>,
    pub doc_mask: Vec<bool>,
    pub know_mask: Vec<bool>,
    pub target: Vec<u8>,
}

fn truncated(mut ids: Vec<usize>, max_len: usize) -> (Vec<usize>, Vec<bool>) {
    ids.truncate(max_len);
    let mask = vec![true; ids.len()];
    (ids, mask)
}

pub fn make_example(
    doc: &Document,
    know: &KnowledgeRecord,
    vocab: &LabelVocabulary,
    tokenizer: &Tokenizer,
    max_len: usize,
) -> Result<TokenizedExample> {
    if max_len == 0 {
        return Err(Error::Argument("max_len must be positive".into()));
    }
    let (doc_ids, doc_mask) = truncated(tokenizer.encode(&doc.text), max_len);
    let (know_ids, know_mask) = truncated(tokenizer.encode(&know.text), max_len);
    Ok(TokenizedExample {
        id: doc.id.clone(),
        doc_ids,
        know_ids,
        doc_mask,
        know_mask,
        target: binarize_labels(&doc.labels, vocab)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::{KnowledgeRecord, KnowledgeSource};

    fn record(text: &str) -> KnowledgeRecord {
        KnowledgeRecord {
            doc_id: "d".into(),
            mentions: vec![],
            text: text.into(),
            source: KnowledgeSource::Fallback,
        }
    }

    // Independent re-tokenizer: classify every char, then group.
    fn oracle_tokens(text: &str) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mut prev_word = false;
        for c in text.to_lowercase().chars() {
            if c.is_alphanumeric() {
                if prev_word {
                    out.last_mut().unwrap().push(c);
                } else {
                    out.push(c.to_string());
                }
                prev_word = true;
            } else {
                prev_word = false;
                if !c.is_whitespace() {
                    out.push(c.to_string());
                }
            }
        }
        out
    }

    #[test]
    fn tokenize_matches_independent_oracle() {
        let text = "The cultural industry will become the pillar-industry of the national economy in 2020. U.S. (cs.SY)";
        assert_eq!(tokenize(text), oracle_tokens(text));
        let tok = Tokenizer::new(oracle_tokens(text));
        let ids: Vec<usize> = oracle_tokens(text).iter().map(|t| tok.id(t)).collect();
        assert_eq!(tok.encode(text), ids);
    }

    #[test]
    fn separator_is_single_token() {
        assert_eq!(tokenize("a b [SEP] c"), vec!["a", "b", SEP, "c"]);
        let tok = Tokenizer::new(["a"]);
        assert_eq!(tok.encode("a [SEP] zz"), vec![3, SEP_ID, UNK_ID]);
    }

    #[test]
    fn short_document_keeps_all_tokens() {
        let text = (0..10).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let doc = Document::new("d", text.clone(), ["a"]);
        let tok = Tokenizer::new(tokenize(&text));
        let vocab = LabelVocabulary::new(["a"]).unwrap();
        let ex = make_example(&doc, &record("k"), &vocab, &tok, 250).unwrap();
        assert_eq!(ex.doc_ids.len(), 10);
        assert!(ex.doc_mask.iter().all(|m| *m));
        assert_eq!(ex.target, vec![1]);
    }

    #[test]
    fn long_document_truncates_to_max_len_and_keeps_prefix() {
        let text = (0..600).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let doc = Document::new("d", text.clone(), ["a"]);
        let tok = Tokenizer::new(tokenize(&text));
        let vocab = LabelVocabulary::new(["a"]).unwrap();
        let ex = make_example(&doc, &record(&text), &vocab, &tok, 250).unwrap();
        assert_eq!(ex.doc_ids.len(), 250);
        assert_eq!(ex.know_ids.len(), 250);
        assert_eq!(ex.doc_mask.len(), 250);
        assert_eq!(&ex.doc_ids[..], &tok.encode(&text)[..250]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tok = Tokenizer::new(["paris", "bank", "économie"]);
        let p = dir.path().join("vocab.txt");
        tok.save(&p).unwrap();
        assert_eq!(Tokenizer::load(&p).unwrap(), tok);
    }
}
