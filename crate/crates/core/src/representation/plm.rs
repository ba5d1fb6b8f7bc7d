//! Frozen contextual token encoder.
//!
//! A single self-attention block over token embeddings plus fixed sinusoidal
//! positions: `out = LayerNorm(E + softmax(QKᵀ/√d) V Wo)` with `Q, K, V = E Wq,
//! E Wk, E Wv`. Key positions outside the mask receive zero attention and
//! output rows at masked positions are zero, so padding content never reaches
//! a real position.
//!
//! A checkpoint is a directory with `vocab.txt` (see [`Tokenizer::save`]) and
//! a tensor bundle holding `embed.plm.{tok,wq,wk,wv,wo}`.

use std::path::Path;
use std::sync::Arc;

use super::{labels::WordVectors, ContextualEmbedding};
use crate::bundle::Bundle;
use crate::corpus::tokenizer::{tokenize, Tokenizer};
use crate::error::{Error, Result};
use crate::params::{name_rng, normal, Binder, Init, ParamStore};
use crate::tape::{Matrix, Tape, Var};

pub const PREFIX: &str = "embed.plm";
pub const VOCAB_FILE: &str = "vocab.txt";
const KIND: &str = "kenet-contextual-encoder";
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct ContextualEncoder {
    pub tokenizer: Tokenizer,
    pub params: ParamStore,
}

pub fn positional_encoding(len: usize, dim: usize) -> Matrix {
    Matrix::from_shape_fn((len, dim), |(pos, i)| {
        let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let angle = pos as f64 * rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

pub fn mask_column(mask: &[bool]) -> Matrix {
    Matrix::from_shape_fn((mask.len(), 1), |(i, _)| if mask[i] { 1.0 } else { 0.0 })
}

/// Contextual embeddings for `ids` using the `embed.plm.*` parameters bound
/// through `binder`.
pub fn forward(tape: &mut Tape, binder: &mut Binder, ids: &[usize], mask: &[bool]) -> Result<Var> {
    if ids.is_empty() || ids.len() != mask.len() {
        return Err(Error::Argument(format!("{} token ids with {} mask entries", ids.len(), mask.len())));
    }
    if !mask.iter().any(|m| *m) {
        return Err(Error::Degenerate("every token position is masked".into()));
    }
    let tok = binder.var(tape, &format!("{PREFIX}.tok"))?;
    let vocab = tape.shape(tok).0;
    if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(Error::Argument(format!("token id {bad} outside encoder vocabulary of {vocab}")));
    }
    let d = tape.shape(tok).1;
    let emb = tape.gather_rows(tok, ids);
    let pos = tape.constant(positional_encoding(ids.len(), d));
    let e = tape.add(emb, pos);
    let [wq, wk, wv, wo] = ["wq", "wk", "wv", "wo"].map(|n| binder.var(tape, &format!("{PREFIX}.{n}")));
    let q = tape.matmul(e, wq?);
    let k = tape.matmul(e, wk?);
    let v = tape.matmul(e, wv?);
    let scores = tape.matmul_bt(q, k);
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = tape.softmax_rows(scores, Arc::new(mask.to_vec()));
    let mixed = tape.matmul(attn, v);
    let mixed = tape.matmul(mixed, wo?);
    let z = tape.add(e, mixed);
    let z = tape.layer_norm_rows(z, LN_EPS);
    let m = tape.constant(mask_column(mask));
    Ok(tape.scale_rows(z, m))
}

impl ContextualEncoder {
    /// Builds an encoder over `words`. Token rows come from `vectors` where
    /// available (its dimension must equal `d_model`), otherwise from a
    /// seeded normal draw; attention weights are seeded Glorot draws.
    pub fn build<I, S>(words: I, vectors: Option<&WordVectors>, d_model: usize, seed: u64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        if let Some(v) = vectors {
            if v.dim() != d_model {
                return Err(Error::Config(format!(
                    "word vectors have dimension {}, encoder width is {d_model}",
                    v.dim()
                )));
            }
        }
        let tokenizer = Tokenizer::new(words);
        let mut tok = normal(tokenizer.len(), d_model, 0.1, &mut name_rng(seed, &format!("{PREFIX}.tok")));
        if let Some(v) = vectors {
            for (i, t) in tokenizer.tokens().iter().enumerate() {
                if let Some(row) = v.get(t) {
                    tok.row_mut(i).assign(&row);
                }
            }
        }
        let mut params = ParamStore::new();
        params.insert(format!("{PREFIX}.tok"), tok, false, Init::Pretrained);
        for n in ["wq", "wk", "wv", "wo"] {
            let name = format!("{PREFIX}.{n}");
            params.insert_glorot(&name, d_model, d_model, seed);
        }
        let mut enc = ContextualEncoder { tokenizer, params };
        enc.set_trainable(false);
        Ok(enc)
    }

    /// Vocabulary over every token of `texts`, in first-seen order.
    pub fn corpus_words<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for t in texts {
            for w in tokenize(t) {
                if seen.insert(w.clone()) {
                    out.push(w);
                }
            }
        }
        out
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        let names: Vec<String> = self.params.names().cloned().collect();
        let mut rebuilt = ParamStore::new();
        for n in names {
            let p = self.params.get(&n).expect("listed");
            rebuilt.insert(n.clone(), (*p.value).clone(), trainable, p.init);
        }
        self.params = rebuilt;
    }

    pub fn dim(&self) -> usize {
        self.params.value(&format!("{PREFIX}.tok")).map(|m| m.ncols()).unwrap_or(0)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut b = self.params.to_bundle();
        b.meta.insert("kind".into(), KIND.into());
        b.save(dir)?;
        self.tokenizer.save(&dir.join(VOCAB_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.join(VOCAB_FILE).exists() {
            return Err(Error::Config(format!("no encoder checkpoint at {}", dir.display())));
        }
        let b = Bundle::load(dir)?;
        if b.meta.get("kind").map(String::as_str) != Some(KIND) {
            return Err(Error::Config(format!("{} is not an encoder checkpoint", dir.display())));
        }
        let tokenizer = Tokenizer::load(&dir.join(VOCAB_FILE))?;
        let params = ParamStore::from_bundle(&b)?;
        let enc = ContextualEncoder { tokenizer, params };
        if enc.params.value(&format!("{PREFIX}.tok"))?.nrows() != enc.tokenizer.len() {
            return Err(Error::Config("encoder vocabulary and token table disagree".into()));
        }
        Ok(enc)
    }

    /// Inference-mode embedding of one token sequence.
    pub fn embed(&self, ids: &[usize], mask: &[bool]) -> Result<ContextualEmbedding> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let out = forward(&mut tape, &mut binder, ids, mask)?;
        Ok(ContextualEmbedding {
            matrix: tape.value(out).clone(),
            mask: mask.to_vec(),
        })
    }
}

/// Loads the checkpoint at `checkpoint` and embeds `tokens`.
pub fn embed_text(tokens: &[usize], mask: &[bool], checkpoint: &Path) -> Result<ContextualEmbedding> {
    ContextualEncoder::load(checkpoint)?.embed(tokens, mask)
}
