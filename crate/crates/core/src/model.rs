//! The assembled network and its ablation variants.
//!
//! All parameters live in one [`ParamStore`] under dotted names:
//!
//! | prefix              | contents                                          |
//! |---------------------|---------------------------------------------------|
//! | `embed.plm.*`       | frozen contextual encoder                         |
//! | `embed.lookup`      | trainable token table (`no_DEm`)                 |
//! | `encoder.<b>.*`     | BiLSTM per branch, or `encoder.<b>.linear`        |
//! | `label_embedding`   | fixed label matrix                                |
//! | `fusion.*`          | attention block                                   |
//! | `pool.*`            | mean-pool replacement for attention (`no_DA`)     |
//! | `head.*`            | classifier                                        |

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionTrace, BranchInput, FusionConfig, FusionDims, TraceVars, DOC, KNOW};
use crate::bundle::{sha256_hex, Bundle};
use crate::config::{TrainConfig, Variant};
use crate::corpus::tokenizer::{TokenizedExample, Tokenizer, UNK};
use crate::corpus::LabelVocabulary;
use crate::error::{Error, Result};
use crate::head;
use crate::params::{name_rng, normal, Binder, Init, InventoryEntry, ParamStore};
use crate::representation::encoder::{bilstm_forward, insert_linear_params, insert_lstm_params, linear_forward};
use crate::representation::labels::{LabelEmbeddingMatrix, LabelProvenance};
use crate::representation::plm::{self, mask_column, ContextualEncoder, VOCAB_FILE};
use crate::tape::{Matrix, Tape, Var};

pub const LABEL_EMBEDDING: &str = "label_embedding";
pub const LOOKUP: &str = "embed.lookup";
const KIND: &str = "kenet-model";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub labels: usize,
    pub vocab: usize,
    pub encoder_dim: usize,
    pub lstm_input: usize,
    pub hidden: usize,
    pub label_dim: usize,
    pub attention_dim: usize,
    pub bilinear_dim: usize,
    pub head_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub dims: ModelDims,
    pub fusion: FusionConfig,
    pub share_encoder: bool,
    pub freeze_encoder: bool,
    pub max_len: usize,
}

impl ModelSpec {
    pub fn from_config(cfg: &TrainConfig, labels: usize, vocab: usize) -> Self {
        let m = &cfg.model;
        ModelSpec {
            variant: m.variant,
            dims: ModelDims {
                labels,
                vocab,
                encoder_dim: m.encoder_dim,
                lstm_input: m.lstm_input,
                hidden: m.hidden,
                label_dim: m.label_dim,
                attention_dim: m.attention_dim,
                bilinear_dim: m.bilinear_dim,
                head_dim: m.head_dim,
            },
            fusion: cfg.fusion(),
            share_encoder: m.share_encoder,
            freeze_encoder: m.freeze_encoder,
            max_len: m.max_len,
        }
    }
}

/// One token sequence ready for the network. `emb` holds the precomputed
/// output of a frozen contextual encoder when one is used.
#[derive(Debug, Clone)]
pub struct Branch {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub emb: Option<Arc<Matrix>>,
}

#[derive(Debug, Clone)]
pub struct Features {
    pub id: String,
    pub doc: Branch,
    pub know: Option<Branch>,
    /// `M × 1` 0/1 targets.
    pub target: Arc<Matrix>,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub probs: Var,
    pub s: Var,
    pub trace: Option<TraceVars>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub tokenizer: Tokenizer,
    pub labels: LabelVocabulary,
    pub params: ParamStore,
}

impl Model {
    /// Creates a freshly initialized model. `encoder` supplies the tokenizer
    /// and, except for `no_DEm`, the contextual encoder weights.
    pub fn build(
        spec: ModelSpec,
        encoder: &ContextualEncoder,
        labels: LabelVocabulary,
        label_embedding: &LabelEmbeddingMatrix,
        seed: u64,
    ) -> Result<Self> {
        let d = spec.dims;
        if d.labels != labels.len() || label_embedding.matrix.nrows() != labels.len() {
            return Err(Error::Config(format!(
                "{} labels in vocabulary, {} in spec, {} embedding rows",
                labels.len(),
                d.labels,
                label_embedding.matrix.nrows()
            )));
        }
        if label_embedding.matrix.ncols() != d.label_dim {
            return Err(Error::Config(format!(
                "label embeddings have width {}, model expects {}",
                label_embedding.matrix.ncols(),
                d.label_dim
            )));
        }
        if encoder.dim() != d.encoder_dim {
            return Err(Error::Config(format!(
                "contextual encoder width {} differs from configured {}",
                encoder.dim(),
                d.encoder_dim
            )));
        }
        let mut params = ParamStore::new();
        if spec.variant == Variant::NoDem {
            let table = normal(d.vocab, d.encoder_dim, 0.1, &mut name_rng(seed, LOOKUP));
            params.insert(LOOKUP, table, true, Init::Normal);
        } else {
            for (name, p) in encoder.params.iter() {
                params.insert(name.clone(), (*p.value).clone(), !spec.freeze_encoder, p.init);
            }
        }
        let two_h = 2 * d.hidden;
        let mut prefixes = vec![encoder_prefix(&spec, DOC)];
        if spec.variant.uses_knowledge() {
            prefixes.push(encoder_prefix(&spec, KNOW));
        }
        prefixes.dedup();
        for p in &prefixes {
            if spec.variant == Variant::NoDen {
                insert_linear_params(&mut params, p, d.encoder_dim, d.hidden, seed);
            } else {
                insert_lstm_params(&mut params, p, d.encoder_dim, d.lstm_input, d.hidden, seed);
            }
        }
        let init = if label_embedding.provenance.iter().all(|p| *p == LabelProvenance::RandomInit) {
            Init::Normal
        } else {
            Init::Pretrained
        };
        params.insert(LABEL_EMBEDDING, label_embedding.matrix.clone(), false, init);
        if spec.variant == Variant::NoDa {
            params.insert_glorot("pool.cat", 2 * two_h, two_h, seed);
            params.insert_glorot("pool.label", d.label_dim, two_h, seed);
        } else {
            let dims = FusionDims {
                labels: d.labels,
                two_h,
                label_dim: d.label_dim,
                d_a: d.attention_dim,
                k: d.bilinear_dim,
            };
            attention::insert_fusion_params(&mut params, dims, spec.variant.uses_knowledge(), seed);
        }
        head::insert_head_params(&mut params, two_h, d.head_dim, seed);
        Ok(Model {
            spec,
            tokenizer: encoder.tokenizer.clone(),
            labels,
            params,
        })
    }

    pub fn variant(&self) -> Variant {
        self.spec.variant
    }

    fn uses_frozen_plm(&self) -> bool {
        self.spec.variant != Variant::NoDem && self.spec.freeze_encoder
    }

    fn branch(&self, ids: &[usize], mask: &[bool]) -> Result<Branch> {
        // an empty text still needs one position to attend over
        let (ids, mask) = if ids.is_empty() {
            (vec![self.tokenizer.id(UNK)], vec![true])
        } else {
            (ids.to_vec(), mask.to_vec())
        };
        let emb = if self.uses_frozen_plm() {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&self.params);
            let out = plm::forward(&mut tape, &mut binder, &ids, &mask)?;
            Some(Arc::new(tape.value(out).clone()))
        } else {
            None
        };
        Ok(Branch { ids, mask, emb })
    }

    pub fn features(&self, ex: &TokenizedExample) -> Result<Features> {
        if ex.target.len() != self.labels.len() {
            return Err(Error::Config(format!(
                "example `{}` has {} targets, model has {} labels",
                ex.id,
                ex.target.len(),
                self.labels.len()
            )));
        }
        let know = if self.spec.variant.uses_knowledge() {
            Some(self.branch(&ex.know_ids, &ex.know_mask)?)
        } else {
            None
        };
        Ok(Features {
            id: ex.id.clone(),
            doc: self.branch(&ex.doc_ids, &ex.doc_mask)?,
            know,
            target: Arc::new(Matrix::from_shape_fn((ex.target.len(), 1), |(i, _)| ex.target[i] as f64)),
        })
    }

    fn encode(&self, tape: &mut Tape, binder: &mut Binder, branch: &str, b: &Branch) -> Result<BranchInput> {
        let emb = match (self.spec.variant, &b.emb) {
            (Variant::NoDem, _) => {
                let table = binder.var(tape, LOOKUP)?;
                if let Some(bad) = b.ids.iter().find(|&&i| i >= self.spec.dims.vocab) {
                    return Err(Error::Argument(format!("token id {bad} outside vocabulary")));
                }
                let rows = tape.gather_rows(table, &b.ids);
                let m = tape.constant(mask_column(&b.mask));
                tape.scale_rows(rows, m)
            }
            (_, Some(e)) => tape.constant_shared(e.clone()),
            (_, None) => plm::forward(tape, binder, &b.ids, &b.mask)?,
        };
        let prefix = encoder_prefix(&self.spec, branch);
        let seq = if self.spec.variant == Variant::NoDen {
            linear_forward(tape, binder, &prefix, emb, &b.mask)?
        } else {
            bilstm_forward(tape, binder, &prefix, emb, &b.mask)?
        };
        Ok(BranchInput {
            seq,
            mask: Arc::new(b.mask.clone()),
        })
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, f: &Features) -> Result<ForwardVars> {
        let doc = self.encode(tape, binder, DOC, &f.doc)?;
        let know = match &f.know {
            Some(k) => Some(self.encode(tape, binder, KNOW, k)?),
            None => None,
        };
        let labels = binder.var(tape, LABEL_EMBEDDING)?;
        let (s, trace) = if self.spec.variant == Variant::NoDa {
            let know = know.as_ref().ok_or_else(|| Error::Config("pooling variant needs knowledge".into()))?;
            let pd = tape.mean_rows_masked(doc.seq, doc.mask.clone());
            let pk = tape.mean_rows_masked(know.seq, know.mask.clone());
            let cat = tape.concat_cols(&[pd, pk]);
            let w_cat = binder.var(tape, "pool.cat")?;
            let shared = tape.matmul(cat, w_cat);
            let shared = tape.tile_rows(shared, self.labels.len());
            let w_lab = binder.var(tape, "pool.label")?;
            let own = tape.matmul(labels, w_lab);
            (tape.add(shared, own), None)
        } else {
            let t = attention::attend(tape, binder, &self.spec.fusion, labels, &doc, know.as_ref())?;
            (t.s, Some(t))
        };
        let probs = head::head_forward(tape, binder, s)?;
        Ok(ForwardVars { probs, s, trace })
    }

    /// Loss and gradients of every trainable parameter for one example.
    pub fn loss_and_grads(&self, f: &Features) -> Result<(f64, BTreeMap<String, Matrix>)> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let out = self.forward(&mut tape, &mut binder, f)?;
        let loss = tape.bce_mean(out.probs, f.target.clone());
        let value = tape.value(loss)[[0, 0]];
        let mut grads = tape.backward(loss);
        Ok((value, binder.gradients(&mut grads)))
    }

    pub fn loss(&self, f: &Features) -> Result<f64> {
        Ok(crate::tape::bce_mean(&Matrix::from_shape_vec((self.labels.len(), 1), self.predict(f)?).expect("column"), &f.target))
    }

    pub fn predict(&self, f: &Features) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let out = self.forward(&mut tape, &mut binder, f)?;
        Ok(tape.value(out.probs).iter().copied().collect())
    }

    /// Probabilities plus the attention intermediates (absent for `no_DA`).
    pub fn trace(&self, f: &Features) -> Result<(Vec<f64>, Option<AttentionTrace>)> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let out = self.forward(&mut tape, &mut binder, f)?;
        let probs = tape.value(out.probs).iter().copied().collect();
        Ok((probs, out.trace.map(|t| AttentionTrace::from_tape(&tape, &t))))
    }

    pub fn inventory(&self) -> Vec<InventoryEntry> {
        self.params.inventory()
    }

    pub fn to_bundle(&self) -> Result<Bundle> {
        let mut b = self.params.to_bundle();
        b.meta.insert("kind".into(), KIND.into());
        b.meta.insert("spec".into(), serde_json::to_string(&self.spec)?);
        b.meta.insert("labels".into(), serde_json::to_string(self.labels.names())?);
        Ok(b)
    }

    pub fn save(&self, dir: &Path) -> Result<String> {
        let b = self.to_bundle()?;
        b.save(dir)?;
        self.tokenizer.save(&dir.join(VOCAB_FILE))?;
        Ok(checkpoint_hash(&b))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.join(VOCAB_FILE).exists() {
            return Err(Error::Config(format!("no model checkpoint at {}", dir.display())));
        }
        let b = Bundle::load(dir)?;
        if b.meta.get("kind").map(String::as_str) != Some(KIND) {
            return Err(Error::Config(format!("{} is not a model checkpoint", dir.display())));
        }
        let meta = |k: &str| {
            b.meta
                .get(k)
                .ok_or_else(|| Error::Config(format!("checkpoint metadata lacks `{k}`")))
        };
        let spec: ModelSpec = serde_json::from_str(meta("spec")?)?;
        let names: Vec<String> = serde_json::from_str(meta("labels")?)?;
        let params = ParamStore::from_bundle(&b)?;
        Ok(Model {
            spec,
            tokenizer: Tokenizer::load(&dir.join(VOCAB_FILE))?,
            labels: LabelVocabulary::new(names)?,
            params,
        })
    }
}

/// Parameter prefix of a branch's sequence encoder.
pub fn encoder_prefix(spec: &ModelSpec, branch: &str) -> String {
    if spec.share_encoder {
        "encoder.shared".to_string()
    } else {
        format!("encoder.{branch}")
    }
}

/// Digest of a checkpoint's manifest (names, shapes and tensor hashes).
pub fn checkpoint_hash(b: &Bundle) -> String {
    let manifest = serde_json::to_string(&b.manifest()).expect("manifest serializes");
    sha256_hex(manifest.as_bytes())
}
