//! Doc-know-label attention.
//!
//! Shapes follow a row-major convention: sequences are `l × 2H`, label
//! embeddings `M × d`, and every per-label quantity is an `M`-row matrix.
//! Per branch (`doc`, `know`):
//!
//! ```text
//! A      = softmax_rows(W_att · tanh(En · W)ᵀ)          M × l, masked → 0
//! λ_b    = σ((A · En) · W_gate)                         M × 1
//! A_L    = (Em · W_label) · (En · W_seq)ᵀ               M × l, masked cols → 0
//! ```
//!
//! and then `L = β_doc · A_L^D En^D + β_know · A_L^K En^K`, `λ_L = σ(L · W_lg)`,
//! `λ = λ_L/(λ_L+λ_D) + λ_L/(λ_L+λ_K)` (range `(0, 2)`), `S = diag(λ) · L`.
//! Without a knowledge branch `L = A_L^D En^D` and `λ = λ_L/(λ_L+λ_D)`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bundle::Bundle;
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::tape::{Matrix, Tape, Var};

pub const DOC: &str = "doc";
pub const KNOW: &str = "know";
pub const BETA_TOLERANCE: f64 = 1e-9;

/// Non-parameter settings of the fusion block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub beta_doc: f64,
    pub beta_know: f64,
    /// Row softmax over the bilinear label scores (off by default).
    pub label_softmax: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            beta_doc: 0.5,
            beta_know: 0.5,
            label_softmax: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        check_betas(self.beta_doc, self.beta_know)
    }
}

pub fn check_betas(beta_doc: f64, beta_know: f64) -> Result<()> {
    let ok = (0.0..=1.0).contains(&beta_doc)
        && (0.0..=1.0).contains(&beta_know)
        && (beta_doc + beta_know - 1.0).abs() <= BETA_TOLERANCE;
    if ok {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "fusion weights must lie in [0, 1] and sum to 1, got {beta_doc} and {beta_know}"
        )))
    }
}

/// Widths used when creating fusion parameters.
#[derive(Debug, Clone, Copy)]
pub struct FusionDims {
    pub labels: usize,
    pub two_h: usize,
    pub label_dim: usize,
    pub d_a: usize,
    pub k: usize,
}

pub fn insert_fusion_params(store: &mut ParamStore, dims: FusionDims, with_knowledge: bool, seed: u64) {
    let branches: &[&str] = if with_knowledge { &[DOC, KNOW] } else { &[DOC] };
    for b in branches {
        store.insert_glorot(&format!("fusion.{b}.w"), dims.two_h, dims.d_a, seed);
        store.insert_glorot(&format!("fusion.{b}.w_att"), dims.labels, dims.d_a, seed);
        store.insert_glorot(&format!("fusion.{b}.w_gate"), dims.two_h, 1, seed);
        store.insert_glorot(&format!("fusion.label_{b}.w_label"), dims.label_dim, dims.k, seed);
        store.insert_glorot(&format!("fusion.label_{b}.w_seq"), dims.two_h, dims.k, seed);
    }
    store.insert_glorot("fusion.w_label_gate", dims.two_h, 1, seed);
}

/// One encoded branch on the tape.
#[derive(Debug, Clone)]
pub struct BranchInput {
    pub seq: Var,
    pub mask: Arc<Vec<bool>>,
}

/// Tape handles of every intermediate.
#[derive(Debug, Clone, Copy)]
pub struct TraceVars {
    pub a_doc: Var,
    pub a_know: Option<Var>,
    pub lambda_doc: Var,
    pub lambda_know: Option<Var>,
    pub al_doc: Var,
    pub al_know: Option<Var>,
    pub label_repr: Var,
    pub lambda_label: Var,
    pub lambda: Var,
    pub s: Var,
}

fn require_unmasked(mask: &[bool], branch: &str) -> Result<()> {
    if mask.iter().any(|m| *m) {
        Ok(())
    } else {
        Err(Error::Degenerate(format!("every position of the {branch} sequence is masked")))
    }
}

/// Softmax attention with `M` rows; returns `(A, A · En)`.
pub fn self_attention(
    tape: &mut Tape,
    binder: &mut Binder,
    branch: &str,
    input: &BranchInput,
) -> Result<(Var, Var)> {
    require_unmasked(&input.mask, branch)?;
    let w = binder.var(tape, &format!("fusion.{branch}.w"))?;
    let w_att = binder.var(tape, &format!("fusion.{branch}.w_att"))?;
    let hidden = tape.matmul(input.seq, w);
    let hidden = tape.tanh(hidden);
    let scores = tape.matmul_bt(w_att, hidden);
    let a = tape.softmax_rows(scores, input.mask.clone());
    let pooled = tape.matmul(a, input.seq);
    Ok((a, pooled))
}

/// `σ(pooled · W_gate)`.
pub fn independent_weight(tape: &mut Tape, binder: &mut Binder, branch: &str, pooled: Var) -> Result<Var> {
    let g = binder.var(tape, &format!("fusion.{branch}.w_gate"))?;
    let z = tape.matmul(pooled, g);
    Ok(tape.sigmoid(z))
}

/// Bilinear label-to-position scores; returns `(A_L, A_L · En)`.
pub fn label_attention(
    tape: &mut Tape,
    binder: &mut Binder,
    branch: &str,
    labels: Var,
    input: &BranchInput,
    softmax: bool,
) -> Result<(Var, Var)> {
    let wl = binder.var(tape, &format!("fusion.label_{branch}.w_label"))?;
    let ws = binder.var(tape, &format!("fusion.label_{branch}.w_seq"))?;
    let pl = tape.matmul(labels, wl);
    let ps = tape.matmul(input.seq, ws);
    let scores = tape.matmul_bt(pl, ps);
    let a = if softmax {
        require_unmasked(&input.mask, branch)?;
        tape.softmax_rows(scores, input.mask.clone())
    } else {
        tape.mask_cols(scores, input.mask.clone())
    };
    let pooled = tape.matmul(a, input.seq);
    Ok((a, pooled))
}

/// `L = β_doc · doc + β_know · know` and `λ_L = σ(L · W_lg)`.
pub fn fuse(
    tape: &mut Tape,
    binder: &mut Binder,
    pooled_doc: Var,
    pooled_know: Option<Var>,
    beta_doc: f64,
    beta_know: f64,
) -> Result<(Var, Var)> {
    let l = match pooled_know {
        Some(k) => {
            check_betas(beta_doc, beta_know)?;
            let d = tape.scale(pooled_doc, beta_doc);
            let k = tape.scale(k, beta_know);
            tape.add(d, k)
        }
        None => pooled_doc,
    };
    let w = binder.var(tape, "fusion.w_label_gate")?;
    let z = tape.matmul(l, w);
    Ok((l, tape.sigmoid(z)))
}

/// `λ_L/(λ_L+λ_D) + λ_L/(λ_L+λ_K)`, or only the first term without knowledge.
pub fn dependent_weight(tape: &mut Tape, lambda_label: Var, lambda_doc: Var, lambda_know: Option<Var>) -> Var {
    let den = tape.add(lambda_label, lambda_doc);
    let doc_term = tape.div(lambda_label, den);
    match lambda_know {
        Some(k) => {
            let den = tape.add(lambda_label, k);
            let know_term = tape.div(lambda_label, den);
            tape.add(doc_term, know_term)
        }
        None => doc_term,
    }
}

/// `diag(λ) · L`.
pub fn final_representation(tape: &mut Tape, lambda: Var, label_repr: Var) -> Var {
    tape.scale_rows(label_repr, lambda)
}

/// Full attention block on the tape.
pub fn attend(
    tape: &mut Tape,
    binder: &mut Binder,
    cfg: &FusionConfig,
    labels: Var,
    doc: &BranchInput,
    know: Option<&BranchInput>,
) -> Result<TraceVars> {
    let (a_doc, pooled_doc) = self_attention(tape, binder, DOC, doc)?;
    let lambda_doc = independent_weight(tape, binder, DOC, pooled_doc)?;
    let (al_doc, lpool_doc) = label_attention(tape, binder, DOC, labels, doc, cfg.label_softmax)?;
    let (a_know, lambda_know, al_know, lpool_know) = match know {
        Some(k) => {
            let (a, pooled) = self_attention(tape, binder, KNOW, k)?;
            let lam = independent_weight(tape, binder, KNOW, pooled)?;
            let (al, lp) = label_attention(tape, binder, KNOW, labels, k, cfg.label_softmax)?;
            (Some(a), Some(lam), Some(al), Some(lp))
        }
        None => (None, None, None, None),
    };
    let (label_repr, lambda_label) = fuse(tape, binder, lpool_doc, lpool_know, cfg.beta_doc, cfg.beta_know)?;
    let lambda = dependent_weight(tape, lambda_label, lambda_doc, lambda_know);
    let s = final_representation(tape, lambda, label_repr);
    Ok(TraceVars {
        a_doc,
        a_know,
        lambda_doc,
        lambda_know,
        al_doc,
        al_know,
        label_repr,
        lambda_label,
        lambda,
        s,
    })
}

/// Materialized intermediates for one document. Weight vectors are `M × 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub a_doc: Matrix,
    pub a_know: Option<Matrix>,
    pub lambda_doc: Matrix,
    pub lambda_know: Option<Matrix>,
    pub al_doc: Matrix,
    pub al_know: Option<Matrix>,
    pub label_repr: Matrix,
    pub lambda_label: Matrix,
    pub lambda: Matrix,
    pub s: Matrix,
}

const TRACE_KIND: &str = "kenet-attention-trace";

impl AttentionTrace {
    pub fn from_tape(tape: &Tape, v: &TraceVars) -> Self {
        let get = |x: Var| tape.value(x).clone();
        AttentionTrace {
            a_doc: get(v.a_doc),
            a_know: v.a_know.map(get),
            lambda_doc: get(v.lambda_doc),
            lambda_know: v.lambda_know.map(get),
            al_doc: get(v.al_doc),
            al_know: v.al_know.map(get),
            label_repr: get(v.label_repr),
            lambda_label: get(v.lambda_label),
            lambda: get(v.lambda),
            s: get(v.s),
        }
    }

    fn named(&self) -> Vec<(&'static str, Option<&Matrix>)> {
        vec![
            ("a_doc", Some(&self.a_doc)),
            ("a_know", self.a_know.as_ref()),
            ("lambda_doc", Some(&self.lambda_doc)),
            ("lambda_know", self.lambda_know.as_ref()),
            ("al_doc", Some(&self.al_doc)),
            ("al_know", self.al_know.as_ref()),
            ("label_repr", Some(&self.label_repr)),
            ("lambda_label", Some(&self.lambda_label)),
            ("lambda", Some(&self.lambda)),
            ("s", Some(&self.s)),
        ]
    }

    /// Bundle with one tensor per intermediate plus free-form metadata.
    pub fn to_bundle(&self, meta: BTreeMap<String, String>) -> Bundle {
        let mut b = Bundle {
            meta,
            ..Bundle::default()
        };
        b.meta.insert("kind".into(), TRACE_KIND.into());
        for (name, m) in self.named() {
            if let Some(m) = m {
                b.insert(name, m.clone());
            }
        }
        b
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        if b.meta.get("kind").map(String::as_str) != Some(TRACE_KIND) {
            return Err(Error::Config("bundle is not an attention trace".into()));
        }
        let req = |n: &str| b.get(n).cloned();
        let opt = |n: &str| b.tensors.get(n).cloned();
        Ok(AttentionTrace {
            a_doc: req("a_doc")?,
            a_know: opt("a_know"),
            lambda_doc: req("lambda_doc")?,
            lambda_know: opt("lambda_know"),
            al_doc: req("al_doc")?,
            al_know: opt("al_know"),
            label_repr: req("label_repr")?,
            lambda_label: req("lambda_label")?,
            lambda: req("lambda")?,
            s: req("s")?,
        })
    }

    pub fn save(&self, dir: &Path, meta: BTreeMap<String, String>) -> Result<()> {
        self.to_bundle(meta).save(dir)
    }

    pub fn load(dir: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let b = Bundle::load(dir)?;
        Ok((Self::from_bundle(&b)?, b.meta))
    }
}

/// Inference-only evaluation of the block on plain matrices.
pub fn forward(
    params: &ParamStore,
    cfg: &FusionConfig,
    labels: &Matrix,
    doc: (&Matrix, &[bool]),
    know: Option<(&Matrix, &[bool])>,
) -> Result<AttentionTrace> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(params);
    let lab = tape.constant(labels.clone());
    let d = BranchInput {
        seq: tape.constant(doc.0.clone()),
        mask: Arc::new(doc.1.to_vec()),
    };
    let k = know.map(|(m, mask)| BranchInput {
        seq: tape.constant(m.clone()),
        mask: Arc::new(mask.to_vec()),
    });
    let v = attend(&mut tape, &mut binder, cfg, lab, &d, k.as_ref())?;
    Ok(AttentionTrace::from_tape(&tape, &v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{name_rng, normal};
    use ndarray::{array, Array2};

    fn dims() -> FusionDims {
        FusionDims {
            labels: 3,
            two_h: 4,
            label_dim: 5,
            d_a: 6,
            k: 2,
        }
    }

    fn store(seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        insert_fusion_params(&mut s, dims(), true, seed);
        s
    }

    fn rand(r: usize, c: usize, tag: &str) -> Matrix {
        normal(r, c, 1.0, &mut name_rng(5, tag))
    }

    #[test]
    fn single_position_gives_unit_attention() {
        let s = store(1);
        let en = rand(1, 4, "en");
        let t = forward(&s, &FusionConfig::default(), &rand(3, 5, "lab"), (&en, &[true]), Some((&en, &[true]))).unwrap();
        assert!(t.a_doc.iter().all(|v| *v == 1.0));
        // every label pools the same single state, so the gates agree
        assert!(t.lambda_doc.iter().all(|v| *v == t.lambda_doc[[0, 0]]));
    }

    #[test]
    fn identical_rows_give_uniform_attention_over_unmasked() {
        let s = store(2);
        let en = Array2::from_shape_fn((4, 4), |(_, j)| j as f64 * 0.3 - 0.2);
        let mask = [true, true, false, true];
        let t = forward(&s, &FusionConfig::default(), &rand(3, 5, "lab"), (&en, &mask), None).unwrap();
        for row in t.a_doc.outer_iter() {
            for (j, v) in row.iter().enumerate() {
                let want = if mask[j] { 1.0 / 3.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_gate_gives_one_half() {
        let mut s = store(3);
        s.set_value("fusion.doc.w_gate", Matrix::zeros((4, 1))).unwrap();
        let en = rand(3, 4, "en");
        let t = forward(&s, &FusionConfig::default(), &rand(3, 5, "lab"), (&en, &[true; 3]), None).unwrap();
        assert!(t.lambda_doc.iter().all(|v| *v == 0.5));
    }

    #[test]
    fn independent_weight_grows_under_doubling() {
        let mut s = ParamStore::new();
        insert_fusion_params(&mut s, dims(), false, 4);
        s.set_value("fusion.doc.w_gate", array![[1.0], [0.5], [0.25], [0.1]]).unwrap();
        let mut pooled = Matrix::from_elem((3, 4), 0.2);
        let mut last = [0.0; 3];
        for _ in 0..5 {
            let mut tape = Tape::new();
            let mut b = Binder::new(&s);
            let p = tape.constant(pooled.clone());
            let lam = independent_weight(&mut tape, &mut b, DOC, p).unwrap();
            for (i, v) in tape.value(lam).iter().enumerate() {
                assert!(*v > last[i] && *v < 1.0);
                last[i] = *v;
            }
            pooled *= 2.0;
        }
    }

    #[test]
    fn zero_labels_give_zero_label_attention() {
        let s = store(5);
        let en = rand(4, 4, "en");
        let t = forward(&s, &FusionConfig::default(), &Matrix::zeros((3, 5)), (&en, &[true; 4]), Some((&en, &[true; 4]))).unwrap();
        assert!(t.al_doc.iter().all(|v| *v == 0.0));
        assert!(t.label_repr.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn orthogonal_label_row_scores_zero() {
        let mut s = store(6);
        // project every label onto the first axis and every state onto the second
        let mut wl = Matrix::zeros((5, 2));
        wl[[0, 0]] = 1.0;
        let mut ws = Matrix::zeros((4, 2));
        ws[[1, 1]] = 1.0;
        s.set_value("fusion.label_doc.w_label", wl).unwrap();
        s.set_value("fusion.label_doc.w_seq", ws).unwrap();
        let en = rand(4, 4, "en");
        let t = forward(&s, &FusionConfig::default(), &rand(3, 5, "lab"), (&en, &[true; 4]), None).unwrap();
        assert!(t.al_doc.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn beta_endpoint_and_equal_inputs() {
        let s = store(7);
        let mut tape = Tape::new();
        let mut b = Binder::new(&s);
        let d = tape.constant(rand(3, 4, "d"));
        let k = tape.constant(rand(3, 4, "k"));
        let (l, _) = fuse(&mut tape, &mut b, d, Some(k), 1.0, 0.0).unwrap();
        assert_eq!(tape.value(l), tape.value(d));
        let (l, _) = fuse(&mut tape, &mut b, d, Some(d), 0.3, 0.7).unwrap();
        for (x, y) in tape.value(l).iter().zip(tape.value(d).iter()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(fuse(&mut tape, &mut b, d, Some(k), 0.6, 0.6).is_err());
        assert!(fuse(&mut tape, &mut b, d, Some(k), 1.2, -0.2).is_err());
    }

    #[test]
    fn dependent_weight_identities() {
        let mut tape = Tape::new();
        let c = tape.constant(array![[0.2], [0.7], [0.9]]);
        let lam = dependent_weight(&mut tape, c, c, Some(c));
        assert!(tape.value(lam).iter().all(|v| (v - 1.0).abs() < 1e-15));
        let l = tape.constant(array![[0.5]]);
        let d = tape.constant(array![[0.5]]);
        let k = tape.constant(array![[0.25]]);
        let lam = dependent_weight(&mut tape, l, d, Some(k));
        assert!((tape.value(lam)[[0, 0]] - 7.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn unit_weight_keeps_representation() {
        let mut tape = Tape::new();
        let l = tape.constant(rand(3, 4, "l"));
        let one = tape.constant(Matrix::ones((3, 1)));
        let s = final_representation(&mut tape, one, l);
        assert_eq!(tape.value(s), tape.value(l));
    }

    #[test]
    fn all_masked_is_degenerate() {
        let s = store(8);
        let en = rand(2, 4, "en");
        let err = forward(&s, &FusionConfig::default(), &rand(3, 5, "lab"), (&en, &[false, false]), None);
        assert!(matches!(err, Err(Error::Degenerate(_))));
    }

    #[test]
    fn trace_bundle_round_trip() {
        let s = store(9);
        let en = rand(3, 4, "en");
        let t = forward(&s, &FusionConfig::default(), &rand(3, 5, "lab"), (&en, &[true, true, false]), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("doc_id".into(), "d1".into());
        t.save(dir.path(), meta.clone()).unwrap();
        let (back, m) = AttentionTrace::load(dir.path()).unwrap();
        assert_eq!(back, t);
        assert_eq!(m.get("doc_id").unwrap(), "d1");
        assert!(back.a_know.is_none());
    }
}
