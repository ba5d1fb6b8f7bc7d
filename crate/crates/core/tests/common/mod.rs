#![allow(dead_code)]

use std::path::{Path, PathBuf};

use kenet::config::TrainConfig;
use kenet::corpus::{load_dataset, DatasetFormat, Document};
use kenet::knowledge::backend::FixtureBackend;
use kenet::knowledge::cache::RetrievalCache;
use kenet::knowledge::{retrieve_corpus_knowledge, RetrievalOptions, KNOWLEDGE_FILE};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn toy_dir() -> PathBuf {
    fixtures().join("toy")
}

pub fn toy_documents() -> Vec<Document> {
    let ds = load_dataset(&toy_dir(), DatasetFormat::Toy).unwrap();
    ds.train.into_iter().chain(ds.test).collect()
}

/// Runs fixture-backed retrieval over the toy corpus into `dir/knowledge`.
pub fn retrieve_toy(dir: &Path) -> PathBuf {
    let backend = FixtureBackend::load(&fixtures().join("kb")).unwrap();
    let cache = RetrievalCache::open(&dir.join("cache")).unwrap();
    let out = dir.join("knowledge");
    retrieve_corpus_knowledge(&toy_documents(), &backend, &backend, &cache, &out, &RetrievalOptions::default()).unwrap();
    out.join(KNOWLEDGE_FILE)
}

/// Small-width configuration over the toy corpus.
pub fn toy_config(dir: &Path) -> TrainConfig {
    let knowledge = retrieve_toy(dir);
    let mut c = TrainConfig::new(toy_dir(), DatasetFormat::Toy, knowledge);
    c.output_dir = dir.join("run");
    c.data.vectors = Some(fixtures().join("vectors.txt"));
    let m = &mut c.model;
    m.max_len = 40;
    m.encoder_dim = 16;
    m.label_dim = 16;
    m.hidden = 12;
    m.lstm_input = 16;
    m.attention_dim = 16;
    m.bilinear_dim = 16;
    m.head_dim = 16;
    let t = &mut c.train;
    t.batch_size = 8;
    t.learning_rate = 1e-3;
    t.valid_fraction = 0.0;
    t.patience = 200;
    t.seed = 5;
    c
}

pub mod oracle;

use std::collections::BTreeMap;
use std::sync::Arc;

use kenet::attention::{attend, insert_fusion_params, BranchInput, FusionConfig, FusionDims};
use kenet::head::{head_forward, insert_head_params};
use kenet::params::{Binder, ParamStore};
use kenet::tape::{Matrix, Tape};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Random inputs and parameters for the attention block and head.
#[derive(Debug, Clone)]
pub struct Instance {
    pub params: ParamStore,
    pub cfg: FusionConfig,
    pub labels: Matrix,
    pub doc: Matrix,
    pub doc_mask: Vec<bool>,
    pub know: Option<(Matrix, Vec<bool>)>,
    pub target: Vec<f64>,
}

pub struct Shape {
    pub m: usize,
    pub l1: usize,
    pub l2: usize,
    pub h: usize,
    pub label_dim: usize,
    pub d_a: usize,
    pub k: usize,
    pub d_h: usize,
}

pub fn gaussian(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> Matrix {
    Matrix::from_shape_simple_fn((r, c), || {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

fn random_mask(rng: &mut impl Rng, l: usize, padded: bool) -> Vec<bool> {
    if !padded {
        return vec![true; l];
    }
    let mut m: Vec<bool> = (0..l).map(|_| rng.random_bool(0.7)).collect();
    let keep = rng.random_range(0..l);
    m[keep] = true;
    m
}

pub fn random_instance(rng: &mut impl Rng, s: &Shape, with_knowledge: bool, padded: bool) -> Instance {
    let mut params = ParamStore::new();
    let seed: u64 = rng.random();
    let dims = FusionDims {
        labels: s.m,
        two_h: 2 * s.h,
        label_dim: s.label_dim,
        d_a: s.d_a,
        k: s.k,
    };
    insert_fusion_params(&mut params, dims, with_knowledge, seed);
    insert_head_params(&mut params, 2 * s.h, s.d_h, seed);
    let beta_doc = if with_knowledge { rng.random_range(0.0..=1.0) } else { 0.5 };
    let doc = gaussian(rng, s.l1, 2 * s.h, 0.5);
    let doc_mask = random_mask(rng, s.l1, padded);
    let know = with_knowledge.then(|| (gaussian(rng, s.l2, 2 * s.h, 0.5), random_mask(rng, s.l2, padded)));
    Instance {
        params,
        cfg: FusionConfig {
            beta_doc,
            beta_know: 1.0 - beta_doc,
            label_softmax: false,
        },
        labels: gaussian(rng, s.m, s.label_dim, 0.5),
        doc,
        doc_mask,
        know,
        target: (0..s.m).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect(),
    }
}

impl Instance {
    pub fn oracle(&self) -> oracle::OracleTrace {
        let labels = oracle::dense(&self.labels);
        let doc = oracle::dense(&self.doc);
        let know = self.know.as_ref().map(|(m, mask)| (oracle::dense(m), mask.clone()));
        oracle::attention(
            &self.params,
            (self.cfg.beta_doc, self.cfg.beta_know),
            self.cfg.label_softmax,
            &labels,
            (&doc, &self.doc_mask),
            know.as_ref().map(|(m, mask)| (m, mask.as_slice())),
        )
    }

    pub fn oracle_loss(&self) -> f64 {
        let t = self.oracle();
        oracle::bce(&oracle::head(&self.params, &t.s), &self.target)
    }

    /// Tape loss and gradients of every trainable parameter.
    pub fn analytic(&self) -> (f64, BTreeMap<String, Matrix>) {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let labels = tape.constant(self.labels.clone());
        let doc = BranchInput {
            seq: tape.constant(self.doc.clone()),
            mask: Arc::new(self.doc_mask.clone()),
        };
        let know = self.know.as_ref().map(|(m, mask)| BranchInput {
            seq: tape.constant(m.clone()),
            mask: Arc::new(mask.clone()),
        });
        let t = attend(&mut tape, &mut binder, &self.cfg, labels, &doc, know.as_ref()).unwrap();
        let probs = head_forward(&mut tape, &mut binder, t.s).unwrap();
        let target = Arc::new(Matrix::from_shape_vec((self.target.len(), 1), self.target.clone()).unwrap());
        let loss = tape.bce_mean(probs, target);
        let value = tape.value(loss)[[0, 0]];
        let mut grads = tape.backward(loss);
        (value, binder.gradients(&mut grads))
    }

    /// Worst relative error per parameter between tape gradients and central
    /// differences of the oracle loss. Relative error is
    /// `|a − n| / max(|a|, |n|, 1e-6)`.
    pub fn gradient_check(&self, step: f64) -> BTreeMap<String, f64> {
        let (_, grads) = self.analytic();
        let mut out = BTreeMap::new();
        let mut probe = self.clone();
        for name in self.params.trainable_names() {
            let g = &grads[&name];
            let mut worst: f64 = 0.0;
            let (r, c) = g.dim();
            for i in 0..r {
                for j in 0..c {
                    let orig = self.params.value(&name).unwrap()[[i, j]];
                    probe.params.value_mut(&name).unwrap()[[i, j]] = orig + step;
                    let up = probe.oracle_loss();
                    probe.params.value_mut(&name).unwrap()[[i, j]] = orig - step;
                    let down = probe.oracle_loss();
                    probe.params.value_mut(&name).unwrap()[[i, j]] = orig;
                    let numeric = (up - down) / (2.0 * step);
                    let a = g[[i, j]];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                    worst = worst.max(rel);
                }
            }
            out.insert(name, worst);
        }
        out
    }
}

/// Largest absolute difference over every trace tensor and the head output
/// after overwriting masked rows of the encoded sequences with noise.
pub fn attention_mask_diff(rng: &mut impl Rng, inst: &Instance) -> f64 {
    let run = |i: &Instance| {
        let t = kenet::attention::forward(
            &i.params,
            &i.cfg,
            &i.labels,
            (&i.doc, &i.doc_mask),
            i.know.as_ref().map(|(m, k)| (m, k.as_slice())),
        )
        .unwrap();
        let probs = kenet::head::predict(&t.s, i.params.value("head.w").unwrap(), i.params.value("head.w_out").unwrap());
        (t, probs)
    };
    let scramble = |rng: &mut dyn rand::RngCore, m: &mut Matrix, mask: &[bool]| {
        for (r, keep) in mask.iter().enumerate() {
            if !keep {
                for x in m.row_mut(r) {
                    *x = 10.0 * (rng.random::<f64>() - 0.5);
                }
            }
        }
    };
    let mut other = inst.clone();
    scramble(rng, &mut other.doc, &inst.doc_mask);
    if let Some((m, mask)) = other.know.as_mut() {
        let mask = mask.clone();
        scramble(rng, m, &mask);
    }
    let (a, pa) = run(inst);
    let (b, pb) = run(&other);
    trace_diff(&a, &b).max(vec_diff(&pa, &pb))
}

pub fn vec_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn mat_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn trace_diff(a: &kenet::attention::AttentionTrace, b: &kenet::attention::AttentionTrace) -> f64 {
    let opt = |x: &Option<Matrix>, y: &Option<Matrix>| match (x, y) {
        (Some(x), Some(y)) => mat_diff(x, y),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    };
    [
        mat_diff(&a.a_doc, &b.a_doc),
        opt(&a.a_know, &b.a_know),
        mat_diff(&a.lambda_doc, &b.lambda_doc),
        opt(&a.lambda_know, &b.lambda_know),
        mat_diff(&a.al_doc, &b.al_doc),
        opt(&a.al_know, &b.al_know),
        mat_diff(&a.label_repr, &b.label_repr),
        mat_diff(&a.lambda_label, &b.lambda_label),
        mat_diff(&a.lambda, &b.lambda),
        mat_diff(&a.s, &b.s),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// Full-model version: token ids at masked positions are replaced by random
/// vocabulary ids; returns the largest change in probabilities or trace.
pub fn model_mask_diff(rng: &mut impl Rng, model: &kenet::model::Model, l1: usize, l2: usize) -> f64 {
    use kenet::corpus::tokenizer::TokenizedExample;
    let vocab = model.spec.dims.vocab;
    let ids = |rng: &mut dyn rand::RngCore, l: usize| (0..l).map(|_| rng.random_range(0..vocab)).collect::<Vec<_>>();
    let ex = TokenizedExample {
        id: "x".into(),
        doc_ids: ids(rng, l1),
        know_ids: ids(rng, l2),
        doc_mask: random_mask(rng, l1, true),
        know_mask: random_mask(rng, l2, true),
        target: (0..model.labels.len()).map(|_| rng.random_range(0..2u8)).collect(),
    };
    let mut other = ex.clone();
    for (id, keep) in other.doc_ids.iter_mut().zip(&ex.doc_mask) {
        if !keep {
            *id = rng.random_range(0..vocab);
        }
    }
    for (id, keep) in other.know_ids.iter_mut().zip(&ex.know_mask) {
        if !keep {
            *id = rng.random_range(0..vocab);
        }
    }
    let (pa, ta) = model.trace(&model.features(&ex).unwrap()).unwrap();
    let (pb, tb) = model.trace(&model.features(&other).unwrap()).unwrap();
    let t = match (ta, tb) {
        (Some(a), Some(b)) => trace_diff(&a, &b),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    };
    vec_diff(&pa, &pb).max(t)
}
