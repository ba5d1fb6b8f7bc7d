//! Data preparation, the training loop, evaluation and run records.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Seeds, TrainConfig, Variant};
use crate::corpus::tokenizer::make_example;
use crate::corpus::{decode_labels, load_dataset, split_validation, Dataset, Document};
use crate::error::{Error, Result};
use crate::head::{write_predictions, PredictionResult, PredictionRow};
use crate::knowledge::{load_knowledge, KnowledgeRecord};
use crate::metrics::{Counts, MetricsReport};
use crate::model::{Features, Model, ModelSpec};
use crate::params::{name_rng, ParamStore};
use crate::representation::labels::{embed_labels, random_label_embeddings, WordVectors};
use crate::representation::plm::ContextualEncoder;
use crate::tape::Matrix;

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const RUN_RECORD: &str = "run.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const PREDICTIONS: &str = "predictions.tsv";
pub const TOP_K: usize = 5;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: HashMap<String, Matrix>,
    v: HashMap<String, Matrix>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        let t = &cfg.train;
        Adam::new(t.learning_rate, t.adam_beta1, t.adam_beta2, t.adam_eps)
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Matrix>) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, g) in grads {
            let Some(value) = params.value_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.dim()));
            ndarray::Zip::from(value).and(m).and(v).and(g).for_each(|w, m, v, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once the monitored loss has failed to improve for `patience`
/// consecutive epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            StopDecision::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when no validation partition is held out.
    pub valid_loss: Option<f64>,
    pub secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub seeds: Seeds,
    pub variant: Variant,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub valid_label_coverage: f64,
    pub trainable_parameters: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub train_metrics: MetricsReport,
    pub valid_metrics: Option<MetricsReport>,
    pub test_metrics: MetricsReport,
    pub wall_clock_secs: f64,
    pub checkpoint: PathBuf,
    pub checkpoint_hash: String,
}

impl RunRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::bundle::write_file(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&crate::bundle::read_to_string(path)?)?)
    }

    pub fn losses(&self) -> Vec<(f64, Option<f64>)> {
        self.epochs.iter().map(|e| (e.train_loss, e.valid_loss)).collect()
    }
}

/// Dataset split selector for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::Argument(format!("unknown split `{s}`"))),
        }
    }
}

/// Corpus, knowledge and partitions for one configuration.
#[derive(Debug, Clone)]
pub struct RunData {
    pub dataset: Dataset,
    pub knowledge: HashMap<String, KnowledgeRecord>,
    pub train: Vec<Document>,
    pub valid: Vec<Document>,
    pub valid_label_coverage: f64,
}

impl RunData {
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let dataset = load_dataset(&cfg.data.dataset_dir, cfg.data.format)?;
        let knowledge = if cfg.data.knowledge.exists() {
            load_knowledge(&cfg.data.knowledge)?
        } else if cfg.model.variant.uses_knowledge() {
            return Err(Error::Config(format!(
                "knowledge file {} not found; run the retrieval step first",
                cfg.data.knowledge.display()
            )));
        } else {
            HashMap::new()
        };
        let seeds = cfg.seeds();
        let (train, valid, valid_label_coverage) = if cfg.train.valid_fraction > 0.0 {
            let s = split_validation(&dataset.train, cfg.train.valid_fraction, seeds.split)?;
            (s.train, s.valid, s.valid_label_coverage)
        } else {
            (dataset.train.clone(), Vec::new(), 0.0)
        };
        Ok(RunData {
            dataset,
            knowledge,
            train,
            valid,
            valid_label_coverage,
        })
    }

    pub fn split(&self, split: Split) -> &[Document] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.dataset.test,
        }
    }

    pub fn knowledge_for(&self, doc: &Document, variant: Variant) -> Result<KnowledgeRecord> {
        match self.knowledge.get(&doc.id) {
            Some(k) => Ok(k.clone()),
            None if !variant.uses_knowledge() => Ok(KnowledgeRecord::fallback(doc)),
            None => Err(Error::Config(format!("no knowledge record for document `{}`", doc.id))),
        }
    }

    /// Tokens of every document and knowledge text, in corpus order.
    pub fn encoder_words(&self) -> Vec<String> {
        let docs = self.dataset.train.iter().chain(&self.dataset.test);
        let mut texts: Vec<&str> = Vec::new();
        for d in docs {
            texts.push(&d.text);
            if let Some(k) = self.knowledge.get(&d.id) {
                texts.push(&k.text);
            }
        }
        ContextualEncoder::corpus_words(texts)
    }
}

fn load_vectors(cfg: &TrainConfig) -> Result<Option<WordVectors>> {
    cfg.data.vectors.as_deref().map(WordVectors::load).transpose()
}

/// Freshly initialized model for `cfg` over `data`.
pub fn build_model(cfg: &TrainConfig, data: &RunData) -> Result<Model> {
    let seeds = cfg.seeds();
    let vectors = load_vectors(cfg)?;
    let seed_table = match &vectors {
        Some(v) if v.dim() == cfg.model.encoder_dim => Some(v),
        Some(v) => {
            log::warn!(
                "word vectors have width {}, encoder width is {}; token table starts random",
                v.dim(),
                cfg.model.encoder_dim
            );
            None
        }
        None => None,
    };
    let encoder = ContextualEncoder::build(data.encoder_words(), seed_table, cfg.model.encoder_dim, seeds.init)?;
    let vocab = &data.dataset.vocab;
    let labels = match (&vectors, cfg.model.variant) {
        (Some(v), variant) if variant != Variant::NoLem => {
            if v.dim() != cfg.model.label_dim {
                return Err(Error::Config(format!(
                    "word vectors have width {}, label_dim is {}",
                    v.dim(),
                    cfg.model.label_dim
                )));
            }
            embed_labels(vocab, v, seeds.init)
        }
        _ => random_label_embeddings(vocab, cfg.model.label_dim, seeds.init),
    };
    let spec = ModelSpec::from_config(cfg, vocab.len(), encoder.tokenizer.len());
    Model::build(spec, &encoder, vocab.clone(), &labels, seeds.init)
}

pub fn features_for(model: &Model, data: &RunData, docs: &[Document]) -> Result<Vec<Features>> {
    docs.par_iter()
        .map(|d| {
            let know = data.knowledge_for(d, model.variant())?;
            let ex = make_example(d, &know, &model.labels, &model.tokenizer, model.spec.max_len)?;
            model.features(&ex)
        })
        .collect()
}

/// Predictions and metrics over a feature set.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub ids: Vec<String>,
    pub predictions: Vec<PredictionResult>,
    pub report: MetricsReport,
    pub mean_loss: f64,
}

impl Evaluation {
    pub fn rows(&self, model: &Model, k: usize) -> Vec<PredictionRow> {
        self.ids
            .iter()
            .zip(&self.predictions)
            .map(|(id, p)| PredictionRow {
                doc_id: id.clone(),
                decided: decode_labels(&p.decided, &model.labels).into_iter().collect(),
                top: p
                    .top_k(k)
                    .into_iter()
                    .map(|i| (model.labels.name(i).to_string(), p.probs[i]))
                    .collect(),
            })
            .collect()
    }
}

pub fn evaluate_features(model: &Model, feats: &[Features], threshold: f64, guard: bool) -> Result<Evaluation> {
    let probs: Vec<Vec<f64>> = feats.par_iter().map(|f| model.predict(f)).collect::<Result<_>>()?;
    let mut counts = Counts::default();
    let mut predictions = Vec::with_capacity(feats.len());
    let mut loss = 0.0;
    for (f, p) in feats.iter().zip(probs) {
        let truth: Vec<u8> = f.target.iter().map(|v| *v as u8).collect();
        let column = Matrix::from_shape_vec((p.len(), 1), p.clone()).expect("column");
        loss += crate::tape::bce_mean(&column, &f.target);
        let pred = PredictionResult::new(p, threshold, guard)?;
        counts = counts.merge(crate::metrics::count(&[truth], std::slice::from_ref(&pred.decided))?);
        predictions.push(pred);
    }
    Ok(Evaluation {
        ids: feats.iter().map(|f| f.id.clone()).collect(),
        predictions,
        report: MetricsReport::from_counts(counts),
        mean_loss: if feats.is_empty() { 0.0 } else { loss / feats.len() as f64 },
    })
}

fn mean_loss(model: &Model, feats: &[Features]) -> Result<f64> {
    let losses: Vec<f64> = feats.par_iter().map(|f| model.loss(f)).collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// One pass over `feats` in the given order; returns the mean example loss.
pub fn train_epoch(
    model: &mut Model,
    adam: &mut Adam,
    feats: &[Features],
    order: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for batch in order.chunks(batch_size) {
        let results: Vec<(f64, BTreeMap<String, Matrix>)> = {
            let m: &Model = model;
            batch.par_iter().map(|&i| m.loss_and_grads(&feats[i])).collect::<Result<_>>()?
        };
        let mut sum: BTreeMap<String, Matrix> = BTreeMap::new();
        for (loss, grads) in results {
            total += loss;
            for (name, g) in grads {
                match sum.get_mut(&name) {
                    Some(acc) => *acc += &g,
                    None => {
                        sum.insert(name, g);
                    }
                }
            }
        }
        let scale = 1.0 / batch.len() as f64;
        for g in sum.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
        adam.step(&mut model.params, &sum);
    }
    Ok(total / order.len().max(1) as f64)
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(f),
        None => f(),
    }
}

/// Trains per `cfg`, writes the checkpoint, predictions and run record under
/// `cfg.output_dir`, and returns the record.
pub fn train(cfg: &TrainConfig) -> Result<RunRecord> {
    with_threads(cfg.train.threads, || train_inner(cfg))
}

fn train_inner(cfg: &TrainConfig) -> Result<RunRecord> {
    let started = Instant::now();
    let data = RunData::load(cfg)?;
    let seeds = cfg.seeds();
    let mut model = build_model(cfg, &data)?;
    log::info!(
        "variant {}: {} trainable scalars, {} train / {} valid / {} test documents",
        cfg.model.variant,
        model.params.count_scalars(true),
        data.train.len(),
        data.valid.len(),
        data.dataset.test.len()
    );
    let train_feats = features_for(&model, &data, &data.train)?;
    let valid_feats = features_for(&model, &data, &data.valid)?;
    let test_feats = features_for(&model, &data, &data.dataset.test)?;

    let mut adam = Adam::from_config(cfg);
    let mut stopper = EarlyStopping::new(cfg.train.patience);
    let mut best = model.params.clone();
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let base: Vec<usize> = (0..train_feats.len()).collect();
    for epoch in 1..=cfg.train.max_epochs {
        let t0 = Instant::now();
        let mut order = base.clone();
        order.shuffle(&mut name_rng(seeds.shuffle, &format!("epoch:{epoch}")));
        let train_loss = train_epoch(&mut model, &mut adam, &train_feats, &order, cfg.train.batch_size)?;
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                message: format!("training loss is {train_loss}"),
            });
        }
        let valid_loss = if valid_feats.is_empty() {
            None
        } else {
            Some(mean_loss(&model, &valid_feats)?)
        };
        let monitored = valid_loss.unwrap_or(train_loss);
        if !monitored.is_finite() {
            return Err(Error::Diverged {
                epoch,
                message: format!("validation loss is {monitored}"),
            });
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
            secs: t0.elapsed().as_secs_f64(),
        });
        log::info!("epoch {epoch}: train {train_loss:.5} monitored {monitored:.5}");
        match stopper.observe(epoch, monitored) {
            StopDecision::Improved => best = model.params.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = epoch < cfg.train.max_epochs;
                log::info!("stopping after epoch {epoch}; best epoch {}", stopper.best_epoch);
                break;
            }
        }
    }
    model.params = best;

    let t = &cfg.train;
    let train_eval = evaluate_features(&model, &train_feats, t.threshold, t.nonempty_guard)?;
    let valid_eval = if valid_feats.is_empty() {
        None
    } else {
        Some(evaluate_features(&model, &valid_feats, t.threshold, t.nonempty_guard)?)
    };
    let test_eval = evaluate_features(&model, &test_feats, t.threshold, t.nonempty_guard)?;

    let out = &cfg.output_dir;
    cfg.save(&out.join(CONFIG_FILE))?;
    let checkpoint = out.join(CHECKPOINT_DIR);
    let checkpoint_hash = model.save(&checkpoint)?;
    write_predictions(&out.join(PREDICTIONS), &test_eval.rows(&model, TOP_K))?;
    let record = RunRecord {
        config: cfg.clone(),
        seeds,
        variant: cfg.model.variant,
        n_train: data.train.len(),
        n_valid: data.valid.len(),
        n_test: data.dataset.test.len(),
        valid_label_coverage: data.valid_label_coverage,
        trainable_parameters: model.params.count_scalars(true),
        epochs,
        best_epoch: stopper.best_epoch,
        stopped_early,
        train_metrics: train_eval.report,
        valid_metrics: valid_eval.map(|e| e.report),
        test_metrics: test_eval.report,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        checkpoint,
        checkpoint_hash,
    };
    record.save(&out.join(RUN_RECORD))?;
    Ok(record)
}

/// Reloads a checkpoint and scores one split of the configured corpus.
pub fn evaluate(checkpoint: &Path, cfg: &TrainConfig, split: Split) -> Result<Evaluation> {
    let model = Model::load(checkpoint)?;
    let data = RunData::load(cfg)?;
    if model.labels != data.dataset.vocab {
        return Err(Error::Config(format!(
            "checkpoint has {} labels that do not match the corpus's {}",
            model.labels.len(),
            data.dataset.vocab.len()
        )));
    }
    let docs = data.split(split);
    if docs.is_empty() {
        return Err(Error::Argument(format!("split {split:?} is empty")));
    }
    let feats = with_threads(cfg.train.threads, || features_for(&model, &data, docs))?;
    evaluate_features(&model, &feats, cfg.train.threshold, cfg.train.nonempty_guard)
}
