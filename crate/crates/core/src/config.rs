//! Run configuration, stored as TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{check_betas, FusionConfig};
use crate::corpus::DatasetFormat;
use crate::error::{Error, Result};
use crate::params::name_rng;

/// Model variant: the full network or one with a sub-module removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "no_KR")]
    NoKr,
    #[serde(rename = "no_DEm")]
    NoDem,
    #[serde(rename = "no_DEn")]
    NoDen,
    #[serde(rename = "no_LEm")]
    NoLem,
    #[serde(rename = "no_DA")]
    NoDa,
}

impl Variant {
    /// Ablations first, then the full model.
    pub const REPORT_ORDER: [Variant; 6] = [
        Variant::NoKr,
        Variant::NoDem,
        Variant::NoDen,
        Variant::NoLem,
        Variant::NoDa,
        Variant::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoKr => "no_KR",
            Variant::NoDem => "no_DEm",
            Variant::NoDen => "no_DEn",
            Variant::NoLem => "no_LEm",
            Variant::NoDa => "no_DA",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Variant::Full => "full model",
            Variant::NoKr => "w/o KR",
            Variant::NoDem => "w/o DEm",
            Variant::NoDen => "w/o DEn",
            Variant::NoLem => "w/o LEm",
            Variant::NoDa => "w/o DA",
        }
    }

    pub fn uses_knowledge(self) -> bool {
        self != Variant::NoKr
    }

    /// Parameter-name prefixes owned by the sub-module this variant removes.
    pub fn submodule_prefixes(self) -> &'static [&'static str] {
        match self {
            Variant::Full => &[],
            Variant::NoKr => &["encoder.know.", "fusion.know.", "fusion.label_know."],
            Variant::NoDem => &["embed."],
            Variant::NoDen => &["encoder."],
            Variant::NoLem => &["label_embedding"],
            Variant::NoDa => &["fusion.", "pool."],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let all = [
            Variant::Full,
            Variant::NoKr,
            Variant::NoDem,
            Variant::NoDen,
            Variant::NoLem,
            Variant::NoDa,
        ];
        all.into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Argument(format!(
                    "unknown variant `{s}` (expected one of full, no_KR, no_DEm, no_DEn, no_LEm, no_DA)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Preprocessed corpus directory (`train.jsonl`, `test.jsonl`, `labels.json`).
    pub dataset_dir: PathBuf,
    pub format: DatasetFormat,
    /// `knowledge.jsonl` written by the retrieval step.
    pub knowledge: PathBuf,
    /// Whitespace-separated word vectors; used for label embeddings and to
    /// seed the contextual encoder's token table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vectors: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub max_len: usize,
    pub encoder_dim: usize,
    pub label_dim: usize,
    pub hidden: usize,
    pub lstm_input: usize,
    pub attention_dim: usize,
    pub bilinear_dim: usize,
    pub head_dim: usize,
    pub beta_doc: f64,
    pub beta_know: f64,
    pub label_softmax: bool,
    pub share_encoder: bool,
    pub freeze_encoder: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Fraction of the training split held out for early stopping; 0 monitors
    /// the training loss instead.
    pub valid_fraction: f64,
    pub threshold: f64,
    pub nonempty_guard: bool,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: OptimConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Full,
            max_len: 250,
            encoder_dim: 300,
            label_dim: 300,
            hidden: 300,
            lstm_input: 300,
            attention_dim: 300,
            bilinear_dim: 300,
            head_dim: 300,
            beta_doc: 0.5,
            beta_know: 0.5,
            label_softmax: false,
            share_encoder: false,
            freeze_encoder: true,
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            batch_size: 128,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_epochs: 200,
            patience: 10,
            valid_fraction: 0.1,
            threshold: 0.5,
            nonempty_guard: true,
            seed: 42,
            threads: None,
        }
    }
}

impl TrainConfig {
    pub fn new(dataset_dir: impl Into<PathBuf>, format: DatasetFormat, knowledge: impl Into<PathBuf>) -> Self {
        TrainConfig {
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig {
                dataset_dir: dataset_dir.into(),
                format,
                knowledge: knowledge.into(),
                vectors: None,
            },
            model: ModelConfig::default(),
            train: OptimConfig::default(),
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            beta_doc: self.model.beta_doc,
            beta_know: self.model.beta_know,
            label_softmax: self.model.label_softmax,
        }
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::derive(self.train.seed)
    }

    pub fn validate(&self) -> Result<()> {
        check_betas(self.model.beta_doc, self.model.beta_know).map_err(|e| Error::Config(e.to_string()))?;
        let m = &self.model;
        let positive = [
            ("max_len", m.max_len),
            ("encoder_dim", m.encoder_dim),
            ("label_dim", m.label_dim),
            ("hidden", m.hidden),
            ("lstm_input", m.lstm_input),
            ("attention_dim", m.attention_dim),
            ("bilinear_dim", m.bilinear_dim),
            ("head_dim", m.head_dim),
            ("batch_size", self.train.batch_size),
            ("max_epochs", self.train.max_epochs),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{name}` must be positive")));
        }
        let t = &self.train;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.adam_beta1) || !(0.0..1.0).contains(&t.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&t.valid_fraction) {
            return Err(Error::Config("valid_fraction must lie in [0, 1)".into()));
        }
        if !(t.threshold > 0.0 && t.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::bundle::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::bundle::write_file(path, self.to_toml().as_bytes())
    }
}

/// Seeds fanned out from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub split: u64,
    pub init: u64,
    pub shuffle: u64,
}

impl Seeds {
    pub fn derive(master: u64) -> Self {
        use rand::Rng;
        let draw = |name: &str| name_rng(master, name).random::<u64>();
        Seeds {
            master,
            split: draw("seed.split"),
            init: draw("seed.init"),
            shuffle: draw("seed.shuffle"),
        }
    }
}
