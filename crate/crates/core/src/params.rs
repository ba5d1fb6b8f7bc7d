//! Named parameter storage, initialization and binding onto a [`Tape`].

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bundle::{tensor_hash, Bundle};
use crate::error::{Error, Result};
use crate::tape::{Gradients, Matrix, Tape, Var};

/// How a parameter got its initial value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Glorot,
    Normal,
    Zeros,
    Constant,
    Pretrained,
    Loaded,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Arc<Matrix>,
    pub trainable: bool,
    pub init: Init,
}

/// One row of a parameter inventory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InventoryEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub trainable: bool,
    pub init: Init,
    pub hash: String,
}

/// Deterministic per-name RNG: the stream depends on `(seed, name)` only, so
/// adding or removing other parameters never shifts a parameter's values.
pub fn name_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(name.as_bytes()).finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_shape_simple_fn((rows, cols), || rng.random_range(-a..a))
}

pub fn normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    let dist = Normal::new(0.0, std).expect("valid std");
    Matrix::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix, trainable: bool, init: Init) {
        self.entries.insert(
            name.into(),
            Param {
                value: Arc::new(value),
                trainable,
                init,
            },
        );
    }

    pub fn insert_glorot(&mut self, name: &str, rows: usize, cols: usize, seed: u64) {
        let m = glorot(rows, cols, &mut name_rng(seed, name));
        self.insert(name, m, true, Init::Glorot);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("parameter `{name}` not found")))
    }

    pub fn value(&self, name: &str) -> Result<&Matrix> {
        self.get(name).map(|p| &*p.value)
    }

    pub fn set_value(&mut self, name: &str, value: Matrix) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Lookup(format!("parameter `{name}` not found")))?;
        if p.value.dim() != value.dim() {
            return Err(Error::Argument(format!(
                "shape {:?} does not match parameter `{name}` {:?}",
                value.dim(),
                p.value.dim()
            )));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.entries.get_mut(name).map(|p| Arc::make_mut(&mut p.value))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count_scalars(&self, trainable_only: bool) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable || !trainable_only)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn inventory(&self) -> Vec<InventoryEntry> {
        self.entries
            .iter()
            .map(|(name, p)| InventoryEntry {
                name: name.clone(),
                shape: [p.value.nrows(), p.value.ncols()],
                trainable: p.trainable,
                init: p.init,
                hash: tensor_hash(&p.value),
            })
            .collect()
    }

    pub fn to_bundle(&self) -> Bundle {
        let mut b = Bundle::new();
        for (name, p) in &self.entries {
            b.insert(name.clone(), (*p.value).clone());
            b.meta.insert(format!("param.{name}"), meta_tag(p.trainable, p.init));
        }
        b
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        let mut store = ParamStore::new();
        for (name, m) in &b.tensors {
            let tag = b
                .meta
                .get(&format!("param.{name}"))
                .ok_or_else(|| Error::Serde(format!("bundle lacks metadata for `{name}`")))?;
            let (trainable, init) = parse_meta_tag(tag)?;
            store.insert(name.clone(), m.clone(), trainable, init);
        }
        Ok(store)
    }
}

fn meta_tag(trainable: bool, init: Init) -> String {
    let init = serde_json::to_value(init).expect("init serializes");
    format!("{}:{}", if trainable { "trainable" } else { "frozen" }, init.as_str().unwrap_or("loaded"))
}

fn parse_meta_tag(tag: &str) -> Result<(bool, Init)> {
    let (t, i) = tag
        .split_once(':')
        .ok_or_else(|| Error::Serde(format!("bad parameter tag `{tag}`")))?;
    let init: Init = serde_json::from_value(serde_json::Value::String(i.to_string()))?;
    Ok((t == "trainable", init))
}

/// Differences between two inventories, by parameter name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InventoryDiff {
    pub added: Vec<String>,
    pub removed: Vec<String>,
    pub changed: Vec<String>,
}

impl InventoryDiff {
    pub fn between(base: &[InventoryEntry], other: &[InventoryEntry]) -> Self {
        let a: BTreeMap<&str, &InventoryEntry> = base.iter().map(|e| (e.name.as_str(), e)).collect();
        let b: BTreeMap<&str, &InventoryEntry> = other.iter().map(|e| (e.name.as_str(), e)).collect();
        let mut diff = InventoryDiff::default();
        for (name, ea) in &a {
            match b.get(name) {
                None => diff.removed.push(name.to_string()),
                Some(eb) if eb != ea => diff.changed.push(name.to_string()),
                _ => {}
            }
        }
        diff.added = b.keys().filter(|n| !a.contains_key(*n)).map(|n| n.to_string()).collect();
        diff
    }

    pub fn touched(&self) -> impl Iterator<Item = &String> {
        self.added.iter().chain(&self.removed).chain(&self.changed)
    }

    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.changed.is_empty()
    }
}

/// Lazily places parameters on a tape, once each.
pub struct Binder<'p> {
    store: &'p ParamStore,
    vars: HashMap<String, Var>,
}

impl<'p> Binder<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Binder {
            store,
            vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let p = self.store.get(name)?;
        let v = if p.trainable {
            tape.param(p.value.clone())
        } else {
            tape.constant_shared(p.value.clone())
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound trainable parameter.
    pub fn gradients(&self, grads: &mut Gradients) -> BTreeMap<String, Matrix> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.vars {
            if self.store.entries[name].trainable {
                if let Some(g) = grads.take(*v) {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}
