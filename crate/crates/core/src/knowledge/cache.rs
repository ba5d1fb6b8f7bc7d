//! On-disk cache of fetched entity pages.
//!
//! Layout of a cache directory:
//!
//! ```text
//! <cache>/index.json          {"version": 1, "entries": {title: {file, fetched_at, sha256, missing}}}
//! <cache>/pages/<name>.txt    page text, one file per title
//! ```
//!
//! `<name>` is the title with every character outside `[A-Za-z0-9_-]`
//! replaced by `_`, followed by `-` and the first 12 hex digits of the
//! title's SHA-256. Titles known to have no page are stored as index entries
//! with `missing: true` and no file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::bundle::{read_to_string, sha256_hex, write_file};
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.json";
pub const PAGES_DIR: &str = "pages";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    pub fetched_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
    #[serde(default)]
    pub missing: bool,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Index {
    version: u32,
    entries: BTreeMap<String, CacheEntry>,
}

/// What the cache knows about a title.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Cached {
    Text(String),
    Missing,
}

#[derive(Debug)]
pub struct RetrievalCache {
    root: PathBuf,
    index: Mutex<Index>,
}

pub fn page_file_name(title: &str) -> String {
    let stem: String = title
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .take(80)
        .collect();
    format!("{stem}-{}.txt", &sha256_hex(title.as_bytes())[..12])
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RetrievalCache {
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root.join(PAGES_DIR)).map_err(|e| Error::io(root, e))?;
        let index_path = root.join(INDEX_FILE);
        let index = if index_path.exists() {
            serde_json::from_str(&read_to_string(&index_path)?)?
        } else {
            Index {
                version: 1,
                entries: BTreeMap::new(),
            }
        };
        Ok(RetrievalCache {
            root: root.to_path_buf(),
            index: Mutex::new(index),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.index.lock().expect("cache index poisoned").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entry(&self, title: &str) -> Option<CacheEntry> {
        self.index.lock().expect("cache index poisoned").entries.get(title).cloned()
    }

    pub fn get(&self, title: &str) -> Result<Option<Cached>> {
        let Some(entry) = self.entry(title) else {
            return Ok(None);
        };
        if entry.missing {
            return Ok(Some(Cached::Missing));
        }
        let Some(file) = entry.file else {
            return Ok(None);
        };
        let path = self.root.join(PAGES_DIR).join(file);
        match fs::read_to_string(&path) {
            Ok(text) => Ok(Some(Cached::Text(text))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    /// Stores `text` for `title`. Concurrent writers of the same title race
    /// with last-write-wins semantics.
    pub fn put(&self, title: &str, text: &str) -> Result<()> {
        let file = page_file_name(title);
        write_file(&self.root.join(PAGES_DIR).join(&file), text.as_bytes())?;
        self.update(
            title,
            CacheEntry {
                file: Some(file),
                fetched_at: now(),
                sha256: Some(sha256_hex(text.as_bytes())),
                missing: false,
            },
        )
    }

    pub fn put_missing(&self, title: &str) -> Result<()> {
        self.update(
            title,
            CacheEntry {
                file: None,
                fetched_at: now(),
                sha256: None,
                missing: true,
            },
        )
    }

    fn update(&self, title: &str, entry: CacheEntry) -> Result<()> {
        let mut index = self.index.lock().expect("cache index poisoned");
        index.entries.insert(title.to_string(), entry);
        let text = serde_json::to_string_pretty(&*index)?;
        write_file(&self.root.join(INDEX_FILE), text.as_bytes())
    }
}
