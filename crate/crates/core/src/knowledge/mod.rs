//! External knowledge for documents: entity linking with a confidence filter,
//! page fetching through an on-disk cache, and entity-order concatenation of
//! the fetched passages into one knowledge text per document.
//!
//! A retrieval output directory holds `records/<doc>.json` (one
//! [`KnowledgeRecord`] per finished document, which makes runs resumable) and
//! `knowledge.jsonl` (all records in corpus order).

pub mod backend;
pub mod cache;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{read_to_string, write_file};
use crate::corpus::tokenizer::SEP;
use crate::corpus::Document;
use crate::error::{Error, Result};

pub use backend::{Annotator, FixtureBackend, PageSource, TagmeAnnotator, WikipediaPages};
pub use cache::{Cached, RetrievalCache};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Fetched pages are cut to their first this-many words.
pub const LEAD_WORDS: usize = 500;
pub const RECORDS_DIR: &str = "records";
pub const KNOWLEDGE_FILE: &str = "knowledge.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityMention {
    /// Byte offsets into the document text.
    pub start: usize,
    pub end: usize,
    pub surface: String,
    pub title: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnowledgeSource {
    Live,
    Cache,
    Fixture,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeRecord {
    pub doc_id: String,
    pub mentions: Vec<EntityMention>,
    pub text: String,
    pub source: KnowledgeSource,
}

impl KnowledgeRecord {
    pub fn fallback(doc: &Document) -> Self {
        KnowledgeRecord {
            doc_id: doc.id.clone(),
            mentions: Vec::new(),
            text: doc.text.clone(),
            source: KnowledgeSource::Fallback,
        }
    }
}

/// Mentions with `confidence > threshold`, in document order, one per
/// distinct title (its first occurrence).
pub fn link_entities(annotator: &dyn Annotator, doc_text: &str, threshold: f64) -> Result<Vec<EntityMention>> {
    if doc_text.trim().is_empty() {
        return Err(Error::Argument("cannot link entities in empty text".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Argument(format!("threshold {threshold} not in [0, 1]")));
    }
    let raw = annotator.annotate(doc_text)?;
    Ok(filter_mentions(raw, doc_text.len(), threshold))
}

pub fn filter_mentions(raw: Vec<EntityMention>, text_len: usize, threshold: f64) -> Vec<EntityMention> {
    let mut kept: Vec<EntityMention> = raw
        .into_iter()
        .filter(|m| m.confidence > threshold && m.start < m.end && m.end <= text_len)
        .collect();
    kept.sort_by_key(|m| (m.start, m.end));
    let mut seen = HashSet::new();
    kept.retain(|m| seen.insert(m.title.clone()));
    kept
}

pub fn lead_text(text: &str, max_words: usize) -> String {
    text.split_whitespace().take(max_words).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fetched {
    pub text: String,
    pub from_cache: bool,
}

/// Cache-first page lookup. Fetched pages are cut to [`LEAD_WORDS`] words and
/// stored; missing pages are remembered as missing.
pub fn fetch_entity_text(title: &str, cache: &RetrievalCache, source: &dyn PageSource, force: bool) -> Result<Fetched> {
    if title.is_empty() {
        return Err(Error::Argument("empty entity title".into()));
    }
    if !force {
        match cache.get(title)? {
            Some(Cached::Text(text)) => return Ok(Fetched { text, from_cache: true }),
            Some(Cached::Missing) => return Err(Error::MissingPage(title.to_string())),
            None => {}
        }
    }
    match source.fetch(title) {
        Ok(page) => {
            let text = lead_text(&page, LEAD_WORDS);
            cache.put(title, &text)?;
            Ok(Fetched { text, from_cache: false })
        }
        Err(Error::MissingPage(t)) => {
            cache.put_missing(title)?;
            Err(Error::MissingPage(t))
        }
        Err(e) => Err(e),
    }
}

/// Joins one passage per mention in start-offset order, separated by the
/// reserved separator token. Titles absent from `texts` are skipped; with no
/// passage left the document text is used and `source` becomes `Fallback`.
pub fn compose_knowledge(
    doc: &Document,
    mentions: &[EntityMention],
    texts: &HashMap<String, String>,
    source: KnowledgeSource,
) -> KnowledgeRecord {
    let mut ordered: Vec<&EntityMention> = mentions.iter().collect();
    ordered.sort_by_key(|m| (m.start, m.end));
    let mut seen = HashSet::new();
    let kept: Vec<EntityMention> = ordered
        .into_iter()
        .filter(|m| texts.contains_key(&m.title) && seen.insert(m.title.as_str()))
        .cloned()
        .collect();
    if kept.is_empty() {
        return KnowledgeRecord::fallback(doc);
    }
    let sep = format!(" {SEP} ");
    let text = kept.iter().map(|m| texts[&m.title].as_str()).collect::<Vec<_>>().join(&sep);
    KnowledgeRecord {
        doc_id: doc.id.clone(),
        mentions: kept,
        text,
        source,
    }
}

#[derive(Debug, Clone)]
pub struct RetrievalOptions {
    pub threshold: f64,
    pub parallelism: usize,
    /// Attempts per request for retriable transport errors.
    pub attempts: usize,
    /// Re-fetch titles even when cached.
    pub force: bool,
}

impl Default for RetrievalOptions {
    fn default() -> Self {
        RetrievalOptions {
            threshold: DEFAULT_THRESHOLD,
            parallelism: 4,
            attempts: 3,
            force: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalSummary {
    pub by_source: BTreeMap<KnowledgeSource, usize>,
    /// Documents loaded from an earlier run.
    pub resumed: usize,
    /// Page requests sent to the backend during this run.
    pub page_requests: usize,
    /// `(doc id, error)` for documents that fell back because of a failure.
    pub failures: Vec<(String, String)>,
}

impl fmt::Display for RetrievalSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let count = |s| self.by_source.get(&s).copied().unwrap_or(0);
        write!(
            f,
            "live={} cache={} fixture={} fallback={} resumed={} page_requests={} failures={}",
            count(KnowledgeSource::Live),
            count(KnowledgeSource::Cache),
            count(KnowledgeSource::Fixture),
            count(KnowledgeSource::Fallback),
            self.resumed,
            self.page_requests,
            self.failures.len()
        )
    }
}

#[derive(Debug, Clone)]
pub struct RetrievalOutcome {
    pub records: Vec<KnowledgeRecord>,
    pub summary: RetrievalSummary,
}

fn with_retries<T>(attempts: usize, mut f: impl FnMut() -> Result<T>) -> Result<T> {
    let mut last = None;
    for attempt in 0..attempts.max(1) {
        match f() {
            Err(e) if e.is_retriable() => {
                log::debug!("attempt {} failed: {e}", attempt + 1);
                std::thread::sleep(std::time::Duration::from_millis(50 << attempt.min(6)));
                last = Some(e);
            }
            other => return other,
        }
    }
    Err(last.expect("at least one attempt"))
}

fn record_path(out_dir: &Path, doc_id: &str) -> std::path::PathBuf {
    let name = cache::page_file_name(doc_id);
    out_dir.join(RECORDS_DIR).join(name.replace(".txt", ".json"))
}

enum PageOutcome {
    Text(Fetched),
    Missing,
    Failed(String),
}

/// Batch driver: one record per document, resumable from `out_dir`.
///
/// Work proceeds in phases (annotate all pending documents, fetch every
/// distinct title once, compose), so output is independent of
/// `parallelism`. Documents whose retrieval failed fall back to their own
/// text and are not materialized, so a later run retries them.
pub fn retrieve_corpus_knowledge(
    corpus: &[Document],
    annotator: &dyn Annotator,
    pages: &dyn PageSource,
    cache: &RetrievalCache,
    out_dir: &Path,
    opts: &RetrievalOptions,
) -> Result<RetrievalOutcome> {
    if corpus.is_empty() {
        return Err(Error::Argument("empty corpus".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let requests_before = pages.requests();
    let mut summary = RetrievalSummary::default();

    let mut existing: Vec<Option<KnowledgeRecord>> = Vec::with_capacity(corpus.len());
    for doc in corpus {
        let path = record_path(out_dir, &doc.id);
        existing.push(if path.exists() {
            Some(serde_json::from_str(&read_to_string(&path)?)?)
        } else {
            None
        });
    }
    let pending: Vec<usize> = (0..corpus.len()).filter(|&i| existing[i].is_none()).collect();
    summary.resumed = corpus.len() - pending.len();
    log::info!("{} documents to retrieve, {} resumed", pending.len(), summary.resumed);

    let linked: Vec<Result<Vec<EntityMention>>> = pool.install(|| {
        pending
            .par_iter()
            .map(|&i| with_retries(opts.attempts, || link_entities(annotator, &corpus[i].text, opts.threshold)))
            .collect()
    });

    let mut titles: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for m in linked.iter().flatten().flatten() {
        if seen.insert(m.title.clone()) {
            titles.push(m.title.clone());
        }
    }
    let fetched: Vec<PageOutcome> = pool.install(|| {
        titles
            .par_iter()
            .map(|t| match with_retries(opts.attempts, || fetch_entity_text(t, cache, pages, opts.force)) {
                Ok(f) => PageOutcome::Text(f),
                Err(Error::MissingPage(_)) => PageOutcome::Missing,
                Err(e) if e.is_retriable() => PageOutcome::Failed(e.to_string()),
                Err(e) => PageOutcome::Failed(format!("unrecoverable: {e}")),
            })
            .collect()
    });
    if let Some(PageOutcome::Failed(msg)) = fetched.iter().find(|o| matches!(o, PageOutcome::Failed(m) if m.starts_with("unrecoverable"))) {
        return Err(Error::Config(msg.clone()));
    }
    let outcome: HashMap<&str, &PageOutcome> = titles.iter().map(String::as_str).zip(&fetched).collect();

    for (&i, linked) in pending.iter().zip(linked) {
        let doc = &corpus[i];
        let record = match linked {
            Err(e) => {
                summary.failures.push((doc.id.clone(), e.to_string()));
                KnowledgeRecord::fallback(doc)
            }
            Ok(mentions) => {
                let mut texts = HashMap::new();
                let mut all_cached = true;
                let mut failure = None;
                for m in &mentions {
                    match outcome[m.title.as_str()] {
                        PageOutcome::Text(f) => {
                            all_cached &= f.from_cache;
                            texts.insert(m.title.clone(), f.text.clone());
                        }
                        PageOutcome::Missing => {}
                        PageOutcome::Failed(e) => failure = Some(e.clone()),
                    }
                }
                match failure {
                    Some(e) => {
                        summary.failures.push((doc.id.clone(), e));
                        KnowledgeRecord::fallback(doc)
                    }
                    None => {
                        let source = if all_cached { KnowledgeSource::Cache } else { pages.kind() };
                        let rec = compose_knowledge(doc, &mentions, &texts, source);
                        write_file(&record_path(out_dir, &doc.id), serde_json::to_string(&rec)?.as_bytes())?;
                        rec
                    }
                }
            }
        };
        existing[i] = Some(record);
    }

    let records: Vec<KnowledgeRecord> = existing.into_iter().map(|r| r.expect("every document resolved")).collect();
    for r in &records {
        *summary.by_source.entry(r.source).or_default() += 1;
    }
    summary.page_requests = pages.requests() - requests_before;
    write_knowledge(&out_dir.join(KNOWLEDGE_FILE), &records)?;
    log::info!("retrieval summary: {summary}");
    Ok(RetrievalOutcome { records, summary })
}

pub fn write_knowledge(path: &Path, records: &[KnowledgeRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

/// Reads a `knowledge.jsonl` file into a doc-id map.
pub fn load_knowledge(path: &Path) -> Result<HashMap<String, KnowledgeRecord>> {
    let mut map = HashMap::new();
    for (i, line) in read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: KnowledgeRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        map.insert(r.doc_id.clone(), r);
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::backend::LexiconEntry;
    use super::*;

    fn mention(title: &str, start: usize, confidence: f64) -> EntityMention {
        EntityMention {
            start,
            end: start + 1,
            surface: title.into(),
            title: title.into(),
            confidence,
        }
    }

    fn fixture(entries: &[(&str, f64)], pages: &[(&str, &str)]) -> FixtureBackend {
        FixtureBackend::new(
            entries
                .iter()
                .map(|(s, c)| LexiconEntry {
                    surface: s.to_string(),
                    title: s.to_string(),
                    confidence: *c,
                })
                .collect(),
            pages.iter().map(|(t, p)| (t.to_string(), p.to_string())).collect(),
        )
        .unwrap()
    }

    #[test]
    fn no_entities_gives_empty_list() {
        let fx = fixture(&[("Paris", 0.9)], &[]);
        assert!(link_entities(&fx, "nothing to see here", 0.5).unwrap().is_empty());
    }

    #[test]
    fn threshold_drops_low_confidence() {
        let fx = fixture(&[("Paris", 0.9), ("bank", 0.3)], &[]);
        let m = link_entities(&fx, "a bank in Paris", 0.5).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].title, "Paris");
    }

    #[test]
    fn threshold_is_strict() {
        let fx = fixture(&[("Exact", 0.5)], &[]);
        assert!(link_entities(&fx, "Exact", 0.5).unwrap().is_empty());
    }

    #[test]
    fn duplicate_titles_keep_first_occurrence() {
        let fx = fixture(&[("Paris", 0.9)], &[]);
        let m = link_entities(&fx, "Paris and Paris", 0.5).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].start, 0);
    }

    #[test]
    fn empty_text_is_rejected() {
        let fx = fixture(&[], &[]);
        assert!(link_entities(&fx, "  ", 0.5).is_err());
    }

    #[test]
    fn compose_orders_by_offset() {
        let doc = Document::new("d", "text", ["x"]);
        let texts: HashMap<String, String> =
            [("A".to_string(), "pa".to_string()), ("B".to_string(), "pb".to_string())].into();
        let r = compose_knowledge(&doc, &[mention("B", 40, 0.9), mention("A", 5, 0.9)], &texts, KnowledgeSource::Fixture);
        assert_eq!(r.text, "pa [SEP] pb");
        assert_eq!(r.source, KnowledgeSource::Fixture);
    }

    #[test]
    fn compose_without_mentions_falls_back_to_document() {
        let doc = Document::new("d", "the document", ["x"]);
        let r = compose_knowledge(&doc, &[], &HashMap::new(), KnowledgeSource::Fixture);
        assert_eq!(r.text, "the document");
        assert_eq!(r.source, KnowledgeSource::Fallback);
    }

    #[test]
    fn fetch_is_served_from_cache_second_time() {
        let dir = tempfile::tempdir().unwrap();
        let cache = RetrievalCache::open(dir.path()).unwrap();
        let fx = fixture(&[], &[("Paris", "Paris is the capital of France.")]);
        let a = fetch_entity_text("Paris", &cache, &fx, false).unwrap();
        let b = fetch_entity_text("Paris", &cache, &fx, false).unwrap();
        assert!(!a.from_cache && b.from_cache);
        assert_eq!(b.text, "Paris is the capital of France.");
        assert_eq!(fx.requests(), 1);
        fetch_entity_text("Paris", &cache, &fx, true).unwrap();
        assert_eq!(fx.requests(), 2);
    }

    #[test]
    fn missing_page_is_cached_as_missing() {
        let dir = tempfile::tempdir().unwrap();
        let cache = RetrievalCache::open(dir.path()).unwrap();
        let fx = fixture(&[], &[]);
        assert!(matches!(fetch_entity_text("Atlantis", &cache, &fx, false), Err(Error::MissingPage(_))));
        assert!(matches!(fetch_entity_text("Atlantis", &cache, &fx, false), Err(Error::MissingPage(_))));
        assert_eq!(fx.requests(), 1);
    }

    #[test]
    fn lead_text_truncates_words() {
        let long = (0..800).map(|i| i.to_string()).collect::<Vec<_>>().join("  ");
        assert_eq!(lead_text(&long, LEAD_WORDS).split(' ').count(), 500);
    }
}
