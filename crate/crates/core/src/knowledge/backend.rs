//! Entity annotators and page sources: an offline fixture backend and the
//! live HTTP backends (a TagMe-compatible annotator and the MediaWiki API).

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::Deserialize;

use super::{EntityMention, KnowledgeSource};
use crate::bundle::read_to_string;
use crate::error::{Error, Result};

pub const LEXICON_FILE: &str = "lexicon.jsonl";
pub const PAGES_FILE: &str = "pages.jsonl";
pub const TAGME_TOKEN_ENV: &str = "KENET_TAGME_TOKEN";
pub const TAGME_URL_ENV: &str = "KENET_TAGME_URL";
pub const WIKI_URL_ENV: &str = "KENET_WIKI_URL";

/// Produces raw candidate mentions with confidences (no filtering).
pub trait Annotator: Sync {
    fn annotate(&self, text: &str) -> Result<Vec<EntityMention>>;
}

/// Returns the page text for a canonical entity title.
pub trait PageSource: Sync {
    fn kind(&self) -> KnowledgeSource;
    fn fetch(&self, title: &str) -> Result<String>;
    /// Number of fetch requests issued so far.
    fn requests(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct LexiconEntry {
    pub surface: String,
    pub title: String,
    pub confidence: f64,
}

#[derive(Debug, Deserialize)]
struct PageLine {
    title: String,
    text: String,
}

/// Offline backend: a surface-form lexicon for annotation and a page table.
///
/// Annotation scans the text left to right and, at every word start, takes
/// the longest lexicon surface that matches case-sensitively and ends on a
/// word boundary. Matches never overlap.
#[derive(Debug, Default)]
pub struct FixtureBackend {
    lexicon: Vec<LexiconEntry>,
    pages: HashMap<String, String>,
    requests: AtomicUsize,
}

fn read_jsonl_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

impl FixtureBackend {
    pub fn new(mut lexicon: Vec<LexiconEntry>, pages: HashMap<String, String>) -> Result<Self> {
        for e in &lexicon {
            if e.surface.is_empty() || !(0.0..=1.0).contains(&e.confidence) {
                return Err(Error::Argument(format!("bad lexicon entry {e:?}")));
            }
        }
        // longest surface first; ties keep file order
        lexicon.sort_by_key(|e| std::cmp::Reverse(e.surface.len()));
        Ok(FixtureBackend {
            lexicon,
            pages,
            requests: AtomicUsize::new(0),
        })
    }

    /// Loads `lexicon.jsonl` and `pages.jsonl` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let lexicon = read_jsonl_lines(&dir.join(LEXICON_FILE))?;
        let pages: Vec<PageLine> = read_jsonl_lines(&dir.join(PAGES_FILE))?;
        Self::new(lexicon, pages.into_iter().map(|p| (p.title, p.text)).collect())
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

impl Annotator for FixtureBackend {
    fn annotate(&self, text: &str) -> Result<Vec<EntityMention>> {
        let mut out = Vec::new();
        let mut pos = 0;
        let mut prev: Option<char> = None;
        while pos < text.len() {
            let rest = &text[pos..];
            let at_word_start = prev.is_none_or(|p| !is_word_char(p));
            if at_word_start {
                let hit = self.lexicon.iter().find(|e| {
                    rest.starts_with(&e.surface)
                        && rest[e.surface.len()..].chars().next().is_none_or(|c| !is_word_char(c))
                });
                if let Some(e) = hit {
                    out.push(EntityMention {
                        start: pos,
                        end: pos + e.surface.len(),
                        surface: e.surface.clone(),
                        title: e.title.clone(),
                        confidence: e.confidence,
                    });
                    prev = e.surface.chars().last();
                    pos += e.surface.len();
                    continue;
                }
            }
            let c = rest.chars().next().expect("pos < len");
            prev = Some(c);
            pos += c.len_utf8();
        }
        Ok(out)
    }
}

impl PageSource for FixtureBackend {
    fn kind(&self) -> KnowledgeSource {
        KnowledgeSource::Fixture
    }

    fn fetch(&self, title: &str) -> Result<String> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        self.pages
            .get(title)
            .cloned()
            .ok_or_else(|| Error::MissingPage(title.to_string()))
    }

    fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

/// Enforces a minimum spacing between requests to one host.
#[derive(Debug)]
pub struct RateLimiter {
    min_interval: Duration,
    next: Mutex<Instant>,
}

impl RateLimiter {
    pub fn new(min_interval: Duration) -> Self {
        RateLimiter {
            min_interval,
            next: Mutex::new(Instant::now()),
        }
    }

    pub fn wait(&self) {
        let slot = {
            let mut next = self.next.lock().expect("rate limiter poisoned");
            let slot = (*next).max(Instant::now());
            *next = slot + self.min_interval;
            slot
        };
        let now = Instant::now();
        if slot > now {
            std::thread::sleep(slot - now);
        }
    }
}

fn http_client(timeout: Duration) -> Result<reqwest::blocking::Client> {
    reqwest::blocking::Client::builder()
        .timeout(timeout)
        .user_agent(concat!("kenet/", env!("CARGO_PKG_VERSION")))
        .build()
        .map_err(|e| Error::Config(format!("http client: {e}")))
}

fn get_json<T: for<'de> Deserialize<'de>>(
    client: &reqwest::blocking::Client,
    base: &str,
    params: &[(&str, &str)],
) -> Result<T> {
    let url = reqwest::Url::parse_with_params(base, params)
        .map_err(|e| Error::Config(format!("bad url {base}: {e}")))?;
    let resp = client.get(url).send().map_err(|e| Error::Transport(e.to_string()))?;
    let status = resp.status();
    if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
        return Err(Error::Config(format!("{base} rejected credentials ({status})")));
    }
    if !status.is_success() {
        return Err(Error::Transport(format!("{base} answered {status}")));
    }
    resp.json().map_err(|e| Error::Transport(format!("bad response body from {base}: {e}")))
}

#[derive(Debug, Deserialize)]
struct TagmeResponse {
    #[serde(default)]
    annotations: Vec<TagmeAnnotation>,
}

#[derive(Debug, Deserialize)]
struct TagmeAnnotation {
    start: usize,
    end: usize,
    #[serde(default)]
    spot: Option<String>,
    #[serde(default)]
    title: Option<String>,
    rho: f64,
}

/// Client for a TagMe-compatible `GET <base>/tag?text=..&lang=..&gcube-token=..`
/// endpoint. `rho` is used as the confidence; offsets are converted from
/// characters to byte offsets.
#[derive(Debug)]
pub struct TagmeAnnotator {
    endpoint: String,
    token: String,
    lang: String,
    client: reqwest::blocking::Client,
    limiter: RateLimiter,
}

impl TagmeAnnotator {
    pub fn new(base_url: &str, token: &str, min_interval: Duration) -> Result<Self> {
        Ok(TagmeAnnotator {
            endpoint: format!("{}/tag", base_url.trim_end_matches('/')),
            token: token.to_string(),
            lang: "en".into(),
            client: http_client(Duration::from_secs(30))?,
            limiter: RateLimiter::new(min_interval),
        })
    }

    pub fn from_env(min_interval: Duration) -> Result<Self> {
        let token = std::env::var(TAGME_TOKEN_ENV)
            .map_err(|_| Error::Config(format!("{TAGME_TOKEN_ENV} is not set")))?;
        let base = std::env::var(TAGME_URL_ENV).unwrap_or_else(|_| "https://tagme.d4science.org/tagme".into());
        Self::new(&base, &token, min_interval)
    }
}

fn char_to_byte_offsets(text: &str) -> Vec<usize> {
    let mut v: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
    v.push(text.len());
    v
}

impl Annotator for TagmeAnnotator {
    fn annotate(&self, text: &str) -> Result<Vec<EntityMention>> {
        self.limiter.wait();
        let resp: TagmeResponse = get_json(
            &self.client,
            &self.endpoint,
            &[("text", text), ("lang", &self.lang), ("gcube-token", &self.token)],
        )?;
        let offsets = char_to_byte_offsets(text);
        let mut out = Vec::new();
        for a in resp.annotations {
            let (Some(&start), Some(&end)) = (offsets.get(a.start), offsets.get(a.end)) else {
                log::warn!("annotation offsets {}..{} outside text; skipped", a.start, a.end);
                continue;
            };
            let Some(title) = a.title else { continue };
            if start >= end {
                continue;
            }
            out.push(EntityMention {
                start,
                end,
                surface: a.spot.unwrap_or_else(|| text[start..end].to_string()),
                title,
                confidence: a.rho.clamp(0.0, 1.0),
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Deserialize)]
struct WikiResponse {
    query: Option<WikiQuery>,
}

#[derive(Debug, Deserialize)]
struct WikiQuery {
    #[serde(default)]
    pages: Vec<WikiPage>,
}

#[derive(Debug, Deserialize)]
struct WikiPage {
    #[serde(default)]
    missing: bool,
    #[serde(default)]
    extract: Option<String>,
}

/// Lead-section extracts from the MediaWiki `action=query&prop=extracts` API.
#[derive(Debug)]
pub struct WikipediaPages {
    endpoint: String,
    client: reqwest::blocking::Client,
    limiter: RateLimiter,
    requests: AtomicUsize,
}

impl WikipediaPages {
    pub fn new(base_url: &str, min_interval: Duration) -> Result<Self> {
        Ok(WikipediaPages {
            endpoint: format!("{}/w/api.php", base_url.trim_end_matches('/')),
            client: http_client(Duration::from_secs(30))?,
            limiter: RateLimiter::new(min_interval),
            requests: AtomicUsize::new(0),
        })
    }

    pub fn from_env(min_interval: Duration) -> Result<Self> {
        let base = std::env::var(WIKI_URL_ENV).unwrap_or_else(|_| "https://en.wikipedia.org".into());
        Self::new(&base, min_interval)
    }
}

impl PageSource for WikipediaPages {
    fn kind(&self) -> KnowledgeSource {
        KnowledgeSource::Live
    }

    fn fetch(&self, title: &str) -> Result<String> {
        self.limiter.wait();
        self.requests.fetch_add(1, Ordering::SeqCst);
        let resp: WikiResponse = get_json(
            &self.client,
            &self.endpoint,
            &[
                ("action", "query"),
                ("prop", "extracts"),
                ("exintro", "1"),
                ("explaintext", "1"),
                ("redirects", "1"),
                ("format", "json"),
                ("formatversion", "2"),
                ("titles", title),
            ],
        )?;
        let page = resp.query.and_then(|q| q.pages.into_iter().next());
        match page {
            Some(p) if !p.missing => match p.extract {
                Some(t) if !t.trim().is_empty() => Ok(t),
                _ => Err(Error::MissingPage(title.to_string())),
            },
            _ => Err(Error::MissingPage(title.to_string())),
        }
    }

    fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}
