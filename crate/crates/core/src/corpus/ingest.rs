//! Converters from the public raw distributions to the JSON-lines layout.
//!
//! * `reuters21578`: the `reut2-*.sgm` SGML files. Documents with
//!   `TOPICS="YES"` and `LEWISSPLIT` in {TRAIN, TEST} form the ModApte pool;
//!   the label set is every topic with at least one ModApte train and one
//!   test document (90 topics), and documents without any of them are dropped
//!   (10,788 remain). [`ReutersSplit::Resplit`] then re-partitions the pool
//!   into `round(train_fraction · n)` train documents by seeded shuffle, which
//!   gives 8,630 / 2,158 at 0.8. [`ReutersSplit::ModApte`] keeps the original
//!   7,769 / 3,019 partition.
//! * `rcv1v2`: the LYRL2004 token files (`lyrl2004_tokens_train.dat`,
//!   `lyrl2004_tokens_test_pt{0..3}.dat`) plus `rcv1-v2.topics.qrels`.
//!   The LYRL2004 split is kept as distributed: 23,149 train, 781,265 test.
//! * `aapd`: `text_{train,val,test}` / `label_{train,val,test}`, one
//!   document per line with space-separated labels. Validation lines are
//!   appended to train (54,840 train, 1,000 test).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use super::{write_dataset, Dataset, DatasetFormat, Document, LabelVocabulary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReutersSplit {
    ModApte,
    Resplit { train_fraction: f64, seed: u64 },
}

impl Default for ReutersSplit {
    fn default() -> Self {
        ReutersSplit::Resplit {
            train_fraction: 0.8,
            seed: 13,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IngestOptions {
    pub reuters_split: ReutersSplit,
}

/// Converts `raw` into a dataset directory at `out` and returns the dataset.
pub fn preprocess(raw: &Path, format: DatasetFormat, out: &Path, opts: IngestOptions) -> Result<Dataset> {
    let ds = match format {
        DatasetFormat::Reuters21578 => ingest_reuters(raw, opts.reuters_split)?,
        DatasetFormat::Rcv1v2 => ingest_rcv1v2(raw)?,
        DatasetFormat::Aapd => ingest_aapd(raw)?,
        DatasetFormat::Toy => {
            return Err(Error::Argument("toy corpora are already in JSON-lines form".into()))
        }
    };
    write_dataset(out, &ds)?;
    Ok(ds)
}

pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn read_lossy(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

fn decode_entities(s: &str) -> String {
    let numeric = Regex::new(r"&#(\d+);").expect("static regex");
    let s = numeric.replace_all(s, |c: &regex::Captures| {
        c[1].parse::<u32>()
            .ok()
            .and_then(char::from_u32)
            .filter(|ch| !ch.is_control())
            .map(String::from)
            .unwrap_or_default()
    });
    s.replace("&lt;", "<").replace("&gt;", ">").replace("&amp;", "&")
}

#[derive(Debug, Clone)]
struct ReutersRecord {
    id: String,
    split: Option<bool>, // Some(true) = train
    topics: Vec<String>,
    text: String,
}

fn parse_reuters_sgml(content: &str) -> Vec<ReutersRecord> {
    let block = Regex::new(r"(?s)<REUTERS([^>]*)>(.*?)</REUTERS>").expect("static regex");
    let attr = |attrs: &str, name: &str| -> Option<String> {
        Regex::new(&format!(r#"{name}="([^"]*)""#))
            .expect("attr regex")
            .captures(attrs)
            .map(|c| c[1].to_string())
    };
    let inner = |body: &str, tag: &str| -> Option<String> {
        Regex::new(&format!(r"(?s)<{tag}[^>]*>(.*?)</{tag}>"))
            .expect("tag regex")
            .captures(body)
            .map(|c| c[1].to_string())
    };
    let d_tag = Regex::new(r"<D>(.*?)</D>").expect("static regex");
    let any_tag = Regex::new(r"<[^>]*>").expect("static regex");

    block
        .captures_iter(content)
        .map(|c| {
            let attrs = &c[1];
            let body = &c[2];
            let modapte = attr(attrs, "TOPICS").as_deref() == Some("YES");
            let split = match (modapte, attr(attrs, "LEWISSPLIT").as_deref()) {
                (true, Some("TRAIN")) => Some(true),
                (true, Some("TEST")) => Some(false),
                _ => None,
            };
            let topics = inner(body, "TOPICS")
                .map(|t| d_tag.captures_iter(&t).map(|d| d[1].to_string()).collect())
                .unwrap_or_default();
            let text_block = inner(body, "TEXT").unwrap_or_default();
            let title = inner(&text_block, "TITLE").unwrap_or_default();
            let text = match inner(&text_block, "BODY") {
                Some(b) => format!("{title} {b}"),
                None => any_tag.replace_all(&text_block, " ").into_owned(),
            };
            ReutersRecord {
                id: format!("reuters-{}", attr(attrs, "NEWID").unwrap_or_default()),
                split,
                topics,
                text: normalize_whitespace(&decode_entities(&text)),
            }
        })
        .collect()
}

fn sorted_files(dir: &Path, pred: impl Fn(&str) -> bool) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(&pred))
        .collect();
    files.sort();
    Ok(files)
}

pub fn ingest_reuters(raw: &Path, split: ReutersSplit) -> Result<Dataset> {
    let files = sorted_files(raw, |n| n.starts_with("reut2-") && n.ends_with(".sgm"))?;
    if files.is_empty() {
        return Err(Error::Config(format!("no reut2-*.sgm files in {}", raw.display())));
    }
    let mut records = Vec::new();
    for f in &files {
        records.extend(parse_reuters_sgml(&read_lossy(f)?));
    }
    let pool: Vec<ReutersRecord> = records.into_iter().filter(|r| r.split.is_some()).collect();

    let mut in_train = BTreeSet::new();
    let mut in_test = BTreeSet::new();
    for r in &pool {
        let side = if r.split == Some(true) { &mut in_train } else { &mut in_test };
        side.extend(r.topics.iter().cloned());
    }
    let labels: BTreeSet<String> = in_train.intersection(&in_test).cloned().collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    for r in pool {
        let kept: BTreeSet<String> = r.topics.iter().filter(|t| labels.contains(*t)).cloned().collect();
        if kept.is_empty() || r.text.is_empty() {
            continue;
        }
        let doc = Document {
            id: r.id,
            text: r.text,
            labels: kept,
        };
        if r.split == Some(true) {
            train.push(doc);
        } else {
            test.push(doc);
        }
    }
    if let ReutersSplit::Resplit { train_fraction, seed } = split {
        let mut all: Vec<Document> = train.into_iter().chain(test).collect();
        all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (train_fraction * all.len() as f64).round() as usize;
        test = all.split_off(n_train);
        train = all;
    }
    Ok(Dataset {
        format: DatasetFormat::Reuters21578,
        train,
        test,
        vocab: LabelVocabulary::new(labels)?,
    })
}

fn parse_lyrl_tokens(path: &Path) -> Result<Vec<(String, String)>> {
    let content = read_lossy(path)?;
    let mut docs = Vec::new();
    let mut id: Option<String> = None;
    let mut words: Vec<&str> = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if let Some(rest) = line.strip_prefix(".I ") {
            if let Some(prev) = id.take() {
                docs.push((prev, words.join(" ")));
                words.clear();
            }
            id = Some(rest.trim().to_string());
        } else if line.trim() == ".W" {
            continue;
        } else if !line.trim().is_empty() {
            if id.is_none() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "text before the first .I header".into(),
                });
            }
            words.extend(line.split_whitespace());
        }
    }
    if let Some(prev) = id {
        docs.push((prev, words.join(" ")));
    }
    Ok(docs)
}

pub fn ingest_rcv1v2(raw: &Path) -> Result<Dataset> {
    let qrels_path = raw.join("rcv1-v2.topics.qrels");
    let mut topics: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (i, line) in read_lossy(&qrels_path)?.lines().enumerate() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            [] => continue,
            [topic, doc, ..] => {
                topics.entry(doc.to_string()).or_default().insert(topic.to_string());
            }
            _ => {
                return Err(Error::Parse {
                    path: qrels_path.clone(),
                    line: i + 1,
                    message: "expected `<topic> <docid> 1`".into(),
                })
            }
        }
    }
    let to_docs = |files: Vec<PathBuf>| -> Result<Vec<Document>> {
        let mut out = Vec::new();
        for f in files {
            for (id, text) in parse_lyrl_tokens(&f)? {
                let labels = topics.get(&id).cloned().unwrap_or_default();
                out.push(Document {
                    id: format!("rcv1-{id}"),
                    text,
                    labels,
                });
            }
        }
        Ok(out)
    };
    let train = to_docs(vec![raw.join("lyrl2004_tokens_train.dat")])?;
    let test = to_docs(sorted_files(raw, |n| n.starts_with("lyrl2004_tokens_test_pt") && n.ends_with(".dat"))?)?;
    let vocab = LabelVocabulary::from_documents(train.iter().chain(&test));
    Ok(Dataset {
        format: DatasetFormat::Rcv1v2,
        train,
        test,
        vocab,
    })
}

fn read_aapd_pair(raw: &Path, part: &str) -> Result<Vec<Document>> {
    let text_path = raw.join(format!("text_{part}"));
    let label_path = raw.join(format!("label_{part}"));
    let texts = read_lossy(&text_path)?;
    let labels = read_lossy(&label_path)?;
    let texts: Vec<&str> = texts.lines().collect();
    let labels: Vec<&str> = labels.lines().collect();
    if texts.len() != labels.len() {
        return Err(Error::Parse {
            path: label_path,
            line: labels.len().min(texts.len()) + 1,
            message: format!("{} texts but {} label lines", texts.len(), labels.len()),
        });
    }
    Ok(texts
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (t, l))| Document {
            id: format!("aapd-{part}-{i}"),
            text: normalize_whitespace(t),
            labels: l.split_whitespace().map(str::to_string).collect(),
        })
        .collect())
}

pub fn ingest_aapd(raw: &Path) -> Result<Dataset> {
    let mut train = read_aapd_pair(raw, "train")?;
    if raw.join("text_val").exists() {
        train.extend(read_aapd_pair(raw, "val")?);
    }
    let test = read_aapd_pair(raw, "test")?;
    let vocab = LabelVocabulary::from_documents(train.iter().chain(&test));
    Ok(Dataset {
        format: DatasetFormat::Aapd,
        train,
        test,
        vocab,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reuters_doc(newid: usize, split: &str, topics_yes: bool, topics: &[&str], body: &str) -> String {
        let ds: String = topics.iter().map(|t| format!("<D>{t}</D>")).collect();
        format!(
            "<REUTERS TOPICS=\"{}\" LEWISSPLIT=\"{split}\" CGISPLIT=\"TRAINING-SET\" OLDID=\"1\" NEWID=\"{newid}\">\n\
             <DATE>26-FEB-1987</DATE>\n<TOPICS>{ds}</TOPICS>\n<TEXT>&#2;\n<TITLE>TITLE {newid}</TITLE>\n\
             <BODY>{body} &lt;ABC&gt; &#3;</BODY></TEXT>\n</REUTERS>\n",
            if topics_yes { "YES" } else { "NO" }
        )
    }

    fn write_reuters_fixture(dir: &Path) {
        let mut a = String::from("<!DOCTYPE lewis SYSTEM \"lewis.dtd\">\n");
        a += &reuters_doc(1, "TRAIN", true, &["earn"], "Profit rose.");
        a += &reuters_doc(2, "TRAIN", true, &["grain", "wheat"], "Wheat   exports.");
        a += &reuters_doc(3, "TRAIN", true, &["copper"], "Copper only in train.");
        a += &reuters_doc(4, "NOT-USED", true, &["earn"], "Unused.");
        let mut b = String::new();
        b += &reuters_doc(5, "TEST", true, &["earn", "grain"], "Test one.");
        b += &reuters_doc(6, "TEST", true, &["wheat"], "Test two.");
        b += &reuters_doc(7, "TEST", false, &["earn"], "Not topics yes.");
        b += &reuters_doc(8, "TEST", true, &[], "No topics.");
        fs::write(dir.join("reut2-000.sgm"), a).unwrap();
        fs::write(dir.join("reut2-001.sgm"), b).unwrap();
    }

    #[test]
    fn reuters_modapte_filters_labels_and_documents() {
        let dir = tempfile::tempdir().unwrap();
        write_reuters_fixture(dir.path());
        let ds = ingest_reuters(dir.path(), ReutersSplit::ModApte).unwrap();
        assert_eq!(ds.vocab.names(), &["earn", "grain", "wheat"]);
        let train_ids: Vec<&str> = ds.train.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(train_ids, vec!["reuters-1", "reuters-2"]);
        assert_eq!(ds.test.len(), 2);
        assert_eq!(ds.train[1].text, "TITLE 2 Wheat exports. <ABC>");
    }

    #[test]
    fn reuters_resplit_uses_rounded_fraction() {
        let dir = tempfile::tempdir().unwrap();
        write_reuters_fixture(dir.path());
        let split = ReutersSplit::Resplit {
            train_fraction: 0.8,
            seed: 1,
        };
        let ds = ingest_reuters(dir.path(), split).unwrap();
        assert_eq!((ds.train.len(), ds.test.len()), (3, 1));
        let again = ingest_reuters(dir.path(), split).unwrap();
        assert_eq!(ds.train, again.train);
        // the real pool of 10,788 documents splits 8,630 / 2,158
        assert_eq!((0.8f64 * 10_788.0).round() as usize, 8_630);
    }

    #[test]
    fn rcv1_tokens_and_qrels() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("lyrl2004_tokens_train.dat"),
            ".I 2286\n.W\nrecov excit\nbank\n\n.I 2287\n.W\nshar price\n\n",
        )
        .unwrap();
        fs::write(dir.path().join("lyrl2004_tokens_test_pt0.dat"), ".I 3000\n.W\nmarket\n").unwrap();
        fs::write(
            dir.path().join("rcv1-v2.topics.qrels"),
            "E11 2286 1\nECAT 2286 1\nC15 2287 1\nE11 3000 1\n",
        )
        .unwrap();
        let ds = ingest_rcv1v2(dir.path()).unwrap();
        assert_eq!(ds.train.len(), 2);
        assert_eq!(ds.test.len(), 1);
        assert_eq!(ds.train[0].text, "recov excit bank");
        assert_eq!(ds.vocab.names(), &["C15", "E11", "ECAT"]);
    }

    #[test]
    fn aapd_merges_validation_into_train() {
        let dir = tempfile::tempdir().unwrap();
        for (part, n) in [("train", 3), ("val", 1), ("test", 2)] {
            let texts: String = (0..n).map(|i| format!("paper {part} {i}\n")).collect();
            let labels: String = (0..n).map(|_| "cs.sy math.oc\n").collect();
            fs::write(dir.path().join(format!("text_{part}")), texts).unwrap();
            fs::write(dir.path().join(format!("label_{part}")), labels).unwrap();
        }
        let ds = ingest_aapd(dir.path()).unwrap();
        assert_eq!((ds.train.len(), ds.test.len(), ds.vocab.len()), (4, 2, 2));
    }

    #[test]
    fn aapd_length_mismatch_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("text_train"), "a\nb\n").unwrap();
        fs::write(dir.path().join("label_train"), "x\n").unwrap();
        fs::write(dir.path().join("text_test"), "a\n").unwrap();
        fs::write(dir.path().join("label_test"), "x\n").unwrap();
        assert!(matches!(ingest_aapd(dir.path()), Err(Error::Parse { .. })));
    }
}
