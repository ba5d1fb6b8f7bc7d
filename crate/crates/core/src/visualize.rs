//! Per-document exports: token salience per gold label and label probabilities.
//!
//! Files written to the output directory:
//!
//! - `salience_<label>.csv` (`position,token,score`) and `salience_<label>.png`
//!   for each gold label, scores taken from that label's row of the document
//!   label-attention matrix;
//! - `probabilities.csv` (`label,probability,gold,predicted`) and
//!   `probabilities.png`;
//! - `trace/`, the full attention trace as a tensor bundle;
//! - `index.html`, a self-contained page combining the above.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::config::TrainConfig;
use crate::corpus::tokenizer::{make_example, tokenize, UNK};
use crate::error::{Error, Result};
use crate::head::decide;
use crate::model::Model;
use crate::train::RunData;

const CELL: u32 = 24;
const PER_ROW: usize = 20;
const BAR: u32 = 18;
const GAP: u32 = 6;
const CHART_H: u32 = 200;
const MARGIN: u32 = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSalience {
    pub label: String,
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelProbability {
    pub label: String,
    pub probability: f64,
    pub gold: bool,
    pub predicted: bool,
}

#[derive(Debug, Clone)]
pub struct Visualization {
    pub doc_id: String,
    pub salience: Vec<LabelSalience>,
    pub probabilities: Vec<LabelProbability>,
    pub files: Vec<PathBuf>,
}

/// File-name-safe form of a label.
pub fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

fn csv_field(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// Diverging colour: red for positive, blue for negative, white at zero.
fn salience_colour(score: f64, scale: f64) -> Rgb<u8> {
    let t = if scale > 0.0 { (score / scale).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |x: f64| (255.0 * (1.0 - x.abs())).round() as u8;
    if t >= 0.0 {
        Rgb([255, fade(t), fade(t)])
    } else {
        Rgb([fade(t), fade(t), 255])
    }
}

pub fn heatmap(scores: &[f64]) -> RgbImage {
    let cols = scores.len().clamp(1, PER_ROW) as u32;
    let rows = scores.len().div_ceil(PER_ROW).max(1) as u32;
    let mut img = RgbImage::from_pixel(cols * CELL + 1, rows * CELL + 1, Rgb([160, 160, 160]));
    let scale = scores.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    for (i, s) in scores.iter().enumerate() {
        let (cx, cy) = ((i % PER_ROW) as u32 * CELL, (i / PER_ROW) as u32 * CELL);
        let colour = salience_colour(*s, scale);
        for y in cy + 1..cy + CELL {
            for x in cx + 1..cx + CELL {
                img.put_pixel(x, y, colour);
            }
        }
    }
    img
}

pub fn bar_chart(probs: &[LabelProbability], threshold: f64) -> RgbImage {
    let n = probs.len().max(1) as u32;
    let w = 2 * MARGIN + n * (BAR + GAP);
    let h = 2 * MARGIN + CHART_H;
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let base = MARGIN + CHART_H;
    for (i, p) in probs.iter().enumerate() {
        let x0 = MARGIN + i as u32 * (BAR + GAP);
        let height = (p.probability.clamp(0.0, 1.0) * CHART_H as f64).round() as u32;
        let colour = if p.gold { Rgb([46, 139, 87]) } else { Rgb([150, 150, 150]) };
        for y in base - height..base {
            for x in x0..x0 + BAR {
                img.put_pixel(x, y, colour);
            }
        }
    }
    let ty = base - (threshold * CHART_H as f64).round() as u32;
    for x in MARGIN..w - MARGIN {
        img.put_pixel(x, ty, Rgb([200, 0, 0]));
    }
    img
}

fn html(v: &Visualization) -> String {
    let esc = |s: &str| s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let mut out = String::new();
    writeln!(out, "<!doctype html><html><head><meta charset=\"utf-8\"><title>{}</title></head><body>", esc(&v.doc_id)).ok();
    writeln!(out, "<h1>Document {}</h1>", esc(&v.doc_id)).ok();
    for s in &v.salience {
        let scale = s.scores.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        writeln!(out, "<h2>{}</h2><p>", esc(&s.label)).ok();
        for (t, score) in s.tokens.iter().zip(&s.scores) {
            let Rgb([r, g, b]) = salience_colour(*score, scale);
            writeln!(out, "<span title=\"{score}\" style=\"background:rgb({r},{g},{b})\">{}</span>", esc(t)).ok();
        }
        writeln!(out, "</p>").ok();
    }
    writeln!(out, "<h2>Label probabilities</h2><table><tr><th>label</th><th>probability</th><th>gold</th><th>predicted</th></tr>").ok();
    for p in &v.probabilities {
        writeln!(
            out,
            "<tr><td>{}</td><td>{:.4}</td><td>{}</td><td>{}</td></tr>",
            esc(&p.label),
            p.probability,
            p.gold,
            p.predicted
        )
        .ok();
    }
    writeln!(out, "</table><img src=\"probabilities.png\" alt=\"probabilities\"></body></html>").ok();
    out
}

/// Exports salience maps and label probabilities for `doc_id`.
pub fn visualize(checkpoint: &Path, cfg: &TrainConfig, doc_id: &str, out_dir: &Path) -> Result<Visualization> {
    let model = Model::load(checkpoint)?;
    let data = RunData::load(cfg)?;
    let doc = data
        .dataset
        .find(doc_id)
        .ok_or_else(|| Error::Lookup(format!("document `{doc_id}` not in the corpus")))?;
    let know = data.knowledge_for(doc, model.variant())?;
    let ex = make_example(doc, &know, &model.labels, &model.tokenizer, model.spec.max_len)?;
    let feats = model.features(&ex)?;
    let (probs, trace) = model.trace(&feats)?;
    let trace = trace.ok_or_else(|| {
        Error::Config(format!("variant {} has no attention to visualize", model.variant()))
    })?;

    let mut tokens: Vec<String> = tokenize(&doc.text).into_iter().take(model.spec.max_len).collect();
    if tokens.is_empty() {
        tokens.push(UNK.to_string());
    }
    let mut files = Vec::new();
    let trace_dir = out_dir.join("trace");
    let mut meta = BTreeMap::new();
    meta.insert("doc_id".to_string(), doc_id.to_string());
    trace.save(&trace_dir, meta)?;
    files.push(trace_dir);

    let mut salience = Vec::new();
    for (i, label) in model.labels.names().iter().enumerate() {
        if !doc.labels.contains(label) {
            continue;
        }
        let scores: Vec<f64> = trace.al_doc.row(i).to_vec();
        let stem = file_stem(label);
        let mut csv = String::from("position,token,score\n");
        for (p, (t, s)) in tokens.iter().zip(&scores).enumerate() {
            writeln!(csv, "{p},{},{s}", csv_field(t)).expect("string write");
        }
        let csv_path = out_dir.join(format!("salience_{stem}.csv"));
        crate::bundle::write_file(&csv_path, csv.as_bytes())?;
        let png = out_dir.join(format!("salience_{stem}.png"));
        heatmap(&scores).save(&png).map_err(|e| image_err(&png, e))?;
        files.extend([csv_path, png]);
        salience.push(LabelSalience {
            label: label.clone(),
            tokens: tokens.clone(),
            scores,
        });
    }

    let decided = decide(&probs, cfg.train.threshold, cfg.train.nonempty_guard);
    let probabilities: Vec<LabelProbability> = model
        .labels
        .names()
        .iter()
        .enumerate()
        .map(|(i, l)| LabelProbability {
            label: l.clone(),
            probability: probs[i],
            gold: doc.labels.contains(l),
            predicted: decided[i] == 1,
        })
        .collect();
    let mut csv = String::from("label,probability,gold,predicted\n");
    for p in &probabilities {
        writeln!(csv, "{},{},{},{}", csv_field(&p.label), p.probability, p.gold, p.predicted).expect("string write");
    }
    let csv_path = out_dir.join("probabilities.csv");
    crate::bundle::write_file(&csv_path, csv.as_bytes())?;
    let png = out_dir.join("probabilities.png");
    bar_chart(&probabilities, cfg.train.threshold)
        .save(&png)
        .map_err(|e| image_err(&png, e))?;
    files.extend([csv_path, png]);

    let mut v = Visualization {
        doc_id: doc_id.to_string(),
        salience,
        probabilities,
        files,
    };
    let page = out_dir.join("index.html");
    crate::bundle::write_file(&page, html(&v).as_bytes())?;
    v.files.push(page);
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_heatmap_has_one_cell() {
        let img = heatmap(&[0.7]);
        assert_eq!(img.dimensions(), (CELL + 1, CELL + 1));
        assert_eq!(*img.get_pixel(CELL / 2, CELL / 2), Rgb([255, 0, 0]));
    }

    #[test]
    fn heatmap_wraps_rows_and_signs_colours() {
        let scores: Vec<f64> = (0..25).map(|i| i as f64 - 12.0).collect();
        let img = heatmap(&scores);
        assert_eq!(img.dimensions(), (PER_ROW as u32 * CELL + 1, 2 * CELL + 1));
        assert_eq!(*img.get_pixel(CELL / 2, CELL / 2), Rgb([0, 0, 255]));
        assert_eq!(*img.get_pixel(12 * CELL + CELL / 2, CELL / 2), Rgb([255, 255, 255]));
    }

    #[test]
    fn bar_heights_follow_probabilities() {
        let p = |label: &str, probability: f64| LabelProbability {
            label: label.into(),
            probability,
            gold: true,
            predicted: true,
        };
        let img = bar_chart(&[p("a", 1.0), p("b", 0.0)], 0.5);
        assert_eq!(*img.get_pixel(MARGIN + 1, MARGIN + 1), Rgb([46, 139, 87]));
        assert_eq!(*img.get_pixel(MARGIN + BAR + GAP + 1, MARGIN + CHART_H - 1), Rgb([255, 255, 255]));
    }

    #[test]
    fn stems_are_file_safe() {
        assert_eq!(file_stem("cs.sy"), "cs.sy");
        assert_eq!(file_stem("money/fx x"), "money_fx_x");
    }
}
