//! Per-label probabilities, loss and the decision rule.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::tape::{self, Matrix, Tape, Var};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

pub fn insert_head_params(store: &mut ParamStore, two_h: usize, d_h: usize, seed: u64) {
    store.insert_glorot("head.w", two_h, d_h, seed);
    store.insert_glorot("head.w_out", d_h, 1, seed);
}

/// `σ(tanh(S · W_p) · W_p')`, an `M × 1` column of probabilities.
pub fn head_forward(t: &mut Tape, binder: &mut Binder, s: Var) -> Result<Var> {
    let w = binder.var(t, "head.w")?;
    let w_out = binder.var(t, "head.w_out")?;
    let h = t.matmul(s, w);
    let h = t.tanh(h);
    let z = t.matmul(h, w_out);
    Ok(t.sigmoid(z))
}

/// Probabilities for the rows of `s` given head weights.
pub fn predict(s: &Matrix, w: &Matrix, w_out: &Matrix) -> Vec<f64> {
    let z = s.dot(w).mapv(f64::tanh).dot(w_out);
    z.iter().map(|v| tape::sigmoid(*v)).collect()
}

/// Mean binary cross-entropy over labels, with clamped log arguments.
pub fn loss(probs: &[f64], target: &[u8]) -> f64 {
    let p = Matrix::from_shape_vec((1, probs.len()), probs.to_vec()).expect("row");
    let y = Matrix::from_shape_fn((1, target.len()), |(_, j)| target[j] as f64);
    tape::bce_mean(&p, &y)
}

/// Thresholds `probs` at `threshold` (inclusive). With `guard` on, an
/// all-negative outcome is replaced by the single highest-scoring label.
pub fn decide(probs: &[f64], threshold: f64, guard: bool) -> Vec<u8> {
    let mut out: Vec<u8> = probs.iter().map(|p| u8::from(*p >= threshold)).collect();
    if guard && !out.is_empty() && out.iter().all(|v| *v == 0) {
        let best = probs
            .iter()
            .enumerate()
            .fold(0, |best, (i, p)| if *p > probs[best] { i } else { best });
        out[best] = 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    pub probs: Vec<f64>,
    pub decided: Vec<u8>,
    pub threshold: f64,
}

impl PredictionResult {
    pub fn new(probs: Vec<f64>, threshold: f64, guard: bool) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::Argument(format!("threshold {threshold} outside (0, 1)")));
        }
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::Degenerate("non-finite probability".into()));
        }
        let decided = decide(&probs, threshold, guard);
        Ok(PredictionResult {
            probs,
            decided,
            threshold,
        })
    }

    /// Indices of the `k` most probable labels, ties broken by index.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.probs.len()).collect();
        idx.sort_by(|a, b| self.probs[*b].total_cmp(&self.probs[*a]).then(a.cmp(b)));
        idx.truncate(k);
        idx
    }
}

/// One line of a prediction dump.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub doc_id: String,
    pub decided: Vec<String>,
    pub top: Vec<(String, f64)>,
}

pub const DUMP_HEADER: &str = "doc_id\tpredicted\ttop_k";

/// Tab-separated dump: `doc_id`, the decided labels joined by `,`, and the
/// top-k labels as `label:probability` pairs joined by `,` (6 decimals).
pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "{DUMP_HEADER}").expect("vec write");
    for r in rows {
        let top: Vec<String> = r.top.iter().map(|(l, p)| format!("{l}:{p:.6}")).collect();
        writeln!(buf, "{}\t{}\t{}", r.doc_id, r.decided.join(","), top.join(",")).expect("vec write");
    }
    crate::bundle::write_file(path, &buf)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let text = crate::bundle::read_to_string(path)?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(parse_err(n + 1, format!("expected 3 columns, got {}", cols.len())));
        }
        let split = |s: &str| -> Vec<String> {
            s.split(',').filter(|x| !x.is_empty()).map(str::to_string).collect()
        };
        let mut top = Vec::new();
        for pair in split(cols[2]) {
            let (l, p) = pair
                .rsplit_once(':')
                .ok_or_else(|| parse_err(n + 1, format!("bad pair `{pair}`")))?;
            let p: f64 = p.parse().map_err(|_| parse_err(n + 1, format!("bad probability `{p}`")))?;
            top.push((l.to_string(), p));
        }
        out.push(PredictionRow {
            doc_id: cols[0].to_string(),
            decided: split(cols[1]),
            top,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_output_weights_give_one_half() {
        let s = array![[1.0, -2.0], [0.3, 0.4]];
        let p = predict(&s, &array![[1.0, 2.0], [3.0, 4.0]], &Matrix::zeros((2, 1)));
        assert_eq!(p, vec![0.5, 0.5]);
        let p = predict(&Matrix::zeros((1, 2)), &array![[1.0], [2.0]], &array![[3.0]]);
        assert_eq!(p, vec![0.5]);
    }

    #[test]
    fn loss_reference_points() {
        assert!((loss(&[0.5; 4], &[1, 0, 1, 0]) - std::f64::consts::LN_2).abs() < 1e-12);
        let l = loss(&[0.999999, 1e-6, 0.999999], &[1, 0, 1]);
        assert!(l > 0.0 && l < 2e-6);
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let a = loss(&[0.2, 0.9, 0.4], &[0, 1, 1]);
        let b = loss(&[0.4, 0.2, 0.9], &[1, 0, 1]);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn decide_reference_and_guard() {
        assert_eq!(decide(&[0.85, 0.88, 0.1], 0.5, true), vec![1, 1, 0]);
        assert_eq!(decide(&[0.1, 0.3, 0.2], 0.5, true), vec![0, 1, 0]);
        assert_eq!(decide(&[0.1, 0.3, 0.2], 0.5, false), vec![0, 0, 0]);
        assert_eq!(decide(&[0.5], 0.5, false), vec![1]);
    }

    #[test]
    fn decide_is_monotone() {
        let base = [0.2, 0.6, 0.45, 0.51];
        let d0 = decide(&base, 0.5, true);
        for i in 0..base.len() {
            let mut up = base;
            up[i] += 0.3;
            let d1 = decide(&up, 0.5, true);
            for j in 0..base.len() {
                if j == i {
                    assert!(d1[j] >= d0[j]);
                }
            }
        }
    }

    #[test]
    fn result_validates_threshold_and_ranks() {
        assert!(PredictionResult::new(vec![0.3], 1.0, true).is_err());
        assert!(PredictionResult::new(vec![f64::NAN], 0.5, true).is_err());
        let r = PredictionResult::new(vec![0.3, 0.9, 0.3, 0.7], 0.5, true).unwrap();
        assert_eq!(r.top_k(3), vec![1, 3, 0]);
        assert_eq!(r.decided, vec![0, 1, 0, 1]);
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pred.tsv");
        let rows = vec![
            PredictionRow {
                doc_id: "a".into(),
                decided: vec!["cs.sy".into(), "math.oc".into()],
                top: vec![("math.oc".into(), 0.88), ("cs.sy".into(), 0.85)],
            },
            PredictionRow {
                doc_id: "b".into(),
                decided: vec![],
                top: vec![("x".into(), 0.25)],
            },
        ];
        write_predictions(&path, &rows).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), rows);
    }
}
