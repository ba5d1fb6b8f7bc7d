//! Hamming loss and micro-averaged precision, recall and F1.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pooled confusion counts over every (document, label) slot.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Counts {
    pub fn slots(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(self, other: Counts) -> Counts {
        Counts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }
}

fn check_shapes(y_true: &[Vec<u8>], y_pred: &[Vec<u8>]) -> Result<()> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Argument(format!(
            "{} true rows vs {} predicted rows",
            y_true.len(),
            y_pred.len()
        )));
    }
    for (i, (t, p)) in y_true.iter().zip(y_pred).enumerate() {
        if t.len() != p.len() {
            return Err(Error::Argument(format!("row {i}: {} true vs {} predicted labels", t.len(), p.len())));
        }
    }
    Ok(())
}

pub fn count(y_true: &[Vec<u8>], y_pred: &[Vec<u8>]) -> Result<Counts> {
    check_shapes(y_true, y_pred)?;
    let mut c = Counts::default();
    for (t, p) in y_true.iter().zip(y_pred) {
        for (&a, &b) in t.iter().zip(p) {
            match (a != 0, b != 0) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    Ok(c)
}

/// Fraction of mismatched slots; 0 for an empty matrix.
pub fn hamming_loss(y_true: &[Vec<u8>], y_pred: &[Vec<u8>]) -> Result<f64> {
    let c = count(y_true, y_pred)?;
    Ok(if c.slots() == 0 {
        0.0
    } else {
        (c.fp + c.fn_) as f64 / c.slots() as f64
    })
}

/// Micro scores; each is 0 with its flag set when the denominator vanishes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicroScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
    pub counts: Counts,
}

pub fn micro_from_counts(c: Counts) -> MicroScores {
    let ratio = |num: u64, den: u64| if den == 0 { (0.0, true) } else { (num as f64 / den as f64, false) };
    let (precision, precision_undefined) = ratio(c.tp, c.tp + c.fp);
    let (recall, recall_undefined) = ratio(c.tp, c.tp + c.fn_);
    let (f1, f1_undefined) = if precision + recall == 0.0 {
        (0.0, true)
    } else {
        (2.0 * precision * recall / (precision + recall), false)
    };
    MicroScores {
        precision,
        recall,
        f1,
        precision_undefined,
        recall_undefined,
        f1_undefined,
        counts: c,
    }
}

pub fn micro_prf(y_true: &[Vec<u8>], y_pred: &[Vec<u8>]) -> Result<MicroScores> {
    Ok(micro_from_counts(count(y_true, y_pred)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub hamming_loss: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub degenerate: bool,
}

impl MetricsReport {
    pub fn from_counts(c: Counts) -> Self {
        let m = micro_from_counts(c);
        MetricsReport {
            hamming_loss: if c.slots() == 0 {
                0.0
            } else {
                (c.fp + c.fn_) as f64 / c.slots() as f64
            },
            micro_precision: m.precision,
            micro_recall: m.recall,
            micro_f1: m.f1,
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            tn: c.tn,
            degenerate: m.precision_undefined || m.recall_undefined || m.f1_undefined,
        }
    }

    pub fn compute(y_true: &[Vec<u8>], y_pred: &[Vec<u8>]) -> Result<Self> {
        Ok(Self::from_counts(count(y_true, y_pred)?))
    }

    pub fn counts(&self) -> Counts {
        Counts {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
            tn: self.tn,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain struct")
    }

    pub const TABLE_HEADER: &'static str = "| HL(-) | mP(+) | mR(+) | mF1(+) |";

    pub fn table_row(&self) -> String {
        format!(
            "| {:.4} | {:.3} | {:.3} | {:.3} |",
            self.hamming_loss, self.micro_precision, self.micro_recall, self.micro_f1
        )
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Self::TABLE_HEADER)?;
        writeln!(f, "|-------|-------|-------|--------|")?;
        write!(f, "{}", self.table_row())
    }
}
