//! Ablation and sensitivity sweeps on top of [`train`](crate::train::train).

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{TrainConfig, Variant};
use crate::error::{Error, Result};
use crate::params::InventoryDiff;
use crate::train::{build_model, train, RunData, RunRecord};

/// Parameter-inventory difference between freshly built `full` and `variant`
/// models under the same configuration and seed.
pub fn inventory_diff(cfg: &TrainConfig, variant: Variant) -> Result<InventoryDiff> {
    let mut base_cfg = cfg.clone();
    base_cfg.model.variant = Variant::Full;
    let data = RunData::load(&base_cfg)?;
    let full = build_model(&base_cfg, &data)?;
    let mut var_cfg = cfg.clone();
    var_cfg.model.variant = variant;
    let other = build_model(&var_cfg, &data)?;
    Ok(InventoryDiff::between(&full.inventory(), &other.inventory()))
}

/// True when every touched parameter belongs to the variant's sub-module.
pub fn diff_within_submodule(diff: &InventoryDiff, variant: Variant) -> bool {
    let prefixes = variant.submodule_prefixes();
    diff.touched().all(|n| prefixes.iter().any(|p| n.starts_with(p)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub diff: InventoryDiff,
    pub record: RunRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Test-set metrics, ablations first and the full model last.
    pub fn table(&self) -> String {
        let mut out = String::from("| Model | HL(-) | mP(+) | mR(+) | mF1(+) |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            let m = &r.record.test_metrics;
            writeln!(
                out,
                "| {} | {:.4} | {:.3} | {:.3} | {:.3} |",
                r.variant.display_name(),
                m.hamming_loss,
                m.micro_precision,
                m.micro_recall,
                m.micro_f1
            )
            .expect("string write");
        }
        out
    }
}

/// Trains each requested variant (plus `full` for reference) from scratch,
/// each under `cfg.output_dir/<variant>`.
pub fn ablate(cfg: &TrainConfig, variants: &[Variant]) -> Result<AblationReport> {
    if variants.is_empty() {
        return Err(Error::Argument("no variants requested".into()));
    }
    let mut rows = Vec::new();
    for v in Variant::REPORT_ORDER {
        if v != Variant::Full && !variants.contains(&v) {
            continue;
        }
        let mut c = cfg.clone();
        c.model.variant = v;
        c.output_dir = cfg.output_dir.join(v.as_str());
        let diff = inventory_diff(&c, v)?;
        log::info!("ablation {v}: {} parameters touched", diff.touched().count());
        let record = train(&c)?;
        rows.push(AblationRow { variant: v, diff, record });
    }
    let report = AblationReport { rows };
    crate::bundle::write_file(&cfg.output_dir.join("ablation.md"), report.table().as_bytes())?;
    crate::bundle::write_file(
        &cfg.output_dir.join("ablation.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Length,
    HiddenDim,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Length => "length",
            SweepAxis::HiddenDim => "hidden_dim",
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig, value: usize) {
        match self {
            SweepAxis::Length => cfg.model.max_len = value,
            SweepAxis::HiddenDim => cfg.model.hidden = value,
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "length" | "max_len" => Ok(SweepAxis::Length),
            "hidden_dim" | "hidden" => Ok(SweepAxis::HiddenDim),
            _ => Err(Error::Argument(format!("unknown sweep axis `{s}` (expected length or hidden_dim)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub train_micro_f1: f64,
    pub test_micro_f1: f64,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub runs: Vec<RunRecord>,
}

impl SweepReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("value,train_micro_f1,test_micro_f1,wall_clock_secs\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{:.6},{:.6},{:.3}",
                r.value, r.train_micro_f1, r.test_micro_f1, r.wall_clock_secs
            )
            .expect("string write");
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        crate::bundle::write_file(&dir.join(format!("sweep_{}.csv", self.axis.as_str())), self.csv().as_bytes())
    }
}

/// One training run per value of `axis`, everything else fixed.
pub fn sweep(cfg: &TrainConfig, axis: SweepAxis, values: &[usize]) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::Argument("sweep needs at least one value".into()));
    }
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &v in values {
        let mut c = cfg.clone();
        axis.apply(&mut c, v);
        c.output_dir = cfg.output_dir.join(format!("{}_{v}", axis.as_str()));
        let rec = train(&c)?;
        rows.push(SweepRow {
            value: v,
            train_micro_f1: rec.train_metrics.micro_f1,
            test_micro_f1: rec.test_metrics.micro_f1,
            wall_clock_secs: rec.wall_clock_secs,
        });
        runs.push(rec);
    }
    let report = SweepReport { axis, rows, runs };
    report.save(&cfg.output_dir)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_names_parse() {
        assert_eq!("length".parse::<SweepAxis>().unwrap(), SweepAxis::Length);
        assert_eq!("hidden-dim".parse::<SweepAxis>().unwrap(), SweepAxis::HiddenDim);
        assert!("depth".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn submodule_check_rejects_stray_names() {
        let diff = InventoryDiff {
            added: vec!["pool.cat".into()],
            removed: vec!["fusion.doc.w".into()],
            changed: vec![],
        };
        assert!(diff_within_submodule(&diff, Variant::NoDa));
        let stray = InventoryDiff {
            changed: vec!["head.w".into()],
            ..diff
        };
        assert!(!diff_within_submodule(&stray, Variant::NoDa));
    }
}
