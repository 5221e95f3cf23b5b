//! Machine-readable result reporting: JSON-lines rows and a summary CSV of
//! mean +/- std cells.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// One evaluation result row (one task/model/fold or ablation point).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    pub model: String,
    pub fold: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    pub acc: f64,
    pub bal_acc: f64,
    pub auc: f64,
    pub f1: f64,
}

/// Per-fold metric quadruple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub acc: f64,
    pub bal_acc: f64,
    pub auc: f64,
    pub f1: f64,
}

impl FoldMetrics {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("acc", self.acc),
            ("bal_acc", self.bal_acc),
            ("auc", self.auc),
            ("f1", self.f1),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Contract(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Fold metrics with their mean and population standard deviation
/// (denominator n, recorded as such in the report metadata).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_fold: Vec<FoldMetrics>,
    pub mean: FoldMetrics,
    pub std: FoldMetrics,
    /// Aggregation convention marker.
    pub std_denominator: String,
}

impl MetricsReport {
    pub fn from_folds(per_fold: Vec<FoldMetrics>) -> Result<Self> {
        if per_fold.is_empty() {
            return Err(Error::Contract("no folds to aggregate".into()));
        }
        for f in &per_fold {
            f.validate()?;
        }
        let n = per_fold.len() as f64;
        let mean_of = |f: &dyn Fn(&FoldMetrics) -> f64| per_fold.iter().map(|m| f(m)).sum::<f64>() / n;
        let std_of = |f: &dyn Fn(&FoldMetrics) -> f64, mu: f64| {
            (per_fold.iter().map(|m| (f(m) - mu).powi(2)).sum::<f64>() / n).sqrt()
        };
        let acc = mean_of(&|m: &FoldMetrics| m.acc);
        let bal = mean_of(&|m: &FoldMetrics| m.bal_acc);
        let auc = mean_of(&|m: &FoldMetrics| m.auc);
        let f1 = mean_of(&|m: &FoldMetrics| m.f1);
        Ok(MetricsReport {
            std: FoldMetrics {
                acc: std_of(&|m: &FoldMetrics| m.acc, acc),
                bal_acc: std_of(&|m: &FoldMetrics| m.bal_acc, bal),
                auc: std_of(&|m: &FoldMetrics| m.auc, auc),
                f1: std_of(&|m: &FoldMetrics| m.f1, f1),
            },
            mean: FoldMetrics {
                acc,
                bal_acc: bal,
                auc,
                f1,
            },
            per_fold,
            std_denominator: "population (n)".into(),
        })
    }
}

/// Appends rows to a JSON-lines report file.
pub fn append_report_rows(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?,
    );
    for row in rows {
        serde_json::to_writer(&mut f, row).map_err(|e| Error::Contract(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_report_rows(path: &Path) -> Result<Vec<ReportRow>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Format {
                path: path.display().to_string(),
                offset: i as u64,
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// Summary CSV mirroring mean +/- std table cells:
/// `task,model,metric,mean,std`, grouped by (task, model) in input order.
pub fn write_summary_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut groups: Vec<(String, String, Vec<&ReportRow>)> = Vec::new();
    for row in rows {
        match groups
            .iter_mut()
            .find(|(t, m, _)| *t == row.task && *m == row.model)
        {
            Some((_, _, v)) => v.push(row),
            None => groups.push((row.task.clone(), row.model.clone(), vec![row])),
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(b"task,model,metric,mean,std\n")?;
    for (task, model, rows) in groups {
        let n = rows.len() as f64;
        for (metric, get) in [
            ("acc", &(|r: &ReportRow| r.acc) as &dyn Fn(&ReportRow) -> f64),
            ("bal_acc", &|r: &ReportRow| r.bal_acc),
            ("auc", &|r: &ReportRow| r.auc),
            ("f1", &|r: &ReportRow| r.f1),
        ] {
            let mean = rows.iter().map(|r| get(r)).sum::<f64>() / n;
            let std = (rows.iter().map(|r| (get(r) - mean).powi(2)).sum::<f64>() / n).sqrt();
            writeln!(f, "{task},{model},{metric},{mean},{std}")?;
        }
    }
    f.flush()?;
    Ok(())
}
