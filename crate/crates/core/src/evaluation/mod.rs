//! Detection metrics and the ablation report.

mod metrics;

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{auc, confusion, prf1, Confusion, Prf1, DEFAULT_THRESHOLD};

use crate::artifact::write_atomic;
use crate::error::{Error, Result};
use crate::geometry::ViewKind;
use crate::ingestion::{Label, Sample};
use crate::model::{DetectorModel, ModelConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Metrics for one model variant on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub split: String,
    pub samples: usize,
    pub threshold: f64,
    #[serde(flatten)]
    pub counts: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent when the split holds a single class.
    pub auc: Option<f64>,
    /// Metrics reported as 0 because their denominator was zero.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub config_hash: String,
}

impl EvalRow {
    pub fn from_scores(method: &str, split: &str, probs: &[f64], labels: &[Label], threshold: f64) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptySplit(split.to_string()));
        }
        let counts = confusion(probs, labels, threshold)?;
        let m = prf1(&counts);
        let mut undefined = Vec::new();
        for (flag, name) in [
            (m.precision_undefined, "precision"),
            (m.recall_undefined, "recall"),
            (m.f1_undefined, "f1"),
        ] {
            if flag {
                undefined.push(name.to_string());
            }
        }
        let auc = match auc(probs, labels) {
            Ok(a) => Some(a),
            Err(Error::SingleClass(_)) => {
                undefined.push("auc".into());
                None
            }
            Err(e) => return Err(e),
        };
        Ok(EvalRow {
            method: method.to_string(),
            split: split.to_string(),
            samples: probs.len(),
            threshold,
            counts,
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            auc,
            undefined,
            config_hash: String::new(),
        })
    }

    pub fn accuracy(&self) -> f64 {
        self.counts.accuracy()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub schema_version: u32,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn new(rows: Vec<EvalRow>) -> Self {
        EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            rows,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: EvalReport = serde_json::from_str(text)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "report schema {} is not supported (expected {REPORT_SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        Ok(r)
    }

    /// Columns in ablation-table order; AUC is blank when undefined.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("Method,Precision,Recall,F1,AUC\n");
        for r in &self.rows {
            let auc = r.auc.map(|a| format!("{a:.6}")).unwrap_or_default();
            let method = if r.method.contains([',', '"']) {
                format!("\"{}\"", r.method.replace('"', "\"\""))
            } else {
                r.method.clone()
            };
            let _ = writeln!(out, "{method},{:.6},{:.6},{:.6},{auc}", r.precision, r.recall, r.f1);
        }
        out
    }

    /// Fixed-width table with percentages.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        let mut out = format!(
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9}\n",
            "Method", "Precision", "Recall", "F1", "AUC"
        );
        for r in &self.rows {
            let auc = r.auc.map(|a| format!("{:.2}%", a * 100.0)).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:<width$}  {:>8.2}%  {:>8.2}%  {:>8.2}%  {:>9}",
                r.method,
                r.precision * 100.0,
                r.recall * 100.0,
                r.f1 * 100.0,
                auc
            );
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Ablation-table name of a configuration, e.g. `fusion + pose (tiny-test)`.
pub fn method_name(config: &ModelConfig) -> String {
    let views = match config.views.as_slice() {
        [v] => format!("{v} view"),
        vs if vs.len() == ViewKind::ALL.len() => "fusion".to_string(),
        vs => vs.iter().map(|v| v.as_str()).collect::<Vec<_>>().join("+"),
    };
    let pose = if config.use_pose { " + pose" } else { "" };
    format!("{views}{pose} ({})", config.view_backbone.family.as_str())
}

/// Eval-mode fake probabilities, in sample order.
pub fn score_samples(model: &DetectorModel, samples: &[Sample], batch_size: usize) -> Result<Vec<f64>> {
    let batch_size = batch_size.max(1);
    let parts: Vec<Vec<f64>> = samples
        .par_chunks(batch_size)
        .map(|chunk| {
            let views: Vec<_> = chunk.iter().map(|s| &s.views).collect();
            let batch = model.prepare(&views, model.uses_pose())?;
            Ok(model.forward_prepared(&batch)?.probs)
        })
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}

/// Scores `samples` and reports the metric row for them.
pub fn evaluate(model: &DetectorModel, samples: &[Sample], split: &str) -> Result<EvalRow> {
    if samples.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    let probs = score_samples(model, samples, 32)?;
    let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
    let mut row = EvalRow::from_scores(&method_name(model.config()), split, &probs, &labels, DEFAULT_THRESHOLD)?;
    row.config_hash = model.config().hash()?;
    Ok(row)
}
