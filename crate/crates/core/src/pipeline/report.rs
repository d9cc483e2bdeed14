use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{PipelineKind, PipelineResult};
use crate::error::{Error, Result};

pub const COLUMNS: [&str; 6] = ["Accuracy", "F1", "Precision", "Recall (Sens.)", "Spec.", "Dice"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub values: [Option<f64>; 6],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

pub fn compare(results: &[PipelineResult]) -> Result<ComparisonTable> {
    if results.is_empty() {
        return Err(Error::EmptyDataset("compare needs at least one result".into()));
    }
    let repeated = |k: PipelineKind| results.iter().filter(|r| r.kind == k).count() > 1;
    let rows = results
        .iter()
        .map(|r| {
            let m = &r.metrics;
            let name = if repeated(r.kind) {
                format!("{} (fraction {}, seed {})", r.kind.display_name(), r.train_fraction, r.seed)
            } else {
                r.kind.display_name().to_string()
            };
            ComparisonRow { name, values: [m.accuracy, m.f1, m.precision, m.recall, m.specificity, m.dice] }
        })
        .collect();
    Ok(ComparisonTable { rows })
}

impl ComparisonTable {
    /// Column maxima over defined cells.
    pub fn column_best(&self) -> [Option<f64>; 6] {
        let mut best = [None; 6];
        for row in &self.rows {
            for (b, v) in best.iter_mut().zip(row.values) {
                if let Some(v) = v {
                    *b = Some(b.map_or(v, |x: f64| x.max(v)));
                }
            }
        }
        best
    }

    pub fn is_bold(&self, row: usize, col: usize) -> bool {
        matches!((self.rows[row].values[col], self.column_best()[col]), (Some(v), Some(b)) if v == b)
    }

    /// Markdown; column maxima in bold, undefined cells as `-`.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "| Pipeline | {} |", COLUMNS.join(" | "));
        let _ = writeln!(out, "|---|{}", "---:|".repeat(COLUMNS.len()));
        for (i, row) in self.rows.iter().enumerate() {
            let cells: Vec<String> = (0..COLUMNS.len())
                .map(|c| match row.values[c] {
                    None => "-".to_string(),
                    Some(v) if self.is_bold(i, c) => format!("**{v:.4}**"),
                    Some(v) => format!("{v:.4}"),
                })
                .collect();
            let _ = writeln!(out, "| {} | {} |", row.name, cells.join(" | "));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("pipeline,accuracy,f1,precision,recall,specificity,dice\n");
        for row in &self.rows {
            let cells: Vec<String> = row.values.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()).collect();
            let _ = writeln!(out, "{},{}", row.name, cells.join(","));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub kind: PipelineKind,
    pub fraction: f64,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
}

fn distinct<T: PartialEq + Copy>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out = Vec::new();
    for x in items {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

impl SweepReport {
    pub fn kinds(&self) -> Vec<PipelineKind> {
        distinct(self.cells.iter().map(|c| c.kind))
    }

    pub fn fractions(&self) -> Vec<f64> {
        let mut f = distinct(self.cells.iter().map(|c| c.fraction));
        f.sort_by(f64::total_cmp);
        f
    }

    pub fn seeds(&self) -> Vec<u64> {
        distinct(self.cells.iter().map(|c| c.seed))
    }

    fn at(&self, kind: PipelineKind, fraction: f64) -> impl Iterator<Item = &SweepCell> {
        self.cells.iter().filter(move |c| c.kind == kind && c.fraction == fraction)
    }

    /// Seed-averaged accuracy over defined values.
    pub fn mean_accuracy(&self, kind: PipelineKind, fraction: f64) -> Option<f64> {
        mean(self.at(kind, fraction).map(|c| c.accuracy))
    }

    pub fn mean_sensitivity(&self, kind: PipelineKind, fraction: f64) -> Option<f64> {
        mean(self.at(kind, fraction).map(|c| c.sensitivity))
    }

    /// Every `(kind, fraction, seed)` combination appears exactly once.
    pub fn is_complete(&self) -> bool {
        let (k, f, s) = (self.kinds(), self.fractions(), self.seeds());
        self.cells.len() == k.len() * f.len() * s.len()
            && k.iter().all(|&kk| {
                f.iter().all(|&ff| s.iter().all(|&ss| self.at(kk, ff).filter(|c| c.seed == ss).count() == 1))
            })
    }

    /// `kind,fraction,seed,accuracy,sensitivity`; undefined values are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,fraction,seed,accuracy,sensitivity\n");
        for c in &self.cells {
            let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", c.kind, c.fraction, c.seed, fmt(c.accuracy), fmt(c.sensitivity));
        }
        out
    }
}
