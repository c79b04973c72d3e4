//! Dice overlap per tissue class and aggregate reports.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volio::{Volume, VolumeKind};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error("`{0}` is not a label volume")]
    NotLabel(String),
    #[error("a report needs at least one volume pair")]
    Empty,
    #[error("volume id `{0}` appears more than once")]
    DuplicateId(String),
}

/// Display name of a tissue class id.
pub fn class_name(class: usize) -> String {
    match class {
        0 => "background".into(),
        1 => "CSF".into(),
        2 => "GM".into(),
        3 => "WM".into(),
        c => format!("class {c}"),
    }
}

/// The three tissue classes reported by default.
pub const TISSUE_CLASSES: [usize; 3] = [1, 2, 3];

/// Voxel counts behind one Dice value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Overlap {
    pub pred: u64,
    pub truth: u64,
    pub both: u64,
}

impl Overlap {
    /// `2|P∩T| / (|P|+|T|)`, and 1 when both sets are empty.
    pub fn dice(self) -> f64 {
        if self.pred + self.truth == 0 {
            1.0
        } else {
            (2 * self.both) as f64 / (self.pred + self.truth) as f64
        }
    }
}

fn check_pair(pred: &Volume, truth: &Volume) -> Result<(), EvalError> {
    if pred.dims() != truth.dims() {
        return Err(EvalError::DimMismatch(pred.dims(), truth.dims()));
    }
    for (v, name) in [(pred, "prediction"), (truth, "truth")] {
        if v.kind() != VolumeKind::Label {
            return Err(EvalError::NotLabel(name.into()));
        }
    }
    Ok(())
}

pub fn overlap(pred: &Volume, truth: &Volume, class: usize) -> Result<Overlap, EvalError> {
    check_pair(pred, truth)?;
    let c = class as f64;
    let mut o = Overlap { pred: 0, truth: 0, both: 0 };
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let (p, t) = (p == c, t == c);
        o.pred += p as u64;
        o.truth += t as u64;
        o.both += (p && t) as u64;
    }
    Ok(o)
}

/// Dice similarity of the voxel sets labelled `class` in two label volumes.
pub fn dice(pred: &Volume, truth: &Volume, class: usize) -> Result<f64, EvalError> {
    Ok(overlap(pred, truth, class)?.dice())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdKind {
    /// Divide by `n`.
    #[default]
    Population,
    /// Divide by `n - 1`; zero for a single volume.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeDice {
    pub id: String,
    /// Dice by class id.
    pub dice: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub classes: Vec<usize>,
    pub std_kind: StdKind,
    /// Sorted by id.
    pub volumes: Vec<VolumeDice>,
    /// Mean and spread by class id over exactly `volumes`.
    pub aggregate: BTreeMap<usize, ClassStats>,
}

/// One evaluated volume: prediction, ground truth and id.
pub type Pair<'a> = (&'a Volume, &'a Volume, &'a str);

/// Per-volume Dice for `classes` and their mean and spread across volumes.
pub fn report(pairs: &[Pair<'_>], classes: &[usize], std_kind: StdKind) -> Result<DiceReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut order: Vec<&Pair<'_>> = pairs.iter().collect();
    order.sort_by(|a, b| a.2.cmp(b.2));
    if let Some(w) = order.windows(2).find(|w| w[0].2 == w[1].2) {
        return Err(EvalError::DuplicateId(w[0].2.to_string()));
    }
    let volumes = order
        .par_iter()
        .map(|(pred, truth, id)| {
            let dice = classes.iter().map(|&c| Ok((c, dice(pred, truth, c)?))).collect::<Result<_, EvalError>>()?;
            Ok(VolumeDice { id: id.to_string(), dice })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let aggregate = classes
        .iter()
        .map(|&c| {
            let values: Vec<f64> = volumes.iter().map(|v| v.dice[&c]).collect();
            (c, stats(&values, std_kind))
        })
        .collect();
    Ok(DiceReport { classes: classes.to_vec(), std_kind, volumes, aggregate })
}

fn stats(values: &[f64], kind: StdKind) -> ClassStats {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let denom = match kind {
        StdKind::Population => n,
        StdKind::Sample => n - 1.0,
    };
    ClassStats { mean, std: if denom > 0.0 { (ss / denom).sqrt() } else { 0.0 } }
}

impl DiceReport {
    /// Aligned text table: one row per volume and a closing `mean±std` row.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["volume".to_string()];
        header.extend(self.classes.iter().map(|&c| class_name(c)));
        rows.push(header);
        for v in &self.volumes {
            let mut row = vec![v.id.clone()];
            row.extend(self.classes.iter().map(|c| format!("{:.4}", v.dice[c])));
            rows.push(row);
        }
        let mut summary = vec!["mean±std".to_string()];
        summary.extend(self.classes.iter().map(|c| {
            let s = self.aggregate[c];
            format!("{:.4}±{:.4}", s.mean, s.std)
        }));
        rows.push(summary);
        let widths: Vec<usize> =
            (0..rows[0].len()).map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for (n, row) in rows.iter().enumerate() {
            if n == rows.len() - 1 {
                let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
                out.push_str(rule.join("  ").trim_end());
                out.push('\n');
            }
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (cell, &w))| {
                    let pad = w - cell.chars().count();
                    if i == 0 {
                        format!("{cell}{}", " ".repeat(pad))
                    } else {
                        format!("{}{cell}", " ".repeat(pad))
                    }
                })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
