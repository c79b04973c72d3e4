use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::volio::{Volume, VolumeKind};

use super::PreprocessError;

pub const HISTOGRAM_BINS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: u32,
    pub count: usize,
    pub fraction: f64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    /// Counts over the volume's intensity range rescaled to `[0, 1]`.
    pub histogram: Vec<u64>,
}

/// Per-class intensity statistics, the evidence used to pick a histogram
/// matching reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueStats {
    pub total_voxels: usize,
    pub classes: Vec<ClassStats>,
}

impl TissueStats {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>5} {:>10} {:>8} {:>10} {:>10} {:>10} {:>10}",
            "class", "count", "fraction", "min", "max", "mean", "std"
        );
        for c in &self.classes {
            let _ = writeln!(
                s,
                "{:>5} {:>10} {:>8.4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
                c.class, c.count, c.fraction, c.min, c.max, c.mean, c.std
            );
        }
        s
    }
}

pub fn tissue_stats(v: &Volume, labels: &Volume) -> Result<TissueStats, PreprocessError> {
    if v.dims() != labels.dims() {
        return Err(PreprocessError::DimMismatch(v.dims(), labels.dims()));
    }
    if labels.kind() != VolumeKind::Label {
        return Err(PreprocessError::WrongKind(labels.kind()));
    }
    let (lo, hi) = v.min_max();
    let range = if hi > lo { hi - lo } else { 1.0 };

    struct Acc {
        count: usize,
        sum: f64,
        min: f64,
        max: f64,
        hist: Vec<u64>,
        values: Vec<f64>,
    }
    let mut per: BTreeMap<u32, Acc> = BTreeMap::new();
    for (&x, &l) in v.data().iter().zip(labels.data()) {
        let a = per.entry(l as u32).or_insert_with(|| Acc {
            count: 0,
            sum: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            hist: vec![0; HISTOGRAM_BINS],
            values: Vec::new(),
        });
        a.count += 1;
        a.sum += x;
        a.min = a.min.min(x);
        a.max = a.max.max(x);
        let b = (((x - lo) / range) * HISTOGRAM_BINS as f64) as usize;
        a.hist[b.min(HISTOGRAM_BINS - 1)] += 1;
        a.values.push(x);
    }
    let total = v.len();
    let classes = per
        .into_iter()
        .map(|(class, a)| {
            let mean = a.sum / a.count as f64;
            let var = a.values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / a.count as f64;
            ClassStats {
                class,
                count: a.count,
                fraction: a.count as f64 / total as f64,
                min: a.min,
                max: a.max,
                mean,
                std: var.sqrt(),
                histogram: a.hist,
            }
        })
        .collect();
    Ok(TissueStats { total_voxels: total, classes })
}
