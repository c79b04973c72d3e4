//! Dice reports of predictions against ground truth, paired by volume id.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use neuroseg::eval::{report, DiceReport, Pair, StdKind, TISSUE_CLASSES};
use neuroseg::volio::{read_volume_as, Volume, VolumeKind};
use rayon::prelude::*;

use crate::config::{RunConfig, Space};
use crate::manifest::{record, Manifest};
use crate::predict::select_ids;
use crate::{for_volume, CliError};

#[derive(Debug, Clone, Default)]
pub struct Request {
    pub pred: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    /// Restrict both sides to these ids.
    pub ids: Vec<String>,
    pub space: Option<Space>,
}

/// Volume id of a file name: the name without its NIfTI extension and
/// without a trailing `_pred` or `_labels`.
pub fn volume_id(file_name: &str) -> Option<String> {
    let stem = file_name.strip_suffix(".nii.gz").or_else(|| file_name.strip_suffix(".nii"))?;
    let id = stem.strip_suffix("_pred").or_else(|| stem.strip_suffix("_labels")).unwrap_or(stem);
    (!id.is_empty()).then(|| id.to_string())
}

/// NIfTI files of a directory by volume id.
pub fn scan_dir(dir: &Path) -> Result<BTreeMap<String, PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Config(format!("cannot list {}: {e}", dir.display())))?;
    let mut found = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        let Some(id) = path.file_name().and_then(|n| n.to_str()).and_then(volume_id) else {
            continue;
        };
        if !path.is_file() {
            continue;
        }
        if let Some(prev) = found.insert(id.clone(), path.clone()) {
            return Err(CliError::Config(format!("id `{id}` matches both {} and {}", prev.display(), path.display())));
        }
    }
    Ok(found)
}

fn restrict(map: &mut BTreeMap<String, PathBuf>, ids: &[String]) {
    if !ids.is_empty() {
        map.retain(|id, _| ids.contains(id));
    }
}

/// Pair files by id and report Dice; ids present on one side only are an
/// `IdMismatch`.
pub fn evaluate_files(
    preds: &BTreeMap<String, PathBuf>,
    truths: &BTreeMap<String, PathBuf>,
    classes: &[usize],
    std_kind: StdKind,
) -> Result<DiceReport, CliError> {
    let only_pred: Vec<String> = preds.keys().filter(|k| !truths.contains_key(*k)).cloned().collect();
    let only_truth: Vec<String> = truths.keys().filter(|k| !preds.contains_key(*k)).cloned().collect();
    if !only_pred.is_empty() || !only_truth.is_empty() {
        return Err(CliError::IdMismatch { only_pred, only_truth });
    }
    if preds.is_empty() {
        return Err(CliError::Config("no prediction files to evaluate".into()));
    }
    let loaded: Vec<(String, Volume, Volume)> = preds
        .par_iter()
        .map(|(id, p)| {
            let pred = read_volume_as(p, VolumeKind::Label).map_err(for_volume(id))?;
            let truth = read_volume_as(&truths[id], VolumeKind::Label).map_err(for_volume(id))?;
            Ok((id.clone(), pred, truth))
        })
        .collect::<Result<_, CliError>>()?;
    let pairs: Vec<Pair<'_>> = loaded.iter().map(|(id, p, t)| (p, t, id.as_str())).collect();
    report(&pairs, classes, std_kind).map_err(|e| CliError::Runtime(e.into()))
}

/// Write `dice<suffix>.txt` and `dice<suffix>.json` into `dir`.
pub fn write_report(rep: &DiceReport, dir: &Path, suffix: &str) -> Result<[PathBuf; 2], CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let txt = dir.join(format!("dice{suffix}.txt"));
    let json = dir.join(format!("dice{suffix}.json"));
    fs::write(&txt, rep.to_table()).map_err(|e| CliError::io(&txt, e))?;
    fs::write(&json, rep.to_json() + "\n").map_err(|e| CliError::io(&json, e))?;
    Ok([txt, json])
}

/// Evaluate a run's predictions. Without an explicit truth directory the
/// truth is the dataset labels (native space) or the preprocessed labels
/// (template space), for the requested ids or the validation split.
pub fn cmd_evaluate(cfg: &RunConfig, req: &Request) -> Result<DiceReport, CliError> {
    let space = req.space.unwrap_or(cfg.evaluation.space);
    let pred_dir = req.pred.clone().unwrap_or_else(|| cfg.prediction_dir(space));
    let mut preds = scan_dir(&pred_dir)?;
    restrict(&mut preds, &req.ids);
    let truths = match &req.truth {
        Some(dir) => {
            let mut t = scan_dir(dir)?;
            restrict(&mut t, &req.ids);
            t
        }
        None => select_ids(cfg, &req.ids)?
            .into_iter()
            .map(|id| {
                let path = match space {
                    Space::Native => cfg.label_path(&id),
                    Space::Template => cfg.preprocessed_labels(&id),
                };
                (id, path)
            })
            .collect(),
    };
    let rep = evaluate_files(&preds, &truths, &cfg.evaluation.classes, cfg.evaluation.std)?;
    let suffix = match space {
        Space::Native => "",
        Space::Template => "_template",
    };
    let files = write_report(&rep, &cfg.report_dir(), suffix)?;
    let mut manifest =
        Manifest::new(&format!("evaluate{suffix}"), cfg.seed, serde_json::to_value(cfg).expect("config serializes"));
    for f in &files {
        manifest.outputs.push(record(&cfg.output_dir, f)?);
    }
    manifest.write(&cfg.output_dir)?;
    Ok(rep)
}

/// Evaluate two directories without a run configuration; reports go to
/// `out/reports`.
pub fn evaluate_dirs(req: &Request, out: &Path) -> Result<DiceReport, CliError> {
    let (Some(pred), Some(truth)) = (&req.pred, &req.truth) else {
        return Err(CliError::Config("evaluate without --config needs --pred and --truth".into()));
    };
    let mut preds = scan_dir(pred)?;
    let mut truths = scan_dir(truth)?;
    restrict(&mut preds, &req.ids);
    restrict(&mut truths, &req.ids);
    let rep = evaluate_files(&preds, &truths, &TISSUE_CLASSES, StdKind::Population)?;
    write_report(&rep, &out.join("reports"), "")?;
    Ok(rep)
}
