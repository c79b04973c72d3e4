//! Whole-volume prediction, restored to each volume's native grid.

use std::fs;
use std::path::{Path, PathBuf};

use neuroseg::neuronet::{load_checkpoint, predict_volume};
use neuroseg::register::{load_transform, resample, Interpolation};
use neuroseg::volio::{read_volume, write_volume};
use serde_json::json;

use crate::config::{Pipeline, RunConfig, Space};
use crate::manifest::{record, Manifest, Operation, VolumeRecord};
use crate::{for_volume, CliError};

/// Ids to work on: the requested ones, each checked against the split, or
/// the validation split.
pub fn select_ids(cfg: &RunConfig, requested: &[String]) -> Result<Vec<String>, CliError> {
    if requested.is_empty() {
        return Ok(cfg.split.validation.clone());
    }
    match requested.iter().find(|id| !cfg.split.contains(id)) {
        Some(id) => Err(CliError::UnknownId(id.clone())),
        None => Ok(requested.to_vec()),
    }
}

pub fn prediction_file(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_pred.nii.gz"))
}

/// Segment `ids` (default: validation split) with `checkpoint` (default:
/// the run's own). Under P2 the template-space labels are also kept.
pub fn cmd_predict(cfg: &RunConfig, checkpoint: Option<&Path>, ids: &[String]) -> Result<Manifest, CliError> {
    let ids = select_ids(cfg, ids)?;
    let checkpoint = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.checkpoint_file());
    if !checkpoint.is_file() {
        return Err(CliError::Config(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let (params, _) = load_checkpoint(&checkpoint).map_err(|e| CliError::Runtime(e.into()))?;
    params.check_layout(&cfg.net).map_err(|e| CliError::Config(format!("checkpoint does not fit the network: {e}")))?;
    let native_dir = cfg.prediction_dir(Space::Native);
    let template_dir = cfg.prediction_dir(Space::Template);
    for dir in [&native_dir, &template_dir] {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }

    let mut manifest = Manifest::new("predict", cfg.seed, serde_json::to_value(cfg).expect("config serializes"));
    for id in &ids {
        let source = cfg.preprocessed_image(id);
        if !source.is_file() {
            return Err(CliError::Config(format!("volume `{id}` has no preprocessed image; run `preprocess` first")));
        }
        let image = read_volume(&source).map_err(for_volume(id))?;
        let pred = predict_volume(&params, &cfg.net, &image, false).map_err(for_volume(id))?.labels;
        let mut rec = VolumeRecord { id: id.clone(), sources: vec![source], ..Default::default() };
        rec.operations.push(Operation::new("predict", json!({ "checkpoint": checkpoint }), &pred));
        let native = match cfg.pipeline {
            Pipeline::P1 => pred,
            Pipeline::P2 => {
                let template_out = prediction_file(&template_dir, id);
                write_volume(&pred, &template_out).map_err(for_volume(id))?;
                rec.outputs.push(record(&cfg.output_dir, &template_out)?);
                let tpath = cfg.transform_file(id);
                if !tpath.is_file() {
                    return Err(CliError::MissingTransform { id: id.clone(), path: tpath });
                }
                let t = load_transform(&tpath).map_err(for_volume(id))?;
                let native_image = read_volume(cfg.image_path(id)).map_err(for_volume(id))?;
                let back = resample(&pred, &t.invert(), native_image.grid(), Interpolation::NearestNeighbor, 0.0)
                    .map_err(for_volume(id))?;
                rec.transform = Some(tpath.strip_prefix(&cfg.output_dir).unwrap_or(&tpath).to_path_buf());
                rec.operations.push(Operation::new("inverse_transform_nearest", json!({}), &back));
                back
            }
        };
        let out = prediction_file(&native_dir, id);
        write_volume(&native, &out).map_err(for_volume(id))?;
        rec.outputs.push(record(&cfg.output_dir, &out)?);
        manifest.volumes.push(rec);
    }
    manifest.write(&cfg.output_dir)?;
    Ok(manifest)
}
