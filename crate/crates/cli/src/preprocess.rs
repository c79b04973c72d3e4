//! The two preprocessing pipelines over every split volume.

use std::fs;

use neuroseg::preprocess::{
    adaptive_hist_eq, compute_landmarks, match_histogram, rescale_minmax, standardize, LandmarkMap,
};
use neuroseg::register::{register_rigid, resample, save_transform, Interpolation};
use neuroseg::volio::{read_volume, read_volume_as, write_volume, Volume, VolumeKind};
use rayon::prelude::*;
use serde_json::json;

use crate::config::{Pipeline, RunConfig};
use crate::manifest::{record, Failure, Manifest, Operation, VolumeRecord};
use crate::{for_volume, CliError};

/// Preprocess every split volume into `output_dir/preprocessed`. A failing
/// volume is recorded in the manifest and the rest continue; the call then
/// returns `VolumesFailed`.
pub fn cmd_preprocess(cfg: &RunConfig) -> Result<Manifest, CliError> {
    let ids = cfg.split.all();
    cfg.check_dataset_files(&ids)?;
    for sub in ["preprocessed", "transforms"] {
        let dir = cfg.output_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    }
    let results: Vec<(String, Result<VolumeRecord, CliError>)> = match cfg.pipeline {
        Pipeline::P1 => ids.par_iter().map(|id| (id.clone(), pipeline_1(cfg, id))).collect(),
        Pipeline::P2 => pipeline_2(cfg, &ids)?,
    };
    let mut manifest = Manifest::new("preprocess", cfg.seed, serde_json::to_value(cfg).expect("config serializes"));
    for (id, r) in results {
        match r {
            Ok(rec) => manifest.volumes.push(rec),
            Err(e) => manifest.failures.push(Failure { id, error: format!("{:#}", anyhow::Error::new(e)) }),
        }
    }
    let path = manifest.write(&cfg.output_dir)?;
    if !manifest.failures.is_empty() {
        return Err(CliError::VolumesFailed { failed: manifest.failures.len(), total: ids.len(), manifest: path });
    }
    Ok(manifest)
}

fn read_pair(cfg: &RunConfig, id: &str) -> Result<(Volume, Volume), CliError> {
    let image = read_volume(cfg.image_path(id)).map_err(for_volume(id))?;
    let labels = read_volume_as(cfg.label_path(id), VolumeKind::Label).map_err(for_volume(id))?;
    if image.dims() != labels.dims() {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "volume `{id}`: image dims {:?} differ from label dims {:?}",
            image.dims(),
            labels.dims()
        )));
    }
    Ok((image, labels))
}

fn write_outputs(
    cfg: &RunConfig,
    id: &str,
    image: &Volume,
    labels: &Volume,
    rec: &mut VolumeRecord,
) -> Result<(), CliError> {
    for (v, path) in [(image, cfg.preprocessed_image(id)), (labels, cfg.preprocessed_labels(id))] {
        write_volume(v, &path).map_err(for_volume(id))?;
        rec.outputs.push(record(&cfg.output_dir, &path)?);
    }
    Ok(())
}

fn new_record(cfg: &RunConfig, id: &str) -> VolumeRecord {
    VolumeRecord { id: id.into(), sources: vec![cfg.image_path(id), cfg.label_path(id)], ..Default::default() }
}

fn pipeline_1(cfg: &RunConfig, id: &str) -> Result<VolumeRecord, CliError> {
    let (image, labels) = read_pair(cfg, id)?;
    let mut rec = new_record(cfg, id);
    let out = standardize(&image).map_err(for_volume(id))?;
    rec.operations.push(Operation::new("standardize", json!({}), &out));
    write_outputs(cfg, id, &out, &labels, &mut rec)?;
    Ok(rec)
}

/// A volume on the template grid, rescaled to `[0, 1]`.
struct Aligned {
    image: Volume,
    labels: Volume,
    rec: VolumeRecord,
}

fn align(cfg: &RunConfig, template: &Volume, id: &str) -> Result<Aligned, CliError> {
    let (image, labels) = read_pair(cfg, id)?;
    let mut rec = new_record(cfg, id);
    let reg_cfg = &cfg.preprocess.registration;
    let reg = register_rigid(&image, template, reg_cfg).map_err(for_volume(id))?;
    let transform_path = cfg.transform_file(id);
    save_transform(&reg.transform, &transform_path).map_err(for_volume(id))?;
    rec.transform = Some(transform_path.strip_prefix(&cfg.output_dir).unwrap_or(&transform_path).to_path_buf());
    let grid = template.grid();
    let image = resample(&image, &reg.transform, grid, Interpolation::Trilinear, 0.0).map_err(for_volume(id))?;
    let params = json!({
        "config": reg_cfg,
        "transform": reg.transform.to_text(),
        "initial_metric": reg.initial_metric,
        "metric": reg.metric,
        "iterations": reg.iterations,
    });
    rec.operations.push(Operation::new("register_rigid+resample_trilinear", params, &image));
    let labels =
        resample(&labels, &reg.transform, grid, Interpolation::NearestNeighbor, 0.0).map_err(for_volume(id))?;
    rec.operations.push(Operation::new("resample_nearest_labels", json!({}), &labels));
    let image = rescale_minmax(&image).map_err(for_volume(id))?;
    rec.operations.push(Operation::new("rescale_minmax", json!({}), &image));
    Ok(Aligned { image, labels, rec })
}

fn pipeline_2(cfg: &RunConfig, ids: &[String]) -> Result<Vec<(String, Result<VolumeRecord, CliError>)>, CliError> {
    let template_path = cfg.template.as_deref().expect("validated P2 config has a template");
    let template = read_volume(template_path).map_err(for_volume("template"))?;
    let reference = cfg.reference_id.as_deref().expect("validated P2 config has a reference");
    let aligned: Vec<(String, Result<Aligned, CliError>)> =
        ids.par_iter().map(|id| (id.clone(), align(cfg, &template, id))).collect();

    let pre = &cfg.preprocess;
    let percentiles = pre.landmarks();
    let equalize = |a: &mut Aligned| -> Result<(), CliError> {
        let id = a.rec.id.clone();
        a.image = adaptive_hist_eq(&a.image, &pre.clahe).map_err(for_volume(&id))?;
        a.rec.operations.push(Operation::new("adaptive_hist_eq", json!(pre.clahe), &a.image));
        Ok(())
    };

    let mut aligned = aligned;
    let ref_pos = aligned.iter().position(|(id, _)| id == reference).expect("reference is in the split");
    let ref_landmarks = match &mut aligned[ref_pos].1 {
        Ok(a) => equalize(a).and_then(|_| {
            compute_landmarks(&a.image, &percentiles, pre.foreground_only).map_err(for_volume(reference))
        }),
        Err(_) => Err(CliError::Runtime(anyhow::anyhow!("alignment failed"))),
    };
    let ref_landmarks = match ref_landmarks {
        Ok(l) => l,
        Err(e) => {
            let msg = format!("{:#}", anyhow::Error::new(e));
            return Ok(aligned
                .into_iter()
                .map(|(id, r)| {
                    let r = match r {
                        Err(e) => Err(e),
                        Ok(_) if id == reference => Err(CliError::Runtime(anyhow::anyhow!(msg.clone()))),
                        Ok(_) => {
                            Err(CliError::Runtime(anyhow::anyhow!("histogram reference `{reference}` failed: {msg}")))
                        }
                    };
                    (id, r)
                })
                .collect());
        }
    };

    Ok(aligned
        .into_par_iter()
        .map(|(id, a)| {
            let r = a.and_then(|mut a| {
                if id == reference {
                    a.rec.operations.push(Operation::new("landmarks", json!({ "target": ref_landmarks }), &a.image));
                } else {
                    if pre.clahe_all {
                        equalize(&mut a)?;
                    }
                    let source =
                        compute_landmarks(&a.image, &percentiles, pre.foreground_only).map_err(for_volume(&id))?;
                    let map = LandmarkMap::new(&source, &ref_landmarks, &percentiles).map_err(for_volume(&id))?;
                    let matched = match_histogram(&a.image, &map).map_err(for_volume(&id))?;
                    a.image = if pre.foreground_only { keep_background(&a.image, matched)? } else { matched };
                    let params = json!({ "reference": reference, "percentiles": percentiles, "source": source });
                    a.rec.operations.push(Operation::new("match_histogram", params, &a.image));
                }
                write_outputs(cfg, &id, &a.image, &a.labels, &mut a.rec)?;
                Ok(a.rec)
            });
            (id, r)
        })
        .collect())
}

/// Zero-valued input voxels stay zero: the foreground-only map is fitted on
/// positive intensities and would otherwise lift the background.
fn keep_background(input: &Volume, matched: Volume) -> Result<Volume, CliError> {
    let data = input.data().iter().zip(matched.data()).map(|(&x, &y)| if x > 0.0 { y } else { 0.0 }).collect();
    input.with_data(data, VolumeKind::Intensity).map_err(|e| CliError::Runtime(e.into()))
}

/// Whether a preprocessed pair exists for `id`.
pub fn has_outputs(cfg: &RunConfig, id: &str) -> bool {
    cfg.preprocessed_image(id).is_file() && cfg.preprocessed_labels(id).is_file()
}
