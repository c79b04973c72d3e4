//! Synthetic phantom datasets laid out like IBSR18, for smoke runs.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Vector3};
use neuroseg::phantom::phantom_on;
use neuroseg::volio::{write_volume, Grid, VolumeKind};

use crate::{for_volume, CliError};

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub noise: f64,
    pub seed: u64,
    /// Length in mm of each subject's world-space displacement from the
    /// template pose; 0 keeps every subject in the template pose.
    pub pose_offset: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { dims: [32; 3], spacing: [1.0; 3], noise: 0.02, seed: 0, pose_offset: 0.0 }
    }
}

/// World displacement of the `i`-th subject: a fixed direction per subject,
/// scaled to `length`.
pub fn subject_offset(i: usize, length: f64) -> [f64; 3] {
    let a = i as f64 * 2.4;
    let d = [a.cos(), a.sin(), 0.5 * (1.7 * a).sin()];
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    d.map(|x| x / n * length)
}

/// Intensity gain of the `i`-th subject; subjects differ in contrast so
/// histogram matching has work to do.
pub fn subject_gain(i: usize) -> f64 {
    0.7 + 0.15 * (i % 5) as f64
}

/// Write `{id}/{id}_ana_strip.nii.gz`, `{id}/{id}_segTRI_ana.nii.gz` for
/// every id and a noise-free `template.nii.gz` in the reference pose.
pub fn write_dataset(dir: &Path, ids: &[String], spec: &DatasetSpec) -> Result<Vec<PathBuf>, CliError> {
    let template_grid = Grid::axis_aligned(spec.dims, spec.spacing);
    let mut written = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        let sub = dir.join(id);
        fs::create_dir_all(&sub).map_err(|e| CliError::io(&sub, e))?;
        let o = subject_offset(i, spec.pose_offset);
        let mut grid = template_grid.clone();
        grid.affine = Matrix4::new_translation(&Vector3::from(o)) * grid.affine;
        let p = phantom_on(&grid, spec.noise, spec.seed.wrapping_add(i as u64));
        let gain = subject_gain(i);
        let image = p.image.with_data(p.image.data().iter().map(|x| x * gain).collect(), VolumeKind::Intensity);
        let image = image.map_err(for_volume(id))?;
        let img_path = sub.join(format!("{id}_ana_strip.nii.gz"));
        let lab_path = sub.join(format!("{id}_segTRI_ana.nii.gz"));
        write_volume(&image, &img_path).map_err(for_volume(id))?;
        write_volume(&p.labels, &lab_path).map_err(for_volume(id))?;
        written.extend([img_path, lab_path]);
    }
    let template = dir.join("template.nii.gz");
    write_volume(&phantom_on(&template_grid, 0.0, 0).image, &template).map_err(for_volume("template"))?;
    written.push(template);
    Ok(written)
}
