//! Single-volume utilities: tissue statistics, pairwise registration and
//! transform application.

use std::path::Path;

use neuroseg::preprocess::tissue_stats;
use neuroseg::register::{load_transform, register_rigid, resample, save_transform, Interpolation, RegistrationConfig};
use neuroseg::volio::{read_volume, read_volume_as, write_volume, VolumeKind};

use crate::{for_volume, CliError};

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("input file {} does not exist", path.display())))
    }
}

pub fn cmd_stats(image: &Path, labels: &Path, json: bool) -> Result<(), CliError> {
    require_file(image)?;
    require_file(labels)?;
    let name = image.display().to_string();
    let v = read_volume(image).map_err(for_volume(&name))?;
    let l = read_volume_as(labels, VolumeKind::Label).map_err(for_volume(&name))?;
    let stats = tissue_stats(&v, &l).map_err(for_volume(&name))?;
    if json {
        println!("{}", stats.to_json());
    } else {
        print!("{}", stats.to_table());
    }
    Ok(())
}

pub fn cmd_register(
    moving: &Path,
    fixed: &Path,
    transform: &Path,
    resampled: Option<&Path>,
    cfg: &RegistrationConfig,
) -> Result<(), CliError> {
    require_file(moving)?;
    require_file(fixed)?;
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let name = moving.display().to_string();
    let m = read_volume(moving).map_err(for_volume(&name))?;
    let f = read_volume(fixed).map_err(for_volume(&name))?;
    let reg = register_rigid(&m, &f, cfg).map_err(for_volume(&name))?;
    save_transform(&reg.transform, transform).map_err(for_volume(&name))?;
    if let Some(out) = resampled {
        let r = resample(&m, &reg.transform, f.grid(), Interpolation::Trilinear, 0.0).map_err(for_volume(&name))?;
        write_volume(&r, out).map_err(for_volume(&name))?;
    }
    println!(
        "metric {:.6} -> {:.6} after {:?} iterations per level; rotation {:.4} deg",
        reg.initial_metric,
        reg.metric,
        reg.iterations,
        reg.transform.angle_to(&Default::default()).to_degrees()
    );
    Ok(())
}

/// Resample `input` onto `reference`'s grid through a saved transform or
/// its inverse; labels use nearest-neighbour interpolation.
pub fn cmd_transform(
    input: &Path,
    transform: &Path,
    reference: &Path,
    output: &Path,
    invert: bool,
    labels: bool,
) -> Result<(), CliError> {
    for p in [input, transform, reference] {
        require_file(p)?;
    }
    let name = input.display().to_string();
    let kind = if labels { VolumeKind::Label } else { VolumeKind::Intensity };
    let v = read_volume_as(input, kind).map_err(for_volume(&name))?;
    let r = read_volume(reference).map_err(for_volume(&name))?;
    let mut t = load_transform(transform).map_err(for_volume(&name))?;
    if invert {
        t = t.invert();
    }
    let mode = if labels { Interpolation::NearestNeighbor } else { Interpolation::Trilinear };
    let out = resample(&v, &t, r.grid(), mode, 0.0).map_err(for_volume(&name))?;
    write_volume(&out, output).map_err(for_volume(&name))?;
    Ok(())
}
