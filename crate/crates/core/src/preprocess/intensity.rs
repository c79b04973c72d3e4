use crate::volio::{Volume, VolumeKind};

use super::{require_intensity, PreprocessError};

/// Smallest standard deviation or range treated as non-degenerate.
pub const EPSILON: f64 = 1e-12;

/// Z-score a volume with the population mean and standard deviation of all
/// voxels, background included.
pub fn standardize(v: &Volume) -> Result<Volume, PreprocessError> {
    require_intensity(v)?;
    let n = v.len() as f64;
    let mean = v.data().iter().sum::<f64>() / n;
    let var = v.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sigma = var.sqrt();
    if !(sigma > EPSILON) {
        return Err(PreprocessError::SigmaZero(sigma));
    }
    let data = v.data().iter().map(|x| (x - mean) / sigma).collect();
    Ok(v.with_data(data, VolumeKind::Intensity)?)
}

/// Affinely map the intensity range onto `[0, 1]`; the extremal voxels land
/// exactly on 0 and 1.
pub fn rescale_minmax(v: &Volume) -> Result<Volume, PreprocessError> {
    require_intensity(v)?;
    let (lo, hi) = v.min_max();
    let range = hi - lo;
    if !(range > EPSILON) {
        return Err(PreprocessError::ZeroRange(lo));
    }
    let data = v.data().iter().map(|x| (x - lo) / range).collect();
    Ok(v.with_data(data, VolumeKind::Intensity)?)
}
