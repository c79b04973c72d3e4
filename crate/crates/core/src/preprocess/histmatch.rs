//! Landmark-based histogram matching: quantiles of a moving volume are mapped
//! onto the same quantiles of a reference, piecewise linearly.

use serde::{Deserialize, Serialize};

use crate::volio::{Volume, VolumeKind};

use super::{require_intensity, PreprocessError};

/// Endpoints 0 and 100 plus 64 percentiles evenly spaced over `[1, 99]`.
pub fn default_percentiles() -> Vec<f64> {
    let inner = 64;
    let mut p = Vec::with_capacity(inner + 2);
    p.push(0.0);
    p.extend((0..inner).map(|i| 1.0 + 98.0 * i as f64 / (inner - 1) as f64));
    p.push(100.0);
    p
}

/// Quantile of an ascending slice, interpolating linearly between order
/// statistics at position `p/100 · (n − 1)`.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Empirical quantiles of the (foreground) intensities at `percentiles`.
pub fn compute_landmarks(v: &Volume, percentiles: &[f64], foreground_only: bool) -> Result<Vec<f64>, PreprocessError> {
    require_intensity(v)?;
    if percentiles.is_empty()
        || percentiles.iter().any(|p| !(0.0..=100.0).contains(p))
        || percentiles.windows(2).any(|w| w[1] < w[0])
    {
        return Err(PreprocessError::InvalidParameter("percentiles must be ascending within [0, 100]".into()));
    }
    let mut values: Vec<f64> = v.data().iter().copied().filter(|&x| !foreground_only || x > 0.0).collect();
    if values.is_empty() {
        return Err(PreprocessError::DegenerateHistogram("no foreground voxels".into()));
    }
    values.sort_unstable_by(f64::total_cmp);
    if values[0] == values[values.len() - 1] {
        return Err(PreprocessError::DegenerateHistogram(format!("all voxels equal {}", values[0])));
    }
    Ok(percentiles.iter().map(|&p| quantile_sorted(&values, p)).collect())
}

/// Monotone piecewise-linear intensity map through `(source[i], target[i])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkMap {
    source: Vec<f64>,
    target: Vec<f64>,
    percentiles: Vec<f64>,
}

impl LandmarkMap {
    /// Build a map, dropping landmarks at which either sequence fails to
    /// strictly increase (ties from quantized intensities).
    pub fn new(source: &[f64], target: &[f64], percentiles: &[f64]) -> Result<Self, PreprocessError> {
        if source.len() != target.len() || source.len() != percentiles.len() {
            return Err(PreprocessError::InvalidParameter("landmark vectors differ in length".into()));
        }
        let mut map = LandmarkMap { source: Vec::new(), target: Vec::new(), percentiles: Vec::new() };
        for i in 0..source.len() {
            let keep = match (map.source.last(), map.target.last()) {
                (Some(&s), Some(&t)) => source[i] > s && target[i] > t,
                _ => true,
            };
            if keep {
                map.source.push(source[i]);
                map.target.push(target[i]);
                map.percentiles.push(percentiles[i]);
            }
        }
        if map.source.len() < 2 {
            return Err(PreprocessError::DegenerateHistogram("fewer than two distinct landmarks".into()));
        }
        Ok(map)
    }

    /// Map carrying `moving`'s landmarks onto `reference`'s.
    pub fn fit(
        moving: &Volume,
        reference: &Volume,
        percentiles: &[f64],
        foreground_only: bool,
    ) -> Result<Self, PreprocessError> {
        let source = compute_landmarks(moving, percentiles, foreground_only)?;
        let target = compute_landmarks(reference, percentiles, foreground_only)?;
        LandmarkMap::new(&source, &target, percentiles)
    }

    pub fn source(&self) -> &[f64] {
        &self.source
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn percentiles(&self) -> &[f64] {
        &self.percentiles
    }

    /// Evaluate the map, extrapolating with the end segments' slopes.
    pub fn apply(&self, x: f64) -> f64 {
        let n = self.source.len();
        let seg = self.source.partition_point(|&s| s <= x).clamp(1, n - 1) - 1;
        let (s0, s1) = (self.source[seg], self.source[seg + 1]);
        let (t0, t1) = (self.target[seg], self.target[seg + 1]);
        t0 + (x - s0) * (t1 - t0) / (s1 - s0)
    }
}

/// Remap every voxel of `moving` through `map`.
pub fn match_histogram(moving: &Volume, map: &LandmarkMap) -> Result<Volume, PreprocessError> {
    require_intensity(moving)?;
    let data = moving.data().iter().map(|&x| map.apply(x)).collect();
    Ok(moving.with_data(data, VolumeKind::Intensity)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Volume {
        Volume::from_fn([1, 1, n], [1.0; 3], VolumeKind::Intensity, |_, _, k| k as f64).unwrap()
    }

    #[test]
    fn percentile_layout() {
        let p = default_percentiles();
        assert_eq!(p.len(), 66);
        assert_eq!(p[0], 0.0);
        assert_eq!(p[1], 1.0);
        assert!((p[64] - 99.0).abs() < 1e-12);
        assert_eq!(p[65], 100.0);
    }

    #[test]
    fn order_statistics() {
        let v = ramp(101);
        assert_eq!(compute_landmarks(&v, &[0.0, 50.0, 100.0], false).unwrap(), vec![0.0, 50.0, 100.0]);
        // foreground drops the zero voxel
        assert_eq!(compute_landmarks(&v, &[0.0, 100.0], true).unwrap(), vec![1.0, 100.0]);
        let q = compute_landmarks(&ramp(4), &[50.0], false).unwrap();
        assert_eq!(q, vec![1.5]);
    }

    #[test]
    fn constant_is_degenerate() {
        let v = Volume::from_fn([2, 2, 2], [1.0; 3], VolumeKind::Intensity, |_, _, _| 3.0).unwrap();
        assert!(matches!(compute_landmarks(&v, &[0.0, 100.0], true), Err(PreprocessError::DegenerateHistogram(_))));
    }

    #[test]
    fn ties_are_dropped() {
        let m = LandmarkMap::new(&[0.0, 1.0, 1.0, 2.0], &[0.0, 5.0, 6.0, 7.0], &[0.0, 30.0, 60.0, 100.0]).unwrap();
        assert_eq!(m.source(), &[0.0, 1.0, 2.0]);
        assert_eq!(m.target(), &[0.0, 5.0, 7.0]);
        assert!(LandmarkMap::new(&[1.0, 1.0], &[0.0, 1.0], &[0.0, 100.0]).is_err());
    }

    #[test]
    fn extrapolates_with_end_slopes() {
        let m = LandmarkMap::new(&[0.0, 1.0, 3.0], &[0.0, 2.0, 3.0], &[0.0, 50.0, 100.0]).unwrap();
        assert_eq!(m.apply(-1.0), -2.0);
        assert_eq!(m.apply(0.5), 1.0);
        assert_eq!(m.apply(2.0), 2.5);
        assert_eq!(m.apply(5.0), 4.0);
    }
}
