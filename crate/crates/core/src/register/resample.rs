use nalgebra::{Matrix4, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::volio::{Grid, Volume, VolumeKind};

use super::{RegisterError, RigidTransform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interpolation {
    Trilinear,
    NearestNeighbor,
}

/// Continuous coordinates this close to a grid node are snapped onto it, so
/// identity-like mappings reproduce the input exactly.
const SNAP: f64 = 1e-6;

#[inline]
fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < SNAP {
        r
    } else {
        x
    }
}

/// Matrix taking fixed-grid voxel indices to moving-grid voxel indices.
pub(crate) fn voxel_map(moving: &Grid, t: &RigidTransform, fixed: &Grid) -> Result<Matrix4<f64>, RegisterError> {
    let inv = moving.affine.try_inverse().ok_or(RegisterError::SingularAffine)?;
    Ok(inv * t.matrix() * fixed.affine)
}

/// Trilinear sample at a continuous voxel position, `None` outside the grid.
#[inline]
pub(crate) fn trilinear(data: &[f64], dims: [usize; 3], p: [f64; 3]) -> Option<f64> {
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let x = snap(p[a]);
        let hi = (dims[a] - 1) as f64;
        if !(x >= 0.0 && x <= hi) {
            return None;
        }
        let i0 = if dims[a] == 1 { 0 } else { (x.floor() as usize).min(dims[a] - 2) };
        base[a] = i0;
        frac[a] = x - i0 as f64;
    }
    let [_, d1, d2] = dims;
    let idx = |i: usize, j: usize, k: usize| (i * d1 + j) * d2 + k;
    let step = |a: usize| usize::from(dims[a] > 1);
    let (s0, s1, s2) = (step(0), step(1), step(2));
    let [i, j, k] = base;
    let [fx, fy, fz] = frac;
    let c = [
        data[idx(i, j, k)],
        data[idx(i, j, k + s2)],
        data[idx(i, j + s1, k)],
        data[idx(i, j + s1, k + s2)],
        data[idx(i + s0, j, k)],
        data[idx(i + s0, j, k + s2)],
        data[idx(i + s0, j + s1, k)],
        data[idx(i + s0, j + s1, k + s2)],
    ];
    let c00 = c[0] + fz * (c[1] - c[0]);
    let c01 = c[2] + fz * (c[3] - c[2]);
    let c10 = c[4] + fz * (c[5] - c[4]);
    let c11 = c[6] + fz * (c[7] - c[6]);
    let c0 = c00 + fy * (c01 - c00);
    let c1 = c10 + fy * (c11 - c10);
    let v = c0 + fx * (c1 - c0);
    // keep within the corner hull despite rounding
    let (lo, hi) = c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    Some(v.clamp(lo, hi))
}

#[inline]
fn nearest(data: &[f64], dims: [usize; 3], p: [f64; 3]) -> Option<f64> {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let r = p[a].round();
        if !(r >= 0.0 && r <= (dims[a] - 1) as f64) {
            return None;
        }
        idx[a] = r as usize;
    }
    Some(data[(idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]])
}

/// Resample `v` onto `fixed`: each fixed voxel's world point goes through `t`
/// into `v`'s world space and is interpolated there. Samples falling outside
/// `v` take `default_value`.
pub fn resample(
    v: &Volume,
    t: &RigidTransform,
    fixed: &Grid,
    mode: Interpolation,
    default_value: f64,
) -> Result<Volume, RegisterError> {
    if v.kind() == VolumeKind::Label && mode != Interpolation::NearestNeighbor {
        return Err(RegisterError::LabelNeedsNearest);
    }
    let m = voxel_map(v.grid(), t, fixed)?;
    let dims = v.dims();
    let data = v.data();
    let [_, f1, f2] = fixed.dims;
    let mut out = vec![0.0; fixed.len()];
    out.par_chunks_mut(f1 * f2).enumerate().for_each(|(i, slab)| {
        for j in 0..f1 {
            for k in 0..f2 {
                let p = m * Vector4::new(i as f64, j as f64, k as f64, 1.0);
                let p = [p[0], p[1], p[2]];
                let s = match mode {
                    Interpolation::Trilinear => trilinear(data, dims, p),
                    Interpolation::NearestNeighbor => nearest(data, dims, p),
                };
                slab[j * f2 + k] = s.unwrap_or(default_value);
            }
        }
    });
    Ok(Volume::new(out, fixed.clone(), v.kind())?)
}

/// Separable Gaussian blur with a physical-units sigma, edge-clamped.
pub fn gaussian_smooth(v: &Volume, sigma_mm: f64) -> Volume {
    if sigma_mm <= 0.0 {
        return v.clone();
    }
    let dims = v.dims();
    let mut data = v.data().to_vec();
    for axis in 0..3 {
        let sigma = sigma_mm / v.spacing()[axis];
        if sigma < 1e-3 || dims[axis] == 1 {
            continue;
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let norm: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.iter().map(|w| w / norm).collect();
        let stride = match axis {
            0 => dims[1] * dims[2],
            1 => dims[2],
            _ => 1,
        };
        let n = dims[axis] as isize;
        let src = data.clone();
        for (idx, out) in data.iter_mut().enumerate() {
            let pos = ((idx / stride) % dims[axis]) as isize;
            let base = idx as isize - pos * stride as isize;
            let mut acc = 0.0;
            for (w, d) in kernel.iter().zip(-radius..=radius) {
                let q = (pos + d).clamp(0, n - 1);
                acc += w * src[(base + q * stride as isize) as usize];
            }
            *out = acc;
        }
    }
    v.with_data(data, v.kind()).expect("same geometry")
}

/// Keep every `factor`-th voxel along each axis; the affine is scaled to match.
pub fn shrink(v: &Volume, factor: usize) -> Volume {
    if factor <= 1 {
        return v.clone();
    }
    let d = v.dims();
    let nd = d.map(|x| x.div_ceil(factor));
    let mut data = Vec::with_capacity(nd.iter().product());
    for i in 0..nd[0] {
        for j in 0..nd[1] {
            for k in 0..nd[2] {
                data.push(v.at(i * factor, j * factor, k * factor));
            }
        }
    }
    let mut affine = *v.affine();
    for c in 0..3 {
        for r in 0..3 {
            affine[(r, c)] *= factor as f64;
        }
    }
    let grid = Grid { dims: nd, spacing: v.spacing().map(|s| s * factor as f64), affine };
    Volume::new(data, grid, v.kind()).expect("shrunk grid valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Volume {
        Volume::from_fn([5, 4, 3], [1.0, 2.0, 0.5], VolumeKind::Intensity, |i, j, k| (i * 12 + j * 3 + k) as f64)
            .unwrap()
    }

    #[test]
    fn identity_resample_is_exact() {
        let v = ramp();
        for mode in [Interpolation::Trilinear, Interpolation::NearestNeighbor] {
            let out = resample(&v, &RigidTransform::identity(), v.grid(), mode, -1.0).unwrap();
            assert_eq!(out.data(), v.data());
        }
    }

    #[test]
    fn trilinear_of_linear_field_is_exact() {
        let v = ramp();
        let val = trilinear(v.data(), v.dims(), [1.5, 2.25, 0.5]).unwrap();
        assert!((val - (1.5 * 12.0 + 2.25 * 3.0 + 0.5)).abs() < 1e-12);
        assert!(trilinear(v.data(), v.dims(), [4.5, 0.0, 0.0]).is_none());
        assert!(trilinear(v.data(), v.dims(), [4.0, 3.0, 2.0]).is_some());
    }

    #[test]
    fn labels_need_nearest() {
        let l = Volume::from_fn([2, 2, 2], [1.0; 3], VolumeKind::Label, |i, _, _| i as f64).unwrap();
        assert!(matches!(
            resample(&l, &RigidTransform::identity(), l.grid(), Interpolation::Trilinear, 0.0),
            Err(RegisterError::LabelNeedsNearest)
        ));
    }

    #[test]
    fn singular_affine() {
        let mut g = Grid::axis_aligned([2, 2, 2], [1.0; 3]);
        let v = Volume::from_fn([2, 2, 2], [1.0; 3], VolumeKind::Intensity, |i, _, _| i as f64).unwrap();
        let mut bad = v.grid().clone();
        bad.affine[(0, 0)] = 0.0;
        let bad = Volume::new(v.data().to_vec(), bad, VolumeKind::Intensity).unwrap();
        g.affine[(0, 3)] = 1.0;
        assert!(matches!(
            resample(&bad, &RigidTransform::identity(), &g, Interpolation::Trilinear, 0.0),
            Err(RegisterError::SingularAffine)
        ));
    }

    #[test]
    fn smoothing_preserves_constants_and_shrink_scales_affine() {
        let c = Volume::from_fn([6, 6, 6], [1.0; 3], VolumeKind::Intensity, |_, _, _| 2.0).unwrap();
        assert!(gaussian_smooth(&c, 1.5).data().iter().all(|x| (x - 2.0).abs() < 1e-12));
        let s = shrink(&ramp(), 2);
        assert_eq!(s.dims(), [3, 2, 2]);
        assert_eq!(s.spacing(), [2.0, 4.0, 1.0]);
        assert_eq!(s.at(1, 1, 1), ramp().at(2, 2, 2));
        assert_eq!(s.grid().voxel_to_world([1.0, 1.0, 1.0]), ramp().grid().voxel_to_world([2.0, 2.0, 2.0]));
    }
}
