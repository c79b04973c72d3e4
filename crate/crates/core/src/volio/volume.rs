use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use super::VolioError;

/// Whether a volume carries continuous intensities or integer class labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VolumeKind {
    Intensity,
    Label,
}

/// Voxel grid geometry: dimensions, spacing and voxel-to-world affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub affine: Matrix4<f64>,
}

impl Grid {
    /// Axis-aligned grid with the origin at world zero.
    pub fn axis_aligned(dims: [usize; 3], spacing: [f64; 3]) -> Self {
        let mut affine = Matrix4::identity();
        for a in 0..3 {
            affine[(a, a)] = spacing[a];
        }
        Grid { dims, spacing, affine }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major linear index (last axis fastest).
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    /// World coordinate (mm) of a continuous voxel index.
    pub fn voxel_to_world(&self, v: [f64; 3]) -> [f64; 3] {
        let w = self.affine * Vector4::new(v[0], v[1], v[2], 1.0);
        [w[0], w[1], w[2]]
    }

    /// World coordinate of the geometric centre of the grid.
    pub fn world_center(&self) -> [f64; 3] {
        let c =
            [(self.dims[0] as f64 - 1.0) / 2.0, (self.dims[1] as f64 - 1.0) / 2.0, (self.dims[2] as f64 - 1.0) / 2.0];
        self.voxel_to_world(c)
    }

    pub(crate) fn validate(&self) -> Result<(), VolioError> {
        if self.dims.contains(&0) {
            return Err(VolioError::InvalidVolume(format!("zero dimension in {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VolioError::InvalidVolume(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        let last = self.affine.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(VolioError::InvalidVolume("affine last row must be (0,0,0,1)".into()));
        }
        Ok(())
    }
}

/// A 3D scalar volume stored row-major (`d0 × d1 × d2`, last axis fastest).
///
/// Values are kept in `f64` whatever the on-disk type so that statistics and
/// chained intensity transforms do not lose precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Vec<f64>,
    grid: Grid,
    kind: VolumeKind,
}

impl Volume {
    pub fn new(data: Vec<f64>, grid: Grid, kind: VolumeKind) -> Result<Self, VolioError> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(VolioError::InvalidVolume(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                grid.dims
            )));
        }
        if kind == VolumeKind::Label {
            check_labels(&data)?;
        }
        Ok(Volume { data, grid, kind })
    }

    /// Intensity volume on an axis-aligned grid; mostly for tests and synthetic data.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        kind: VolumeKind,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self, VolioError> {
        let grid = Grid::axis_aligned(dims, spacing);
        let mut data = Vec::with_capacity(grid.len());
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Volume::new(data, grid, kind)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn affine(&self) -> &Matrix4<f64> {
        &self.grid.affine
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    /// Same geometry, new values and kind.
    pub fn with_data(&self, data: Vec<f64>, kind: VolumeKind) -> Result<Self, VolioError> {
        Volume::new(data, self.grid.clone(), kind)
    }

    /// Reinterpret as a label volume, checking that every value is a
    /// non-negative integer.
    pub fn into_label(self) -> Result<Self, VolioError> {
        check_labels(&self.data)?;
        Ok(Volume { kind: VolumeKind::Label, ..self })
    }

    pub fn into_intensity(self) -> Self {
        Volume { kind: VolumeKind::Intensity, ..self }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

fn check_labels(data: &[f64]) -> Result<(), VolioError> {
    // f32-exact integers: anything up to 2^24 survives the on-disk types.
    if let Some(bad) = data.iter().find(|&&v| !(v >= 0.0) || v.fract() != 0.0 || v > 16_777_216.0) {
        return Err(VolioError::LabelOutOfRange(*bad));
    }
    Ok(())
}
