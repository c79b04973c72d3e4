//! Random fixed-size training patches with aligned labels.
//!
//! Patches never cross the volume boundary and are pure gathers: every
//! voxel of a patch equals the source voxel at `origin + offset`.

use nalgebra::{Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neuronet::{Batch, Tensor};
use crate::volio::{Grid, VolioError, Volume, VolumeKind};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("patch size {size:?} exceeds volume dims {dims:?}")]
    SizeExceedsVolume { size: [usize; 3], dims: [usize; 3] },
    #[error("dimension mismatch: image {0:?} vs labels {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error("invalid patch spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Volio(#[from] VolioError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Corner uniform over every valid corner.
    Uniform,
    /// Target class cycles through `0..n_classes`; the corner is uniform
    /// over corners whose patch holds at least one voxel of the target.
    ClassBalanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchSpec {
    pub size: [usize; 3],
    pub count: usize,
    pub mode: SamplingMode,
    pub seed: u64,
    /// Classes cycled through in class-balanced mode.
    pub n_classes: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec { size: [128; 3], count: 200, mode: SamplingMode::Uniform, seed: 0, n_classes: 4 }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.size.contains(&0) {
            return Err(SamplerError::InvalidSpec(format!("patch size {:?} has a zero axis", self.size)));
        }
        if self.count == 0 {
            return Err(SamplerError::InvalidSpec("count must be at least 1".into()));
        }
        if self.mode == SamplingMode::ClassBalanced && self.n_classes == 0 {
            return Err(SamplerError::InvalidSpec("class-balanced sampling needs n_classes >= 1".into()));
        }
        Ok(())
    }

    fn fits(&self, dims: [usize; 3]) -> Result<(), SamplerError> {
        if (0..3).any(|a| self.size[a] > dims[a]) {
            return Err(SamplerError::SizeExceedsVolume { size: self.size, dims });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Patch {
    /// Intensities on the patch grid (source affine shifted to `origin`).
    pub image: Volume,
    pub labels: Volume,
    pub origin: [usize; 3],
    pub source: String,
    /// Cycle target in class-balanced mode.
    pub target: Option<usize>,
}

impl Patch {
    /// Network input and labels as a batch of one.
    pub fn to_batch(&self) -> Batch<f32> {
        let [d0, d1, d2] = self.image.dims();
        let t = |v: &Volume| {
            Tensor::new(vec![1, d0, d1, d2, 1], v.data().iter().map(|&x| x as f32).collect()).expect("patch dims")
        };
        Batch { x: t(&self.image), labels: t(&self.labels) }
    }
}

/// One drawn corner and the class it was drawn for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Draw {
    pub origin: [usize; 3],
    pub target: Option<usize>,
}

/// Seeded corner generator for one label volume.
#[derive(Debug, Clone)]
pub struct PatchSampler {
    spec: PatchSpec,
    /// Valid corners per axis: `dims - size + 1`.
    corners: [usize; 3],
    /// Per class, linear indices of corners whose patch holds the class;
    /// `None` when the class is absent.
    by_class: Vec<Option<Vec<u32>>>,
    rng: ChaCha8Rng,
    drawn: usize,
}

impl PatchSampler {
    pub fn new(labels: &Volume, spec: &PatchSpec) -> Result<Self, SamplerError> {
        spec.validate()?;
        let dims = labels.dims();
        spec.fits(dims)?;
        let corners = std::array::from_fn(|a| dims[a] - spec.size[a] + 1);
        let by_class = match spec.mode {
            SamplingMode::Uniform => Vec::new(),
            SamplingMode::ClassBalanced => {
                (0..spec.n_classes).map(|c| corners_containing(labels, c, spec.size, corners)).collect()
            }
        };
        Ok(PatchSampler { spec: spec.clone(), corners, by_class, rng: ChaCha8Rng::seed_from_u64(spec.seed), drawn: 0 })
    }

    fn uniform_corner(&mut self) -> [usize; 3] {
        let c = self.corners;
        [self.rng.random_range(0..c[0]), self.rng.random_range(0..c[1]), self.rng.random_range(0..c[2])]
    }

    /// Next corner of the unbounded sequence.
    pub fn next_draw(&mut self) -> Draw {
        let i = self.drawn;
        self.drawn += 1;
        match self.spec.mode {
            SamplingMode::Uniform => Draw { origin: self.uniform_corner(), target: None },
            SamplingMode::ClassBalanced => {
                let target = i % self.spec.n_classes;
                let origin = match &self.by_class[target] {
                    Some(list) => {
                        let idx = list[self.rng.random_range(0..list.len())] as usize;
                        let c = self.corners;
                        [idx / (c[1] * c[2]), (idx / c[2]) % c[1], idx % c[2]]
                    }
                    None => self.uniform_corner(),
                };
                Draw { origin, target: Some(target) }
            }
        }
    }

    /// The first `spec.count` draws.
    pub fn draws(mut self) -> Vec<Draw> {
        (0..self.spec.count).map(|_| self.next_draw()).collect()
    }
}

/// Linear corner indices whose patch contains `class`, via a summed-volume
/// table of the class indicator.
fn corners_containing(labels: &Volume, class: usize, size: [usize; 3], corners: [usize; 3]) -> Option<Vec<u32>> {
    let [d0, d1, d2] = labels.dims();
    let (s1, s2) = (d1 + 1, d2 + 1);
    let mut table = vec![0u32; (d0 + 1) * s1 * s2];
    let at = |i: usize, j: usize, k: usize| (i * s1 + j) * s2 + k;
    let target = class as f64;
    let mut any = false;
    for i in 0..d0 {
        for j in 0..d1 {
            for k in 0..d2 {
                let hit = labels.at(i, j, k) == target;
                any |= hit;
                table[at(i + 1, j + 1, k + 1)] = hit as u32
                    + table[at(i, j + 1, k + 1)]
                    + table[at(i + 1, j, k + 1)]
                    + table[at(i + 1, j + 1, k)]
                    + table[at(i, j, k)]
                    - table[at(i, j, k + 1)]
                    - table[at(i, j + 1, k)]
                    - table[at(i + 1, j, k)];
            }
        }
    }
    if !any {
        return None;
    }
    let [p0, p1, p2] = size;
    let mut out = Vec::new();
    for i in 0..corners[0] {
        for j in 0..corners[1] {
            for k in 0..corners[2] {
                let (a, b, c) = (i + p0, j + p1, k + p2);
                // inclusion-exclusion in i64; each partial sum fits easily
                let t = |x, y, z| table[at(x, y, z)] as i64;
                let n = t(a, b, c) - t(i, b, c) - t(a, j, c) - t(a, b, k) + t(i, j, c) + t(i, b, k) + t(a, j, k)
                    - t(i, j, k);
                if n > 0 {
                    out.push(((i * corners[1] + j) * corners[2] + k) as u32);
                }
            }
        }
    }
    Some(out)
}

/// Gather the block at `origin` of extent `size` from an image and its labels.
pub fn extract_patch(
    image: &Volume,
    labels: &Volume,
    origin: [usize; 3],
    size: [usize; 3],
    source: &str,
) -> Result<Patch, SamplerError> {
    let dims = image.dims();
    if labels.dims() != dims {
        return Err(SamplerError::DimMismatch(dims, labels.dims()));
    }
    if (0..3).any(|a| origin[a] + size[a] > dims[a]) {
        return Err(SamplerError::SizeExceedsVolume { size, dims });
    }
    let n: usize = size.iter().product();
    let (mut x, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..size[0] {
        for j in 0..size[1] {
            let start = image.grid().index(origin[0] + i, origin[1] + j, origin[2]);
            x.extend_from_slice(&image.data()[start..start + size[2]]);
            y.extend_from_slice(&labels.data()[start..start + size[2]]);
        }
    }
    let o = Vector3::new(origin[0] as f64, origin[1] as f64, origin[2] as f64);
    let affine: Matrix4<f64> = image.affine() * Matrix4::new_translation(&o);
    let grid = Grid { dims: size, spacing: image.spacing(), affine };
    Ok(Patch {
        image: Volume::new(x, grid.clone(), VolumeKind::Intensity)?,
        labels: Volume::new(y, grid, VolumeKind::Label)?,
        origin,
        source: source.to_string(),
        target: None,
    })
}

/// Stream of `spec.count` patches from one volume, deterministic in
/// `spec.seed`.
pub fn sample_patches<'a>(
    image: &'a Volume,
    labels: &'a Volume,
    spec: &PatchSpec,
    source: &'a str,
) -> Result<impl Iterator<Item = Patch> + 'a, SamplerError> {
    if image.dims() != labels.dims() {
        return Err(SamplerError::DimMismatch(image.dims(), labels.dims()));
    }
    let size = spec.size;
    let draws = PatchSampler::new(labels, spec)?.draws();
    Ok(draws.into_iter().map(move |d| {
        let mut p = extract_patch(image, labels, d.origin, size, source).expect("drawn corners fit");
        p.target = d.target;
        p
    }))
}
