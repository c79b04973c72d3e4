//! Contrast-limited adaptive histogram equalization on a 3D block grid.
//!
//! Each block gets a clipped histogram over `[0, 1]` whose cumulative
//! distribution is the block's intensity mapping. A voxel's output blends the
//! mappings of the eight nearest block centres trilinearly.

use serde::{Deserialize, Serialize};

use crate::volio::{Volume, VolumeKind};

use super::{require_intensity, PreprocessError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClaheParams {
    pub grid: [usize; 3],
    /// Per-bin ceiling as a fraction of the block's voxel count.
    pub clip_limit: f64,
    pub bins: usize,
    pub foreground_only: bool,
}

impl Default for ClaheParams {
    fn default() -> Self {
        ClaheParams { grid: [8, 8, 8], clip_limit: 0.01, bins: 256, foreground_only: true }
    }
}

impl ClaheParams {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.grid.contains(&0) {
            return Err(PreprocessError::InvalidParameter(format!("grid {:?} has a zero component", self.grid)));
        }
        if !(self.clip_limit > 0.0 && self.clip_limit <= 1.0) {
            return Err(PreprocessError::InvalidParameter(format!("clip_limit {} not in (0, 1]", self.clip_limit)));
        }
        if self.bins < 2 {
            return Err(PreprocessError::InvalidParameter("bins must be at least 2".into()));
        }
        Ok(())
    }
}

#[inline]
fn bin_of(x: f64, bins: usize) -> usize {
    ((x.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

/// Clipped-histogram CDF. `None` when the histogram is empty.
fn mapping(hist: &[f64], clip_limit: f64) -> Option<Vec<f64>> {
    let total: f64 = hist.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let limit = clip_limit * total;
    let mut excess = 0.0;
    let mut clipped: Vec<f64> = hist
        .iter()
        .map(|&h| {
            if h > limit {
                excess += h - limit;
                limit
            } else {
                h
            }
        })
        .collect();
    let share = excess / hist.len() as f64;
    for h in clipped.iter_mut() {
        *h += share;
    }
    let mut acc = 0.0;
    Some(
        clipped
            .iter()
            .map(|h| {
                acc += h;
                (acc / total).min(1.0)
            })
            .collect(),
    )
}

/// Block boundaries along one axis plus the interpolation lookup for each
/// coordinate: (lower block, upper block, weight of upper).
struct AxisBlocks {
    bounds: Vec<usize>,
    lookup: Vec<(usize, usize, f64)>,
}

impl AxisBlocks {
    fn new(dim: usize, grid: usize) -> Self {
        let g = grid.min(dim);
        let bounds: Vec<usize> = (0..=g).map(|k| k * dim / g).collect();
        let centers: Vec<f64> = (0..g).map(|k| (bounds[k] + bounds[k + 1] - 1) as f64 / 2.0).collect();
        let lookup = (0..dim)
            .map(|x| {
                let x = x as f64;
                if x <= centers[0] {
                    (0, 0, 0.0)
                } else if x >= centers[g - 1] {
                    (g - 1, g - 1, 0.0)
                } else {
                    let k = centers.partition_point(|&c| c <= x) - 1;
                    (k, k + 1, (x - centers[k]) / (centers[k + 1] - centers[k]))
                }
            })
            .collect();
        AxisBlocks { bounds, lookup }
    }

    fn blocks(&self) -> usize {
        self.bounds.len() - 1
    }

    fn block_of(&self, x: usize) -> usize {
        self.bounds.partition_point(|&b| b <= x) - 1
    }
}

/// Adaptive histogram equalization of a `[0, 1]` intensity volume.
///
/// With `foreground_only`, zero voxels are left out of every histogram and
/// stay at zero. A block without foreground falls back to the global mapping.
pub fn adaptive_hist_eq(v: &Volume, params: &ClaheParams) -> Result<Volume, PreprocessError> {
    require_intensity(v)?;
    params.validate()?;
    let dims = v.dims();
    let bins = params.bins;
    let axes: Vec<AxisBlocks> = (0..3).map(|a| AxisBlocks::new(dims[a], params.grid[a])).collect();
    let nb = [axes[0].blocks(), axes[1].blocks(), axes[2].blocks()];
    let block_index = |a: usize, b: usize, c: usize| (a * nb[1] + b) * nb[2] + c;

    let counts = |x: f64| !params.foreground_only || x > 0.0;
    let mut hists = vec![vec![0.0f64; bins]; nb[0] * nb[1] * nb[2]];
    let mut global = vec![0.0f64; bins];
    for i in 0..dims[0] {
        let bi = axes[0].block_of(i);
        for j in 0..dims[1] {
            let bj = axes[1].block_of(j);
            for k in 0..dims[2] {
                let x = v.at(i, j, k);
                if counts(x) {
                    let b = bin_of(x, bins);
                    hists[block_index(bi, bj, axes[2].block_of(k))][b] += 1.0;
                    global[b] += 1.0;
                }
            }
        }
    }
    let Some(global_map) = mapping(&global, params.clip_limit) else {
        // nothing to equalize
        return Ok(v.with_data(vec![0.0; v.len()], VolumeKind::Intensity)?);
    };
    let maps: Vec<Vec<f64>> =
        hists.iter().map(|h| mapping(h, params.clip_limit).unwrap_or_else(|| global_map.clone())).collect();

    let mut out = Vec::with_capacity(v.len());
    for i in 0..dims[0] {
        let (i0, i1, wi) = axes[0].lookup[i];
        for j in 0..dims[1] {
            let (j0, j1, wj) = axes[1].lookup[j];
            for k in 0..dims[2] {
                let x = v.at(i, j, k);
                if !counts(x) {
                    out.push(0.0);
                    continue;
                }
                let (k0, k1, wk) = axes[2].lookup[k];
                let b = bin_of(x, bins);
                let mut acc = 0.0;
                for (bi, w_i) in [(i0, 1.0 - wi), (i1, wi)] {
                    for (bj, w_j) in [(j0, 1.0 - wj), (j1, wj)] {
                        for (bk, w_k) in [(k0, 1.0 - wk), (k1, wk)] {
                            let w = w_i * w_j * w_k;
                            if w > 0.0 {
                                acc += w * maps[block_index(bi, bj, bk)][b];
                            }
                        }
                    }
                }
                out.push(acc.clamp(0.0, 1.0));
            }
        }
    }
    Ok(v.with_data(out, VolumeKind::Intensity)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_lookup_is_clamped_at_edges() {
        let ax = AxisBlocks::new(8, 2);
        assert_eq!(ax.bounds, vec![0, 4, 8]);
        assert_eq!(ax.lookup[0], (0, 0, 0.0));
        assert_eq!(ax.lookup[7], (1, 1, 0.0));
        let (a, b, w) = ax.lookup[3];
        assert_eq!((a, b), (0, 1));
        assert!((w - 0.375).abs() < 1e-12);
    }

    #[test]
    fn clipping_redistributes_excess() {
        let m = mapping(&[10.0, 0.0, 0.0, 0.0], 0.5).unwrap();
        // bin 0 clipped to 5, 5 spread over 4 bins
        assert!((m[0] - 6.25 / 10.0).abs() < 1e-12);
        assert!((m[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_block_falls_back_to_global() {
        // left half all zero: its blocks have no foreground
        let v = Volume::from_fn([8, 4, 4], [1.0; 3], VolumeKind::Intensity, |i, j, k| {
            if i < 4 {
                0.0
            } else {
                ((j * 4 + k) as f64 + 0.5) / 16.0
            }
        })
        .unwrap();
        let out = adaptive_hist_eq(&v, &ClaheParams { grid: [2, 1, 1], ..Default::default() }).unwrap();
        assert!(out.data().iter().all(|x| (0.0..=1.0).contains(x)));
        assert!(out.data()[..64].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_bad_params() {
        let v = Volume::from_fn([2, 2, 2], [1.0; 3], VolumeKind::Intensity, |i, _, _| i as f64).unwrap();
        for p in [
            ClaheParams { grid: [0, 1, 1], ..Default::default() },
            ClaheParams { clip_limit: 0.0, ..Default::default() },
            ClaheParams { bins: 1, ..Default::default() },
        ] {
            assert!(adaptive_hist_eq(&v, &p).is_err());
        }
    }
}
