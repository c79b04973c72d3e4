//! Synthetic brain-like phantoms: three nested ellipsoidal shells
//! (CSF outside, GM, WM core) plus two small off-centre CSF pockets that break
//! the ellipsoids' mirror symmetries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::volio::{Grid, Volume, VolumeKind};

/// Tissue intensities on a T1-like scale: WM brightest, CSF darkest.
pub const CSF_INTENSITY: f64 = 0.25;
pub const GM_INTENSITY: f64 = 0.55;
pub const WM_INTENSITY: f64 = 0.85;

#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Std-dev of additive Gaussian noise on tissue voxels.
    pub noise_std: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn cube(n: usize) -> Self {
        PhantomSpec { dims: [n; 3], spacing: [1.0; 3], noise_std: 0.0, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: Volume,
    pub labels: Volume,
}

/// Label at a point given in units of the phantom's half-extent (so the
/// outer shell spans roughly `[-0.85, 0.85]` on the first axis).
pub fn label_at(u: [f64; 3]) -> u32 {
    let r = |a: [f64; 3]| (u[0] / a[0]).powi(2) + (u[1] / a[1]).powi(2) + (u[2] / a[2]).powi(2);
    let ball = |c: [f64; 3], radius: f64| {
        (u[0] - c[0]).powi(2) + (u[1] - c[1]).powi(2) + (u[2] - c[2]).powi(2) < radius * radius
    };
    if r([0.85, 0.66, 0.52]) > 1.0 {
        0
    } else if r([0.72, 0.54, 0.41]) > 1.0 {
        1
    } else if r([0.56, 0.40, 0.29]) > 1.0 {
        2
    } else if ball([0.20, -0.14, 0.08], 0.12) || ball([-0.28, 0.13, -0.05], 0.08) {
        1
    } else {
        3
    }
}

pub fn intensity_of(label: u32) -> f64 {
    match label {
        1 => CSF_INTENSITY,
        2 => GM_INTENSITY,
        3 => WM_INTENSITY,
        _ => 0.0,
    }
}

pub fn phantom(spec: &PhantomSpec) -> Phantom {
    let grid = Grid::axis_aligned(spec.dims, spec.spacing);
    phantom_on(&grid, spec.noise_std, spec.seed)
}

/// Phantom sampled on an arbitrary grid, centred on the grid's centre.
pub fn phantom_on(grid: &Grid, noise_std: f64, seed: u64) -> Phantom {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = grid.world_center();
    let half = [0, 1, 2].map(|a| grid.dims[a] as f64 * grid.spacing[a] / 2.0);
    let half_min = half.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut labels = Vec::with_capacity(grid.len());
    let mut image = Vec::with_capacity(grid.len());
    for i in 0..grid.dims[0] {
        for j in 0..grid.dims[1] {
            for k in 0..grid.dims[2] {
                let w = grid.voxel_to_world([i as f64, j as f64, k as f64]);
                let u = [0, 1, 2].map(|a| (w[a] - center[a]) / half_min);
                let l = label_at(u);
                labels.push(l as f64);
                let mut x = intensity_of(l);
                if l > 0 && noise_std > 0.0 {
                    x = (x + noise_std * rng.sample::<f64, _>(StandardNormal)).max(1e-3);
                }
                image.push(x);
            }
        }
    }
    Phantom {
        image: Volume::new(image, grid.clone(), VolumeKind::Intensity).expect("valid grid"),
        labels: Volume::new(labels, grid.clone(), VolumeKind::Label).expect("valid labels"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_four_classes_present() {
        let p = phantom(&PhantomSpec::cube(32));
        for c in 0..4 {
            assert!(p.labels.data().contains(&(c as f64)), "class {c} missing");
        }
        assert_eq!(p.image.at(0, 0, 0), 0.0);
    }

    #[test]
    fn noise_is_seeded() {
        let spec = PhantomSpec { noise_std: 0.05, seed: 3, ..PhantomSpec::cube(16) };
        assert_eq!(phantom(&spec).image, phantom(&spec).image);
    }
}
