//! Rigid registration onto a fixed template grid, transform persistence and
//! resampling of intensities (trilinear) and labels (nearest neighbour).

mod optimize;
mod resample;
mod transform;

use std::io;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volio::VolioError;

pub use optimize::{mutual_information, register_rigid, Registration};
pub use resample::{gaussian_smooth, resample, shrink, Interpolation};
pub use transform::{euler_from_rotation, load_transform, save_transform, RigidTransform};

#[derive(Debug, Error)]
pub enum RegisterError {
    #[error("moving volume affine is not invertible")]
    SingularAffine,
    #[error("label volumes must be resampled with nearest-neighbour interpolation")]
    LabelNeedsNearest,
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("only {:.2}% of samples overlap the moving volume", fraction * 100.0)]
    NoOverlap { fraction: f64 },
    #[error("invalid registration config: {0}")]
    InvalidConfig(String),
    #[error("transform parse error: {0}")]
    Parse(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Volio(#[from] VolioError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MeanSquares,
    MutualInformation { bins: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    pub metric: Metric,
    /// Coarse-to-fine shrink factors, e.g. `[4, 2, 1]`.
    pub shrink_factors: Vec<usize>,
    /// Gaussian smoothing per level, in mm.
    pub smoothing_sigmas: Vec<f64>,
    /// Initial step length in units of the level's smallest voxel spacing.
    pub step_size: f64,
    pub max_iterations: usize,
    /// Per-level stop when an accepted step improves the metric by less than
    /// this relative amount.
    pub tolerance: f64,
    pub sampling_fraction: f64,
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            metric: Metric::MutualInformation { bins: 32 },
            shrink_factors: vec![4, 2, 1],
            smoothing_sigmas: vec![2.0, 1.0, 0.0],
            step_size: 1.0,
            max_iterations: 200,
            tolerance: 1e-6,
            sampling_fraction: 0.1,
            seed: 0,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<(), RegisterError> {
        let bad = |m: &str| Err(RegisterError::InvalidConfig(m.to_string()));
        if self.shrink_factors.is_empty() {
            return bad("at least one pyramid level is required");
        }
        if self.shrink_factors.len() != self.smoothing_sigmas.len() {
            return bad("shrink_factors and smoothing_sigmas differ in length");
        }
        if self.shrink_factors.contains(&0) {
            return bad("shrink factors must be >= 1");
        }
        if self.smoothing_sigmas.iter().any(|&s| !(s >= 0.0)) {
            return bad("smoothing sigmas must be >= 0");
        }
        if !(self.sampling_fraction > 0.0 && self.sampling_fraction <= 1.0) {
            return bad("sampling_fraction must lie in (0, 1]");
        }
        if !(self.step_size > 0.0) {
            return bad("step_size must be positive");
        }
        if let Metric::MutualInformation { bins } = self.metric {
            if bins < 2 {
                return bad("mutual information needs at least 2 bins");
            }
        }
        Ok(())
    }
}
