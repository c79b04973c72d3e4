//! Intensity preprocessing: z-score standardization, min-max rescaling,
//! block-gridded adaptive histogram equalization, landmark histogram matching
//! and per-tissue intensity statistics.
//!
//! Statistics always accumulate in `f64`. "Foreground" means intensity > 0;
//! the inputs are skull-stripped, so background is exactly zero.

mod clahe;
mod histmatch;
mod intensity;
mod stats;

use thiserror::Error;

use crate::volio::{VolioError, Volume, VolumeKind};

pub use clahe::{adaptive_hist_eq, ClaheParams};
pub use histmatch::{compute_landmarks, default_percentiles, match_histogram, LandmarkMap};
pub use intensity::{rescale_minmax, standardize, EPSILON};
pub use stats::{tissue_stats, ClassStats, TissueStats, HISTOGRAM_BINS};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("expected an intensity volume, got {0:?}")]
    WrongKind(VolumeKind),
    #[error("standard deviation {0} is zero; cannot standardize a constant volume")]
    SigmaZero(f64),
    #[error("intensity range is zero (min == max == {0})")]
    ZeroRange(f64),
    #[error("degenerate histogram: {0}")]
    DegenerateHistogram(String),
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Volio(#[from] VolioError),
}

fn require_intensity(v: &Volume) -> Result<(), PreprocessError> {
    match v.kind() {
        VolumeKind::Intensity => Ok(()),
        k => Err(PreprocessError::WrongKind(k)),
    }
}
