//! Volumetric brain MRI tissue segmentation.
//!
//! The crate reads and writes NIfTI-1 volumes, normalizes intensities,
//! rigidly registers volumes to a template, samples training patches, trains
//! a 3D residual fully convolutional network and scores segmentations with
//! the Dice coefficient. The guide in `book/` walks through each module with
//! runnable listings.
//!
//! ```
//! use neuroseg::eval::dice;
//! use neuroseg::phantom::{phantom, PhantomSpec};
//! use neuroseg::preprocess::standardize;
//!
//! let ph = phantom(&PhantomSpec { noise_std: 0.05, seed: 1, ..PhantomSpec::cube(16) });
//! let z = standardize(&ph.image).unwrap();
//! assert_eq!(z.dims(), ph.image.dims());
//! assert_eq!(dice(&ph.labels, &ph.labels, 3).unwrap(), 1.0);
//! ```

// negated float comparisons are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod eval;
pub mod neuronet;
pub mod phantom;
pub mod preprocess;
pub mod register;
pub mod sampler;
pub mod volio;

/// Guide chapters, compiled so their listings run as doc-tests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/volumes.md")]
    pub mod volumes {}
    #[doc = include_str!("../../../book/src/intensity.md")]
    pub mod intensity {}
    #[doc = include_str!("../../../book/src/registration.md")]
    pub mod registration {}
    #[doc = include_str!("../../../book/src/patches.md")]
    pub mod patches {}
    #[doc = include_str!("../../../book/src/network.md")]
    pub mod network {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
