use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::NetError;

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub n_scales: usize,
    pub units_per_scale: usize,
    pub base_filters: usize,
    pub n_classes: usize,
    pub leakiness: f64,
    /// Down-sampling stride of each scale's first convolution.
    pub strides: Vec<[usize; 3]>,
    pub bn_epsilon: f64,
    /// Running statistics keep this fraction of their old value per update.
    pub bn_momentum: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            n_scales: 4,
            units_per_scale: 2,
            base_filters: 16,
            n_classes: 4,
            leakiness: 0.1,
            strides: vec![[1, 1, 1], [2, 2, 2], [2, 2, 2], [2, 2, 2]],
            bn_epsilon: 1e-5,
            bn_momentum: 0.99,
        }
    }
}

/// Kernel edge of every residual and down-sampling convolution.
pub const KERNEL: usize = 3;

impl NetConfig {
    /// Smallest configuration exercising every layer type: two scales, a
    /// projection and an identity residual unit on the second scale.
    pub fn tiny() -> Self {
        NetConfig {
            n_scales: 2,
            units_per_scale: 2,
            base_filters: 2,
            strides: vec![[1, 1, 1], [2, 2, 2]],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::InvalidConfig(m));
        if self.n_scales < 2 {
            return bad(format!("n_scales must be >= 2, got {}", self.n_scales));
        }
        if self.strides.len() != self.n_scales {
            return bad(format!("{} strides given for {} scales", self.strides.len(), self.n_scales));
        }
        if self.strides.iter().flatten().any(|&s| s == 0) {
            return bad("strides must be >= 1".into());
        }
        if self.units_per_scale == 0 || self.base_filters == 0 {
            return bad("units_per_scale and base_filters must be >= 1".into());
        }
        if self.n_classes < 2 {
            return bad(format!("n_classes must be >= 2, got {}", self.n_classes));
        }
        if !(0.0..=1.0).contains(&self.leakiness) {
            return bad(format!("leakiness must lie in [0, 1], got {}", self.leakiness));
        }
        if !(self.bn_epsilon > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_epsilon must be > 0 and bn_momentum in [0, 1]".into());
        }
        Ok(())
    }

    /// Output channels of scale `j` (0-based): `base_filters * 2^j`.
    pub fn filters(&self, j: usize) -> usize {
        self.base_filters << j
    }

    pub fn filter_counts(&self) -> Vec<usize> {
        (0..self.n_scales).map(|j| self.filters(j)).collect()
    }

    /// Per-axis product of all strides; input spatial dims must be multiples.
    pub fn spatial_multiple(&self) -> [usize; 3] {
        let mut m = [1; 3];
        for s in &self.strides {
            for a in 0..3 {
                m[a] *= s[a];
            }
        }
        m
    }
}

/// Where the initial parameters come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Uniform,
    FromCheckpoint(PathBuf),
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}
