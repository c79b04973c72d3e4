//! Run configuration: one JSON document per run.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use neuroseg::eval::{StdKind, TISSUE_CLASSES};
use neuroseg::neuronet::{AdamConfig, Init, NetConfig};
use neuroseg::preprocess::{default_percentiles, ClaheParams};
use neuroseg::register::RegistrationConfig;
use neuroseg::sampler::{PatchSpec, SamplingMode};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pipeline {
    /// Standardization only.
    P1,
    /// Registration to a template, min-max rescaling, adaptive histogram
    /// equalization of the reference and histogram matching to it.
    P2,
}

/// Volume ids per subset. Defaults are the published IBSR18 split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Split {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

fn ibsr(ids: &[u32]) -> Vec<String> {
    ids.iter().map(|i| format!("IBSR_{i:02}")).collect()
}

impl Default for Split {
    fn default() -> Self {
        Split {
            train: ibsr(&[1, 3, 4, 6, 7, 8, 9, 16, 18]),
            validation: ibsr(&[11, 12, 13, 14, 17]),
            test: ibsr(&[2, 10, 15]),
        }
    }
}

impl Split {
    /// Train, validation and test ids in that order.
    pub fn all(&self) -> Vec<String> {
        self.train.iter().chain(&self.validation).chain(&self.test).cloned().collect()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.all().iter().any(|x| x == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub clahe: ClaheParams,
    /// Equalize every volume, not only the reference.
    pub clahe_all: bool,
    /// Histogram-matching landmarks in percent; empty selects the default set.
    pub percentiles: Vec<f64>,
    /// Landmarks and equalization ignore zero-valued background.
    pub foreground_only: bool,
    pub registration: RegistrationConfig,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            clahe: ClaheParams::default(),
            clahe_all: false,
            percentiles: Vec::new(),
            foreground_only: true,
            registration: RegistrationConfig::default(),
        }
    }
}

impl PreprocessConfig {
    pub fn landmarks(&self) -> Vec<f64> {
        if self.percentiles.is_empty() {
            default_percentiles()
        } else {
            self.percentiles.clone()
        }
    }
}

/// Patch pool drawn from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub size: [usize; 3],
    /// Total pool size, shared across training volumes and cycled over the
    /// training steps.
    pub samples: usize,
    pub mode: SamplingMode,
}

impl Default for PatchConfig {
    fn default() -> Self {
        let spec = PatchSpec::default();
        PatchConfig { size: spec.size, samples: spec.count, mode: spec.mode }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: usize,
    pub adam: AdamConfig,
    pub checkpoint_every: usize,
    pub recalibration_batches: usize,
    pub init: Init,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            steps: 1000,
            adam: AdamConfig::default(),
            checkpoint_every: 500,
            recalibration_batches: 8,
            init: Init::Uniform,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    /// Predictions restored to each volume's own grid.
    #[default]
    Native,
    /// Predictions on the preprocessed (template) grid.
    Template,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub space: Space,
    pub std: StdKind,
    pub classes: Vec<usize>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig { space: Space::Native, std: StdKind::Population, classes: TISSUE_CLASSES.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    /// Image path below `dataset_root`; `{id}` expands to the volume id.
    #[serde(default = "default_image_pattern")]
    pub image_pattern: String,
    #[serde(default = "default_label_pattern")]
    pub label_pattern: String,
    #[serde(default)]
    pub split: Split,
    pub pipeline: Pipeline,
    #[serde(default)]
    pub reference_id: Option<String>,
    #[serde(default)]
    pub template: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub patches: PatchConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

fn default_image_pattern() -> String {
    "{id}/{id}_ana_strip.nii.gz".into()
}

fn default_label_pattern() -> String {
    "{id}/{id}_segTRI_ana.nii.gz".into()
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    /// Parse a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            fs::read_to_string(path).map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.dataset_root);
        join(&mut self.output_dir);
        if let Some(t) = self.template.as_mut() {
            join(t);
        }
        if let Init::FromCheckpoint(p) = &mut self.training.init {
            join(p);
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.dataset_root.join(self.image_pattern.replace("{id}", id))
    }

    pub fn label_path(&self, id: &str) -> PathBuf {
        self.dataset_root.join(self.label_pattern.replace("{id}", id))
    }

    pub fn patch_spec(&self, count: usize, seed: u64) -> PatchSpec {
        PatchSpec { size: self.patches.size, count, mode: self.patches.mode, seed, n_classes: self.net.n_classes }
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut seen = BTreeSet::new();
        for (subset, ids) in
            [("train", &self.split.train), ("validation", &self.split.validation), ("test", &self.split.test)]
        {
            for id in ids {
                if id.is_empty() || id.contains(['/', '\\']) {
                    return Err(config_error(format!("invalid volume id `{id}` in the {subset} split")));
                }
                if !seen.insert(id.as_str()) {
                    return Err(config_error(format!("volume id `{id}` appears in more than one split entry")));
                }
            }
        }
        if seen.is_empty() {
            return Err(config_error("the split lists no volumes"));
        }
        if self.pipeline == Pipeline::P2 {
            match &self.reference_id {
                None => return Err(config_error("pipeline P2 needs a reference_id")),
                Some(r) if !self.split.contains(r) => {
                    return Err(config_error(format!("reference id `{r}` is not part of the split")))
                }
                Some(_) => {}
            }
            if self.template.is_none() {
                return Err(config_error("pipeline P2 needs a template path"));
            }
        }
        self.net.validate().map_err(|e| config_error(e.to_string()))?;
        let multiple = self.net.spatial_multiple();
        if (0..3).any(|a| !self.patches.size[a].is_multiple_of(multiple[a])) {
            return Err(config_error(format!(
                "patch size {:?} is not a multiple of the network's {:?}",
                self.patches.size, multiple
            )));
        }
        self.patch_spec(self.patches.samples, 0).validate().map_err(|e| config_error(e.to_string()))?;
        self.preprocess.clahe.validate().map_err(|e| config_error(e.to_string()))?;
        self.preprocess.registration.validate().map_err(|e| config_error(e.to_string()))?;
        if self.evaluation.classes.is_empty() {
            return Err(config_error("evaluation.classes is empty"));
        }
        Ok(())
    }

    /// Every dataset image and label for `ids`, plus the template under P2,
    /// must exist.
    pub fn check_dataset_files(&self, ids: &[String]) -> Result<(), CliError> {
        let mut missing: Vec<PathBuf> = ids.iter().flat_map(|id| [self.image_path(id), self.label_path(id)]).collect();
        if self.pipeline == Pipeline::P2 {
            missing.extend(self.template.clone());
        }
        missing.retain(|p| !p.is_file());
        match missing.first() {
            None => Ok(()),
            Some(p) => {
                Err(config_error(format!("missing input file {} ({} missing in total)", p.display(), missing.len())))
            }
        }
    }
}

/// Output layout below `output_dir`.
impl RunConfig {
    pub fn preprocessed_image(&self, id: &str) -> PathBuf {
        self.output_dir.join("preprocessed").join(format!("{id}_image.nii.gz"))
    }

    pub fn preprocessed_labels(&self, id: &str) -> PathBuf {
        self.output_dir.join("preprocessed").join(format!("{id}_labels.nii.gz"))
    }

    pub fn transform_file(&self, id: &str) -> PathBuf {
        self.output_dir.join("transforms").join(format!("{id}.rigid"))
    }

    pub fn checkpoint_file(&self) -> PathBuf {
        self.output_dir.join("model").join("checkpoint.nnl")
    }

    pub fn loss_file(&self) -> PathBuf {
        self.output_dir.join("model").join("loss.csv")
    }

    /// Native-space predictions, or template-space ones under P2.
    pub fn prediction_dir(&self, space: Space) -> PathBuf {
        match (self.pipeline, space) {
            (Pipeline::P2, Space::Template) => self.output_dir.join("predictions_template"),
            _ => self.output_dir.join("predictions"),
        }
    }

    pub fn report_dir(&self) -> PathBuf {
        self.output_dir.join("reports")
    }
}
