//! Command-line orchestration of the neuroseg pipelines: preprocessing,
//! patch-based training, prediction with native-space restoration and Dice
//! evaluation, all driven by one JSON run configuration.

pub mod config;
pub mod evaluate;
pub mod manifest;
pub mod predict;
pub mod preprocess;
pub mod synth;
pub mod tools;
pub mod train;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::{Pipeline, RunConfig, Space};
pub use manifest::Manifest;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown volume id `{0}`")]
    UnknownId(String),
    #[error("prediction and truth ids differ (only predicted: {only_pred:?}; only truth: {only_truth:?})")]
    IdMismatch { only_pred: Vec<String>, only_truth: Vec<String> },
    #[error("volume `{id}` has no saved transform at {}", path.display())]
    MissingTransform { id: String, path: PathBuf },
    #[error("{failed} of {total} volumes failed; see {}", manifest.display())]
    VolumesFailed { failed: usize, total: usize, manifest: PathBuf },
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    /// 1 for rejected input, 2 for failures while working.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::UnknownId(_) | CliError::IdMismatch { .. } => 1,
            _ => 2,
        }
    }
}

/// Attach the offending volume id to a module error.
pub(crate) fn for_volume<E: std::error::Error + Send + Sync + 'static>(id: &str) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Runtime(anyhow::Error::new(e).context(format!("volume `{id}`")))
}

#[derive(Debug, Parser)]
#[command(name = "neuroseg", version, about = "Brain MRI tissue segmentation toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the configuration's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for parallel loops.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Override the configuration's output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the configured preprocessing pipeline over every split volume.
    Preprocess {
        /// Histogram-matching reference id (overrides the configuration).
        #[arg(long)]
        reference: Option<String>,
    },
    /// Train the network on patches from the training split.
    Train,
    /// Segment volumes with a trained checkpoint.
    Predict {
        /// Checkpoint (defaults to the run's model/checkpoint.nnl).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Volume ids (defaults to the validation split).
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
    },
    /// Dice report of predictions against ground truth, matched by id.
    Evaluate {
        /// Prediction directory (defaults to the run's prediction output).
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Ground-truth directory (defaults to the dataset or preprocessed labels).
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Restrict to these ids.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        /// Evaluation frame (overrides the configuration).
        #[arg(long, value_enum)]
        space: Option<SpaceArg>,
    },
    /// Per-tissue intensity statistics of a volume.
    Stats {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Emit JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Rigidly register a moving volume to a fixed one.
    Register {
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
        /// Where to save the transform.
        #[arg(long)]
        transform: PathBuf,
        /// Also write the moving volume resampled onto the fixed grid.
        #[arg(long)]
        resampled: Option<PathBuf>,
    },
    /// Apply a saved transform (or its inverse) to a volume.
    Transform {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        transform: PathBuf,
        /// Volume whose grid receives the output.
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        invert: bool,
        /// Treat the input as labels (nearest-neighbour resampling).
        #[arg(long)]
        labels: bool,
    },
    /// Write a synthetic phantom dataset laid out like IBSR18.
    Phantom {
        /// Destination directory.
        #[arg(long)]
        dir: PathBuf,
        /// Volume ids to generate.
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<String>,
        /// Cube edge in voxels.
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Gaussian noise std on tissue voxels.
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
        /// Subject displacement from the template pose, in mm.
        #[arg(long, default_value_t = 0.0)]
        offset: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SpaceArg {
    Native,
    Template,
}

impl From<SpaceArg> for Space {
    fn from(s: SpaceArg) -> Self {
        match s {
            SpaceArg::Native => Space::Native,
            SpaceArg::Template => Space::Template,
        }
    }
}

impl Global {
    /// The configuration with command-line overrides applied and validated.
    pub fn run_config(&self) -> Result<RunConfig, CliError> {
        let path = self.config.as_ref().ok_or_else(|| CliError::Config("this command needs --config".into()))?;
        let mut cfg = RunConfig::load(path)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Execute one parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        // a second initialisation in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let g = &cli.global;
    match cli.command {
        Command::Preprocess { reference } => {
            let mut cfg = g.run_config()?;
            if reference.is_some() {
                cfg.reference_id = reference;
                cfg.validate()?;
            }
            preprocess::cmd_preprocess(&cfg).map(drop)
        }
        Command::Train => train::cmd_train(&g.run_config()?).map(drop),
        Command::Predict { checkpoint, ids } => {
            predict::cmd_predict(&g.run_config()?, checkpoint.as_deref(), &ids).map(drop)
        }
        Command::Evaluate { pred, truth, ids, space } => {
            let request = evaluate::Request { pred, truth, ids, space: space.map(Space::from) };
            let report = match &g.config {
                Some(_) => evaluate::cmd_evaluate(&g.run_config()?, &request)?,
                None => evaluate::evaluate_dirs(&request, g.out.as_deref().unwrap_or(Path::new(".")))?,
            };
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Stats { image, labels, json } => tools::cmd_stats(&image, &labels, json),
        Command::Register { moving, fixed, transform, resampled } => {
            let reg = match &g.config {
                Some(p) => RunConfig::load(p)?.preprocess.registration,
                None => Default::default(),
            };
            tools::cmd_register(&moving, &fixed, &transform, resampled.as_deref(), &reg)
        }
        Command::Transform { input, transform, reference, output, invert, labels } => {
            tools::cmd_transform(&input, &transform, &reference, &output, invert, labels)
        }
        Command::Phantom { dir, ids, size, noise, offset } => {
            let spec = synth::DatasetSpec {
                dims: [size; 3],
                noise,
                seed: g.seed.unwrap_or(0),
                pose_offset: offset,
                ..Default::default()
            };
            synth::write_dataset(&dir, &ids, &spec).map(drop)
        }
    }
}
