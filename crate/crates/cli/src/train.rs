//! Patch-pool training over the preprocessed training split.

use std::fs;
use std::path::PathBuf;

use neuroseg::neuronet::{init_params, train, write_loss_trace, AdamState, TrainConfig};
use neuroseg::sampler::{extract_patch, PatchSampler};
use neuroseg::volio::{read_volume, read_volume_as, Volume, VolumeKind};

use crate::config::RunConfig;
use crate::manifest::{record, Manifest, VolumeRecord};
use crate::preprocess::has_outputs;
use crate::{for_volume, CliError};

/// Where a training run left its results.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_trace: PathBuf,
    pub losses: Vec<f64>,
    pub manifest: Manifest,
}

/// Share of a pool of `total` patches taken by volume `i` of `n`.
pub fn pool_share(total: usize, n: usize, i: usize) -> usize {
    total / n + usize::from(i < total % n)
}

/// Sampler seed of the `i`-th training volume.
pub fn volume_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add((i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Patch corners for the whole pool: each volume draws its share with its
/// own seed, then the draws are interleaved round-robin by volume.
pub fn patch_pool(cfg: &RunConfig, labels: &[Volume]) -> Result<Vec<(usize, [usize; 3])>, CliError> {
    let n = labels.len();
    let mut per_volume = Vec::with_capacity(n);
    for (i, l) in labels.iter().enumerate() {
        let spec = cfg.patch_spec(pool_share(cfg.patches.samples, n, i).max(1), volume_seed(cfg.seed, i));
        let id = &cfg.split.train[i];
        let mut draws =
            PatchSampler::new(l, &spec).map_err(|e| CliError::Config(format!("volume `{id}`: {e}")))?.draws();
        draws.truncate(pool_share(cfg.patches.samples, n, i));
        per_volume.push(draws);
    }
    let rounds = per_volume.iter().map(Vec::len).max().unwrap_or(0);
    let mut pool = Vec::with_capacity(cfg.patches.samples);
    for r in 0..rounds {
        for (v, draws) in per_volume.iter().enumerate() {
            if let Some(d) = draws.get(r) {
                pool.push((v, d.origin));
            }
        }
    }
    Ok(pool)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    let ids = &cfg.split.train;
    if ids.is_empty() {
        return Err(CliError::Config("the training split is empty".into()));
    }
    if let Some(id) = ids.iter().find(|id| !has_outputs(cfg, id)) {
        return Err(CliError::Config(format!("volume `{id}` has no preprocessed outputs; run `preprocess` first")));
    }
    let mut images = Vec::with_capacity(ids.len());
    let mut labels = Vec::with_capacity(ids.len());
    for id in ids {
        images.push(read_volume(cfg.preprocessed_image(id)).map_err(for_volume(id))?);
        labels.push(read_volume_as(cfg.preprocessed_labels(id), VolumeKind::Label).map_err(for_volume(id))?);
    }
    let pool = patch_pool(cfg, &labels)?;

    let t = &cfg.training;
    let mut params = init_params(&cfg.net, cfg.seed, &t.init).map_err(|e| CliError::Config(e.to_string()))?;
    let model_dir = cfg.output_dir.join("model");
    fs::create_dir_all(&model_dir).map_err(|e| CliError::io(&model_dir, e))?;
    let checkpoint = cfg.checkpoint_file();
    let tc = TrainConfig {
        steps: t.steps,
        adam: t.adam,
        checkpoint_every: t.checkpoint_every,
        checkpoint: Some(checkpoint.clone()),
        recalibration_batches: t.recalibration_batches,
    };
    let size = cfg.patches.size;
    let stream = (0..).map(|s: usize| {
        let (v, origin) = pool[s % pool.len()];
        extract_patch(&images[v], &labels[v], origin, size, &ids[v]).expect("pool corners fit their volume").to_batch()
    });
    let losses =
        train(&mut params, &mut AdamState::new(), &cfg.net, stream, &tc).map_err(|e| CliError::Runtime(e.into()))?;
    let loss_trace = cfg.loss_file();
    write_loss_trace(&loss_trace, &losses).map_err(|e| CliError::Runtime(e.into()))?;

    let mut manifest = Manifest::new("train", cfg.seed, serde_json::to_value(cfg).expect("config serializes"));
    manifest.volumes = ids
        .iter()
        .map(|id| VolumeRecord {
            id: id.clone(),
            sources: vec![cfg.preprocessed_image(id), cfg.preprocessed_labels(id)],
            ..Default::default()
        })
        .collect();
    manifest.outputs.push(record(&cfg.output_dir, &checkpoint)?);
    manifest.outputs.push(record(&cfg.output_dir, &loss_trace)?);
    manifest.write(&cfg.output_dir)?;
    Ok(TrainOutcome { checkpoint, loss_trace, losses, manifest })
}
