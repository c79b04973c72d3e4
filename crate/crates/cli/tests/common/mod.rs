//! Phantom runs and binary invocation shared by the CLI tests.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use neuroseg::neuronet::{AdamConfig, NetConfig};
use neuroseg_cli::config::{PatchConfig, PreprocessConfig, RunConfig, Split, TrainingConfig};
use neuroseg_cli::synth::{write_dataset, DatasetSpec};
use neuroseg_cli::Pipeline;

pub fn ids(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// Small, fast settings around a phantom dataset under `root/data`.
pub fn phantom_config(root: &Path, pipeline: Pipeline, split: Split, data: &DatasetSpec) -> RunConfig {
    let data_dir = root.join("data");
    write_dataset(&data_dir, &split.all(), data).unwrap();
    let mut preprocess = PreprocessConfig::default();
    preprocess.clahe.grid = [2, 2, 2];
    preprocess.registration.shrink_factors = vec![2, 1];
    preprocess.registration.smoothing_sigmas = vec![1.0, 0.0];
    RunConfig {
        dataset_root: data_dir.clone(),
        image_pattern: "{id}/{id}_ana_strip.nii.gz".into(),
        label_pattern: "{id}/{id}_segTRI_ana.nii.gz".into(),
        reference_id: Some(split.train[0].clone()),
        split,
        pipeline,
        template: Some(data_dir.join("template.nii.gz")),
        seed: 7,
        output_dir: root.join("run"),
        preprocess,
        net: NetConfig::tiny(),
        patches: PatchConfig { size: [32; 3], samples: 4, ..Default::default() },
        training: TrainingConfig {
            steps: 0,
            adam: AdamConfig { lr: 1e-2, ..Default::default() },
            checkpoint_every: 0,
            recalibration_batches: 1,
            ..Default::default()
        },
        evaluation: Default::default(),
    }
}

pub fn split(train: &[&str], validation: &[&str], test: &[&str]) -> Split {
    Split { train: ids(train), validation: ids(validation), test: ids(test) }
}

pub fn write_config(root: &Path, cfg: &RunConfig) -> PathBuf {
    let path = root.join("run.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

pub fn neuroseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neuroseg")).args(args).output().expect("binary runs")
}

pub fn neuroseg_with(config: &Path, args: &[&str]) -> Output {
    let mut all = vec!["--config", config.to_str().unwrap()];
    all.extend_from_slice(args);
    neuroseg(&all)
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Assert success, showing stderr otherwise.
#[track_caller]
pub fn ok(o: &Output) {
    assert_eq!(code(o), 0, "stderr: {}", stderr(o));
}
