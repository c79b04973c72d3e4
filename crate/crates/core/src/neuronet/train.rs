use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::volio::{Volume, VolumeKind};

use super::{
    backward, forward, loss, optimizer_step, save_checkpoint, AdamConfig, AdamState, Mode, NetConfig, NetError,
    NetParams, Scalar, Tensor,
};

/// One training example: input of shape `(batch, d0, d1, d2, 1)` and labels
/// of shape `(batch, d0, d1, d2, 1)` (class ids) or `(…, n_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub labels: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub adam: AdamConfig,
    /// Write a checkpoint every this many steps; 0 disables periodic writes.
    pub checkpoint_every: usize,
    /// Checkpoint destination, overwritten at each write and at completion.
    pub checkpoint: Option<PathBuf>,
    /// Batches drawn after the last step to re-estimate the running
    /// batch-norm statistics under the final weights; 0 keeps the moving
    /// averages.
    pub recalibration_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            adam: AdamConfig::default(),
            checkpoint_every: 500,
            checkpoint: None,
            recalibration_batches: 8,
        }
    }
}

/// Run `tc.steps` optimizer steps, one batch from `data` each, and return
/// the training loss measured at each step before its update.
///
/// Each step runs a training forward pass, folds its batch statistics into
/// the running statistics, backpropagates and applies Adam. After a
/// non-empty run the running statistics are re-estimated from
/// `tc.recalibration_batches` further batches. With zero steps the
/// parameters are returned untouched.
pub fn train<I>(
    params: &mut NetParams<f32>,
    state: &mut AdamState<f32>,
    cfg: &NetConfig,
    data: I,
    tc: &TrainConfig,
) -> Result<Vec<f64>, NetError>
where
    I: IntoIterator<Item = Batch<f32>>,
{
    cfg.validate()?;
    params.check_layout(cfg)?;
    let mut data = data.into_iter();
    let mut trace = Vec::with_capacity(tc.steps);
    for step in 1..=tc.steps {
        let batch = data.next().ok_or(NetError::DataExhausted(step - 1))?;
        let fwd = forward(params, cfg, &batch.x, Mode::Train)?;
        trace.push(loss(&fwd.probs, &batch.labels)?.value);
        params.absorb_batch_stats(&fwd.cache, cfg.bn_momentum)?;
        let grads = backward(params, cfg, fwd.cache, &batch.labels)?;
        optimizer_step(params, &grads, state, &tc.adam)?;
        if let Some(path) = &tc.checkpoint {
            if tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0 && step != tc.steps {
                save_checkpoint(params, Some(state), path)?;
            }
        }
    }
    if tc.steps > 0 && tc.recalibration_batches > 0 {
        let drawn = recalibrate_batch_stats(params, cfg, data.by_ref().take(tc.recalibration_batches))?;
        if drawn < tc.recalibration_batches {
            return Err(NetError::DataExhausted(tc.steps + drawn));
        }
    }
    if let Some(path) = &tc.checkpoint {
        save_checkpoint(params, Some(state), path)?;
    }
    Ok(trace)
}

/// Replace the running batch-norm statistics by the pooled statistics of
/// training passes over `batches` with the current weights. Batches are
/// weighted equally. Returns the number of batches used; with none the
/// parameters are unchanged.
pub fn recalibrate_batch_stats<T: Scalar, I>(
    params: &mut NetParams<T>,
    cfg: &NetConfig,
    batches: I,
) -> Result<usize, NetError>
where
    I: IntoIterator<Item = Batch<T>>,
{
    // per layer: sum of batch means, sum of (variance + mean^2)
    let mut acc: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut n = 0usize;
    for batch in batches {
        let fwd = forward(params, cfg, &batch.x, Mode::Train)?;
        for (name, stats) in fwd.cache.batch_stats() {
            let (m, s) = acc
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; stats.mean.len()], vec![0.0; stats.mean.len()]));
            for c in 0..m.len() {
                m[c] += stats.mean[c];
                s[c] += stats.var[c] + stats.mean[c] * stats.mean[c];
            }
        }
        n += 1;
    }
    if n == 0 {
        return Ok(0);
    }
    let inv = 1.0 / n as f64;
    for (name, (m, s)) in acc {
        let mean: Vec<f64> = m.iter().map(|v| v * inv).collect();
        let var: Vec<f64> = s.iter().zip(&mean).map(|(v, mu)| (v * inv - mu * mu).max(0.0)).collect();
        for (field, values) in [("mean", mean), ("var", var)] {
            let key = format!("{name}/{field}");
            let t = params.get_mut(&key).ok_or_else(|| NetError::BadCheckpoint(format!("missing tensor `{key}`")))?;
            for (r, v) in t.data_mut().iter_mut().zip(values) {
                *r = T::from(v).expect("finite");
            }
        }
    }
    Ok(n)
}

/// Write a loss trace as CSV with header `step,loss`, steps counted from 1.
pub fn write_loss_trace(path: impl AsRef<Path>, trace: &[f64]) -> Result<(), NetError> {
    let path = path.as_ref();
    let mut out = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        out.push_str(&format!("{},{l}\n", i + 1));
    }
    let io = |source| NetError::Io { path: path.to_path_buf(), source };
    fs::File::create(path).and_then(|mut f| f.write_all(out.as_bytes())).map_err(io)
}

/// Volume as a `(1, d0, d1, d2, 1)` tensor.
pub fn volume_tensor(v: &Volume) -> Tensor<f32> {
    let [d0, d1, d2] = v.dims();
    Tensor::new(vec![1, d0, d1, d2, 1], v.data().iter().map(|&x| x as f32).collect()).expect("volume dims are positive")
}

/// Zero padding `(before, after)` per axis that brings `dims` up to the next
/// multiple of `multiple`, split evenly with the odd voxel after.
pub fn pad_amounts(dims: [usize; 3], multiple: [usize; 3]) -> [(usize, usize); 3] {
    std::array::from_fn(|a| {
        let total = dims[a].div_ceil(multiple[a]) * multiple[a] - dims[a];
        (total / 2, total - total / 2)
    })
}

/// Whole-volume segmentation on the input grid.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Per-voxel argmax class, ties to the lowest class id.
    pub labels: Volume,
    /// One intensity volume per class when requested.
    pub probs: Option<Vec<Volume>>,
}

/// Segment `v`: zero-pad symmetrically to the network's spatial multiple,
/// run an inference pass, crop back and take the per-voxel argmax.
pub fn predict_volume(
    params: &NetParams<f32>,
    cfg: &NetConfig,
    v: &Volume,
    with_probs: bool,
) -> Result<Prediction, NetError> {
    let dims = v.dims();
    let pad = pad_amounts(dims, cfg.spatial_multiple());
    let padded: [usize; 3] = std::array::from_fn(|a| dims[a] + pad[a].0 + pad[a].1);
    let mut x = vec![0f32; padded.iter().product()];
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            let src = (i * dims[1] + j) * dims[2];
            let dst = (((i + pad[0].0) * padded[1]) + j + pad[1].0) * padded[2] + pad[2].0;
            for k in 0..dims[2] {
                x[dst + k] = v.data()[src + k] as f32;
            }
        }
    }
    let x = Tensor::new(vec![1, padded[0], padded[1], padded[2], 1], x)?;
    let probs = forward(params, cfg, &x, Mode::Infer)?.probs;
    let nc = cfg.n_classes;
    let n = dims.iter().product::<usize>();
    let mut labels = Vec::with_capacity(n);
    let mut maps: Vec<Vec<f64>> = if with_probs { vec![Vec::with_capacity(n); nc] } else { Vec::new() };
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let at = ((i + pad[0].0) * padded[1] + j + pad[1].0) * padded[2] + k + pad[2].0;
                let row = &probs.data()[at * nc..(at + 1) * nc];
                let mut best = 0;
                for c in 1..nc {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                labels.push(best as f64);
                for (c, m) in maps.iter_mut().enumerate() {
                    m.push(row[c] as f64);
                }
            }
        }
    }
    let labels = v.with_data(labels, VolumeKind::Label)?;
    let probs = if with_probs {
        Some(maps.into_iter().map(|m| v.with_data(m, VolumeKind::Intensity)).collect::<Result<Vec<_>, _>>()?)
    } else {
        None
    };
    Ok(Prediction { labels, probs })
}
