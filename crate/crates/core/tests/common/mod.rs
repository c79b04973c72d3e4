//! Oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::Matrix4;

use neuroseg::neuronet::{
    forward, init_params, loss, predict_volume, train, uniform_params, volume_tensor, AdamConfig, AdamState, Batch,
    Init, Mode, NetConfig, NetParams, ParamKind, Tensor, TrainConfig,
};
use neuroseg::phantom::{phantom, PhantomSpec};
use neuroseg::register::{resample, Interpolation, RigidTransform};
use neuroseg::volio::{read_volume_as, write_volume, Grid, Volume, VolumeKind};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug)]
pub struct GradReport {
    /// Largest relative error over the compared entries.
    pub worst: f64,
    /// Compared entries per tensor.
    pub checked: BTreeMap<String, usize>,
    /// Entries whose perturbation straddled an activation kink.
    pub skipped: usize,
    /// Tensors that received no analytic gradient.
    pub missing: Vec<String>,
    /// Smallest class probability of the unperturbed pass; the loss is
    /// smooth only while it stays above the clamp floor.
    pub min_prob: f64,
    /// Activation inputs on the positive and on the leaky branch.
    pub branches: (usize, usize),
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

/// How batch-norm gains and shifts are drawn for a gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Affine {
    /// Gains near one, small shifts: activations straddle the kink.
    Generic,
    /// Shifts of magnitude 2..2.5 with gains of 0.25..0.5, alternating in
    /// sign by channel: every activation input sits well clear of zero, on
    /// the positive branch for even channels and the leaky branch for odd.
    /// Score kernels are scaled by 0.1 to keep the softmax unsaturated.
    ClearOfKink,
}

/// f64 parameters with every tensor perturbed away from its trivial initial
/// value, so no gradient vanishes by symmetry.
pub fn generic_params(cfg: &NetConfig, seed: u64) -> NetParams<f64> {
    check_params(cfg, seed, Affine::Generic)
}

pub fn check_params(cfg: &NetConfig, seed: u64, affine: Affine) -> NetParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let base: NetParams<f64> = uniform_params(cfg, seed);
    let tensors = base
        .tensors()
        .iter()
        .map(|(name, t)| {
            let mut c = 0usize;
            let t = match (ParamKind::of(name), affine) {
                (ParamKind::Weight, Affine::ClearOfKink) if name.starts_with("score/") => t.map(|v| 0.1 * v),
                (ParamKind::Weight, _) => t.clone(),
                (ParamKind::Gamma, Affine::Generic) => t.map(|_| rng.random_range(0.5..1.5)),
                (ParamKind::Gamma, Affine::ClearOfKink) => t.map(|_| rng.random_range(0.25..0.5)),
                (ParamKind::Beta, Affine::ClearOfKink) => t.map(|_| {
                    c += 1;
                    let sign = if c % 2 == 1 { 1.0 } else { -1.0 };
                    sign * rng.random_range(2.0..2.5)
                }),
                (ParamKind::RunningVar, _) => t.map(|_| rng.random_range(0.5..2.0)),
                _ => t.map(|_| rng.random_range(-0.2..0.2)),
            };
            (name.clone(), t)
        })
        .collect();
    NetParams::from_tensors(tensors)
}

pub fn random_batch(dims: [usize; 3], n_classes: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    let shape = vec![1, dims[0], dims[1], dims[2], 1];
    let x = Tensor::new(shape.clone(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let y = Tensor::new(shape, (0..n).map(|_| rng.random_range(0..n_classes) as f64).collect()).unwrap();
    (x, y)
}

fn with_entry(p: &NetParams<f64>, name: &str, idx: usize, v: f64) -> NetParams<f64> {
    let mut t = p.tensors().clone();
    t.get_mut(name).unwrap().data_mut()[idx] = v;
    NetParams::from_tensors(t)
}

/// Compare `backward` with fourth-order central differences (step
/// `FD_STEP`) of the training-mode loss on `per_tensor` random entries of
/// every trainable tensor (all entries of smaller tensors). Entries whose
/// perturbation flips any activation sign are counted in `skipped` and not
/// compared.
pub fn gradient_check(cfg: &NetConfig, dims: [usize; 3], seed: u64, per_tensor: usize, affine: Affine) -> GradReport {
    let params = check_params(cfg, seed, affine);
    let (x, y) = random_batch(dims, cfg.n_classes, seed + 1);
    let fwd = forward(&params, cfg, &x, Mode::Train).unwrap();
    let min_prob = fwd.probs.data().iter().cloned().fold(1.0, f64::min);
    let pattern = fwd.cache.activation_pattern();
    let positive = pattern.iter().filter(|&&b| b).count();
    let branches = (positive, pattern.len() - positive);
    let grads = neuroseg::neuronet::backward(&params, cfg, fwd.cache, &y).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let eval = |p: &NetParams<f64>| {
        let f = forward(p, cfg, &x, Mode::Train).unwrap();
        (loss(&f.probs, &y).unwrap().value, f.cache.activation_pattern())
    };
    let mut report =
        GradReport { worst: 0.0, checked: BTreeMap::new(), skipped: 0, missing: Vec::new(), min_prob, branches };
    for (name, t) in params.tensors() {
        if !ParamKind::of(name).trainable() {
            continue;
        }
        let Some(g) = grads.get(name) else {
            report.missing.push(name.clone());
            continue;
        };
        assert_eq!(g.shape(), t.shape(), "gradient shape of {name}");
        let mut count = 0;
        for idx in sample(&mut rng, t.len(), t.len()) {
            if count == per_tensor {
                break;
            }
            let v = t.data()[idx];
            let at = |k: f64| eval(&with_entry(&params, name, idx, v + k * FD_STEP));
            let [(l2, p2), (l1, p1), (m1, q1), (m2, q2)] = [at(2.0), at(1.0), at(-1.0), at(-2.0)];
            let kinked = cfg.leakiness < 1.0 && (p2 != p1 || p1 != q1 || q1 != q2);
            if kinked {
                report.skipped += 1;
                continue;
            }
            let numeric = (8.0 * (l1 - m1) - (l2 - m2)) / (12.0 * FD_STEP);
            report.worst = report.worst.max(relative_error(g.data()[idx], numeric));
            count += 1;
        }
        report.checked.insert(name.clone(), count);
    }
    report
}

/// Name prefixes that together cover every layer type of the tiny network.
pub const LAYER_TYPES: [&str; 8] =
    ["init/", "s2/down/", "s1/u1/conv1/", "s2/u1/proj/", "s1/u1/bn1/", "s2/u2/bn2/", "score/s1/", "score/s2/"];

pub fn brute_dice(a: &[f64], b: &[f64], class: usize) -> f64 {
    let (mut na, mut nb, mut both) = (0u64, 0u64, 0u64);
    for (&u, &v) in a.iter().zip(b) {
        let (u, v) = (u as usize == class, v as usize == class);
        na += u as u64;
        nb += v as u64;
        both += (u && v) as u64;
    }
    if na + nb == 0 {
        1.0
    } else {
        (2 * both) as f64 / (na + nb) as f64
    }
}

pub struct Overfit {
    pub trace: Vec<f64>,
    pub dice: [f64; 4],
    pub labels: Volume,
    pub params: NetParams<f32>,
}

pub const OVERFIT_STEPS: usize = 300;

/// Train the tiny network on one noisy 32^3 phantom and segment it again.
pub fn overfit(seed: u64) -> Overfit {
    let cfg = NetConfig::tiny();
    let mut spec = PhantomSpec::cube(32);
    spec.noise_std = 0.02;
    spec.seed = seed;
    let ph = phantom(&spec);
    let batch = Batch { x: volume_tensor(&ph.image), labels: volume_tensor(&ph.labels) };
    let mut params = init_params(&cfg, seed, &Init::Uniform).unwrap();
    let tc = TrainConfig {
        steps: OVERFIT_STEPS,
        adam: AdamConfig { lr: 1e-2, ..Default::default() },
        checkpoint_every: 0,
        checkpoint: None,
        recalibration_batches: 1,
    };
    let trace = train(&mut params, &mut AdamState::new(), &cfg, std::iter::repeat(batch), &tc).unwrap();
    let labels = predict_volume(&params, &cfg, &ph.image, false).unwrap().labels;
    let dice = std::array::from_fn(|c| brute_dice(labels.data(), ph.labels.data(), c));
    Overfit { trace, dice, labels, params }
}

/// Mean loss over the first and last tenth of a trace.
pub fn trace_ends(trace: &[f64]) -> (f64, f64) {
    let k = (trace.len() / 10).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&trace[..k]), mean(&trace[trace.len() - k..]))
}

pub fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

/// Rotation error in degrees and translation error in voxels (unit spacing,
/// shared centre).
pub fn pose_error(got: &RigidTransform, want: &RigidTransform) -> (f64, f64) {
    assert_eq!(got.center, want.center);
    (got.angle_to(want).to_degrees(), dist(got.translation, want.translation))
}

pub fn warp_fixture() -> (Volume, RigidTransform, Volume) {
    let ph = phantom(&PhantomSpec { noise_std: 0.02, seed: 9, ..PhantomSpec::cube(64) });
    let center = ph.image.grid().world_center();
    let t0 = RigidTransform::new([5f64.to_radians(), 0.0, 0.0], [5.0, 0.0, 0.0], center);
    let moving = resample(&ph.image, &t0, ph.image.grid(), Interpolation::Trilinear, 0.0).unwrap();
    (ph.image, t0, moving)
}

/// Voxels whose 3×3×3 neighbourhood (clipped to the grid) holds one label.
pub fn boundary_distant(l: &Volume) -> Vec<bool> {
    let [d0, d1, d2] = l.dims();
    let mut out = Vec::with_capacity(l.len());
    for i in 0..d0 {
        for j in 0..d1 {
            for k in 0..d2 {
                let c = l.at(i, j, k);
                let mut same = true;
                for a in i.saturating_sub(1)..(i + 2).min(d0) {
                    for b in j.saturating_sub(1)..(j + 2).min(d1) {
                        for e in k.saturating_sub(1)..(k + 2).min(d2) {
                            same &= l.at(a, b, e) == c;
                        }
                    }
                }
                out.push(same);
            }
        }
    }
    out
}

pub fn vol(dims: [usize; 3], data: Vec<f64>) -> Volume {
    let mut it = data.into_iter();
    Volume::from_fn(dims, [1.0; 3], VolumeKind::Intensity, |_, _, _| it.next().unwrap()).unwrap()
}

pub fn random_unit_volume(rng: &mut ChaCha8Rng, dims: [usize; 3], zero_frac: f64) -> Volume {
    let n = dims.iter().product();
    let data =
        (0..n).map(|_| if rng.random::<f64>() < zero_frac { 0.0 } else { rng.random::<f64>().powf(1.7) }).collect();
    vol(dims, data)
}

/// Global HE by brute force: each voxel becomes the fraction of counted voxels
/// whose bin does not exceed its own.
pub fn global_he_oracle(v: &Volume, bins: usize, foreground_only: bool) -> Vec<f64> {
    let bin = |x: f64| ((x * bins as f64).floor() as usize).min(bins - 1);
    let counted: Vec<usize> = v.data().iter().filter(|&&x| !foreground_only || x > 0.0).map(|&x| bin(x)).collect();
    v.data()
        .iter()
        .map(|&x| {
            if foreground_only && x <= 0.0 {
                return 0.0;
            }
            let b = bin(x);
            counted.iter().filter(|&&c| c <= b).count() as f64 / counted.len() as f64
        })
        .collect()
}

pub fn max_gap(landmarks: &[f64]) -> f64 {
    landmarks.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
}

/// Lay out a NIfTI-1 file by hand, field by field, independent of the crate's
/// header encoder.
pub fn handmade_nifti(big_endian: bool, magic: &[u8; 4], datatype: i16, bitpix: i16, payload: &[u8]) -> Vec<u8> {
    let mut b = vec![0u8; 352];
    let i16b = |v: i16| {
        if big_endian {
            v.to_be_bytes()
        } else {
            v.to_le_bytes()
        }
    };
    let i32b = |v: i32| {
        if big_endian {
            v.to_be_bytes()
        } else {
            v.to_le_bytes()
        }
    };
    let f32b = |v: f32| {
        if big_endian {
            v.to_be_bytes()
        } else {
            v.to_le_bytes()
        }
    };
    b[0..4].copy_from_slice(&i32b(348));
    for (n, d) in [3i16, 2, 2, 2, 1, 1, 1, 1].iter().enumerate() {
        b[40 + 2 * n..42 + 2 * n].copy_from_slice(&i16b(*d));
    }
    b[70..72].copy_from_slice(&i16b(datatype));
    b[72..74].copy_from_slice(&i16b(bitpix));
    for (n, p) in [1.0f32, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0].iter().enumerate() {
        b[76 + 4 * n..80 + 4 * n].copy_from_slice(&f32b(*p));
    }
    b[108..112].copy_from_slice(&f32b(352.0));
    b[112..116].copy_from_slice(&f32b(0.0)); // slope 0: no scaling
    b[344..348].copy_from_slice(magic);
    b.extend_from_slice(payload);
    b
}

pub fn float_payload(big_endian: bool) -> Vec<u8> {
    (0..8)
        .flat_map(|v| {
            let v = v as f32;
            if big_endian {
                v.to_be_bytes()
            } else {
                v.to_le_bytes()
            }
        })
        .collect()
}

pub fn random_nifti_volume(rng: &mut ChaCha8Rng) -> Volume {
    let dims = [rng.random_range(1..12), rng.random_range(1..12), rng.random_range(1..12)];
    let spacing = [0, 1, 2].map(|_| rng.random_range(0.3..3.0));
    let mut affine = Matrix4::identity();
    for r in 0..3 {
        for c in 0..4 {
            affine[(r, c)] = rng.random_range(-50.0..50.0);
        }
    }
    let n = dims.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1000.0f32..1000.0) as f64).collect();
    Volume::new(data, Grid { dims, spacing, affine }, VolumeKind::Intensity).unwrap()
}

pub fn assert_close_rel(a: f64, b: f64) {
    assert!((a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1e-3), "{a} vs {b}");
}

pub fn assert_round_trip(v: &Volume, path: &Path) {
    write_volume(v, path).unwrap();
    let back = read_volume_as(path, v.kind()).unwrap();
    assert_eq!(back.dims(), v.dims());
    assert_eq!(back.data(), v.data());
    for a in 0..3 {
        assert_close_rel(back.spacing()[a], v.spacing()[a]);
    }
    for r in 0..4 {
        for c in 0..4 {
            assert_close_rel(back.affine()[(r, c)], v.affine()[(r, c)]);
        }
    }
}
