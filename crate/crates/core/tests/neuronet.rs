mod common;

use std::collections::BTreeMap;

use common::{brute_dice, generic_params, gradient_check, random_batch, relative_error, trace_ends, Affine};
use neuroseg::neuronet::*;
use neuroseg::phantom::{phantom, PhantomSpec};
use neuroseg::volio::{Volume, VolumeKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn zero_network(cfg: &NetConfig) -> NetParams<f32> {
    let p = init_params(cfg, 0, &Init::Uniform).unwrap();
    let tensors = p
        .tensors()
        .iter()
        .map(|(k, t)| {
            let t = match ParamKind::of(k) {
                ParamKind::Weight | ParamKind::Bias => t.map(|_| 0.0),
                _ => t.clone(),
            };
            (k.clone(), t)
        })
        .collect();
    NetParams::from_tensors(tensors)
}

fn short_train_config(steps: usize) -> TrainConfig {
    TrainConfig { steps, adam: AdamConfig::default(), checkpoint_every: 0, checkpoint: None, recalibration_batches: 1 }
}

fn tiny_batches(seed: u64) -> impl Iterator<Item = Batch<f32>> {
    (seed..).map(|s| {
        let (x, y) = random_batch([8; 3], 4, s);
        Batch { x: x.cast(), labels: y.cast() }
    })
}

fn assert_gradients(cfg: &NetConfig, seed: u64, affine: Affine) {
    let report = gradient_check(cfg, [8; 3], seed, 20, affine);
    assert!(report.missing.is_empty(), "no gradient for {:?}", report.missing);
    assert_eq!(report.skipped, 0, "perturbations crossed an activation kink");
    assert!(report.min_prob > 1e-6, "softmax saturated: {}", report.min_prob);
    for prefix in common::LAYER_TYPES {
        assert!(report.checked.keys().any(|k| k.starts_with(prefix)), "{prefix} not covered");
    }
    let params = generic_params(cfg, seed);
    for (name, &n) in &report.checked {
        assert_eq!(n, params.get(name).unwrap().len().min(20), "{name}");
    }
    assert!(report.worst < common::FD_TOLERANCE, "worst relative error {:e}", report.worst);
}

#[test]
fn analytic_gradients_match_central_differences() {
    assert_gradients(&NetConfig::tiny(), 11, Affine::ClearOfKink);
}

#[test]
fn kink_free_check_exercises_both_activation_branches() {
    let report = gradient_check(&NetConfig::tiny(), [8; 3], 11, 1, Affine::ClearOfKink);
    assert!(report.branches.0 > 1000 && report.branches.1 > 1000, "{:?}", report.branches);
}

#[test]
fn gradients_match_for_generic_batch_norm_affines() {
    assert_gradients(&NetConfig { leakiness: 1.0, ..NetConfig::tiny() }, 12, Affine::Generic);
}

#[test]
fn every_trainable_tensor_receives_a_gradient() {
    let cfg = NetConfig::tiny();
    let params = generic_params(&cfg, 1);
    let (x, y) = random_batch([8; 3], 4, 2);
    let fwd = forward(&params, &cfg, &x, Mode::Train).unwrap();
    let grads = backward(&params, &cfg, fwd.cache, &y).unwrap();
    let trainable: Vec<&str> = params.names().filter(|n| ParamKind::of(n).trainable()).collect();
    assert_eq!(grads.keys().map(String::as_str).collect::<Vec<_>>(), trainable);
    for (name, g) in &grads {
        assert_eq!(g.shape(), params.get(name).unwrap().shape());
    }
}

fn softmax_oracle(logits: &[f64], ch: usize) -> Vec<f64> {
    logits
        .chunks(ch)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            row.iter().map(move |v| (v - m).exp() / z).collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn logit_gradient_is_probs_minus_onehot_over_voxels() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shape = [1, 2, 2, 2, 4];
    let logits: Vec<f64> = (0..32).map(|_| rng.random_range(-3.0..3.0)).collect();
    let ids: Vec<f64> = (0..8).map(|_| rng.random_range(0..4) as f64).collect();
    let labels = tensor(&[1, 2, 2, 2, 1], ids.clone());
    let probs = tensor(&shape, softmax_oracle(&logits, 4));
    let g = loss_gradient(&probs, &labels).unwrap();
    for v in 0..8 {
        for c in 0..4 {
            let onehot = if ids[v] as usize == c { 1.0 } else { 0.0 };
            assert_eq!(g.data()[v * 4 + c], (probs.data()[v * 4 + c] - onehot) * (1.0 / 8.0));
        }
    }
    let f = |l: &[f64]| loss(&tensor(&shape, softmax_oracle(l, 4)), &labels).unwrap().value;
    for i in 0..32 {
        let (mut up, mut down) = (logits.clone(), logits.clone());
        up[i] += 1e-5;
        down[i] -= 1e-5;
        let numeric = (f(&up) - f(&down)) / 2e-5;
        assert!(relative_error(g.data()[i], numeric) < 1e-6, "logit {i}");
    }
}

#[test]
fn default_architecture_constants() {
    let cfg = NetConfig::default();
    assert_eq!(cfg.filter_counts(), vec![16, 32, 64, 128]);
    assert_eq!(cfg.strides, vec![[1, 1, 1], [2, 2, 2], [2, 2, 2], [2, 2, 2]]);
    assert_eq!((cfg.n_scales, cfg.units_per_scale, cfg.n_classes, cfg.leakiness), (4, 2, 4, 0.1));
    assert_eq!(KERNEL, 3);
    let layout: BTreeMap<String, Vec<usize>> = param_layout(&cfg).into_iter().collect();
    for (j, f) in [16, 32, 64, 128].into_iter().enumerate() {
        let s = j + 1;
        assert_eq!(layout[&format!("s{s}/u2/conv2/w")], vec![3, 3, 3, f, f]);
        assert_eq!(layout[&format!("score/s{s}/w")], vec![1, 1, 1, f, 4]);
    }
    assert_eq!(layout["init/w"], vec![3, 3, 3, 1, 16]);
    assert_eq!(layout["s2/u1/proj/w"], vec![1, 1, 1, 16, 32]);
    assert!(!layout.contains_key("s1/u1/proj/w"));
}

#[test]
fn deepest_grid_is_an_eighth_of_the_input() {
    let cfg = NetConfig::default();
    let params = init_params(&cfg, 1, &Init::Uniform).unwrap();
    let x = Tensor::filled(vec![1, 32, 16, 24, 1], 0.5f32);
    let fwd = forward(&params, &cfg, &x, Mode::Train).unwrap();
    assert_eq!(fwd.cache.feature_dims(), vec![[32, 16, 24], [16, 8, 12], [8, 4, 6], [4, 2, 3]]);
}

#[test]
fn default_network_preserves_input_size_and_normalises() {
    let cfg = NetConfig::default();
    let params = init_params(&cfg, 3, &Init::Uniform).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::new(vec![1, 32, 32, 32, 1], (0..32 * 32 * 32).map(|_| rng.random::<f32>()).collect()).unwrap();
    for mode in [Mode::Train, Mode::Infer] {
        let fwd = forward(&params, &cfg, &x, mode).unwrap();
        assert_eq!(fwd.logits.shape(), &[1, 32, 32, 32, 4]);
        assert_eq!(fwd.probs.shape(), &[1, 32, 32, 32, 4]);
        for row in fwd.probs.data().chunks(4) {
            let s: f64 = row.iter().map(|&p| p as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_network_is_uniform() {
    let cfg = NetConfig::default();
    let params = zero_network(&cfg);
    let x = Tensor::filled(vec![1, 16, 16, 16, 1], 0.7f32);
    let fwd = forward(&params, &cfg, &x, Mode::Infer).unwrap();
    assert!(fwd.logits.data().iter().all(|&v| v == 0.0));
    assert!(fwd.probs.data().iter().all(|&p| p == 0.25));
}

#[test]
fn shape_preconditions() {
    let cfg = NetConfig::tiny();
    let params = init_params(&cfg, 0, &Init::Uniform).unwrap();
    let odd = Tensor::filled(vec![1, 8, 9, 8, 1], 0f32);
    assert!(matches!(
        forward(&params, &cfg, &odd, Mode::Infer),
        Err(NetError::IndivisibleShape { dims: [8, 9, 8], multiple: [2, 2, 2] })
    ));
    let two = Tensor::filled(vec![1, 8, 8, 8, 2], 0f32);
    assert!(matches!(
        forward(&params, &cfg, &two, Mode::Infer),
        Err(NetError::ChannelMismatch { expected: 1, found: 2, .. })
    ));
    assert!(matches!(Tensor::new(vec![2, 0, 2], Vec::<f32>::new()), Err(NetError::ShapeMismatch(_))));
    assert!(matches!(Tensor::new(vec![2, 2], vec![0f32; 3]), Err(NetError::ShapeMismatch(_))));
}

#[test]
fn translation_covariance_of_the_convolutional_core() {
    let cfg = NetConfig::tiny();
    let params: NetParams<f32> = generic_params(&cfg, 21).cast();
    let (n, shift, margin) = (48usize, 2usize, 18usize);
    let big = n + shift;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let field: Vec<f32> = (0..big * big * big).map(|_| rng.random_range(-1.0..1.0)).collect();
    let window = |o: usize| {
        let mut w = Vec::with_capacity(n * n * n);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    w.push(field[((i + o) * big + j + o) * big + k + o]);
                }
            }
        }
        Tensor::new(vec![1, n, n, n, 1], w).unwrap()
    };
    let a = forward(&params, &cfg, &window(0), Mode::Infer).unwrap().logits;
    let b = forward(&params, &cfg, &window(shift), Mode::Infer).unwrap().logits;
    let at = |i: usize, j: usize, k: usize, c: usize| ((i * n + j) * n + k) * 4 + c;
    let mut worst = 0f32;
    for i in margin..n - margin - shift {
        for j in margin..n - margin - shift {
            for k in margin..n - margin - shift {
                for c in 0..4 {
                    let d = (b.data()[at(i, j, k, c)] - a.data()[at(i + shift, j + shift, k + shift, c)]).abs();
                    worst = worst.max(d);
                }
            }
        }
    }
    assert!(worst < 1e-5, "interior logits differ by {worst}");
}

#[test]
fn loss_examples() {
    let shape = [1, 1, 1, 2, 4];
    let ids = tensor(&[1, 1, 1, 2, 1], vec![0.0, 0.0]);
    let onehot = tensor(&shape, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    assert_eq!(loss(&onehot, &ids).unwrap().value, 0.0);
    assert_eq!(loss(&onehot, &onehot).unwrap().value, 0.0);
    let uniform = tensor(&shape, vec![0.25; 8]);
    assert!((loss(&uniform, &ids).unwrap().value - 1.386294).abs() < 1e-6);
    let mixed = tensor(&shape, vec![0.7, 0.1, 0.1, 0.1, 0.25, 0.25, 0.25, 0.25]);
    let l = loss(&mixed, &ids).unwrap();
    assert!((l.value - 0.871485).abs() < 1e-6);
    assert!((l.per_voxel[0] - 0.356675).abs() < 1e-6);
    let bad = tensor(&[1, 1, 1, 2, 1], vec![0.0, 4.0]);
    assert!(matches!(loss(&mixed, &bad), Err(NetError::ShapeMismatch(_))));
    let short = tensor(&[1, 1, 1, 1, 1], vec![0.0]);
    assert!(matches!(loss(&mixed, &short), Err(NetError::ShapeMismatch(_))));
}

#[test]
fn adam_first_step_and_zero_gradients() {
    let single = |v: f64| NetParams::from_tensors(BTreeMap::from([("p/w".to_string(), tensor(&[1], vec![v]))]));
    let grads = |g: f64| BTreeMap::from([("p/w".to_string(), tensor(&[1], vec![g]))]);
    let mut p = single(0.0);
    let mut state = AdamState::new();
    optimizer_step(&mut p, &grads(1.0), &mut state, &AdamConfig::default()).unwrap();
    let expected = -1e-3 / (1.0 + 1e-8);
    assert!((p.get("p/w").unwrap().data()[0] - expected).abs() < 1e-15);
    assert_eq!(state.t, 1);

    let mut q = single(0.3);
    let mut state = AdamState::new();
    optimizer_step(&mut q, &grads(0.0), &mut state, &AdamConfig::default()).unwrap();
    assert_eq!(q.get("p/w").unwrap().data(), &[0.3]);
    assert_eq!(state.m["p/w"].data(), &[0.0]);
    assert_eq!(state.v["p/w"].data(), &[0.0]);

    let wrong = BTreeMap::from([("p/w".to_string(), tensor(&[2], vec![0.0, 0.0]))]);
    assert!(matches!(
        optimizer_step(&mut q, &wrong, &mut state, &AdamConfig::default()),
        Err(NetError::ShapeMismatch(_))
    ));
}

#[test]
fn stale_caches_are_rejected() {
    let cfg = NetConfig::tiny();
    let mut params = generic_params(&cfg, 5);
    let (x, y) = random_batch([8; 3], 4, 6);
    let infer = forward(&params, &cfg, &x, Mode::Infer).unwrap();
    assert!(matches!(backward(&params, &cfg, infer.cache, &y), Err(NetError::StaleCache(_))));
    let first = forward(&params, &cfg, &x, Mode::Train).unwrap();
    let grads = backward(&params, &cfg, first.cache, &y).unwrap();
    let old = forward(&params, &cfg, &x, Mode::Train).unwrap();
    optimizer_step(&mut params, &grads, &mut AdamState::new(), &AdamConfig::default()).unwrap();
    assert!(matches!(backward(&params, &cfg, old.cache, &y), Err(NetError::StaleCache(_))));
}

#[test]
fn initialisation_is_deterministic_and_seeded() {
    let cfg = NetConfig::tiny();
    let a = init_params(&cfg, 7, &Init::Uniform).unwrap();
    let b = init_params(&cfg, 7, &Init::Uniform).unwrap();
    let c = init_params(&cfg, 8, &Init::Uniform).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    for (name, t) in a.tensors() {
        match ParamKind::of(name) {
            ParamKind::Weight => {
                let s = t.shape();
                let r: usize = s[..3].iter().product();
                let bound = (6.0 / (r * (s[3] + s[4])) as f64).sqrt() as f32;
                assert!(t.data().iter().all(|v| v.abs() <= bound), "{name}");
            }
            ParamKind::Gamma | ParamKind::RunningVar => assert!(t.data().iter().all(|&v| v == 1.0)),
            _ => assert!(t.data().iter().all(|&v| v == 0.0)),
        }
    }
}

#[test]
fn checkpoint_round_trips_and_warm_starts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.nnl");
    let cfg = NetConfig::tiny();
    let params = init_params(&cfg, 9, &Init::Uniform).unwrap();
    save_checkpoint(&params, None, &path).unwrap();
    let warm = init_params(&cfg, 0, &Init::FromCheckpoint(path.clone())).unwrap();
    assert_eq!(warm, params);
    let (loaded, state) = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, params);
    assert!(state.is_none());

    let mut trained = params.clone();
    let mut state = AdamState::new();
    train(&mut trained, &mut state, &cfg, tiny_batches(0), &short_train_config(2)).unwrap();
    save_checkpoint(&trained, Some(&state), &path).unwrap();
    let (p2, s2) = load_checkpoint(&path).unwrap();
    assert_eq!(p2.tensors(), trained.tensors());
    assert_eq!(s2.unwrap(), state);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = NetConfig::tiny();
    let params = init_params(&cfg, 9, &Init::Uniform).unwrap();
    let bytes = checkpoint_bytes(&params, None).unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    for cut in [5, 9, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(parse_checkpoint(&bytes[..cut]), Err(NetError::CorruptRecord(_))), "cut at {cut}");
    }
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(matches!(parse_checkpoint(&trailing), Err(NetError::CorruptRecord(_))));
    let mut magic = bytes.clone();
    magic[..4].copy_from_slice(b"NNL2");
    assert!(matches!(parse_checkpoint(&magic), Err(NetError::BadMagic(m)) if &m == b"NNL2"));

    let mut tensors = params.tensors().clone();
    tensors.remove("s2/u1/bn2/gamma");
    let path = dir.path().join("missing.nnl");
    save_checkpoint(&NetParams::from_tensors(tensors), None, &path).unwrap();
    match init_params(&cfg, 0, &Init::FromCheckpoint(path)) {
        Err(NetError::BadCheckpoint(msg)) => assert!(msg.contains("s2/u1/bn2/gamma"), "{msg}"),
        other => panic!("expected BadCheckpoint, got {other:?}"),
    }

    let path = dir.path().join("wide.nnl");
    let wide = NetConfig { base_filters: 4, ..cfg.clone() };
    save_checkpoint(&init_params(&wide, 0, &Init::Uniform).unwrap(), None, &path).unwrap();
    assert!(matches!(init_params(&cfg, 0, &Init::FromCheckpoint(path)), Err(NetError::ShapeMismatch(_))));

    let absent = dir.path().join("absent.nnl");
    assert!(matches!(load_checkpoint(&absent), Err(NetError::Io { .. })));
}

#[test]
fn training_contracts() {
    let cfg = NetConfig::tiny();
    let init = init_params(&cfg, 2, &Init::Uniform).unwrap();

    let mut p = init.clone();
    let trace = train(&mut p, &mut AdamState::new(), &cfg, tiny_batches(0), &short_train_config(0)).unwrap();
    assert!(trace.is_empty());
    assert_eq!(p, init);

    let run = || {
        let mut p = init.clone();
        let mut s = AdamState::new();
        let trace = train(&mut p, &mut s, &cfg, tiny_batches(0), &short_train_config(3)).unwrap();
        (p, s, trace)
    };
    let (p1, s1, t1) = run();
    let (p2, s2, t2) = run();
    assert_eq!(t1.len(), 3);
    assert_eq!((p1.tensors(), &s1, &t1), (p2.tensors(), &s2, &t2));
    assert_eq!(s1.t, 3);

    let mut p = init.clone();
    let short = tiny_batches(0).take(2);
    let err = train(&mut p, &mut AdamState::new(), &cfg, short, &short_train_config(3)).unwrap_err();
    assert!(matches!(err, NetError::DataExhausted(2)));
}

#[test]
fn periodic_and_final_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.nnl");
    let cfg = NetConfig::tiny();
    let mut p = init_params(&cfg, 2, &Init::Uniform).unwrap();
    let mut s = AdamState::new();
    let tc = TrainConfig { checkpoint_every: 2, checkpoint: Some(path.clone()), ..short_train_config(2) };
    train(&mut p, &mut s, &cfg, tiny_batches(0), &tc).unwrap();
    let (saved, state) = load_checkpoint(&path).unwrap();
    assert_eq!(saved.tensors(), p.tensors());
    assert_eq!(state.unwrap().t, 2);

    let trace_path = dir.path().join("loss.csv");
    write_loss_trace(&trace_path, &[0.5, 0.25]).unwrap();
    assert_eq!(std::fs::read_to_string(trace_path).unwrap(), "step,loss\n1,0.5\n2,0.25\n");
}

#[test]
fn recalibrated_statistics_make_inference_match_training() {
    let cfg = NetConfig::tiny();
    let mut params: NetParams<f64> = generic_params(&cfg, 31);
    let (x, y) = random_batch([8; 3], 4, 32);
    let used = recalibrate_batch_stats(&mut params, &cfg, [Batch { x: x.clone(), labels: y }]).unwrap();
    assert_eq!(used, 1);
    let train_probs = forward(&params, &cfg, &x, Mode::Train).unwrap().probs;
    let infer_probs = forward(&params, &cfg, &x, Mode::Infer).unwrap().probs;
    for (a, b) in train_probs.data().iter().zip(infer_probs.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    for (name, t) in params.tensors() {
        if ParamKind::of(name) == ParamKind::RunningVar {
            assert!(t.data().iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn running_statistics_follow_the_momentum_rule() {
    let cfg = NetConfig::tiny();
    let mut params: NetParams<f64> = generic_params(&cfg, 41);
    let before = params.clone();
    let (x, _) = random_batch([8; 3], 4, 42);
    let fwd = forward(&params, &cfg, &x, Mode::Train).unwrap();
    params.absorb_batch_stats(&fwd.cache, 0.99).unwrap();
    let mut batch_only = before.clone();
    batch_only.absorb_batch_stats(&fwd.cache, 0.0).unwrap();
    for (name, t) in params.tensors() {
        let old = before.get(name).unwrap().data();
        let batch = batch_only.get(name).unwrap().data();
        for i in 0..t.len() {
            let want = if ParamKind::of(name).trainable() { old[i] } else { 0.99 * old[i] + 0.01 * batch[i] };
            assert!((t.data()[i] - want).abs() < 1e-12, "{name}");
        }
    }
}

#[test]
fn prediction_pads_and_crops() {
    assert_eq!(pad_amounts([30, 32, 25], [8; 3]), [(1, 1), (0, 0), (3, 4)]);
    let cfg = NetConfig::default();
    let params = init_params(&cfg, 4, &Init::Uniform).unwrap();
    for n in [32usize, 30] {
        let v = Volume::from_fn([n; 3], [1.0; 3], VolumeKind::Intensity, |i, j, k| ((i + 2 * j + 3 * k) % 7) as f64)
            .unwrap();
        let pred = predict_volume(&params, &cfg, &v, true).unwrap();
        assert_eq!(pred.labels.dims(), [n; 3]);
        assert_eq!(pred.labels.kind(), VolumeKind::Label);
        assert!(pred.labels.data().iter().all(|&l| (0.0..4.0).contains(&l) && l.fract() == 0.0));
        let probs = pred.probs.unwrap();
        assert_eq!(probs.len(), 4);
        for idx in 0..v.len() {
            let row: Vec<f64> = probs.iter().map(|p| p.data()[idx]).collect();
            let best = (1..4).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            assert_eq!(pred.labels.data()[idx], best as f64);
        }
    }
}

#[test]
fn ties_resolve_to_the_lowest_class() {
    let cfg = NetConfig::tiny();
    let v = Volume::from_fn([6; 3], [1.0; 3], VolumeKind::Intensity, |i, _, _| i as f64).unwrap();
    let pred = predict_volume(&zero_network(&cfg), &cfg, &v, false).unwrap();
    assert!(pred.labels.data().iter().all(|&l| l == 0.0));
}

const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/neuronet_golden.bin");

fn golden_probs() -> Vec<f32> {
    let cfg = NetConfig::tiny();
    let mut spec = PhantomSpec::cube(16);
    spec.noise_std = 0.02;
    spec.seed = 3;
    let ph = phantom(&spec);
    let batch = Batch { x: volume_tensor(&ph.image), labels: volume_tensor(&ph.labels) };
    let mut params = init_params(&cfg, 3, &Init::Uniform).unwrap();
    let tc = TrainConfig { adam: AdamConfig { lr: 1e-2, ..Default::default() }, ..short_train_config(20) };
    train(&mut params, &mut AdamState::new(), &cfg, std::iter::repeat(batch), &tc).unwrap();
    let pred = predict_volume(&params, &cfg, &ph.image, true).unwrap();
    pred.probs.unwrap().iter().flat_map(|p| p.data().iter().map(|&v| v as f32)).collect()
}

/// Set `NEUROSEG_WRITE_GOLDEN=1` to regenerate the stored tensor.
#[test]
fn trained_toy_network_matches_golden_output() {
    let probs = golden_probs();
    if std::env::var_os("NEUROSEG_WRITE_GOLDEN").is_some() {
        let bytes: Vec<u8> = probs.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(GOLDEN, bytes).unwrap();
    }
    let stored: Vec<f32> =
        std::fs::read(GOLDEN).unwrap().chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    assert_eq!(stored.len(), probs.len());
    let worst = stored.iter().zip(&probs).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
    assert!(worst < 1e-6, "max deviation {worst}");
}

#[test]
fn overfits_a_single_phantom() {
    let run = common::overfit(1);
    assert_eq!(run.trace.len(), common::OVERFIT_STEPS);
    for (c, d) in run.dice.iter().enumerate() {
        assert!(*d >= 0.95, "class {c} Dice {d}");
    }
    let (first, last) = trace_ends(&run.trace);
    assert!(last < first, "loss {first} -> {last}");
    assert_eq!(brute_dice(run.labels.data(), run.labels.data(), 2), 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn probabilities_sum_to_one(seed in 0u64..1000, scale in 0.1f64..20.0) {
        let cfg = NetConfig::tiny();
        let p = generic_params(&cfg, seed);
        let p = NetParams::from_tensors(p.tensors().iter().map(|(k, t)| {
            let t = if ParamKind::of(k) == ParamKind::Weight { t.map(|v| v * scale) } else { t.clone() };
            (k.clone(), t)
        }).collect());
        let (x, _) = random_batch([4; 3], 4, seed);
        for mode in [Mode::Train, Mode::Infer] {
            let probs = forward(&p, &cfg, &x, mode).unwrap().probs;
            for row in probs.data().chunks(4) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn loss_is_the_nonnegative_mean_of_voxel_losses(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..64).map(|_| rng.random_range(-5.0..5.0)).collect();
        let probs = tensor(&[1, 2, 2, 4, 4], softmax_oracle(&logits, 4));
        let ids = tensor(&[1, 2, 2, 4, 1], (0..16).map(|_| rng.random_range(0..4) as f64).collect());
        let l = loss(&probs, &ids).unwrap();
        prop_assert!(l.value >= 0.0);
        let mean = l.per_voxel.iter().sum::<f64>() / 16.0;
        prop_assert!((l.value - mean).abs() < 1e-12);
    }
}
