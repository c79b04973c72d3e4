use std::collections::BTreeMap;

use super::ops::{
    bn_apply, bn_backward, channel_stats, conv_backward, conv_forward, leaky_relu, leaky_relu_backward, resize,
    resize_adjoint, softmax, BnStats,
};
use super::{NetConfig, NetError, NetParams, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; records everything backward needs.
    Train,
    /// Running statistics; records nothing.
    Infer,
}

/// Gradient of the loss for every trainable tensor, keyed like [`NetParams`].
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

#[derive(Debug)]
struct BnRecord<T> {
    name: String,
    xhat: Tensor<T>,
    stats: BnStats,
}

#[derive(Debug)]
struct UnitRecord<T> {
    prefix: String,
    x: Tensor<T>,
    bn1: BnRecord<T>,
    a1: Tensor<T>,
    bn2: BnRecord<T>,
    a2: Tensor<T>,
    projected: bool,
}

#[derive(Debug)]
struct ScaleRecord<T> {
    down_in: Tensor<T>,
    units: Vec<UnitRecord<T>>,
}

/// Intermediate values of a forward pass. Only a training pass fills it.
#[derive(Debug)]
pub struct Cache<T> {
    mode: Mode,
    version: u64,
    input: Option<Tensor<T>>,
    scales: Vec<ScaleRecord<T>>,
    outputs: Vec<Tensor<T>>,
    probs: Option<Tensor<T>>,
}

impl<T: Scalar> Cache<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Spatial dims of each scale's last residual-unit output, finest first.
    /// Empty for an inference cache.
    pub fn feature_dims(&self) -> Vec<[usize; 3]> {
        self.outputs.iter().map(Tensor::spatial).collect()
    }

    /// Sign of every leaky-ReLU output recorded by a training pass, in graph
    /// order. Two parameter settings with equal patterns lie on one smooth
    /// piece of the loss surface.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.scales
            .iter()
            .flat_map(|s| &s.units)
            .flat_map(|u| u.a1.data().iter().chain(u.a2.data()))
            .map(|v| *v >= T::zero())
            .collect()
    }

    /// Batch statistics of every batch-norm layer, by layer name.
    pub(crate) fn batch_stats(&self) -> impl Iterator<Item = (&str, &BnStats)> {
        self.scales.iter().flat_map(|s| &s.units).flat_map(|u| [&u.bn1, &u.bn2]).map(|b| (b.name.as_str(), &b.stats))
    }
}

pub struct Forward<T> {
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
    pub cache: Cache<T>,
}

fn scalar<T: Scalar>(x: f64) -> T {
    T::from(x).expect("finite")
}

fn conv<T: Scalar>(p: &NetParams<T>, name: &str, x: &Tensor<T>, stride: [usize; 3]) -> Result<Tensor<T>, NetError> {
    let w = p.get(&format!("{name}/w"))?;
    let b = p.get(&format!("{name}/b"))?;
    if w.shape()[3] != x.channels() {
        return Err(NetError::ChannelMismatch { layer: name.to_string(), expected: w.shape()[3], found: x.channels() });
    }
    Ok(conv_forward(x, w, b, stride))
}

fn batch_norm<T: Scalar>(
    p: &NetParams<T>,
    cfg: &NetConfig,
    name: &str,
    x: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<BnRecord<T>>), NetError> {
    let gamma = p.get(&format!("{name}/gamma"))?.data();
    let beta = p.get(&format!("{name}/beta"))?.data();
    match mode {
        Mode::Train => {
            let stats = channel_stats(x);
            let (y, xhat) = bn_apply(x, &stats.mean, &stats.var, gamma, beta, cfg.bn_epsilon);
            Ok((y, Some(BnRecord { name: name.to_string(), xhat, stats })))
        }
        Mode::Infer => {
            let f64s = |t: &Tensor<T>| t.data().iter().map(|v| v.to_f64().expect("finite")).collect::<Vec<_>>();
            let mean = f64s(p.get(&format!("{name}/mean"))?);
            let var = f64s(p.get(&format!("{name}/var"))?);
            Ok((bn_apply(x, &mean, &var, gamma, beta, cfg.bn_epsilon).0, None))
        }
    }
}

/// Pre-activation residual unit: `x + conv2(act(bn2(conv1(act(bn1(x))))))`,
/// with a 1x1x1 projection on the skip when the channel count changes.
fn unit_forward<T: Scalar>(
    p: &NetParams<T>,
    cfg: &NetConfig,
    prefix: &str,
    x: Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<UnitRecord<T>>), NetError> {
    let leak = scalar::<T>(cfg.leakiness);
    let (h1, bn1) = batch_norm(p, cfg, &format!("{prefix}/bn1"), &x, mode)?;
    let a1 = leaky_relu(&h1, leak);
    drop(h1);
    let c1 = conv(p, &format!("{prefix}/conv1"), &a1, [1; 3])?;
    let (h2, bn2) = batch_norm(p, cfg, &format!("{prefix}/bn2"), &c1, mode)?;
    drop(c1);
    let a2 = leaky_relu(&h2, leak);
    drop(h2);
    let mut out = conv(p, &format!("{prefix}/conv2"), &a2, [1; 3])?;
    let projected = p.tensors().contains_key(&format!("{prefix}/proj/w"));
    if projected {
        out.add_assign(&conv(p, &format!("{prefix}/proj"), &x, [1; 3])?);
    } else {
        if x.channels() != out.channels() {
            return Err(NetError::ChannelMismatch {
                layer: format!("{prefix}/skip"),
                expected: out.channels(),
                found: x.channels(),
            });
        }
        out.add_assign(&x);
    }
    let record = match (bn1, bn2) {
        (Some(bn1), Some(bn2)) => Some(UnitRecord { prefix: prefix.to_string(), x, bn1, a1, bn2, a2, projected }),
        _ => None,
    };
    Ok((out, record))
}

/// Run the network on `x` of shape `(batch, d0, d1, d2, 1)`.
pub fn forward<T: Scalar>(
    params: &NetParams<T>,
    cfg: &NetConfig,
    x: &Tensor<T>,
    mode: Mode,
) -> Result<Forward<T>, NetError> {
    cfg.validate()?;
    let [_, d0, d1, d2, ch] = x.dims5()?;
    if ch != 1 {
        return Err(NetError::ChannelMismatch { layer: "input".into(), expected: 1, found: ch });
    }
    let multiple = cfg.spatial_multiple();
    if (0..3).any(|a| [d0, d1, d2][a] % multiple[a] != 0) {
        return Err(NetError::IndivisibleShape { dims: [d0, d1, d2], multiple });
    }
    let train = mode == Mode::Train;

    let mut h = conv(params, "init", x, [1; 3])?;
    let mut scales = Vec::with_capacity(cfg.n_scales);
    let mut outputs = Vec::with_capacity(cfg.n_scales);
    for j in 0..cfg.n_scales {
        let s = format!("s{}", j + 1);
        let mut u = conv(params, &format!("{s}/down"), &h, cfg.strides[j])?;
        let down_in = h;
        let mut units = Vec::new();
        for k in 0..cfg.units_per_scale {
            let (next, rec) = unit_forward(params, cfg, &format!("{s}/u{}", k + 1), u, mode)?;
            units.extend(rec);
            u = next;
        }
        if train {
            scales.push(ScaleRecord { down_in, units });
        }
        outputs.push(u.clone());
        h = u;
    }

    let last = cfg.n_scales - 1;
    let mut score = conv(params, &format!("score/s{}", last + 1), &outputs[last], [1; 3])?;
    for j in (0..last).rev() {
        let mut up = resize(&score, outputs[j].spatial());
        up.add_assign(&conv(params, &format!("score/s{}", j + 1), &outputs[j], [1; 3])?);
        score = up;
    }
    let logits = if score.spatial() == [d0, d1, d2] { score } else { resize(&score, [d0, d1, d2]) };
    let probs = softmax(&logits);
    let cache = Cache {
        mode,
        version: params.version(),
        input: train.then(|| x.clone()),
        scales,
        outputs: if train { outputs } else { Vec::new() },
        probs: train.then(|| probs.clone()),
    };
    Ok(Forward { logits, probs, cache })
}

fn put<T>(g: &mut Gradients<T>, name: &str, w: Tensor<T>, b: Tensor<T>) {
    g.insert(format!("{name}/w"), w);
    g.insert(format!("{name}/b"), b);
}

fn unit_backward<T: Scalar>(
    p: &NetParams<T>,
    cfg: &NetConfig,
    rec: UnitRecord<T>,
    dout: Tensor<T>,
    grads: &mut Gradients<T>,
) -> Result<Tensor<T>, NetError> {
    let leak = scalar::<T>(cfg.leakiness);
    let pre = &rec.prefix;
    let (da2, dw, db) = conv_backward(&rec.a2, p.get(&format!("{pre}/conv2/w"))?, &dout, [1; 3], true);
    put(grads, &format!("{pre}/conv2"), dw, db);
    let dh2 = leaky_relu_backward(&da2.expect("requested"), &rec.a2, leak);
    let gamma2 = p.get(&format!("{pre}/bn2/gamma"))?.data();
    let (dc1, dg, dbeta) = bn_backward(&dh2, &rec.bn2.xhat, &rec.bn2.stats.var, gamma2, cfg.bn_epsilon);
    grads.insert(format!("{pre}/bn2/gamma"), dg);
    grads.insert(format!("{pre}/bn2/beta"), dbeta);
    let (da1, dw, db) = conv_backward(&rec.a1, p.get(&format!("{pre}/conv1/w"))?, &dc1, [1; 3], true);
    put(grads, &format!("{pre}/conv1"), dw, db);
    let dh1 = leaky_relu_backward(&da1.expect("requested"), &rec.a1, leak);
    let gamma1 = p.get(&format!("{pre}/bn1/gamma"))?.data();
    let (mut dx, dg, dbeta) = bn_backward(&dh1, &rec.bn1.xhat, &rec.bn1.stats.var, gamma1, cfg.bn_epsilon);
    grads.insert(format!("{pre}/bn1/gamma"), dg);
    grads.insert(format!("{pre}/bn1/beta"), dbeta);
    if rec.projected {
        let (dskip, dw, db) = conv_backward(&rec.x, p.get(&format!("{pre}/proj/w"))?, &dout, [1; 3], true);
        put(grads, &format!("{pre}/proj"), dw, db);
        dx.add_assign(&dskip.expect("requested"));
    } else {
        dx.add_assign(&dout);
    }
    Ok(dx)
}

/// Gradient of the mean cross-entropy of `cache`'s probabilities against
/// `labels` with respect to every trainable tensor.
///
/// The cache must come from a training forward pass on the current
/// parameter version.
pub fn backward<T: Scalar>(
    params: &NetParams<T>,
    cfg: &NetConfig,
    cache: Cache<T>,
    labels: &Tensor<T>,
) -> Result<Gradients<T>, NetError> {
    if cache.mode != Mode::Train {
        return Err(NetError::StaleCache("cache comes from an inference pass".into()));
    }
    if cache.version != params.version() {
        return Err(NetError::StaleCache(format!(
            "cache recorded at parameter version {}, parameters are at {}",
            cache.version,
            params.version()
        )));
    }
    let Cache { input, scales, outputs, probs, .. } = cache;
    let (input, probs) = (input.expect("train cache"), probs.expect("train cache"));
    let dlogits = super::loss::loss_gradient(&probs, labels)?;
    drop(probs);

    let mut grads = Gradients::new();
    let n = cfg.n_scales;
    let mut dscore = if dlogits.spatial() == outputs[0].spatial() {
        dlogits
    } else {
        resize_adjoint(&dlogits, outputs[0].spatial())
    };
    let mut d_out: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
    for j in 0..n {
        let name = format!("score/s{}", j + 1);
        let (du, dw, db) = conv_backward(&outputs[j], params.get(&format!("{name}/w"))?, &dscore, [1; 3], true);
        put(&mut grads, &name, dw, db);
        d_out[j] = du;
        if j + 1 < n {
            dscore = resize_adjoint(&dscore, outputs[j + 1].spatial());
        }
    }
    drop(outputs);

    let mut g = d_out[n - 1].take().expect("requested");
    for (j, scale) in scales.into_iter().enumerate().rev() {
        let s = format!("s{}", j + 1);
        for rec in scale.units.into_iter().rev() {
            g = unit_backward(params, cfg, rec, g, &mut grads)?;
        }
        let (dprev, dw, db) =
            conv_backward(&scale.down_in, params.get(&format!("{s}/down/w"))?, &g, cfg.strides[j], true);
        put(&mut grads, &format!("{s}/down"), dw, db);
        g = dprev.expect("requested");
        if j > 0 {
            g.add_assign(d_out[j - 1].as_ref().expect("set above"));
        }
    }
    let (_, dw, db) = conv_backward(&input, params.get("init/w")?, &g, [1; 3], false);
    put(&mut grads, "init", dw, db);
    Ok(grads)
}
