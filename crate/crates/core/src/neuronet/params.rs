use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::load_checkpoint;
use super::config::KERNEL;
use super::net::Cache;
use super::{Init, NetConfig, NetError, Scalar, Tensor};

/// Role of a named parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn of(name: &str) -> ParamKind {
        match name.rsplit('/').next() {
            Some("w") => ParamKind::Weight,
            Some("b") => ParamKind::Bias,
            Some("gamma") => ParamKind::Gamma,
            Some("beta") => ParamKind::Beta,
            Some("mean") => ParamKind::RunningMean,
            _ => ParamKind::RunningVar,
        }
    }

    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

/// Named parameter tensors plus a version counter that the optimizer bumps,
/// so a forward cache can be checked against the parameters it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
    version: u64,
}

/// Name and shape of every tensor the forward graph reads.
pub fn param_layout(cfg: &NetConfig) -> Vec<(String, Vec<usize>)> {
    let k = KERNEL;
    let mut out = Vec::new();
    let conv = |out: &mut Vec<(String, Vec<usize>)>, name: &str, k: usize, cin: usize, cout: usize| {
        out.push((format!("{name}/w"), vec![k, k, k, cin, cout]));
        out.push((format!("{name}/b"), vec![cout]));
    };
    let bn = |out: &mut Vec<(String, Vec<usize>)>, name: &str, ch: usize| {
        for field in ["gamma", "beta", "mean", "var"] {
            out.push((format!("{name}/{field}"), vec![ch]));
        }
    };
    conv(&mut out, "init", k, 1, cfg.filters(0));
    let mut ch = cfg.filters(0);
    for j in 0..cfg.n_scales {
        let s = format!("s{}", j + 1);
        conv(&mut out, &format!("{s}/down"), k, ch, ch);
        for u in 0..cfg.units_per_scale {
            let unit = format!("{s}/u{}", u + 1);
            let cout = cfg.filters(j);
            bn(&mut out, &format!("{unit}/bn1"), ch);
            conv(&mut out, &format!("{unit}/conv1"), k, ch, cout);
            bn(&mut out, &format!("{unit}/bn2"), cout);
            conv(&mut out, &format!("{unit}/conv2"), k, cout, cout);
            if ch != cout {
                conv(&mut out, &format!("{unit}/proj"), 1, ch, cout);
            }
            ch = cout;
        }
        conv(&mut out, &format!("score/{s}"), 1, ch, cfg.n_classes);
    }
    out
}

impl<T: Scalar> NetParams<T> {
    pub fn from_tensors(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        NetParams { tensors, version: 0 }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, NetError> {
        self.tensors.get(name).ok_or_else(|| NetError::BadCheckpoint(format!("missing tensor `{name}`")))
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    /// Total number of scalars across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> NetParams<U> {
        NetParams { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(), version: self.version }
    }

    /// Check that every tensor of `cfg`'s graph is present with its shape.
    pub fn check_layout(&self, cfg: &NetConfig) -> Result<(), NetError> {
        for (name, shape) in param_layout(cfg) {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(NetError::ShapeMismatch(format!(
                    "`{name}` has shape {:?}, configuration needs {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Fold the batch statistics recorded by a training forward pass into
    /// the running statistics: `running = m * running + (1 - m) * batch`.
    pub fn absorb_batch_stats(&mut self, cache: &Cache<T>, momentum: f64) -> Result<(), NetError> {
        let m = T::from(momentum).expect("finite");
        let keep = T::one() - m;
        for (name, stats) in cache.batch_stats() {
            for (field, values) in [("mean", &stats.mean), ("var", &stats.var)] {
                let key = format!("{name}/{field}");
                let t = self.get_mut(&key).ok_or_else(|| NetError::BadCheckpoint(format!("missing tensor `{key}`")))?;
                for (r, &b) in t.data_mut().iter_mut().zip(values) {
                    *r = m * *r + keep * T::from(b).expect("finite");
                }
            }
        }
        Ok(())
    }
}

/// Parameters for `cfg`: Glorot-uniform kernels, zero biases, unit gains,
/// zero shifts, running statistics `(0, 1)`; or a shape-checked copy of a
/// checkpoint.
pub fn init_params(cfg: &NetConfig, seed: u64, init: &Init) -> Result<NetParams<f32>, NetError> {
    cfg.validate()?;
    match init {
        Init::Uniform => Ok(uniform_params(cfg, seed)),
        Init::FromCheckpoint(path) => {
            let (params, _) = load_checkpoint(path)?;
            params.check_layout(cfg)?;
            let keep: BTreeMap<String, Tensor<f32>> = param_layout(cfg)
                .into_iter()
                .map(|(name, _)| {
                    let t = params.tensors[&name].clone();
                    (name, t)
                })
                .collect();
            Ok(NetParams::from_tensors(keep))
        }
    }
}

/// Uniform initialisation in any precision. Draws happen in f64 in layout
/// order, so f32 and f64 networks with one seed agree up to rounding.
pub fn uniform_params<T: Scalar>(cfg: &NetConfig, seed: u64) -> NetParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = param_layout(cfg)
        .into_iter()
        .map(|(name, shape)| {
            let t = match ParamKind::of(&name) {
                ParamKind::Weight => {
                    let receptive: usize = shape[..3].iter().product();
                    let (fan_in, fan_out) = (receptive * shape[3], receptive * shape[4]);
                    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| T::from(rng.random_range(-bound..bound)).expect("finite")).collect();
                    Tensor::new(shape, data).expect("layout shape")
                }
                ParamKind::Gamma | ParamKind::RunningVar => Tensor::filled(shape, T::one()),
                _ => Tensor::zeros(shape),
            };
            (name, t)
        })
        .collect();
    NetParams::from_tensors(tensors)
}
