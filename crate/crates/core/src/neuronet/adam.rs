use std::collections::BTreeMap;

use super::params::ParamKind;
use super::{AdamConfig, Gradients, NetError, NetParams, Scalar, Tensor};

/// First and second moment estimates per trainable tensor, and the step count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState<T> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState { m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }
}

/// One bias-corrected Adam update of every trainable tensor.
pub fn optimizer_step<T: Scalar>(
    params: &mut NetParams<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    hyper: &AdamConfig,
) -> Result<(), NetError> {
    let names: Vec<String> = params.names().filter(|n| ParamKind::of(n).trainable()).map(str::to_string).collect();
    for name in &names {
        let g = grads.get(name).ok_or_else(|| NetError::ShapeMismatch(format!("no gradient for `{name}`")))?;
        let p = params.get(name)?;
        if g.shape() != p.shape() {
            return Err(NetError::ShapeMismatch(format!(
                "gradient for `{name}` has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let f = |x: f64| T::from(x).expect("finite");
    let (b1, b2) = (f(hyper.beta1), f(hyper.beta2));
    let (one_b1, one_b2) = (f(1.0 - hyper.beta1), f(1.0 - hyper.beta2));
    let c1 = f(1.0 / (1.0 - hyper.beta1.powi(t)));
    let c2 = f(1.0 / (1.0 - hyper.beta2.powi(t)));
    let (lr, eps) = (f(hyper.lr), f(hyper.eps));
    for name in names {
        let g = &grads[&name];
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        let p = params.get_mut(&name).expect("checked above");
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            *p = *p - lr * (*m * c1) / ((*v * c2).sqrt() + eps);
        }
    }
    params.bump_version();
    Ok(())
}
