use super::{NetError, Scalar, Tensor};

/// Probabilities are clamped here before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    /// Mean over voxels of the per-voxel cross-entropy.
    pub value: f64,
    pub per_voxel: Vec<f64>,
}

/// Target distribution at each voxel. Labels carry either one channel of
/// class ids or one channel per class (one-hot or soft targets).
fn targets<'a, T: Scalar>(probs: &Tensor<T>, labels: &'a Tensor<T>) -> Result<Targets<'a, T>, NetError> {
    let p = probs.dims5()?;
    let l = labels.dims5()?;
    if p[..4] != l[..4] || (l[4] != 1 && l[4] != p[4]) {
        return Err(NetError::ShapeMismatch(format!("probabilities {p:?} vs labels {l:?}")));
    }
    if l[4] == 1 {
        let ids = labels
            .data()
            .iter()
            .map(|v| {
                let x = v.to_f64().expect("finite");
                if x >= 0.0 && x.fract() == 0.0 && (x as usize) < p[4] {
                    Ok(x as usize)
                } else {
                    Err(NetError::ShapeMismatch(format!("label {x} is not a class id below {}", p[4])))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Targets::Ids(ids))
    } else {
        Ok(Targets::Dense(labels.data()))
    }
}

enum Targets<'a, T> {
    Ids(Vec<usize>),
    Dense(&'a [T]),
}

/// Categorical cross-entropy `mean_v( -sum_c y_c(v) ln p_c(v) )`.
pub fn loss<T: Scalar>(probs: &Tensor<T>, labels: &Tensor<T>) -> Result<LossValue, NetError> {
    let ch = probs.channels();
    let targets = targets(probs, labels)?;
    let per_voxel: Vec<f64> = probs
        .data()
        .chunks_exact(ch)
        .enumerate()
        .map(|(v, row)| {
            let nll = |c: usize| -row[c].to_f64().expect("finite").max(PROB_FLOOR).ln();
            match &targets {
                Targets::Ids(ids) => nll(ids[v]),
                Targets::Dense(y) => (0..ch)
                    .map(|c| {
                        let w = y[v * ch + c].to_f64().expect("finite");
                        if w == 0.0 {
                            0.0
                        } else {
                            w * nll(c)
                        }
                    })
                    .sum(),
            }
        })
        .collect();
    let value = per_voxel.iter().sum::<f64>() / per_voxel.len() as f64;
    Ok(LossValue { value, per_voxel })
}

/// Gradient of [`loss`] with respect to the logits feeding the softmax:
/// `(p - y) / N` for targets summing to one.
pub fn loss_gradient<T: Scalar>(probs: &Tensor<T>, labels: &Tensor<T>) -> Result<Tensor<T>, NetError> {
    let ch = probs.channels();
    let targets = targets(probs, labels)?;
    let inv_n = T::from(1.0 / (probs.len() / ch) as f64).expect("finite");
    let mut g = probs.clone();
    for (v, row) in g.data_mut().chunks_exact_mut(ch).enumerate() {
        match &targets {
            Targets::Ids(ids) => row[ids[v]] = row[ids[v]] - T::one(),
            Targets::Dense(y) => {
                for c in 0..ch {
                    row[c] = row[c] - y[v * ch + c];
                }
            }
        }
        for x in row.iter_mut() {
            *x = *x * inv_n;
        }
    }
    Ok(g)
}
