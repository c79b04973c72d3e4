//! Layer kernels on channels-last rank-5 tensors. Every reduction runs in a
//! fixed order, so results do not depend on the rayon thread count.

use rayon::prelude::*;

use super::{Scalar, Tensor};

fn c<T: Scalar>(x: f64) -> T {
    T::from(x).expect("f64 -> scalar")
}

/// Output length of a padded strided convolution along one axis.
pub(crate) fn conv_out(len: usize, k: usize, stride: usize) -> usize {
    (len + 2 * (k / 2) - k) / stride + 1
}

/// Input index feeding output `o` at kernel tap `a`, if inside.
#[inline]
fn tap(o: usize, a: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    let i = (o * stride + a).checked_sub(pad)?;
    (i < len).then_some(i)
}

/// 3-D convolution, zero padding `k / 2`, weights `(k, k, k, cin, cout)`.
pub(crate) fn conv_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: [usize; 3]) -> Tensor<T> {
    let [n, d0, d1, d2, cin] = x.dims5().expect("rank 5");
    let k = w.shape()[0];
    let cout = w.shape()[4];
    let pad = k / 2;
    let o = [conv_out(d0, k, stride[0]), conv_out(d1, k, stride[1]), conv_out(d2, k, stride[2])];
    let mut out = Tensor::zeros(vec![n, o[0], o[1], o[2], cout]);
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    out.data_mut().par_chunks_mut(o[1] * o[2] * cout).enumerate().for_each(|(plane, slab)| {
        let (batch, z0) = (plane / o[0], plane % o[0]);
        for z1 in 0..o[1] {
            for z2 in 0..o[2] {
                let acc = &mut slab[(z1 * o[2] + z2) * cout..][..cout];
                acc.copy_from_slice(bd);
                for a in 0..k {
                    let Some(i0) = tap(z0, a, stride[0], pad, d0) else {
                        continue;
                    };
                    for bb in 0..k {
                        let Some(i1) = tap(z1, bb, stride[1], pad, d1) else {
                            continue;
                        };
                        for cc in 0..k {
                            let Some(i2) = tap(z2, cc, stride[2], pad, d2) else {
                                continue;
                            };
                            let xrow = &xd[(((batch * d0 + i0) * d1 + i1) * d2 + i2) * cin..][..cin];
                            let wblk = &wd[((a * k + bb) * k + cc) * cin * cout..][..cin * cout];
                            for (ci, &xv) in xrow.iter().enumerate() {
                                for (acc, &wv) in acc.iter_mut().zip(&wblk[ci * cout..(ci + 1) * cout]) {
                                    *acc = *acc + xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradients of [`conv_forward`]: `(dx, dw, db)`. `dx` is skipped when the
/// input is the network input.
pub(crate) fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: [usize; 3],
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let [n, d0, d1, d2, cin] = x.dims5().expect("rank 5");
    let [_, o0, o1, o2, cout] = dy.dims5().expect("rank 5");
    let k = w.shape()[0];
    let pad = k / 2;
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();

    let dx = need_dx.then(|| {
        let mut dx = Tensor::zeros(x.shape().to_vec());
        dx.data_mut().par_chunks_mut(d1 * d2 * cin).enumerate().for_each(|(plane, slab)| {
            let (batch, i0) = (plane / d0, plane % d0);
            // output index reached from input index i through tap a
            let back = |i: usize, a: usize, s: usize, len: usize| -> Option<usize> {
                let t = (i + pad).checked_sub(a)?;
                (t % s == 0 && t / s < len).then_some(t / s)
            };
            for i1 in 0..d1 {
                for i2 in 0..d2 {
                    let acc = &mut slab[(i1 * d2 + i2) * cin..][..cin];
                    for a in 0..k {
                        let Some(z0) = back(i0, a, stride[0], o0) else {
                            continue;
                        };
                        for bb in 0..k {
                            let Some(z1) = back(i1, bb, stride[1], o1) else {
                                continue;
                            };
                            for cc in 0..k {
                                let Some(z2) = back(i2, cc, stride[2], o2) else {
                                    continue;
                                };
                                let dyrow = &dyd[(((batch * o0 + z0) * o1 + z1) * o2 + z2) * cout..][..cout];
                                let wblk = &wd[((a * k + bb) * k + cc) * cin * cout..][..cin * cout];
                                for (ci, acc) in acc.iter_mut().enumerate() {
                                    let mut s = T::zero();
                                    for (&wv, &g) in wblk[ci * cout..(ci + 1) * cout].iter().zip(dyrow) {
                                        s = s + wv * g;
                                    }
                                    *acc = *acc + s;
                                }
                            }
                        }
                    }
                }
            }
        });
        dx
    });

    // per-plane partial sums, reduced in plane order
    let wlen = k * k * k * cin * cout;
    let partials: Vec<(Vec<T>, Vec<T>)> = (0..n * o0)
        .into_par_iter()
        .map(|plane| {
            let (batch, z0) = (plane / o0, plane % o0);
            let mut dw = vec![T::zero(); wlen];
            let mut db = vec![T::zero(); cout];
            for z1 in 0..o1 {
                for z2 in 0..o2 {
                    let dyrow = &dyd[(((batch * o0 + z0) * o1 + z1) * o2 + z2) * cout..][..cout];
                    for (acc, &g) in db.iter_mut().zip(dyrow) {
                        *acc = *acc + g;
                    }
                    for a in 0..k {
                        let Some(i0) = tap(z0, a, stride[0], pad, d0) else {
                            continue;
                        };
                        for bb in 0..k {
                            let Some(i1) = tap(z1, bb, stride[1], pad, d1) else {
                                continue;
                            };
                            for cc in 0..k {
                                let Some(i2) = tap(z2, cc, stride[2], pad, d2) else {
                                    continue;
                                };
                                let xrow = &xd[(((batch * d0 + i0) * d1 + i1) * d2 + i2) * cin..][..cin];
                                let wblk = &mut dw[((a * k + bb) * k + cc) * cin * cout..][..cin * cout];
                                for (ci, &xv) in xrow.iter().enumerate() {
                                    for (acc, &g) in wblk[ci * cout..(ci + 1) * cout].iter_mut().zip(dyrow) {
                                        *acc = *acc + xv * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            (dw, db)
        })
        .collect();
    let mut dw = Tensor::zeros(w.shape().to_vec());
    let mut db = Tensor::zeros(vec![cout]);
    for (pw, pb) in partials {
        for (a, b) in dw.data_mut().iter_mut().zip(pw) {
            *a = *a + b;
        }
        for (a, b) in db.data_mut().iter_mut().zip(pb) {
            *a = *a + b;
        }
    }
    (dx, dw, db)
}

/// Per-channel batch statistics over batch and space, in f64.
#[derive(Debug, Clone)]
pub(crate) struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub(crate) fn channel_stats<T: Scalar>(x: &Tensor<T>) -> BnStats {
    let ch = x.channels();
    let count = (x.len() / ch) as f64;
    let mut mean = vec![0.0; ch];
    for row in x.data().chunks_exact(ch) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v.to_f64().expect("finite");
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; ch];
    for row in x.data().chunks_exact(ch) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v.to_f64().expect("finite") - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= count);
    BnStats { mean, var }
}

/// `y = gamma * (x - mean) / sqrt(var + eps) + beta`; returns `(y, xhat)`.
pub(crate) fn bn_apply<T: Scalar>(
    x: &Tensor<T>,
    mean: &[f64],
    var: &[f64],
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Tensor<T>, Tensor<T>) {
    let ch = x.channels();
    let inv: Vec<T> = var.iter().map(|v| c(1.0 / (v + eps).sqrt())).collect();
    let mean: Vec<T> = mean.iter().map(|&m| c(m)).collect();
    let mut xhat = Tensor::zeros(x.shape().to_vec());
    let mut y = Tensor::zeros(x.shape().to_vec());
    for ((xr, hr), yr) in
        x.data().chunks_exact(ch).zip(xhat.data_mut().chunks_exact_mut(ch)).zip(y.data_mut().chunks_exact_mut(ch))
    {
        for i in 0..ch {
            let h = (xr[i] - mean[i]) * inv[i];
            hr[i] = h;
            yr[i] = gamma[i] * h + beta[i];
        }
    }
    (y, xhat)
}

/// Training-mode batch-norm backward: `(dx, dgamma, dbeta)`.
pub(crate) fn bn_backward<T: Scalar>(
    dy: &Tensor<T>,
    xhat: &Tensor<T>,
    var: &[f64],
    gamma: &[T],
    eps: f64,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let ch = dy.channels();
    let count = (dy.len() / ch) as f64;
    let mut sum_dy = vec![0.0f64; ch];
    let mut sum_dy_xhat = vec![0.0f64; ch];
    for (g, h) in dy.data().chunks_exact(ch).zip(xhat.data().chunks_exact(ch)) {
        for i in 0..ch {
            let gi = g[i].to_f64().expect("finite");
            sum_dy[i] += gi;
            sum_dy_xhat[i] += gi * h[i].to_f64().expect("finite");
        }
    }
    let mean_dy: Vec<T> = sum_dy.iter().map(|s| c(s / count)).collect();
    let mean_dy_xhat: Vec<T> = sum_dy_xhat.iter().map(|s| c(s / count)).collect();
    let scale: Vec<T> = (0..ch).map(|i| gamma[i] * c(1.0 / (var[i] + eps).sqrt())).collect();
    let mut dx = Tensor::zeros(dy.shape().to_vec());
    for ((g, h), d) in
        dy.data().chunks_exact(ch).zip(xhat.data().chunks_exact(ch)).zip(dx.data_mut().chunks_exact_mut(ch))
    {
        for i in 0..ch {
            d[i] = scale[i] * (g[i] - mean_dy[i] - h[i] * mean_dy_xhat[i]);
        }
    }
    let dgamma = Tensor::new(vec![ch], sum_dy_xhat.iter().map(|&s| c(s)).collect()).expect("ch > 0");
    let dbeta = Tensor::new(vec![ch], sum_dy.iter().map(|&s| c(s)).collect()).expect("ch > 0");
    (dx, dgamma, dbeta)
}

pub(crate) fn leaky_relu<T: Scalar>(x: &Tensor<T>, leak: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * leak })
}

/// Backward through leaky ReLU given its output (same sign as its input).
pub(crate) fn leaky_relu_backward<T: Scalar>(dy: &Tensor<T>, y: &Tensor<T>, leak: T) -> Tensor<T> {
    let data = dy.data().iter().zip(y.data()).map(|(&g, &v)| if v > T::zero() { g } else { g * leak }).collect();
    Tensor::new(dy.shape().to_vec(), data).expect("same shape")
}

/// Linear interpolation taps `(lo, hi, weight_of_hi)` resizing `from` samples
/// to `to`, sample-centre aligned (align-corners false), edge-clamped.
fn resize_taps(from: usize, to: usize) -> Vec<(usize, usize, f64)> {
    (0..to)
        .map(|o| {
            let src = ((o as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(from - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Resize one spatial axis (1..=3 of the rank-5 layout).
fn resize_axis<T: Scalar>(x: &Tensor<T>, axis: usize, to: usize) -> Tensor<T> {
    let shape = x.shape();
    let from = shape[axis];
    if from == to {
        return x.clone();
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let taps = resize_taps(from, to);
    let mut new_shape = shape.to_vec();
    new_shape[axis] = to;
    let mut out = Tensor::zeros(new_shape);
    let xd = x.data();
    let od = out.data_mut();
    for o in 0..outer {
        for (t, &(lo, hi, w)) in taps.iter().enumerate() {
            let (w1, w0) = (c::<T>(w), c::<T>(1.0 - w));
            let dst = &mut od[(o * to + t) * inner..][..inner];
            let a = &xd[(o * from + lo) * inner..][..inner];
            let b = &xd[(o * from + hi) * inner..][..inner];
            for i in 0..inner {
                dst[i] = w0 * a[i] + w1 * b[i];
            }
        }
    }
    out
}

/// Adjoint of [`resize_axis`].
fn resize_axis_adjoint<T: Scalar>(dy: &Tensor<T>, axis: usize, from: usize) -> Tensor<T> {
    let shape = dy.shape();
    let to = shape[axis];
    if from == to {
        return dy.clone();
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let taps = resize_taps(from, to);
    let mut new_shape = shape.to_vec();
    new_shape[axis] = from;
    let mut out = Tensor::zeros(new_shape);
    let gd = dy.data();
    let od = out.data_mut();
    for o in 0..outer {
        for (t, &(lo, hi, w)) in taps.iter().enumerate() {
            let (w1, w0) = (c::<T>(w), c::<T>(1.0 - w));
            let src = &gd[(o * to + t) * inner..][..inner];
            for i in 0..inner {
                let lo_i = (o * from + lo) * inner + i;
                od[lo_i] = od[lo_i] + w0 * src[i];
                let hi_i = (o * from + hi) * inner + i;
                od[hi_i] = od[hi_i] + w1 * src[i];
            }
        }
    }
    out
}

/// Trilinear resize of the spatial axes to `to`.
pub(crate) fn resize<T: Scalar>(x: &Tensor<T>, to: [usize; 3]) -> Tensor<T> {
    let y = resize_axis(x, 1, to[0]);
    let y = resize_axis(&y, 2, to[1]);
    resize_axis(&y, 3, to[2])
}

pub(crate) fn resize_adjoint<T: Scalar>(dy: &Tensor<T>, from: [usize; 3]) -> Tensor<T> {
    let g = resize_axis_adjoint(dy, 3, from[2]);
    let g = resize_axis_adjoint(&g, 2, from[1]);
    resize_axis_adjoint(&g, 1, from[0])
}

/// Softmax over the channel axis.
pub(crate) fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let ch = logits.channels();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(ch) {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}
