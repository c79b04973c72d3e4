//! Multi-resolution rigid registration by finite-difference gradient descent.

use nalgebra::Vector4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::volio::{Volume, VolumeKind};

use super::resample::{gaussian_smooth, shrink, trilinear, voxel_map};
use super::{Metric, RegisterError, RegistrationConfig, RigidTransform};

/// Outcome of [`register_rigid`].
#[derive(Debug, Clone)]
pub struct Registration {
    pub transform: RigidTransform,
    /// Metric at the finest level for the returned transform.
    pub metric: f64,
    /// Metric at the finest level for the starting transform.
    pub initial_metric: f64,
    pub iterations: Vec<usize>,
}

/// Floor on samples per level; coarse levels are otherwise too sparse for a
/// stable histogram.
const MIN_SAMPLES: usize = 4096;

/// One pyramid level: sampled fixed-space points and the moving image.
struct Level {
    points: Vec<[f64; 3]>,
    fixed_values: Vec<f64>,
    fixed_range: (f64, f64),
    moving: Volume,
    moving_range: (f64, f64),
    min_spacing: f64,
}

impl Level {
    fn build(fixed: &Volume, moving: &Volume, shrink_factor: usize, sigma: f64, fraction: f64, seed: u64) -> Level {
        let f = shrink(&gaussian_smooth(fixed, sigma), shrink_factor);
        let m = shrink(&gaussian_smooth(moving, sigma), shrink_factor);
        let n = f.len();
        let count = ((n as f64 * fraction).ceil() as usize).max(MIN_SAMPLES).min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, n, count).into_vec();
        idx.sort_unstable();
        let dims = f.dims();
        let [_, d1, d2] = dims;
        let mut points = Vec::with_capacity(count);
        let mut fixed_values = Vec::with_capacity(count);
        for i in idx {
            // Jitter off the voxel lattice: lattice-aligned samples make the
            // metric kink at every integer shift, and samples sitting exactly
            // on the border all leave the overlap at once. Reflection keeps
            // jittered points inside the grid.
            let v = [i / (d1 * d2), (i / d2) % d1, i % d2];
            let p: [f64; 3] = std::array::from_fn(|a| {
                let hi = (dims[a] - 1) as f64;
                let x = v[a] as f64 + rng.random_range(-0.5..0.5);
                let x = if x < 0.0 {
                    -x
                } else if x > hi {
                    2.0 * hi - x
                } else {
                    x
                };
                x.clamp(0.0, hi)
            });
            points.push(f.grid().voxel_to_world(p));
            fixed_values.push(trilinear(f.data(), dims, p).expect("clamped inside"));
        }
        let fixed_range = f.min_max();
        let moving_range = m.min_max();
        let min_spacing = f.spacing().iter().cloned().fold(f64::INFINITY, f64::min);
        Level { points, fixed_values, fixed_range, moving: m, moving_range, min_spacing }
    }

    /// Moving-image samples at the transformed points. Outside the moving
    /// grid a sample is `None`, or with `extend` the value at the nearest
    /// border point.
    fn sample(&self, t: &RigidTransform, extend: bool) -> Result<Vec<Option<f64>>, RegisterError> {
        // world -> moving voxel
        let inv = self.moving.affine().try_inverse().ok_or(RegisterError::SingularAffine)?;
        let m = inv * t.matrix();
        let dims = self.moving.dims();
        let data = self.moving.data();
        Ok(self
            .points
            .iter()
            .map(|p| {
                let q = m * Vector4::new(p[0], p[1], p[2], 1.0);
                let mut q = [q[0], q[1], q[2]];
                if extend {
                    for a in 0..3 {
                        q[a] = q[a].clamp(0.0, (dims[a] - 1) as f64);
                    }
                }
                trilinear(data, dims, q)
            })
            .collect())
    }

    fn overlap(&self, t: &RigidTransform) -> Result<f64, RegisterError> {
        let s = self.sample(t, false)?;
        Ok(s.iter().filter(|x| x.is_some()).count() as f64 / s.len() as f64)
    }

    /// Mean squares counts only samples inside the moving grid. Mutual
    /// information uses border extension instead, so the sample set does not
    /// change with the transform; a shrinking overlap otherwise biases it.
    fn metric(&self, metric: Metric, t: &RigidTransform) -> Result<f64, RegisterError> {
        Ok(match metric {
            Metric::MeanSquares => mean_squares(&self.fixed_values, &self.sample(t, false)?),
            Metric::MutualInformation { bins } => -mutual_information(
                &self.fixed_values,
                self.fixed_range,
                &self.sample(t, true)?,
                self.moving_range,
                bins,
            ),
        })
    }
}

fn mean_squares(fixed: &[f64], moving: &[Option<f64>]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (f, m) in fixed.iter().zip(moving) {
        if let Some(m) = m {
            sum += (f - m) * (f - m);
            n += 1;
        }
    }
    if n == 0 {
        f64::INFINITY
    } else {
        sum / n as f64
    }
}

/// Continuous bin position split into (lower bin, weight of upper bin).
#[inline]
fn parzen(x: f64, (lo, hi): (f64, f64), bins: usize) -> (usize, f64) {
    let u = if hi > lo { ((x - lo) / (hi - lo)).clamp(0.0, 1.0) * (bins - 1) as f64 } else { 0.0 };
    let b = (u.floor() as usize).min(bins - 2);
    (b, u - b as f64)
}

/// Mutual information (nats) from a joint histogram with linear Parzen
/// windowing on both axes.
pub fn mutual_information(
    fixed: &[f64],
    fixed_range: (f64, f64),
    moving: &[Option<f64>],
    moving_range: (f64, f64),
    bins: usize,
) -> f64 {
    let mut joint = vec![0.0f64; bins * bins];
    let mut total = 0.0;
    for (f, m) in fixed.iter().zip(moving) {
        let Some(m) = m else { continue };
        let (fb, fw) = parzen(*f, fixed_range, bins);
        let (mb, mw) = parzen(*m, moving_range, bins);
        joint[fb * bins + mb] += (1.0 - fw) * (1.0 - mw);
        joint[fb * bins + mb + 1] += (1.0 - fw) * mw;
        joint[(fb + 1) * bins + mb] += fw * (1.0 - mw);
        joint[(fb + 1) * bins + mb + 1] += fw * mw;
        total += 1.0;
    }
    if total == 0.0 {
        return 0.0;
    }
    let mut pf = vec![0.0; bins];
    let mut pm = vec![0.0; bins];
    for a in 0..bins {
        for b in 0..bins {
            let p = joint[a * bins + b] / total;
            pf[a] += p;
            pm[b] += p;
        }
    }
    let mut mi = 0.0;
    for a in 0..bins {
        for b in 0..bins {
            let p = joint[a * bins + b] / total;
            if p > 0.0 {
                mi += p * (p / (pf[a] * pm[b])).ln();
            }
        }
    }
    mi
}

/// Optimisation coordinates: rotations scaled by the fixed-volume radius so
/// that one unit in any coordinate moves peripheral points by about 1 mm.
#[derive(Clone, Copy)]
struct Params {
    q: [f64; 6],
    radius: f64,
    center: [f64; 3],
}

impl Params {
    fn from_transform(t: &RigidTransform, radius: f64) -> Self {
        let e = t.euler_zyx;
        let tr = t.translation;
        Params { q: [e[0] * radius, e[1] * radius, e[2] * radius, tr[0], tr[1], tr[2]], radius, center: t.center }
    }

    fn transform(&self) -> RigidTransform {
        let q = self.q;
        RigidTransform {
            euler_zyx: [q[0] / self.radius, q[1] / self.radius, q[2] / self.radius],
            translation: [q[3], q[4], q[5]],
            center: self.center,
        }
    }
}

fn check_input(v: &Volume, what: &str) -> Result<(), RegisterError> {
    if v.kind() != VolumeKind::Intensity {
        return Err(RegisterError::DegenerateInput(format!("{what} volume is not an intensity volume")));
    }
    let (lo, hi) = v.min_max();
    if !(hi > lo) {
        return Err(RegisterError::DegenerateInput(format!("{what} volume is constant ({lo})")));
    }
    Ok(())
}

/// Rigidly register `moving` onto `fixed`.
///
/// The returned transform maps fixed-space points into moving space, so
/// `resample(moving, &t, fixed.grid(), ..)` brings `moving` onto the fixed grid.
/// The rotation centre is the fixed grid's centre and the search starts from
/// the translation that aligns the two grid centres.
pub fn register_rigid(
    moving: &Volume,
    fixed: &Volume,
    cfg: &RegistrationConfig,
) -> Result<Registration, RegisterError> {
    cfg.validate()?;
    check_input(moving, "moving")?;
    check_input(fixed, "fixed")?;
    voxel_map(moving.grid(), &RigidTransform::identity(), fixed.grid())?;

    let center = fixed.grid().world_center();
    let mc = moving.grid().world_center();
    let start = RigidTransform::new([0.0; 3], [mc[0] - center[0], mc[1] - center[1], mc[2] - center[2]], center);
    let extent: f64 = (0..3).map(|a| (fixed.dims()[a] as f64 * fixed.spacing()[a] / 2.0).powi(2)).sum::<f64>().sqrt();
    let radius = extent.max(1.0);

    let mut params = Params::from_transform(&start, radius);
    let mut iterations = Vec::new();
    let mut finest = None;
    for (lvl, (&factor, &sigma)) in cfg.shrink_factors.iter().zip(&cfg.smoothing_sigmas).enumerate() {
        let level =
            Level::build(fixed, moving, factor, sigma, cfg.sampling_fraction, cfg.seed.wrapping_add(lvl as u64));
        if lvl == 0 {
            let overlap = level.overlap(&params.transform())?;
            if overlap < 0.01 {
                return Err(RegisterError::NoOverlap { fraction: overlap });
            }
        }
        let iters = descend(&level, cfg, &mut params)?;
        iterations.push(iters);
        finest = Some(level);
    }
    let finest = finest.expect("at least one level");
    let initial_metric = finest.metric(cfg.metric, &start)?;
    let mut transform = params.transform();
    let mut metric = finest.metric(cfg.metric, &transform)?;
    if !(metric <= initial_metric) {
        transform = start;
        metric = initial_metric;
    }
    Ok(Registration { transform, metric, initial_metric, iterations })
}

/// Central-difference gradient in optimisation coordinates.
fn gradient(
    eval: &impl Fn(&Params) -> Result<f64, RegisterError>,
    params: &Params,
    deltas: &[f64; 6],
) -> Result<[f64; 6], RegisterError> {
    let mut grad = [0.0; 6];
    for i in 0..6 {
        let mut plus = *params;
        let mut minus = *params;
        plus.q[i] += deltas[i];
        minus.q[i] -= deltas[i];
        grad[i] = (eval(&plus)? - eval(&minus)?) / (2.0 * deltas[i]);
    }
    Ok(grad)
}

fn dot(a: &[f64; 6], b: &[f64; 6]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One pyramid level of descent. Steps have a fixed length along the search
/// direction (Polak-Ribière conjugate gradient, reset to steepest descent
/// after a rejected step); the length halves whenever the metric fails to
/// decrease.
fn descend(level: &Level, cfg: &RegistrationConfig, params: &mut Params) -> Result<usize, RegisterError> {
    let eval = |p: &Params| level.metric(cfg.metric, &p.transform());
    let rot_delta = 1e-3 * params.radius;
    let trans_delta = 0.1 * level.min_spacing;
    let deltas = [rot_delta, rot_delta, rot_delta, trans_delta, trans_delta, trans_delta];
    let step0 = cfg.step_size * level.min_spacing;
    let min_step = step0 * 1e-3;
    let mut step = step0;
    let mut value = eval(params)?;
    let mut grad = gradient(&eval, params, &deltas)?;
    let mut dir = grad.map(|g| -g);
    let mut iters = 0;
    while iters < cfg.max_iterations {
        iters += 1;
        let norm = dot(&dir, &dir).sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            break;
        }
        let mut trial = *params;
        for i in 0..6 {
            trial.q[i] += step * dir[i] / norm;
        }
        let next = eval(&trial)?;
        if next < value {
            let improvement = (value - next) / value.abs().max(1e-12);
            *params = trial;
            value = next;
            if improvement < cfg.tolerance {
                break;
            }
            let new_grad = gradient(&eval, params, &deltas)?;
            let diff: [f64; 6] = std::array::from_fn(|i| new_grad[i] - grad[i]);
            let beta = (dot(&new_grad, &diff) / dot(&grad, &grad).max(f64::MIN_POSITIVE)).max(0.0);
            dir = std::array::from_fn(|i| -new_grad[i] + beta * dir[i]);
            grad = new_grad;
        } else {
            step *= 0.5;
            dir = grad.map(|g| -g);
            if step < min_step {
                break;
            }
        }
    }
    Ok(iters)
}
