//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use hnrn::geom::Vec2;
use hnrn::hmm::{GaussianHmm, ObservationSeq};
use hnrn::neural::{Activation, Mlp};
use hnrn::orca::HalfPlane;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Largest signed violation (negative when strictly inside every half-plane).
pub fn signed_max_violation(constraints: &[HalfPlane], v: Vec2) -> f64 {
    constraints.iter().map(|c| (c.point - v).dot(c.normal)).fold(f64::NEG_INFINITY, f64::max)
}

/// Minimizes `objective` over the disc of `radius` on a coarse grid, then refines
/// around the incumbent down to `resolution`. Only valid for convex objectives.
pub fn grid_minimize(radius: f64, resolution: f64, objective: impl Fn(Vec2) -> f64) -> (Vec2, f64) {
    let mut step = radius / 100.0;
    let mut center = Vec2::ZERO;
    let mut half = radius;
    let mut best = (Vec2::ZERO, f64::INFINITY);
    loop {
        let n = (half / step).ceil() as i64;
        for i in -n..=n {
            for j in -n..=n {
                let v = center + Vec2::new(i as f64 * step, j as f64 * step);
                if v.length() > radius {
                    continue;
                }
                let f = objective(v);
                if f < best.1 {
                    best = (v, f);
                }
            }
        }
        if step <= resolution {
            return best;
        }
        center = best.0;
        half = 20.0 * step;
        step = (step / 10.0).max(resolution);
    }
}

/// Feasible case: nearest admissible disc point to `preferred`. Returns `None` when the
/// grid finds no admissible point. Refined to 1e-5 because thin admissible strips make
/// the distance nearly flat along the strip.
pub fn lp_oracle_feasible(constraints: &[HalfPlane], preferred: Vec2, radius: f64) -> Option<Vec2> {
    let (v, f) = grid_minimize(radius, 1e-5, |v| {
        if signed_max_violation(constraints, v) <= 0.0 {
            (v - preferred).length()
        } else {
            1e6 + signed_max_violation(constraints, v)
        }
    });
    (f < 1e6).then_some(v)
}

/// Disc point minimizing the largest violation.
pub fn lp_oracle_minmax(constraints: &[HalfPlane], radius: f64) -> (Vec2, f64) {
    grid_minimize(radius, 1e-5, |v| signed_max_violation(constraints, v))
}

pub fn random_half_plane(r: &mut ChaCha8Rng, spread: f64) -> HalfPlane {
    let angle: f64 = r.random_range(0.0..std::f64::consts::TAU);
    HalfPlane {
        point: Vec2::new(r.random_range(-spread..spread), r.random_range(-spread..spread)),
        normal: Vec2::from_angle(angle),
    }
}

/// Filtered posterior at the last frame by summing over every hidden path.
pub fn enumerate_posterior(hmm: &GaussianHmm, frames: &[Vec<f64>]) -> Vec<f64> {
    let k = hmm.initial.len();
    let t_len = frames.len();
    let density = |s: usize, o: &[f64]| -> f64 {
        o.iter()
            .enumerate()
            .map(|(d, &x)| {
                let m = hmm.means[[s, d]];
                let v = hmm.variances[[s, d]];
                (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
            })
            .product()
    };
    let mut mass = vec![0.0; k];
    let total_paths = k.pow(t_len as u32);
    for code in 0..total_paths {
        let mut path = Vec::with_capacity(t_len);
        let mut c = code;
        for _ in 0..t_len {
            path.push(c % k);
            c /= k;
        }
        let mut p = hmm.initial[path[0]] * density(path[0], &frames[0]);
        for t in 1..t_len {
            p *= hmm.transition[[path[t - 1], path[t]]] * density(path[t], &frames[t]);
        }
        mass[path[t_len - 1]] += p;
    }
    let z: f64 = mass.iter().sum();
    mass.iter().map(|m| m / z).collect()
}

/// Random row-stochastic matrix with rows bounded away from zero.
pub fn random_stochastic(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut a = Array2::zeros((rows, cols));
    for i in 0..rows {
        let row: Vec<f64> = (0..cols).map(|_| r.random_range(0.05..1.0)).collect();
        let s: f64 = row.iter().sum();
        for j in 0..cols {
            a[[i, j]] = row[j] / s;
        }
    }
    a
}

/// Central-difference gradient of `loss(mlp)` with respect to every parameter, in
/// the order of `Mlp::params`.
pub fn numeric_gradient(mlp: &Mlp, h: f64, loss: impl Fn(&Mlp) -> f64) -> Vec<f64> {
    let n = mlp.param_count();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut plus = mlp.clone();
        *plus.params_mut().nth(i).unwrap() += h;
        let mut minus = mlp.clone();
        *minus.params_mut().nth(i).unwrap() -= h;
        out.push((loss(&plus) - loss(&minus)) / (2.0 * h));
    }
    out
}

/// Relative error with an absolute floor, so near-zero gradients are not over-penalized.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Random network with at most 1000 parameters and one to three hidden layers.
pub fn random_net(r: &mut rand_chacha::ChaCha8Rng, output: Activation) -> Mlp {
    loop {
        let depth = r.random_range(1..=3);
        let mut dims = vec![r.random_range(1..=8)];
        for _ in 0..depth {
            dims.push(r.random_range(2..=16));
        }
        dims.push(r.random_range(1..=3));
        let net = Mlp::seeded(&dims, output, 1.0, r.random()).unwrap();
        if net.param_count() <= 1000 {
            return net;
        }
    }
}

/// Max relative error between analytic and central-difference parameter and input
/// gradients of `sum(u * net(x))` for random `x` and `u`.
pub fn gradient_check_error(net: &Mlp, r: &mut ChaCha8Rng) -> f64 {
    let dims = net.layer_dims();
    let x = Array2::from_shape_fn((3, dims[0]), |_| r.random_range(-1.0..1.0));
    let u = Array2::from_shape_fn((3, *dims.last().unwrap()), |_| r.random_range(-1.0..1.0));
    let weighted = |m: &Mlp, x: &Array2<f64>| (m.forward_batch(x.view()).unwrap() * &u).sum();
    let cache = net.forward_cached(x.view()).unwrap();
    let (grads, d_input) = net.backward(&cache, u.view()).unwrap();
    let numeric = numeric_gradient(net, 1e-6, |m| weighted(m, &x));
    let mut worst = grads.iter().zip(&numeric).map(|(a, n)| relative_error(*a, *n)).fold(0.0, f64::max);
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let mut xp = x.clone();
            xp[[i, j]] += 1e-6;
            let mut xm = x.clone();
            xm[[i, j]] -= 1e-6;
            let n = (weighted(net, &xp) - weighted(net, &xm)) / 2e-6;
            worst = worst.max(relative_error(d_input[[i, j]], n));
        }
    }
    worst
}

pub fn random_model(r: &mut ChaCha8Rng, k: usize, d: usize) -> GaussianHmm {
    let transition = random_stochastic(r, k, k);
    let initial = Array1::from(random_stochastic(r, 1, k).row(0).to_vec());
    let means = Array2::from_shape_fn((k, d), |_| r.random_range(-2.0..2.0));
    let variances = Array2::from_shape_fn((k, d), |_| r.random_range(0.3..2.0));
    GaussianHmm::new(transition, means, variances, initial).unwrap()
}

pub fn sample_frames(r: &mut ChaCha8Rng, t: usize, d: usize) -> Vec<Vec<f64>> {
    (0..t).map(|_| (0..d).map(|_| r.random_range(-3.0..3.0)).collect()).collect()
}

/// Sequences drawn from `hmm` by ancestral sampling.
pub fn sample_hmm(hmm: &GaussianHmm, r: &mut ChaCha8Rng, n_seq: usize, t: usize) -> Vec<ObservationSeq> {
    let draw = |p: &[f64], r: &mut ChaCha8Rng| {
        let u: f64 = r.random();
        let mut acc = 0.0;
        for (i, &pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                return i;
            }
        }
        p.len() - 1
    };
    (0..n_seq)
        .map(|e| {
            let mut s = draw(hmm.initial.as_slice().unwrap(), r);
            let mut frames = Vec::with_capacity(t);
            for _ in 0..t {
                let f: Vec<f64> = (0..hmm.dims())
                    .map(|d| {
                        let z: f64 = r.sample(rand_distr::StandardNormal);
                        hmm.means[[s, d]] + hmm.variances[[s, d]].sqrt() * z
                    })
                    .collect();
                frames.push(f);
                s = draw(hmm.transition.row(s).as_slice().unwrap(), r);
            }
            ObservationSeq::new(e as u64, 0, frames)
        })
        .collect()
}
