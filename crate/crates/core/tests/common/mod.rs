#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

pub fn gaussian_mat(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(rng))
}

pub fn objective(y: &DVector<f64>, x: &DMatrix<f64>, beta: &DVector<f64>, lambda: f64) -> f64 {
    let r = y - x * beta;
    let pen: f64 = (0..x.ncols()).map(|j| beta[j] * (y - x.column(j)).norm_squared()).sum();
    0.5 * r.norm_squared() + 0.5 * lambda * pen
}

/// Best objective on a simplex grid of the given step, then refined by a
/// shrinking pattern search around the best grid point.
pub fn simplex_grid_oracle(y: &DVector<f64>, x: &DMatrix<f64>, lambda: f64, step: f64) -> f64 {
    let p = x.ncols();
    let k = (1.0 / step).round() as usize;
    let mut best = f64::INFINITY;
    let mut best_b = DVector::zeros(p);
    let eval = |b: DVector<f64>, best: &mut f64, best_b: &mut DVector<f64>| {
        let v = objective(y, x, &b, lambda);
        if v < *best {
            *best = v;
            *best_b = b;
        }
    };
    match p {
        1 => eval(DVector::from_element(1, 1.0), &mut best, &mut best_b),
        2 => {
            for i in 0..=k {
                let a = i as f64 / k as f64;
                eval(DVector::from_vec(vec![a, 1.0 - a]), &mut best, &mut best_b);
            }
        }
        3 => {
            for i in 0..=k {
                for j in 0..=(k - i) {
                    let a = i as f64 / k as f64;
                    let b = j as f64 / k as f64;
                    eval(DVector::from_vec(vec![a, b, (1.0 - a - b).max(0.0)]), &mut best, &mut best_b);
                }
            }
        }
        _ => panic!("grid oracle supports p <= 3"),
    }
    // pattern search along simplex edge directions
    let mut h = step;
    while h > 1e-13 {
        let mut improved = false;
        for i in 0..p {
            for j in 0..p {
                if i == j {
                    continue;
                }
                let mut b = best_b.clone();
                let t = h.min(b[j]);
                if t <= 0.0 {
                    continue;
                }
                b[i] += t;
                b[j] -= t;
                let v = objective(y, x, &b, lambda);
                if v < best {
                    best = v;
                    best_b = b;
                    improved = true;
                }
            }
        }
        if !improved {
            h *= 0.5;
        }
    }
    best
}

/// Dense grid over a line `{b0 + t·dir}` for constrained least squares.
pub fn line_grid_oracle(y: &DVector<f64>, x: &DMatrix<f64>, b0: &DVector<f64>, dir: &DVector<f64>) -> DVector<f64> {
    let f = |t: f64| (y - x * (b0 + dir * t)).norm_squared();
    let mut best_t = 0.0;
    let mut best = f(0.0);
    let n = 200_000;
    for i in 0..=n {
        let t = -100.0 + 200.0 * i as f64 / n as f64;
        let v = f(t);
        if v < best {
            best = v;
            best_t = t;
        }
    }
    // golden-section polish inside the bracketing cell
    let (mut lo, mut hi) = (best_t - 1e-3, best_t + 1e-3);
    for _ in 0..200 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if f(m1) < f(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    b0 + dir * (0.5 * (lo + hi))
}

/// Covariate instance where `k` weighted covariate rows are matched exactly
/// and the outcome loads on `active` donors.
pub fn exact_covariate_instance(
    seed: u64,
    n: usize,
    p: usize,
    active: usize,
    k: usize,
    noise: f64,
) -> (DVector<f64>, DMatrix<f64>, synthsel::Covariates) {
    let mut r = rng(seed);
    let x = gaussian_mat(&mut r, n, p);
    let mut beta = DVector::zeros(p);
    for j in 0..active {
        beta[j] = 1.0 + 0.5 * (j as f64 / active as f64);
    }
    beta /= beta.sum();
    let y = &x * &beta + gaussian_vec(&mut r, n) * noise;
    let d = gaussian_mat(&mut r, k, p);
    let z = &d * &beta;
    (y, x, synthsel::Covariates::new(z, d).unwrap())
}

/// Covariate instance with `k` weighted rows that are constant across the
/// first donor cluster and cannot be matched; the outcome loads on that
/// cluster of size `active`.
pub fn clustered_covariate_instance(
    seed: u64,
    n: usize,
    active: usize,
    k: usize,
    noise: f64,
) -> (DVector<f64>, DMatrix<f64>, synthsel::Covariates) {
    let mut r = rng(seed);
    let p = 2 * active;
    let x = gaussian_mat(&mut r, n, p);
    let mut beta = DVector::zeros(p);
    for j in 0..active {
        beta[j] = 1.0 + 0.5 * (j as f64 / active as f64);
    }
    beta /= beta.sum();
    let y = &x * &beta + gaussian_vec(&mut r, n) * noise;
    let mut d = DMatrix::zeros(k, p);
    let mut z = DVector::zeros(k);
    for i in 0..k {
        for j in 0..active {
            d[(i, j)] = 1.0 + i as f64;
            d[(i, j + active)] = 10.0 + i as f64;
        }
        z[i] = 0.5 * i as f64;
    }
    (y, x, synthsel::Covariates::new(z, d).unwrap())
}
