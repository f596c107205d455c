#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(n: usize, p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn t2(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| {
        let u: f64 = rng.random_range(1e-12..1.0 - 1e-12);
        (2.0 * u - 1.0) / (2.0 * u * (1.0 - u)).sqrt()
    })
}

pub fn sparse_beta(p: usize, k: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(p, |j, _| if j < k { rng.random_range(0.5..1.5) } else { 0.0 })
}

/// Random SPD matrix `B'B / m + 0.1 I`.
pub fn random_spd(p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let b = gaussian(2 * p, p, rng);
    b.tr_mul(&b) / (2 * p) as f64 + DMatrix::identity(p, p) * 0.1
}

/// Minimizes `f` over the box `[-bound, bound]^p` (p = 1 or 2): a dense
/// grid, repeated zooms around the best point, then a compass search.
pub fn grid_minimize<F: Fn(&DVector<f64>) -> f64>(f: F, p: usize, bound: f64) -> DVector<f64> {
    assert!(p == 1 || p == 2);
    let pts = if p == 1 { 4001 } else { 401 };
    let mut center = DVector::zeros(p);
    let mut half = bound;
    let mut best = f(&center);
    for _ in 0..12 {
        let step = 2.0 * half / (pts - 1) as f64;
        let mut arg = center.clone();
        let grid = |k: usize, c: f64| c - half + k as f64 * step;
        if p == 1 {
            for a in 0..pts {
                let b = DVector::from_element(1, grid(a, center[0]));
                let v = f(&b);
                if v < best {
                    best = v;
                    arg = b;
                }
            }
        } else {
            for a in 0..pts {
                for c in 0..pts {
                    let b = DVector::from_column_slice(&[grid(a, center[0]), grid(c, center[1])]);
                    let v = f(&b);
                    if v < best {
                        best = v;
                        arg = b;
                    }
                }
            }
        }
        center = arg;
        half = 4.0 * step;
    }
    // compass refinement
    let mut step = half;
    while step > 1e-12 {
        let mut improved = false;
        for k in 0..p {
            for s in [-1.0, 1.0] {
                let mut b = center.clone();
                b[k] += s * step;
                let v = f(&b);
                if v < best {
                    best = v;
                    center = b;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    center
}

// written out by hand so the oracle shares no code with the library
fn huber(r: f64) -> f64 {
    if r.abs() <= 1.0 {
        0.5 * r * r
    } else {
        r.abs() - 0.5
    }
}

pub fn huber_objective(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, tau: f64, b: &DVector<f64>) -> f64 {
    let n = x.nrows() as f64;
    let r = y - x * b;
    r.iter().map(|&v| huber(v)).sum::<f64>() / n + lambda * b.iter().map(|v| v.abs()).sum::<f64>() + 0.5 * tau * b.norm_squared()
}
