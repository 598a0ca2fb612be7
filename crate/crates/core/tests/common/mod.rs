#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slam_ags::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// Central differences of `f` at `x`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// ‖a − b‖ / max(‖a‖, ‖b‖), or the absolute gap when both are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-8 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Similarity loss by explicit double loop over ordered pairs.
pub fn similarity_oracle(z: &[Vec<f64>], tau: f64) -> f64 {
    let n = z.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += dot(&z[i], &z[j]) / tau;
            }
        }
    }
    -total / n as f64
}

/// NT-Xent written straight from its definition: for every anchor, minus the
/// log of the partner's share of exp-similarity among all other views.
pub fn ntxent_oracle(z: &[Vec<f64>], tau: f64) -> f64 {
    let n = z.len();
    if n == 0 {
        return 0.0;
    }
    let unit: Vec<Vec<f64>> = z
        .iter()
        .map(|v| {
            let norm = dot(v, v).sqrt();
            v.iter().map(|x| x / norm).collect()
        })
        .collect();
    let sim = |i: usize, j: usize| dot(&unit[i], &unit[j]) / tau;
    let mut total = 0.0;
    for i in 0..n {
        let partner = if i % 2 == 0 { i + 1 } else { i - 1 };
        let denom: f64 = (0..n).filter(|&k| k != i).map(|k| sim(i, k).exp()).sum();
        total += -(sim(i, partner).exp() / denom).ln();
    }
    total / n as f64
}

pub fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}
