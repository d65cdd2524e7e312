//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use fading::autodiff::Activation;
use fading::benchmarks::{simulate, SystemId, TimeSeriesDataset};
use fading::model::{BlockShape, FadingModel, RegressorMatrix};
use fading::Tensor;

/// Central difference of `f` along one coordinate of one parameter tensor.
pub fn central_difference(
    f: &dyn Fn(&[Tensor]) -> f64,
    params: &[Tensor],
    which: usize,
    index: usize,
    h: f64,
) -> f64 {
    let mut plus = params.to_vec();
    plus[which].data_mut()[index] += h;
    let mut minus = params.to_vec();
    minus[which].data_mut()[index] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Richardson-extrapolated central difference, accurate to O(h⁴).
pub fn richardson(
    f: &dyn Fn(&[Tensor]) -> f64,
    params: &[Tensor],
    which: usize,
    index: usize,
    h: f64,
) -> f64 {
    let d1 = central_difference(f, params, which, index, h);
    let d2 = central_difference(f, params, which, index, h / 2.0);
    (4.0 * d2 - d1) / 3.0
}

/// Determinant by Laplace expansion along the first row.
pub fn cofactor_det(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    match n {
        0 => 1.0,
        1 => a[0][0],
        2 => a[0][0] * a[1][1] - a[0][1] * a[1][0],
        _ => (0..n)
            .map(|j| {
                let minor: Vec<Vec<f64>> = a[1..]
                    .iter()
                    .map(|row| {
                        row.iter()
                            .enumerate()
                            .filter(|&(c, _)| c != j)
                            .map(|(_, &v)| v)
                            .collect()
                    })
                    .collect();
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                sign * a[0][j] * cofactor_det(&minor)
            })
            .sum(),
    }
}

/// `log |det A|` by Gaussian elimination with partial pivoting.
pub fn lu_log_abs_det(a: &[f64], n: usize) -> f64 {
    let mut m = a.to_vec();
    let mut acc = 0.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap();
        if pivot != col {
            for c in 0..n {
                m.swap(col * n + c, pivot * n + c);
            }
        }
        let d = m[col * n + col];
        acc += d.abs().ln();
        for r in col + 1..n {
            let factor = m[r * n + col] / d;
            for c in col..n {
                m[r * n + c] -= factor * m[col * n + c];
            }
        }
    }
    acc
}

/// Solves `A x = b` for row-major `A` (n × n) by pivoted elimination.
pub fn dense_solve(a: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap();
        if pivot != col {
            for c in 0..n {
                m.swap(col * n + c, pivot * n + c);
            }
            x.swap(col, pivot);
        }
        for r in col + 1..n {
            let factor = m[r * n + col] / m[col * n + col];
            for c in col..n {
                m[r * n + c] -= factor * m[col * n + c];
            }
            x[r] -= factor * x[col];
        }
    }
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| m[r * n + c] * x[c]).sum();
        x[r] = (x[r] - s) / m[r * n + r];
    }
    x
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

pub fn shape(hidden: &[usize]) -> BlockShape {
    BlockShape {
        hidden: hidden.to_vec(),
        activation: Activation::Tanh,
    }
}

pub fn small_model(p: usize, n_b: usize, hidden: &[usize], seed: u64) -> FadingModel {
    FadingModel::new(p, n_b, &shape(hidden), seed).unwrap()
}

pub fn system4(n: usize, seed: u64) -> TimeSeriesDataset {
    simulate(SystemId::S4, n, seed, 100).unwrap()
}

pub fn regressors(data: &TimeSeriesDataset, p: usize, n_b: usize) -> RegressorMatrix {
    RegressorMatrix::build(data, p, n_b).unwrap()
}
