//! Exact t-SNE for small point sets (a few hundred word prototypes).

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};

use super::{EvalError, Result};
use crate::seed::derived_rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsneOptions {
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
}

impl Default for TsneOptions {
    fn default() -> Self {
        Self {
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
        }
    }
}

fn squared_distances(x: ArrayView2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Row-conditional affinities whose entropy matches `ln(perplexity)`,
/// found by bisection on the precision of each row's Gaussian.
fn conditional_affinities(d: &Array2<f64>, perplexity: f64) -> Array2<f64> {
    let n = d.nrows();
    let target = perplexity.ln();
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        let min_d = (0..n)
            .filter(|&j| j != i)
            .map(|j| d[[i, j]])
            .fold(f64::INFINITY, f64::min);
        let mut row = vec![0.0; n];
        for _ in 0..200 {
            let mut sum = 0.0;
            for j in 0..n {
                row[j] = if j == i {
                    0.0
                } else {
                    (-(d[[i, j]] - min_d) * beta).exp()
                };
                sum += row[j];
            }
            let mut entropy = 0.0;
            for v in row.iter_mut() {
                *v /= sum;
                if *v > 0.0 {
                    entropy -= *v * v.ln();
                }
            }
            if (entropy - target).abs() < 1e-6 {
                break;
            }
            if entropy > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        p.row_mut(i).assign(&Array1::from(row));
    }
    p
}

/// Projects the rows of `x` to 2-D. Needs more than `3 · perplexity`
/// points; deterministic for a given seed.
pub fn project_2d(x: ArrayView2<f64>, perplexity: f64, seed: u64, options: TsneOptions) -> Result<Array2<f64>> {
    let n = x.nrows();
    if perplexity.is_nan() || perplexity <= 0.0 || (n as f64) <= 3.0 * perplexity {
        return Err(EvalError::PerplexityTooLarge { n, perplexity });
    }
    let cond = conditional_affinities(&squared_distances(x), perplexity);
    let mut p = (&cond + &cond.t()) / (2.0 * n as f64);
    p.mapv_inplace(|v| v.max(1e-12));

    let mut rng = derived_rng(seed, "tsne");
    let normal = Normal::new(0.0, 1e-4).expect("positive std");
    let mut y = Array2::from_shape_simple_fn((n, 2), || normal.sample(&mut rng));
    let mut velocity = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let mut num = Array2::<f64>::zeros((n, n));
    for it in 0..options.iterations {
        let exaggeration = if it < options.exaggeration_iterations {
            options.early_exaggeration
        } else {
            1.0
        };
        let momentum = if it < options.exaggeration_iterations { 0.5 } else { 0.8 };
        let mut total = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dy0 = y[[i, 0]] - y[[j, 0]];
                let dy1 = y[[i, 1]] - y[[j, 1]];
                let v = 1.0 / (1.0 + dy0 * dy0 + dy1 * dy1);
                num[[i, j]] = v;
                num[[j, i]] = v;
                total += 2.0 * v;
            }
        }
        let mut grad = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (num[[i, j]] / total).max(1e-12);
                let mult = 4.0 * (exaggeration * p[[i, j]] - q) * num[[i, j]];
                grad[[i, 0]] += mult * (y[[i, 0]] - y[[j, 0]]);
                grad[[i, 1]] += mult * (y[[i, 1]] - y[[j, 1]]);
            }
        }
        ndarray::Zip::from(&mut gains)
            .and(&grad)
            .and(&velocity)
            .for_each(|g, &dg, &v| {
                *g = if (dg > 0.0) != (v > 0.0) {
                    *g + 0.2
                } else {
                    (*g * 0.8).max(0.01)
                };
            });
        velocity = &velocity * momentum - &(&gains * &grad) * options.learning_rate;
        y += &velocity;
        let mean = y.mean_axis(Axis(0)).expect("non-empty");
        y -= &mean;
    }
    Ok(y)
}

/// Mean silhouette coefficient of a labelled layout.
pub fn silhouette(points: ArrayView2<f64>, labels: &[usize]) -> f64 {
    let d = squared_distances(points).mapv(f64::sqrt);
    let n = points.nrows();
    let clusters: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    let mut total = 0.0;
    for i in 0..n {
        let mean_to = |c: usize| {
            let members: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == c).collect();
            if members.is_empty() {
                0.0
            } else {
                members.iter().map(|&j| d[[i, j]]).sum::<f64>() / members.len() as f64
            }
        };
        let a = mean_to(labels[i]);
        let b = clusters
            .iter()
            .filter(|&&c| c != labels[i])
            .map(|&c| mean_to(c))
            .fold(f64::INFINITY, f64::min);
        total += if a.max(b) > 0.0 { (b - a) / a.max(b) } else { 0.0 };
    }
    total / n as f64
}
