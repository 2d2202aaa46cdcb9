//! Prototype geometry and the tuning objective.
//!
//! An attribute prototype is turned into a distribution over the neutral
//! prototypes with a Gaussian kernel of width `rho`. The bias loss is the sum
//! of pairwise Jensen-Shannon divergences between those distributions; the
//! representation loss is the KL divergence between the frozen and prompted
//! neighbor structure of the word occurrences in a batch. All logarithms are
//! base 2.
//!
//! Every loss has a `*_with_grad` twin returning the vector-Jacobian product
//! with respect to its (prompted) inputs, which the tuner chains into the
//! encoder backward pass.

use std::f64::consts::LN_2;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use thiserror::Error;

/// Probabilities are floored here and renormalized before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("empty input")]
    EmptyInput,
    #[error("kernel width must be positive, got {0}")]
    DegenerateRho(f64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("frozen and prompted occurrences differ: {0} vs {1}")]
    MismatchedOccurrences(usize, usize),
    #[error("bias loss needs at least 2 attribute prototypes, got {0}")]
    TooFewAttributes(usize),
    #[error("lambda must be non-negative, got {0}")]
    NegativeLambda(f64),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Neutral prototypes, one row per neutral word.
#[derive(Debug, Clone, PartialEq)]
pub struct NeutralPrototypeSet {
    pub prototypes: Array2<f64>,
    pub word_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalDistribution {
    pub probs: Array1<f64>,
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub bias: f64,
    pub representation: f64,
    pub lambda: f64,
    pub total: f64,
}

/// How the representation loss turns hidden states into distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RepresentationMode {
    /// Kernel distributions over the other occurrences in the batch.
    #[default]
    BatchNeighbors,
    /// Softmax over each occurrence's own hidden dimensions.
    HiddenSoftmax,
}

/// Row-wise mean of the occurrence embeddings.
pub fn attribute_prototype(occurrences: ArrayView2<f64>) -> Result<Array1<f64>> {
    occurrences.mean_axis(Axis(0)).ok_or(GeometryError::EmptyInput)
}

fn check_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho.is_finite() {
        Ok(())
    } else {
        Err(GeometryError::DegenerateRho(rho))
    }
}

fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Max-shifted softmax of `logits`.
fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `g_logits = p * (g - <g, p>)`
fn softmax_vjp(p: &[f64], g: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)).collect()
}

/// Probability of each neutral prototype under a Gaussian kernel centred on
/// `e`: `p_j ∝ exp(-|e - E_j|² / (2 rho²))`. Entries are floored at
/// [`PROB_FLOOR`], so every entry is strictly positive.
pub fn conditional_distribution(
    e: ArrayView1<f64>,
    neutral: ArrayView2<f64>,
    rho: f64,
) -> Result<ConditionalDistribution> {
    check_rho(rho)?;
    if neutral.nrows() == 0 {
        return Err(GeometryError::EmptyInput);
    }
    if neutral.ncols() != e.len() {
        return Err(GeometryError::LengthMismatch(e.len(), neutral.ncols()));
    }
    let logits = kernel_logits(e, neutral, rho);
    Ok(ConditionalDistribution {
        probs: Array1::from(floored(&softmax(&logits))),
        rho,
    })
}

fn kernel_logits(e: ArrayView1<f64>, neutral: ArrayView2<f64>, rho: f64) -> Vec<f64> {
    let scale = 2.0 * rho * rho;
    neutral
        .rows()
        .into_iter()
        .map(|row| -squared_distance(e, row) / scale)
        .collect()
}

/// Floors at [`PROB_FLOOR`] and renormalizes.
pub fn floored(p: &[f64]) -> Vec<f64> {
    let u: Vec<f64> = p.iter().map(|&x| x.max(PROB_FLOOR)).collect();
    let z: f64 = u.iter().sum();
    u.into_iter().map(|x| x / z).collect()
}

fn floored_vjp(p: &[f64], g: &[f64]) -> Vec<f64> {
    let z: f64 = p.iter().map(|&x| x.max(PROB_FLOOR)).sum();
    let pt = floored(p);
    let dot: f64 = g.iter().zip(&pt).map(|(a, b)| a * b).sum();
    p.iter()
        .zip(g)
        .map(|(&pi, &gi)| if pi >= PROB_FLOOR { (gi - dot) / z } else { 0.0 })
        .collect()
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(GeometryError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(GeometryError::EmptyInput);
    }
    Ok(())
}

fn kl_floored(q: &[f64], p: &[f64]) -> f64 {
    let s: f64 = q
        .iter()
        .zip(p)
        .map(|(&qi, &pi)| if qi == pi { 0.0 } else { qi * (qi / pi).log2() })
        .sum();
    s.max(0.0)
}

/// `KL(q || p) = Σ q_j log2(q_j / p_j)` on floored inputs.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> Result<f64> {
    check_lengths(q, p)?;
    Ok(kl_floored(&floored(q), &floored(p)))
}

fn js_floored(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    0.5 * kl_floored(p, &m) + 0.5 * kl_floored(q, &m)
}

/// Jensen-Shannon divergence in bits; symmetric and within `[0, 1]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_lengths(p, q)?;
    Ok(js_floored(&floored(p), &floored(q)).min(1.0))
}

/// JS value plus gradients with respect to the unfloored `p` and `q`.
fn js_with_grad(p: &[f64], q: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let pf = floored(p);
    let qf = floored(q);
    let value = js_floored(&pf, &qf);
    let half_log = |a: &[f64], b: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| 0.5 * (x / (0.5 * (x + y))).log2())
            .collect()
    };
    let gp = half_log(&pf, &qf);
    let gq = half_log(&qf, &pf);
    (value, floored_vjp(p, &gp), floored_vjp(q, &gq))
}

/// Gradient of the kernel distribution with respect to its centre and the
/// neutral rows, given the gradient `g` on the probabilities.
fn kernel_vjp(
    e: ArrayView1<f64>,
    neutral: ArrayView2<f64>,
    rho: f64,
    probs: &[f64],
    g: &[f64],
) -> (Array1<f64>, Array2<f64>) {
    let dz = softmax_vjp(probs, g);
    let inv = 1.0 / (rho * rho);
    let mut ge = Array1::zeros(e.len());
    let mut gn = Array2::zeros(neutral.raw_dim());
    for (j, row) in neutral.rows().into_iter().enumerate() {
        let diff = &e - &row;
        ge.scaled_add(-dz[j] * inv, &diff);
        gn.row_mut(j).scaled_add(dz[j] * inv, &diff);
    }
    (ge, gn)
}

/// `Σ_{i<j} JS(P_i || P_j)` over all attribute pairs.
pub fn bias_loss(attributes: &[Array1<f64>], neutral: ArrayView2<f64>, rho: f64) -> Result<f64> {
    if attributes.len() < 2 {
        return Err(GeometryError::TooFewAttributes(attributes.len()));
    }
    let dists = attributes
        .iter()
        .map(|e| conditional_distribution(e.view(), neutral, rho))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for i in 0..dists.len() {
        for j in i + 1..dists.len() {
            total += js_divergence(dists[i].probs.as_slice().unwrap(), dists[j].probs.as_slice().unwrap())?;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone)]
pub struct BiasGrad {
    pub value: f64,
    pub attributes: Vec<Array1<f64>>,
    pub neutral: Array2<f64>,
}

pub fn bias_loss_with_grad(attributes: &[Array1<f64>], neutral: ArrayView2<f64>, rho: f64) -> Result<BiasGrad> {
    if attributes.len() < 2 {
        return Err(GeometryError::TooFewAttributes(attributes.len()));
    }
    check_rho(rho)?;
    if neutral.nrows() == 0 {
        return Err(GeometryError::EmptyInput);
    }
    let dists: Vec<Vec<f64>> = attributes
        .iter()
        .map(|e| softmax(&kernel_logits(e.view(), neutral, rho)))
        .collect();
    let n = neutral.nrows();
    let mut g_probs = vec![vec![0.0; n]; dists.len()];
    let mut value = 0.0;
    for i in 0..dists.len() {
        for j in i + 1..dists.len() {
            let (v, gi, gj) = js_with_grad(&dists[i], &dists[j]);
            value += v;
            for k in 0..n {
                g_probs[i][k] += gi[k];
                g_probs[j][k] += gj[k];
            }
        }
    }
    let mut g_neutral = Array2::zeros(neutral.raw_dim());
    let mut g_attrs = Vec::with_capacity(attributes.len());
    for (i, e) in attributes.iter().enumerate() {
        let (ge, gn) = kernel_vjp(e.view(), neutral, rho, &dists[i], &g_probs[i]);
        g_attrs.push(ge);
        g_neutral += &gn;
    }
    Ok(BiasGrad {
        value,
        attributes: g_attrs,
        neutral: g_neutral,
    })
}

/// Kernel distribution of occurrence `i` over every other occurrence.
fn neighbor_distribution(states: ArrayView2<f64>, i: usize, rho: f64) -> Vec<f64> {
    let scale = 2.0 * rho * rho;
    let row = states.row(i);
    let logits: Vec<f64> = (0..states.nrows())
        .filter(|&j| j != i)
        .map(|j| -squared_distance(row, states.row(j)) / scale)
        .collect();
    softmax(&logits)
}

fn check_occurrences(frozen: ArrayView2<f64>, prompted: ArrayView2<f64>) -> Result<()> {
    if frozen.dim() != prompted.dim() {
        return Err(GeometryError::MismatchedOccurrences(frozen.nrows(), prompted.nrows()));
    }
    Ok(())
}

/// Mean over occurrences of `KL(Q_i || P_i)`, where `Q_i` comes from the
/// frozen encoder and `P_i` from the prompted one. Rows of both matrices
/// must describe the same occurrences in the same order.
pub fn representation_loss(
    frozen: ArrayView2<f64>,
    prompted: ArrayView2<f64>,
    rho: f64,
    mode: RepresentationMode,
) -> Result<f64> {
    representation_loss_with_grad(frozen, prompted, rho, mode).map(|(v, _)| v)
}

/// Representation loss and its gradient with respect to `prompted`.
pub fn representation_loss_with_grad(
    frozen: ArrayView2<f64>,
    prompted: ArrayView2<f64>,
    rho: f64,
    mode: RepresentationMode,
) -> Result<(f64, Array2<f64>)> {
    check_rho(rho)?;
    check_occurrences(frozen, prompted)?;
    let n = prompted.nrows();
    let mut grad = Array2::zeros(prompted.raw_dim());
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut total = 0.0;
    match mode {
        RepresentationMode::BatchNeighbors => {
            if n < 2 {
                return Ok((0.0, grad));
            }
            let inv = 1.0 / (rho * rho);
            for i in 0..n {
                let q = floored(&neighbor_distribution(frozen, i, rho));
                let p = neighbor_distribution(prompted, i, rho);
                let pf = floored(&p);
                total += kl_floored(&q, &pf);
                let g: Vec<f64> = q.iter().zip(&pf).map(|(qj, pj)| -qj / (pj * LN_2) / n as f64).collect();
                let dz = softmax_vjp(&p, &floored_vjp(&p, &g));
                let others = (0..n).filter(|&j| j != i);
                for (slot, j) in others.enumerate() {
                    let diff = &prompted.row(i) - &prompted.row(j);
                    grad.row_mut(i).scaled_add(-dz[slot] * inv, &diff);
                    grad.row_mut(j).scaled_add(dz[slot] * inv, &diff);
                }
            }
        }
        RepresentationMode::HiddenSoftmax => {
            for i in 0..n {
                let q = floored(&softmax(&frozen.row(i).to_vec()));
                let p = softmax(&prompted.row(i).to_vec());
                let pf = floored(&p);
                total += kl_floored(&q, &pf);
                let g: Vec<f64> = q.iter().zip(&pf).map(|(qj, pj)| -qj / (pj * LN_2) / n as f64).collect();
                let dz = softmax_vjp(&p, &floored_vjp(&p, &g));
                grad.row_mut(i).assign(&Array1::from(dz));
            }
        }
    }
    Ok((total / n as f64, grad))
}

/// `total = bias + lambda * representation`
pub fn total_loss(bias: f64, representation: f64, lambda: f64) -> Result<LossBreakdown> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(GeometryError::NegativeLambda(lambda));
    }
    Ok(LossBreakdown {
        bias,
        representation,
        lambda,
        total: bias + lambda * representation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Independent oracles: plain formulas without max-shift or flooring.
    fn eq4_direct(e: &[f64], neutral: &[Vec<f64>], rho: f64) -> Vec<f64> {
        let w: Vec<f64> = neutral
            .iter()
            .map(|n| {
                let d2: f64 = e.iter().zip(n).map(|(a, b)| (a - b).powi(2)).sum();
                (-d2 / (2.0 * rho * rho)).exp()
            })
            .collect();
        let s: f64 = w.iter().sum();
        w.iter().map(|x| x / s).collect()
    }

    fn kl_direct(q: &[f64], p: &[f64]) -> f64 {
        q.iter()
            .zip(p)
            .filter(|(qi, _)| **qi > 0.0)
            .map(|(qi, pi)| qi * (qi / pi).log2())
            .sum()
    }

    fn js_direct(p: &[f64], q: &[f64]) -> f64 {
        let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a + b) / 2.0).collect();
        0.5 * kl_direct(p, &m) + 0.5 * kl_direct(q, &m)
    }

    #[test]
    fn prototype_means() {
        assert_eq!(
            attribute_prototype(array![[1.0, 0.0], [0.0, 1.0]].view()).unwrap(),
            array![0.5, 0.5]
        );
        assert_eq!(
            attribute_prototype(array![[3.0, -2.0]].view()).unwrap(),
            array![3.0, -2.0]
        );
        let v = array![0.3, -1.7, 2.2];
        let mut rows = Array2::zeros((60, 3));
        for i in 0..60 {
            let sign = if i < 30 { 1.0 } else { -1.0 };
            rows.row_mut(i).assign(&(&v * sign));
        }
        assert!(attribute_prototype(rows.view())
            .unwrap()
            .iter()
            .all(|x| x.abs() < 1e-15));
        assert_eq!(
            attribute_prototype(Array2::<f64>::zeros((0, 3)).view()),
            Err(GeometryError::EmptyInput)
        );
    }

    #[test]
    fn conditional_examples() {
        let one = conditional_distribution(array![0.2].view(), array![[5.0]].view(), 1.0).unwrap();
        assert_eq!(one.probs, array![1.0]);
        let sym =
            conditional_distribution(array![0.0, 0.0].view(), array![[1.0, 0.0], [0.0, -1.0]].view(), 2.0).unwrap();
        assert_eq!(sym.probs, array![0.5, 0.5]);
        let c = conditional_distribution(array![0.0].view(), array![[0.0], [1.0]].view(), 1.0).unwrap();
        let a = (-0.5f64).exp();
        assert_abs_diff_eq!(c.probs[0], 1.0 / (1.0 + a), epsilon = 1e-15);
        assert_abs_diff_eq!(c.probs[1], a / (1.0 + a), epsilon = 1e-15);
        assert_abs_diff_eq!(c.probs[0], 0.6225, epsilon = 1e-4);
        assert_abs_diff_eq!(c.probs[1], 0.3775, epsilon = 1e-4);
        assert_eq!(
            conditional_distribution(array![0.0].view(), array![[1.0]].view(), 0.0),
            Err(GeometryError::DegenerateRho(0.0))
        );
        assert!(conditional_distribution(array![0.0].view(), array![[1.0]].view(), -1.0).is_err());
    }

    #[test]
    fn conditional_survives_huge_distances() {
        let c = conditional_distribution(array![0.0].view(), array![[1e4], [1e4 + 1.0]].view(), 0.5).unwrap();
        assert!(c.probs.iter().all(|p| p.is_finite()));
        assert_abs_diff_eq!(c.probs.sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_abs_diff_eq!(kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 1.0, epsilon = 1e-9);
        let expected = 0.5 * (2.0f64 / 3.0).log2() + 0.5 * 2.0f64.log2();
        assert_abs_diff_eq!(expected, 0.2075, epsilon = 1e-4);
        assert_abs_diff_eq!(
            kl_divergence(&[0.5, 0.5], &[0.75, 0.25]).unwrap(),
            expected,
            epsilon = 1e-12
        );
        assert_eq!(
            kl_divergence(&[1.0], &[0.5, 0.5]),
            Err(GeometryError::LengthMismatch(1, 2))
        );
    }

    #[test]
    fn js_examples() {
        assert_eq!(js_divergence(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert_abs_diff_eq!(js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0, epsilon = 1e-9);
        let oracle = js_direct(&[0.5, 0.5], &[1.0, 0.0]);
        assert_abs_diff_eq!(oracle, 0.3113, epsilon = 1e-4);
        assert_abs_diff_eq!(js_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), oracle, epsilon = 1e-9);
    }

    #[test]
    fn bias_loss_pairs() {
        let neutral = array![[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]];
        let same = vec![array![0.3, 0.1], array![0.3, 0.1]];
        assert_eq!(bias_loss(&same, neutral.view(), 1.0).unwrap(), 0.0);

        let two = vec![array![0.0, 0.0], array![1.0, 1.0]];
        let p: Vec<Vec<f64>> = two
            .iter()
            .map(|e| {
                eq4_direct(
                    e.as_slice().unwrap(),
                    &[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0]],
                    1.0,
                )
            })
            .collect();
        assert_abs_diff_eq!(
            bias_loss(&two, neutral.view(), 1.0).unwrap(),
            js_direct(&p[0], &p[1]),
            epsilon = 1e-9
        );

        let three = vec![array![0.0, 0.0], array![1.0, 1.0], array![-0.5, 2.0]];
        let rows = [vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0]];
        let p: Vec<Vec<f64>> = three
            .iter()
            .map(|e| eq4_direct(e.as_slice().unwrap(), &rows, 1.0))
            .collect();
        let mut oracle = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if i < j {
                    oracle += js_direct(&p[i], &p[j]);
                }
            }
        }
        assert_abs_diff_eq!(bias_loss(&three, neutral.view(), 1.0).unwrap(), oracle, epsilon = 1e-9);
        assert!(bias_loss(&three[..1], neutral.view(), 1.0).is_err());
    }

    #[test]
    fn bias_zero_iff_same_distribution() {
        let neutral = array![[1.0, 0.0], [-1.0, 0.0]];
        // mirror images across the perpendicular bisector are equidistant
        let a = vec![array![0.0, 3.0], array![0.0, -3.0]];
        assert_abs_diff_eq!(bias_loss(&a, neutral.view(), 1.0).unwrap(), 0.0, epsilon = 1e-15);
        let b = vec![array![0.5, 3.0], array![0.0, -3.0]];
        assert!(bias_loss(&b, neutral.view(), 1.0).unwrap() > 1e-6);
    }

    #[test]
    fn representation_examples() {
        let f = array![[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]];
        for mode in [RepresentationMode::BatchNeighbors, RepresentationMode::HiddenSoftmax] {
            assert_eq!(representation_loss(f.view(), f.view(), 1.5, mode).unwrap(), 0.0);
        }
        let p = array![[0.1, 0.0], [1.0, 0.5], [-0.3, 1.0]];
        // brute force over all ordered occurrence pairs
        let rows = |m: &Array2<f64>| -> Vec<Vec<f64>> { m.rows().into_iter().map(|r| r.to_vec()).collect() };
        let (fr, pr) = (rows(&f), rows(&p));
        let mut oracle = 0.0;
        for i in 0..3 {
            let others_f: Vec<Vec<f64>> = (0..3).filter(|&j| j != i).map(|j| fr[j].clone()).collect();
            let others_p: Vec<Vec<f64>> = (0..3).filter(|&j| j != i).map(|j| pr[j].clone()).collect();
            let q = eq4_direct(&fr[i], &others_f, 1.5);
            let pp = eq4_direct(&pr[i], &others_p, 1.5);
            oracle += kl_direct(&q, &pp);
        }
        oracle /= 3.0;
        let v = representation_loss(f.view(), p.view(), 1.5, RepresentationMode::BatchNeighbors).unwrap();
        assert_abs_diff_eq!(v, oracle, epsilon = 1e-12);
        assert!(matches!(
            representation_loss(
                f.view(),
                p.slice(ndarray::s![..2, ..]),
                1.0,
                RepresentationMode::BatchNeighbors
            ),
            Err(GeometryError::MismatchedOccurrences(3, 2))
        ));
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.0, 0.0, 7.0 / 3.0).unwrap().total, 0.0);
        assert_abs_diff_eq!(total_loss(1.0, 3.0, 7.0 / 3.0).unwrap().total, 8.0, epsilon = 1e-12);
        assert_eq!(total_loss(0.25, 9.0, 0.0).unwrap().total, 0.25);
        assert!(total_loss(1.0, 1.0, -1.0).is_err());
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-scale..scale))
    }

    fn fd_check(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>, analytic: &Array2<f64>) {
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                "idx {idx}: fd {fd} vs analytic {a}"
            );
        }
    }

    #[test]
    fn bias_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for d in [2, 3] {
            let attrs = random_matrix(&mut rng, d, 4, 1.5);
            let neutral = random_matrix(&mut rng, 5, 4, 1.5);
            let rho = 0.9;
            let to_vecs = |a: &Array2<f64>| a.rows().into_iter().map(|r| r.to_owned()).collect::<Vec<_>>();
            let g = bias_loss_with_grad(&to_vecs(&attrs), neutral.view(), rho).unwrap();
            let mut ga = Array2::zeros(attrs.raw_dim());
            for (i, row) in g.attributes.iter().enumerate() {
                ga.row_mut(i).assign(row);
            }
            fd_check(|a| bias_loss(&to_vecs(a), neutral.view(), rho).unwrap(), &attrs, &ga);
            fd_check(
                |n| bias_loss(&to_vecs(&attrs), n.view(), rho).unwrap(),
                &neutral,
                &g.neutral,
            );
        }
    }

    #[test]
    fn representation_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frozen = random_matrix(&mut rng, 6, 3, 1.0);
        let prompted = &frozen + &random_matrix(&mut rng, 6, 3, 0.4);
        for mode in [RepresentationMode::BatchNeighbors, RepresentationMode::HiddenSoftmax] {
            let (_, g) = representation_loss_with_grad(frozen.view(), prompted.view(), 0.8, mode).unwrap();
            fd_check(
                |p| representation_loss(frozen.view(), p.view(), 0.8, mode).unwrap(),
                &prompted,
                &g,
            );
        }
    }

    fn rotation(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
        // Gram-Schmidt on a random matrix
        let mut q = random_matrix(rng, n, n, 1.0);
        for i in 0..n {
            for j in 0..i {
                let proj = q.row(i).dot(&q.row(j));
                let rj = q.row(j).to_owned();
                q.row_mut(i).scaled_add(-proj, &rj);
            }
            let norm = q.row(i).dot(&q.row(i)).sqrt();
            q.row_mut(i).mapv_inplace(|x| x / norm);
        }
        q
    }

    proptest! {
        #[test]
        fn distributions_are_normalized(seed in any::<u64>(), n in 1usize..12, h in 1usize..10, rho in 0.05f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = random_matrix(&mut rng, 1, h, 5.0);
            let neutral = random_matrix(&mut rng, n, h, 5.0);
            let c = conditional_distribution(e.row(0), neutral.view(), rho).unwrap();
            prop_assert!((c.probs.sum() - 1.0).abs() < 1e-6);
            prop_assert!(c.probs.iter().all(|&p| p > 0.0 && p <= 1.0));
        }

        #[test]
        fn wide_kernel_is_uniform(seed in any::<u64>(), n in 1usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = random_matrix(&mut rng, 1, 4, 3.0);
            let neutral = random_matrix(&mut rng, n, 4, 3.0);
            let c = conditional_distribution(e.row(0), neutral.view(), 1e6).unwrap();
            for &p in c.probs.iter() {
                prop_assert!((p - 1.0 / n as f64).abs() < 1e-4);
            }
        }

        #[test]
        fn js_symmetric_and_bounded(a in proptest::collection::vec(0.0f64..1.0, 1..8), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<f64> = a.iter().map(|_| rng.random_range(0.0..1.0)).collect();
            let norm = |v: &[f64]| { let s: f64 = v.iter().sum::<f64>() + 1e-300; v.iter().map(|x| x / s).collect::<Vec<_>>() };
            let (p, q) = (norm(&a), norm(&b));
            if p.iter().sum::<f64>() > 0.5 && q.iter().sum::<f64>() > 0.5 {
                let pq = js_divergence(&p, &q).unwrap();
                prop_assert_eq!(pq, js_divergence(&q, &p).unwrap());
                prop_assert!((0.0..=1.0).contains(&pq));
                prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
            }
        }

        #[test]
        fn bias_rigid_motion_invariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = 4;
            let attrs = random_matrix(&mut rng, 3, h, 2.0);
            let neutral = random_matrix(&mut rng, 6, h, 2.0);
            let rot = rotation(&mut rng, h);
            let shift = random_matrix(&mut rng, 1, h, 10.0);
            let moved = |m: &Array2<f64>| m.dot(&rot.t()) + &shift;
            let vecs = |m: &Array2<f64>| m.rows().into_iter().map(|r| r.to_owned()).collect::<Vec<_>>();
            let before = bias_loss(&vecs(&attrs), neutral.view(), 1.3).unwrap();
            let after = bias_loss(&vecs(&moved(&attrs)), moved(&neutral).view(), 1.3).unwrap();
            prop_assert!((before - after).abs() < 1e-6);
        }
    }
}
