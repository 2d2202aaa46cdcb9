//! Sentence Encoder Association Test.

use std::fs;
use std::path::Path;

use ndarray::Array1;
use rand::seq::SliceRandom;
use serde::Deserialize;

use super::{EvalError, Result};
use crate::seed::derived_rng;

/// Unions up to this size are tested with every partition.
pub const EXACT_LIMIT: usize = 12;
pub const SAMPLED_PERMUTATIONS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SeatTest {
    pub id: String,
    pub targets_x: Vec<String>,
    pub targets_y: Vec<String>,
    pub attributes_a: Vec<String>,
    pub attributes_b: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeatResult {
    pub effect_size: f64,
    pub p_value: f64,
}

#[derive(Deserialize)]
struct SeatSet {
    examples: Vec<String>,
}

#[derive(Deserialize)]
struct SeatFile {
    targ1: SeatSet,
    targ2: SeatSet,
    attr1: SeatSet,
    attr2: SeatSet,
}

/// Reads one test in the published layout: a JSON object with `targ1`,
/// `targ2`, `attr1`, `attr2`, each holding an `examples` list. The test id
/// is the file stem.
pub fn load_seat_test(path: &Path) -> Result<SeatTest> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.into(),
        source,
    })?;
    let f: SeatFile = serde_json::from_str(&text).map_err(|e| EvalError::Parse {
        path: path.into(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let id = path
        .file_stem()
        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let test = SeatTest {
        id,
        targets_x: f.targ1.examples,
        targets_y: f.targ2.examples,
        attributes_a: f.attr1.examples,
        attributes_b: f.attr2.examples,
    };
    validate(&test).map_err(|e| EvalError::Parse {
        path: path.into(),
        line: 0,
        message: e.to_string(),
    })?;
    Ok(test)
}

fn validate(t: &SeatTest) -> Result<()> {
    if [&t.targets_x, &t.targets_y, &t.attributes_a, &t.attributes_b]
        .iter()
        .any(|s| s.is_empty())
    {
        return Err(EvalError::Invalid(format!(
            "SEAT test {}: every set must be non-empty",
            t.id
        )));
    }
    if let Some(s) = t.targets_x.iter().find(|s| t.targets_y.contains(s)) {
        return Err(EvalError::Invalid(format!(
            "SEAT test {}: {s:?} is in both target sets",
            t.id
        )));
    }
    Ok(())
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt())
}

/// `s(w) = mean_a cos(w, a) - mean_b cos(w, b)`
fn association(w: &Array1<f64>, a: &[Array1<f64>], b: &[Array1<f64>]) -> f64 {
    let ma = a.iter().map(|v| cosine(w, v)).sum::<f64>() / a.len() as f64;
    let mb = b.iter().map(|v| cosine(w, v)).sum::<f64>() / b.len() as f64;
    ma - mb
}

/// Effect size and one-sided permutation p-value from embeddings.
///
/// The effect size divides by the population standard deviation of the
/// associations over `X ∪ Y`. The p-value is the share of equal-size
/// re-partitions of `X ∪ Y` whose statistic `Σ_X s − Σ_Y s` is at least the
/// observed one: all partitions when the union has at most [`EXACT_LIMIT`]
/// members, else [`SAMPLED_PERMUTATIONS`] seeded shuffles.
pub fn seat_effect(
    x: &[Array1<f64>],
    y: &[Array1<f64>],
    a: &[Array1<f64>],
    b: &[Array1<f64>],
    seed: u64,
) -> Result<SeatResult> {
    if x.is_empty() || y.is_empty() || a.is_empty() || b.is_empty() {
        return Err(EvalError::Invalid("SEAT needs four non-empty sets".into()));
    }
    let s: Vec<f64> = x.iter().chain(y).map(|w| association(w, a, b)).collect();
    let nx = x.len();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let all_mean = mean(&s);
    let std = (s.iter().map(|v| (v - all_mean) * (v - all_mean)).sum::<f64>() / s.len() as f64).sqrt();
    if std.is_nan() || std <= 0.0 {
        return Err(EvalError::DegenerateVariance);
    }
    let effect_size = (mean(&s[..nx]) - mean(&s[nx..])) / std;

    let total: f64 = s.iter().sum();
    // Σ_X s - Σ_Y s = 2 Σ_X s - total
    let stat = |sum_x: f64| 2.0 * sum_x - total;
    let observed = stat(s[..nx].iter().sum());
    // a small tolerance keeps exact ties from being lost to rounding
    let tol = 1e-12 * (1.0 + observed.abs());
    let (hits, count) = if s.len() <= EXACT_LIMIT {
        let mut hits = 0u64;
        let mut count = 0u64;
        for_each_subset(s.len(), nx, &mut |subset| {
            count += 1;
            if stat(subset.iter().map(|&i| s[i]).sum()) >= observed - tol {
                hits += 1;
            }
        });
        (hits, count)
    } else {
        let mut rng = derived_rng(seed, "seat-permutation");
        let mut idx: Vec<usize> = (0..s.len()).collect();
        let mut hits = 0u64;
        for _ in 0..SAMPLED_PERMUTATIONS {
            idx.shuffle(&mut rng);
            if stat(idx[..nx].iter().map(|&i| s[i]).sum()) >= observed - tol {
                hits += 1;
            }
        }
        (hits, SAMPLED_PERMUTATIONS as u64)
    };
    Ok(SeatResult {
        effect_size,
        p_value: hits as f64 / count as f64,
    })
}

/// Calls `f` with every `k`-subset of `0..n` in lexicographic order.
fn for_each_subset(n: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, f);
            cur.pop();
        }
    }
    rec(0, n, k, &mut Vec::with_capacity(k), f);
}

/// Embeds every sentence of `test` with `embed` and scores it.
pub fn seat_score(
    test: &SeatTest,
    embed: &mut dyn FnMut(&str) -> Result<Array1<f64>>,
    seed: u64,
) -> Result<SeatResult> {
    validate(test)?;
    let mut all = |v: &[String]| v.iter().map(|s| embed(s)).collect::<Result<Vec<_>>>();
    let x = all(&test.targets_x)?;
    let y = all(&test.targets_y)?;
    let a = all(&test.attributes_a)?;
    let b = all(&test.attributes_b)?;
    seat_effect(&x, &y, &a, &b, seed)
}
