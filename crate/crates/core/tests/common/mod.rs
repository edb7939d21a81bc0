//! Synthetic data generators shared by the integration and acceptance tests.
#![allow(dead_code)]

use headlamp::probe::{PairDataset, TraceFeatures};
use headlamp::seed;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn gaussian(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(seed);
    (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

pub fn matmul(x: &[Vec<f64>], w: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = w[0].len();
    x.iter()
        .map(|r| (0..cols).map(|j| r.iter().zip(w).map(|(a, row)| a * row[j]).sum()).collect())
        .collect()
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian columns.
pub fn orthogonal(d: usize, seed: u64) -> Vec<Vec<f64>> {
    let g = gaussian(d, d, seed);
    let mut q: Vec<Vec<f64>> = Vec::new();
    for col in 0..d {
        let mut v: Vec<f64> = (0..d).map(|i| g[i][col]).collect();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        q.push(v.into_iter().map(|a| a / norm).collect());
    }
    (0..d).map(|i| (0..d).map(|j| q[j][i]).collect()).collect()
}

/// One-hot targets: the active head is the argmax of a fixed linear map,
/// keeping only rows whose top-two gap exceeds `margin`.
pub fn separable_one_hot(n: usize, d: usize, heads: usize, margin: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let w = gaussian(d, heads, seed ^ 0xA5A5);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    let mut s = seed;
    while xs.len() < n {
        s += 1;
        let batch = gaussian(256, d, s);
        let scores = matmul(&batch, &w);
        for (x, sc) in batch.into_iter().zip(scores) {
            let mut idx: Vec<usize> = (0..heads).collect();
            idx.sort_by(|&a, &b| sc[b].total_cmp(&sc[a]));
            if sc[idx[0]] - sc[idx[1]] < margin || xs.len() == n {
                continue;
            }
            let mut y = vec![0.0; heads];
            y[idx[0]] = 1.0;
            xs.push(x);
            ys.push(y);
        }
    }
    (xs, ys)
}

/// Targets = x W + N(0, sigma^2), rescaled so targets have unit-order spread.
pub fn planted_linear(n: usize, d: usize, out: usize, sigma: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let x = gaussian(n, d, seed);
    let w: Vec<Vec<f64>> = gaussian(d, out, seed + 1)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v / (d as f64).sqrt()).collect())
        .collect();
    let noise = gaussian(n, out, seed + 2);
    let y = matmul(&x, &w)
        .into_iter()
        .zip(noise)
        .map(|(r, e)| r.into_iter().zip(e).map(|(a, b)| a + sigma * b).collect())
        .collect();
    (x, y)
}

pub fn dataset(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, seed: u64) -> PairDataset {
    PairDataset::from_rows(0, x, y, seed).unwrap()
}

/// Traces whose scores at step n + 1 are a linear map of the hidden state at n;
/// the score at step 0 and the hidden states are otherwise independent noise.
pub fn lagged_traces(n_traces: usize, len: usize, d: usize, heads: usize, seed: u64) -> Vec<TraceFeatures> {
    let w = gaussian(d, heads, seed);
    (0..n_traces)
        .map(|t| {
            let hidden = gaussian(len, d, seed.wrapping_add(1000 + t as u64));
            let mut scores = gaussian(len, heads, seed.wrapping_add(5000 + t as u64));
            let mapped = matmul(&hidden, &w);
            let noise = gaussian(len, heads, seed.wrapping_add(9000 + t as u64));
            for n in 0..len - 1 {
                for j in 0..heads {
                    scores[n + 1][j] = mapped[n][j] + 0.01 * noise[n][j];
                }
            }
            TraceFeatures { sample_id: format!("lag-{t}"), hidden, scores }
        })
        .collect()
}

pub fn rand_row(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| rng.random::<f64>().powi(3)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}
