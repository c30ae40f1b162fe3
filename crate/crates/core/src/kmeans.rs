//! One-dimensional k-means.
//!
//! Two seeds are available for Lloyd's algorithm: evenly spaced quantiles, or
//! the globally optimal partition found by dynamic programming over the sorted
//! values (contiguous clusters, divide-and-conquer on the monotone split
//! point). Either way the result is polished by Lloyd iterations until it is a
//! fixed point of both the assignment and centroid steps.

use serde::{Deserialize, Serialize};

/// How Lloyd's algorithm is seeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub enum KMeansInit {
    /// Globally optimal 1-D partition, then Lloyd polish.
    #[default]
    Optimal,
    /// K evenly spaced quantiles of the input.
    Quantile,
    /// Start from the given codebook.
    Given(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct KMeans {
    pub codebook: Vec<f64>,
    pub assignments: Vec<usize>,
    pub objective: f64,
    /// Objective after every Lloyd iteration (assignment + centroid step).
    pub trace: Vec<f64>,
}

pub const LLOYD_MAX_ITERS: usize = 500;

/// Index of the nearest codebook entry; ties go to the lower index.
pub fn nearest(codebook: &[f64], x: f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, &c) in codebook.iter().enumerate() {
        let d = (x - c).abs();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

pub fn objective(values: &[f64], codebook: &[f64], assignments: &[usize]) -> f64 {
    values
        .iter()
        .zip(assignments)
        .map(|(&x, &z)| (x - codebook[z]).powi(2))
        .sum()
}

/// Runs k-means with `k` clusters. Caller guarantees `values.len() >= k >= 1`.
pub fn kmeans(values: &[f64], k: usize, init: &KMeansInit) -> KMeans {
    let mut distinct: Vec<f64> = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() <= k {
        // Every value gets its own entry; pad by repeating the largest one.
        let mut codebook = distinct.clone();
        let last = *codebook.last().expect("nonempty input");
        codebook.resize(k, last);
        let assignments = values
            .iter()
            .map(|&x| distinct.partition_point(|&d| d < x))
            .collect();
        return KMeans {
            codebook,
            assignments,
            objective: 0.0,
            trace: vec![0.0],
        };
    }
    let seed = match init {
        KMeansInit::Optimal => optimal_codebook(values, k),
        KMeansInit::Quantile => quantile_codebook(values, k),
        KMeansInit::Given(c) => c.clone(),
    };
    lloyd(values, seed)
}

/// K evenly spaced quantiles at levels (k + 0.5) / K, linearly interpolated.
pub fn quantile_codebook(values: &[f64], k: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    (0..k)
        .map(|j| {
            let pos = (j as f64 + 0.5) / k as f64 * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = pos - lo as f64;
            sorted[lo] + frac * (sorted[hi] - sorted[lo])
        })
        .collect()
}

/// Lloyd iterations from `codebook` until assignments and centroids are stable.
pub fn lloyd(values: &[f64], mut codebook: Vec<f64>) -> KMeans {
    let k = codebook.len();
    let mut assignments: Vec<usize> = values.iter().map(|&x| nearest(&codebook, x)).collect();
    let mut trace = Vec::new();
    for _ in 0..LLOYD_MAX_ITERS {
        update_centroids(values, &mut codebook, &mut assignments, k);
        trace.push(objective(values, &codebook, &assignments));
        let next: Vec<usize> = values.iter().map(|&x| nearest(&codebook, x)).collect();
        if next == assignments {
            break;
        }
        assignments = next;
    }
    let objective = objective(values, &codebook, &assignments);
    KMeans {
        codebook,
        assignments,
        objective,
        trace,
    }
}

fn update_centroids(values: &[f64], codebook: &mut [f64], assignments: &mut [usize], k: usize) {
    loop {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&x, &z) in values.iter().zip(assignments.iter()) {
            sums[z] += x;
            counts[z] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                codebook[j] = sums[j] / counts[j] as f64;
            }
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        // Move the point farthest from its centroid into the empty cluster.
        let mut far = None;
        let mut far_d = -1.0;
        for (i, (&x, &z)) in values.iter().zip(assignments.iter()).enumerate() {
            if counts[z] < 2 {
                continue;
            }
            let d = (x - codebook[z]).abs();
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        let Some(i) = far else { return };
        assignments[i] = empty;
        codebook[empty] = values[i];
    }
}

/// Centroids of the globally optimal partition of `values` into `k` clusters.
pub fn optimal_codebook(values: &[f64], k: usize) -> Vec<f64> {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let mut sorted: Vec<f64> = values.iter().map(|x| x - mean).collect();
    sorted.sort_by(f64::total_cmp);
    let mut s1 = vec![0.0; n + 1];
    let mut s2 = vec![0.0; n + 1];
    for (i, &x) in sorted.iter().enumerate() {
        s1[i + 1] = s1[i] + x;
        s2[i + 1] = s2[i] + x * x;
    }
    let cost = |a: usize, b: usize| -> f64 {
        let len = (b - a) as f64;
        let s = s1[b] - s1[a];
        (s2[b] - s2[a] - s * s / len).max(0.0)
    };

    // prev[i]: best cost of the first i values in `layer` clusters.
    let mut prev: Vec<f64> = (0..=n)
        .map(|i| if i == 0 { 0.0 } else { cost(0, i) })
        .collect();
    let mut splits: Vec<Vec<usize>> = Vec::with_capacity(k);
    splits.push(vec![0; n + 1]);
    for layer in 2..=k {
        let mut cur = vec![f64::INFINITY; n + 1];
        let mut arg = vec![0usize; n + 1];
        solve_layer(layer, n, layer - 1, n - 1, &prev, &cost, &mut cur, &mut arg);
        prev = cur;
        splits.push(arg);
    }

    let mut bounds = vec![n];
    let mut end = n;
    for layer in (1..k).rev() {
        end = splits[layer][end];
        bounds.push(end);
    }
    bounds.push(0);
    bounds.reverse();
    bounds
        .windows(2)
        .map(|w| (s1[w[1]] - s1[w[0]]) / (w[1] - w[0]) as f64 + mean)
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn solve_layer(
    lo: usize,
    hi: usize,
    opt_lo: usize,
    opt_hi: usize,
    prev: &[f64],
    cost: &impl Fn(usize, usize) -> f64,
    cur: &mut [f64],
    arg: &mut [usize],
) {
    if lo > hi {
        return;
    }
    let mid = (lo + hi) / 2;
    let mut best = f64::INFINITY;
    let mut best_j = opt_lo;
    for (j, &p) in prev
        .iter()
        .enumerate()
        .take(opt_hi.min(mid - 1) + 1)
        .skip(opt_lo)
    {
        let v = p + cost(j, mid);
        if v < best {
            best = v;
            best_j = j;
        }
    }
    cur[mid] = best;
    arg[mid] = best_j;
    if mid > lo {
        solve_layer(lo, mid - 1, opt_lo, best_j, prev, cost, cur, arg);
    }
    solve_layer(mid + 1, hi, best_j, opt_hi, prev, cost, cur, arg);
}
