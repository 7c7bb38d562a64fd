//! Kozachenko-Leonenko k-nearest-neighbor entropy estimate, differentiable
//! with respect to the samples.
//!
//! Neighbor selection runs on forward values; only the selected pairwise
//! distances enter the graph, so the estimate stays cheap while gradients
//! flow into every sample that participates in a selected distance.

use diffsearch_autodiff::{Graph, NodeId};

use crate::error::CoreError;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Digamma at a positive integer: `psi(n) = -gamma + H_{n-1}`.
pub fn digamma_int(n: usize) -> f64 {
    assert!(n >= 1);
    let mut h = 0.0;
    for k in 1..n {
        h += 1.0 / k as f64;
    }
    h - EULER_GAMMA
}

fn log_factorial(n: usize) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}

/// `ln Gamma(d/2 + 1)` for integer `d`.
fn lgamma_half_plus_one(d: usize) -> f64 {
    if d % 2 == 0 {
        log_factorial(d / 2)
    } else {
        // Gamma(m + 1/2) = (2m)! sqrt(pi) / (4^m m!), with m = (d+1)/2
        let m = (d + 1) / 2;
        log_factorial(2 * m) + 0.5 * std::f64::consts::PI.ln()
            - (m as f64) * 4f64.ln()
            - log_factorial(m)
    }
}

/// Log-volume of the unit ball in `d` dimensions.
pub fn log_unit_ball_volume(d: usize) -> f64 {
    (d as f64 / 2.0) * std::f64::consts::PI.ln() - lgamma_half_plus_one(d)
}

#[derive(Debug, Clone, Copy)]
pub struct EntropyEstimate {
    pub node: NodeId,
    /// Number of k-th neighbor distances clamped at the 1e-12 floor.
    pub floored: usize,
}

/// `H = psi(N) - psi(k) + log V_D + (D/N) sum_i log r_{k,i}` over an `[N, D]`
/// sample matrix node.
pub fn knn_entropy(g: &mut Graph, samples: NodeId, k: usize) -> Result<EntropyEstimate, CoreError> {
    let shape = g.shape(samples).to_vec();
    if shape.len() != 2 {
        return Err(CoreError::invalid(format!(
            "knn_entropy expects [N, D], got {shape:?}"
        )));
    }
    let (n, d) = (shape[0], shape[1]);
    if k < 1 || n <= k {
        return Err(CoreError::invalid(format!(
            "knn_entropy needs N > k >= 1, got N={n}, k={k}"
        )));
    }

    // neighbor indices from forward values only
    let values = g.value(samples).data().to_vec();
    let mut kth_neighbor = Vec::with_capacity(n);
    let mut dists = vec![0.0f64; n];
    for i in 0..n {
        let xi = &values[i * d..(i + 1) * d];
        for (j, slot) in dists.iter_mut().enumerate() {
            if j == i {
                *slot = f64::INFINITY;
                continue;
            }
            let xj = &values[j * d..(j + 1) * d];
            *slot = xi
                .iter()
                .zip(xj)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        // index of the k-th smallest distance, deterministic tie-breaking
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.select_nth_unstable_by(k - 1, |&a, &b| {
            dists[a].partial_cmp(&dists[b]).unwrap().then(a.cmp(&b))
        });
        kth_neighbor.push(order[k - 1]);
    }

    // graph: sum_i log r_i with r_i^2 = ||x_i - x_j*||^2, floored at 1e-24
    const FLOOR_SQ: f64 = 1e-24;
    let mut floored = 0usize;
    let mut log_sum: Option<NodeId> = None;
    for (i, &j) in kth_neighbor.iter().enumerate() {
        let xi = g.slice(samples, 0, i, 1)?;
        let xj = g.slice(samples, 0, j, 1)?;
        let diff = g.sub(xi, xj)?;
        let sq = g.square(diff)?;
        let r2 = g.sum_all(sq)?;
        let r2 = if g.value(r2).item() < FLOOR_SQ {
            floored += 1;
            g.scalar(FLOOR_SQ)?
        } else {
            r2
        };
        let lr2 = g.log(r2)?;
        let lr = g.scale(lr2, 0.5)?;
        log_sum = Some(match log_sum {
            None => lr,
            Some(acc) => g.add(acc, lr)?,
        });
    }
    let sum_node = log_sum.expect("n >= 2");
    let scaled = g.scale(sum_node, d as f64 / n as f64)?;
    let constant = digamma_int(n) - digamma_int(k) + log_unit_ball_volume(d);
    let node = g.add_scalar(scaled, constant)?;
    Ok(EntropyEstimate { node, floored })
}
