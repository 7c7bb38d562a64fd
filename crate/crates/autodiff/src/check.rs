//! Finite-difference oracles for gradient verification.
//!
//! These helpers are the independent route used by the test suites: they
//! evaluate functions by rebuilding the graph at perturbed inputs and never
//! touch the analytic backward pass.

use crate::error::AdError;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Relative error with a floor on the denominator so exact zeros compare
/// by absolute error instead of blowing up.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Checks the analytic gradient of a scalar-valued graph builder against
/// central finite differences at every coordinate of every input.
///
/// `build` must be a pure function of the leaf values.
pub fn check_gradient<F>(
    build: F,
    inputs: &[Tensor],
    h: f64,
    floor: f64,
) -> Result<GradCheckReport, AdError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, AdError>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64, AdError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors
            .iter()
            .map(|t| g.leaf(t.clone(), true))
            .collect::<Result<_, _>>()?;
        let out = build(&mut g, &ids)?;
        Ok(g.value(out).item())
    };

    // analytic gradients
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), true))
        .collect::<Result<_, _>>()?;
    let out = build(&mut g, &ids)?;
    let grads = g.grad(out, &ids)?;

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, grad_id) in grads.iter().enumerate() {
        let analytic = g.value(*grad_id).clone();
        for ci in 0..inputs[ti].len() {
            let orig = work[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + h;
            let fp = eval(&work)?;
            work[ti].data_mut()[ci] = orig - h;
            let fm = eval(&work)?;
            work[ti].data_mut()[ci] = orig;
            let fd = (fp - fm) / (2.0 * h);
            max_rel = max_rel.max(rel_err(analytic.data()[ci], fd, floor));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        checked,
    })
}

#[derive(Debug, Clone)]
pub struct SecondOrderReport {
    pub max_rel_err: f64,
    pub hessian_analytic: Vec<Vec<f64>>,
    pub hessian_fd: Vec<Vec<f64>>,
}

/// Compares gradient-of-gradient against central finite differences of the
/// first gradient for a scalar-valued builder at `point`.
pub fn second_order_check<F>(
    build: F,
    point: &Tensor,
    h: f64,
    floor: f64,
) -> Result<SecondOrderReport, AdError>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId, AdError>,
{
    let n = point.len();

    // first gradient as a function of the input, via a fresh tape each call
    let grad_at = |t: &Tensor| -> Result<Vec<f64>, AdError> {
        let mut g = Graph::new();
        let x = g.leaf(t.clone(), true)?;
        let y = build(&mut g, x)?;
        let gx = g.grad(y, &[x])?[0];
        Ok(g.value(gx).data().to_vec())
    };

    // analytic Hessian rows: differentiate each gradient component again
    let mut hess_a = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut g = Graph::new();
        let x = g.leaf(point.clone(), true)?;
        let y = build(&mut g, x)?;
        let gx = g.grad(y, &[x])?[0];
        let flat = g.reshape(gx, &[n])?;
        let gi = g.slice(flat, 0, i, 1)?;
        let gi_sum = g.sum_all(gi)?;
        let hrow = g.grad(gi_sum, &[x])?[0];
        hess_a[i].copy_from_slice(g.value(hrow).data());
    }

    // finite differences of the first gradient give Hessian columns
    let mut hess_fd = vec![vec![0.0; n]; n];
    let mut work = point.clone();
    for j in 0..n {
        let orig = work.data()[j];
        work.data_mut()[j] = orig + h;
        let gp = grad_at(&work)?;
        work.data_mut()[j] = orig - h;
        let gm = grad_at(&work)?;
        work.data_mut()[j] = orig;
        for i in 0..n {
            hess_fd[i][j] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }

    let mut max_rel = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            max_rel = max_rel.max(rel_err(hess_a[i][j], hess_fd[i][j], floor));
        }
    }
    Ok(SecondOrderReport {
        max_rel_err: max_rel,
        hessian_analytic: hess_a,
        hessian_fd: hess_fd,
    })
}
