//! Dense tensor arithmetic with reverse-mode differentiation.
//!
//! The tape records every operation; backward passes emit ordinary nodes, so
//! differentiating through a gradient (tape depth >= 2) needs no special
//! machinery. All values are `f64`; property tests rely on that precision.

mod backward;
pub mod check;
pub mod conv;
mod error;
mod graph;
mod tensor;

pub use error::AdError;
pub use graph::{Graph, Node, NodeId, Op};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_basic() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), false).unwrap();
        let b = g.leaf(Tensor::from_vec(vec![3.0, 4.0]), false).unwrap();
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let a = Tensor::new(vec![3, 3], (1..=9).map(|v| v as f64 * 0.7).collect()).unwrap();
        let i = g.constant(eye).unwrap();
        let m = g.leaf(a.clone(), false).unwrap();
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), a.data());
    }

    #[test]
    fn conv2d_all_ones() {
        // 3x3 ones input, 2x2 ones kernel, no padding -> 2x2 output of 4.0
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[1, 1, 3, 3]), false).unwrap();
        let k = g.leaf(Tensor::ones(&[1, 1, 2, 2]), false).unwrap();
        let y = g.conv2d(x, k, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn grad_of_square() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true).unwrap();
        let y = g.square(x).unwrap();
        let dx = g.grad(y, &[x]).unwrap()[0];
        assert_eq!(g.value(dx).item(), 6.0);
    }

    #[test]
    fn grad_unreachable_is_zeros() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true).unwrap();
        let z = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true).unwrap();
        let y = g.square(x).unwrap();
        let gz = g.grad(y, &[z]).unwrap()[0];
        assert_eq!(g.value(gz).data(), &[0.0, 0.0]);
    }

    #[test]
    fn grad_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true).unwrap();
        let y = g.square(x).unwrap();
        assert!(matches!(
            g.grad(y, &[x]),
            Err(AdError::NonScalarOutput { .. })
        ));
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), false).unwrap();
        let b = g.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]), false).unwrap();
        match g.add(a, b) {
            Err(AdError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn strict_mode_rejects_non_finite() {
        let mut g = Graph::new();
        assert!(g.leaf(Tensor::scalar(f64::NAN), false).is_err());
        let x = g.leaf(Tensor::scalar(-1.0), false).unwrap();
        assert!(matches!(g.sqrt(x), Err(AdError::NonFinite { .. })));
    }

    #[test]
    fn max_is_eval_only() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(1.0), true).unwrap();
        let b = g.leaf(Tensor::scalar(2.0), false).unwrap();
        assert!(matches!(
            g.max_elem(a, b),
            Err(AdError::NonDifferentiable { .. })
        ));
        let c = g.constant(Tensor::scalar(1.0)).unwrap();
        let m = g.max_elem(c, b).unwrap();
        assert_eq!(g.value(m).item(), 2.0);
    }

    #[test]
    fn argmax_ties_break_low() {
        let t = Tensor::new(vec![2, 3], vec![5.0, 5.0, 1.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(t.argmax_axis(1), vec![0, 1]);
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true).unwrap();
        let s = g.stop_grad(x).unwrap();
        let y = g.mul(s, x).unwrap(); // y = sg(x) * x, d/dx = sg(x) = 3
        let dx = g.grad(y, &[x]).unwrap()[0];
        assert_eq!(g.value(dx).item(), 3.0);
    }

    #[test]
    fn second_derivative_of_cube() {
        let report = check::second_order_check(
            |g, x| {
                let x2 = g.square(x)?;
                let x3 = g.mul(x2, x)?;
                g.sum_all(x3)
            },
            &Tensor::scalar(2.0),
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!((report.hessian_analytic[0][0] - 12.0).abs() < 1e-9);
        assert!(report.max_rel_err < 1e-6);
    }

    #[test]
    fn second_derivative_of_linear_is_zero() {
        let report = check::second_order_check(
            |g, x| {
                let s = g.scale(x, 4.0)?;
                g.sum_all(s)
            },
            &Tensor::from_vec(vec![1.0, -2.0]),
            1e-5,
            1e-3,
        )
        .unwrap();
        for row in &report.hessian_analytic {
            for &v in row {
                assert_eq!(v, 0.0);
            }
        }
    }
}
