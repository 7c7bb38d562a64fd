//! Finite-difference verification of every differentiable op, plus the
//! double-backward, linearity, determinism, and replay properties.

use diffsearch_autodiff::check::{check_gradient, second_order_check, GradCheckReport};
use diffsearch_autodiff::{AdError, Graph, NodeId, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-3;
const CASES: usize = 100;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Tensor in [lo,hi] with |x| >= margin, for ops with a kink at zero.
fn rand_tensor_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(margin..1.5);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Weighted-sum head so the backward seed is not all-ones.
fn weighted_sum(g: &mut Graph, x: NodeId, w: &Tensor) -> Result<NodeId, AdError> {
    let wc = g.constant(w.clone())?;
    let p = g.mul(x, wc)?;
    g.sum_all(p)
}

fn run_cases(
    name: &str,
    mut make_inputs: impl FnMut(&mut ChaCha8Rng) -> Vec<Tensor>,
    build: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId, AdError>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ name.len() as u64);
    let mut worst: Option<GradCheckReport> = None;
    for _ in 0..CASES {
        let inputs = make_inputs(&mut rng);
        let report = check_gradient(&build, &inputs, H, FLOOR).unwrap();
        assert!(
            report.max_rel_err <= 1e-5,
            "{name}: rel err {} exceeds 1e-5",
            report.max_rel_err
        );
        if worst
            .as_ref()
            .map(|w| report.max_rel_err > w.max_rel_err)
            .unwrap_or(true)
        {
            worst = Some(report);
        }
    }
}

#[test]
fn fd_elementwise_binary() {
    let mut rng0 = ChaCha8Rng::seed_from_u64(7);
    let w = rand_tensor(&mut rng0, &[2, 3], -1.0, 1.0);
    for (name, op) in [
        ("add", 0usize),
        ("sub", 1),
        ("mul", 2),
    ] {
        let w = w.clone();
        run_cases(
            name,
            |rng| {
                vec![
                    rand_tensor(rng, &[2, 3], -2.0, 2.0),
                    rand_tensor(rng, &[2, 3], -2.0, 2.0),
                ]
            },
            move |g, ids| {
                let r = match op {
                    0 => g.add(ids[0], ids[1])?,
                    1 => g.sub(ids[0], ids[1])?,
                    _ => g.mul(ids[0], ids[1])?,
                };
                weighted_sum(g, r, &w)
            },
        );
    }
}

#[test]
fn fd_elementwise_unary() {
    let mut rng0 = ChaCha8Rng::seed_from_u64(8);
    let w = rand_tensor(&mut rng0, &[2, 3], -1.0, 1.0);
    // (name, positive-domain, away-from-zero)
    let specs: &[(&str, bool, bool)] = &[
        ("neg", false, false),
        ("scale", false, false),
        ("add_scalar", false, false),
        ("recip", true, false),
        ("sqrt", true, false),
        ("exp", false, false),
        ("log", true, false),
        ("sigmoid", false, false),
        ("softplus", false, false),
        ("relu", false, true),
        ("abs", false, true),
        ("square", false, false),
        ("silu", false, false),
    ];
    for &(name, positive, away) in specs {
        let w = w.clone();
        run_cases(
            name,
            move |rng| {
                vec![if positive {
                    rand_tensor(rng, &[2, 3], 0.4, 2.0)
                } else if away {
                    rand_tensor_away_from_zero(rng, &[2, 3], 0.05)
                } else {
                    rand_tensor(rng, &[2, 3], -2.0, 2.0)
                }]
            },
            move |g, ids| {
                let r = match name {
                    "neg" => g.neg(ids[0])?,
                    "scale" => g.scale(ids[0], 1.7)?,
                    "add_scalar" => g.add_scalar(ids[0], 0.3)?,
                    "recip" => g.recip(ids[0])?,
                    "sqrt" => g.sqrt(ids[0])?,
                    "exp" => g.exp(ids[0])?,
                    "log" => g.log(ids[0])?,
                    "sigmoid" => g.sigmoid(ids[0])?,
                    "softplus" => g.softplus(ids[0])?,
                    "relu" => g.relu(ids[0])?,
                    "abs" => g.abs(ids[0])?,
                    "square" => g.square(ids[0])?,
                    _ => g.silu(ids[0])?,
                };
                weighted_sum(g, r, &w)
            },
        );
    }
}

#[test]
fn fd_matmul_transpose() {
    let mut rng0 = ChaCha8Rng::seed_from_u64(9);
    let w = rand_tensor(&mut rng0, &[3, 2], -1.0, 1.0);
    run_cases(
        "matmul",
        |rng| {
            vec![
                rand_tensor(rng, &[3, 4], -1.5, 1.5),
                rand_tensor(rng, &[4, 2], -1.5, 1.5),
            ]
        },
        |g, ids| {
            let m = g.matmul(ids[0], ids[1])?;
            let mut r0 = ChaCha8Rng::seed_from_u64(9);
            let w = rand_tensor(&mut r0, &[3, 2], -1.0, 1.0);
            weighted_sum(g, m, &w)
        },
    );
    let w2 = rand_tensor(&mut rng0, &[4, 3], -1.0, 1.0);
    run_cases(
        "transpose",
        |rng| vec![rand_tensor(rng, &[3, 4], -1.5, 1.5)],
        move |g, ids| {
            let t = g.transpose(ids[0])?;
            weighted_sum(g, t, &w2)
        },
    );
    let _ = w;
}

#[test]
fn fd_conv_family() {
    // conv2d with same padding
    let mut rng0 = ChaCha8Rng::seed_from_u64(10);
    let w_same = rand_tensor(&mut rng0, &[2, 2, 5, 4], -1.0, 1.0);
    run_cases(
        "conv2d_pad1",
        |rng| {
            vec![
                rand_tensor(rng, &[2, 3, 5, 4], -1.0, 1.0),
                rand_tensor(rng, &[2, 3, 3, 3], -1.0, 1.0),
            ]
        },
        move |g, ids| {
            let y = g.conv2d(ids[0], ids[1], 1)?;
            weighted_sum(g, y, &w_same)
        },
    );
    // valid (pad 0) with 2x2 kernel
    let w_valid = rand_tensor(&mut rng0, &[2, 2, 4, 3], -1.0, 1.0);
    run_cases(
        "conv2d_pad0",
        |rng| {
            vec![
                rand_tensor(rng, &[2, 3, 5, 4], -1.0, 1.0),
                rand_tensor(rng, &[2, 3, 2, 2], -1.0, 1.0),
            ]
        },
        move |g, ids| {
            let y = g.conv2d(ids[0], ids[1], 0)?;
            weighted_sum(g, y, &w_valid)
        },
    );
    // adjoint ops registered as primitives get their own checks
    let w_dx = rand_tensor(&mut rng0, &[2, 3, 5, 4], -1.0, 1.0);
    run_cases(
        "conv2d_input_grad",
        |rng| {
            vec![
                rand_tensor(rng, &[2, 2, 5, 4], -1.0, 1.0),
                rand_tensor(rng, &[2, 3, 3, 3], -1.0, 1.0),
            ]
        },
        move |g, ids| {
            let y = g.conv2d_input_grad(ids[0], ids[1], 1, 5, 4)?;
            weighted_sum(g, y, &w_dx)
        },
    );
    let w_dk = rand_tensor(&mut rng0, &[2, 3, 3, 3], -1.0, 1.0);
    run_cases(
        "conv2d_kernel_grad",
        |rng| {
            vec![
                rand_tensor(rng, &[2, 3, 5, 4], -1.0, 1.0),
                rand_tensor(rng, &[2, 2, 5, 4], -1.0, 1.0),
            ]
        },
        move |g, ids| {
            let y = g.conv2d_kernel_grad(ids[0], ids[1], 1, 3, 3)?;
            weighted_sum(g, y, &w_dk)
        },
    );
}

#[test]
fn fd_shape_ops() {
    let mut rng0 = ChaCha8Rng::seed_from_u64(11);
    let w_sum = rand_tensor(&mut rng0, &[3], -1.0, 1.0);
    run_cases(
        "sum_axes",
        |rng| vec![rand_tensor(rng, &[2, 3, 4], -1.0, 1.0)],
        move |g, ids| {
            let s = g.sum_axes(ids[0], &[0, 2])?;
            weighted_sum(g, s, &w_sum)
        },
    );
    let w_bc = rand_tensor(&mut rng0, &[4, 2, 5, 3], -1.0, 1.0);
    run_cases(
        "broadcast",
        |rng| vec![rand_tensor(rng, &[2, 1, 3], -1.0, 1.0)],
        move |g, ids| {
            let b = g.broadcast_to(ids[0], &[4, 2, 5, 3])?;
            weighted_sum(g, b, &w_bc)
        },
    );
    let w_rs = rand_tensor(&mut rng0, &[3, 4], -1.0, 1.0);
    run_cases(
        "reshape",
        |rng| vec![rand_tensor(rng, &[2, 6], -1.0, 1.0)],
        move |g, ids| {
            let r = g.reshape(ids[0], &[3, 4])?;
            weighted_sum(g, r, &w_rs)
        },
    );
    let w_cat = rand_tensor(&mut rng0, &[2, 6], -1.0, 1.0);
    run_cases(
        "concat",
        |rng| {
            vec![
                rand_tensor(rng, &[2, 1], -1.0, 1.0),
                rand_tensor(rng, &[2, 3], -1.0, 1.0),
                rand_tensor(rng, &[2, 2], -1.0, 1.0),
            ]
        },
        move |g, ids| {
            let c = g.concat(ids, 1)?;
            weighted_sum(g, c, &w_cat)
        },
    );
    let w_sl = rand_tensor(&mut rng0, &[2, 3, 3], -1.0, 1.0);
    run_cases(
        "slice",
        |rng| vec![rand_tensor(rng, &[2, 5, 3], -1.0, 1.0)],
        move |g, ids| {
            let s = g.slice(ids[0], 1, 1, 3)?;
            weighted_sum(g, s, &w_sl)
        },
    );
    run_cases(
        "l2_norm",
        |rng| vec![rand_tensor(rng, &[2, 3], 0.2, 1.5)],
        |g, ids| g.l2_norm(ids[0]),
    );
}

/// d/dx of ||Wx||^2 equals 2 W^T W x; checked against both the closed form
/// and central finite differences.
#[test]
fn grad_of_quadratic_form_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let wm = rand_tensor(&mut rng, &[4, 3], -1.0, 1.0);
        let x = rand_tensor(&mut rng, &[3, 1], -1.0, 1.0);

        let mut g = Graph::new();
        let w_id = g.constant(wm.clone()).unwrap();
        let x_id = g.leaf(x.clone(), true).unwrap();
        let wx = g.matmul(w_id, x_id).unwrap();
        let sq = g.square(wx).unwrap();
        let y = g.sum_all(sq).unwrap();
        let dx = g.grad(y, &[x_id]).unwrap()[0];
        let analytic = g.value(dx).data().to_vec();

        // closed form 2 W^T W x
        let mut expect = vec![0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                let mut wtw = 0.0;
                for r in 0..4 {
                    wtw += wm.data()[r * 3 + i] * wm.data()[r * 3 + j];
                }
                expect[i] += 2.0 * wtw * x.data()[j];
            }
        }
        for (a, e) in analytic.iter().zip(&expect) {
            assert!((a - e).abs() <= 1e-10 * e.abs().max(1.0));
        }

        let report = check_gradient(
            |g, ids| {
                let w_id = g.constant(wm.clone())?;
                let wx = g.matmul(w_id, ids[0])?;
                let sq = g.square(wx)?;
                g.sum_all(sq)
            },
            &[x.clone()],
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-6);
    }
}

/// grad_theta ||grad_x f||^2 against finite differences of ||grad_x f||^2.
#[test]
fn double_backward_through_two_layer_net() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..10 {
        let x = rand_tensor(&mut rng, &[1, 3], -1.0, 1.0);
        let w1 = rand_tensor(&mut rng, &[3, 4], -0.8, 0.8);
        let b1 = rand_tensor(&mut rng, &[1, 4], -0.3, 0.3);
        let w2 = rand_tensor(&mut rng, &[4, 1], -0.8, 0.8);

        let build = |g: &mut Graph, ids: &[NodeId]| -> Result<NodeId, AdError> {
            // f = sum(square(silu(x W1 + b1) W2)); s = ||grad_x f||^2
            let (x_id, w1_id, b1_id, w2_id) = (ids[0], ids[1], ids[2], ids[3]);
            let h1 = g.matmul(x_id, w1_id)?;
            let h1b = g.add(h1, b1_id)?;
            let a1 = g.silu(h1b)?;
            let out = g.matmul(a1, w2_id)?;
            let sq = g.square(out)?;
            let f = g.sum_all(sq)?;
            let gx = g.grad(f, &[x_id])?[0];
            let gsq = g.square(gx)?;
            g.sum_all(gsq)
        };

        let report = check_gradient(
            build,
            &[x.clone(), w1.clone(), b1.clone(), w2.clone()],
            1e-5,
            1e-3,
        )
        .unwrap();
        assert!(
            report.max_rel_err <= 1e-3,
            "double backward rel err {}",
            report.max_rel_err
        );
    }
}

#[test]
fn second_order_norm_of_network_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let w1 = rand_tensor(&mut rng, &[3, 4], -0.8, 0.8);
    let w2 = rand_tensor(&mut rng, &[4, 2], -0.8, 0.8);
    let point = rand_tensor(&mut rng, &[1, 3], -1.0, 1.0);
    let report = second_order_check(
        |g, x| {
            let w1_id = g.constant(w1.clone())?;
            let w2_id = g.constant(w2.clone())?;
            let h = g.matmul(x, w1_id)?;
            let a = g.silu(h)?;
            let o = g.matmul(a, w2_id)?;
            let sq = g.square(o)?;
            g.sum_all(sq)
        },
        &point,
        1e-5,
        1e-3,
    )
    .unwrap();
    assert!(
        report.max_rel_err <= 1e-4,
        "second order rel err {}",
        report.max_rel_err
    );
}

/// Backward emits ordinary nodes, so forward replay must reproduce every
/// value bit-exactly even after gradient passes.
#[test]
fn replay_reproduces_forward_and_gradient_nodes() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let x = rand_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
    let k = rand_tensor(&mut rng, &[3, 3, 3, 3], -0.5, 0.5);
    let mut g = Graph::new();
    let x_id = g.leaf(x, true).unwrap();
    let k_id = g.leaf(k, true).unwrap();
    let y = g.conv2d(x_id, k_id, 1).unwrap();
    let a = g.silu(y).unwrap();
    let sq = g.square(a).unwrap();
    let s = g.sum_all(sq).unwrap();
    let _grads = g.grad(s, &[x_id, k_id]).unwrap();
    let replayed = g.replay_check().unwrap();
    assert!(replayed > 10);
}

#[test]
fn deterministic_forward_and_backward() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let x = rand_tensor(&mut rng, &[2, 3, 5, 5], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
        let mut g = Graph::new();
        let x_id = g.leaf(x, true).unwrap();
        let k_id = g.leaf(k, true).unwrap();
        let y = g.conv2d(x_id, k_id, 1).unwrap();
        let a = g.silu(y).unwrap();
        let s = g.sum_all(a).unwrap();
        let grads = g.grad(s, &[x_id, k_id]).unwrap();
        (
            g.value(s).item(),
            g.value(grads[0]).data().to_vec(),
            g.value(grads[1]).data().to_vec(),
        )
    };
    let (s1, gx1, gk1) = run();
    let (s2, gx2, gk2) = run();
    assert_eq!(s1.to_bits(), s2.to_bits());
    assert_eq!(gx1, gx2);
    assert_eq!(gk1, gk2);
}

proptest! {
    /// grad(f + g) == grad(f) + grad(g) on randomly structured graphs.
    #[test]
    fn gradient_linearity(ops in proptest::collection::vec(0u8..6, 1..6), vals in proptest::collection::vec(-1.5f64..1.5, 6)) {
        let x = Tensor::from_vec(vals.clone());

        // two scalar heads over shared sub-structure choices
        let build_head = |g: &mut Graph, x_id: NodeId, ops: &[u8], flip: bool| -> NodeId {
            let mut cur = x_id;
            for (i, &op) in ops.iter().enumerate() {
                let sel = if flip { op.wrapping_add(i as u8) % 6 } else { op };
                cur = match sel {
                    0 => g.sigmoid(cur).unwrap(),
                    1 => g.silu(cur).unwrap(),
                    2 => g.scale(cur, 0.7).unwrap(),
                    3 => g.softplus(cur).unwrap(),
                    4 => g.square(cur).unwrap(),
                    _ => g.add_scalar(cur, 0.1).unwrap(),
                };
            }
            g.sum_all(cur).unwrap()
        };

        let mut g = Graph::new();
        let x_id = g.leaf(x, true).unwrap();
        let f = build_head(&mut g, x_id, &ops, false);
        let h = build_head(&mut g, x_id, &ops, true);
        let fh = g.add(f, h).unwrap();

        let gf = g.grad(f, &[x_id]).unwrap()[0];
        let gh = g.grad(h, &[x_id]).unwrap()[0];
        let gfh = g.grad(fh, &[x_id]).unwrap()[0];

        for i in 0..6 {
            let lhs = g.value(gfh).data()[i];
            let rhs = g.value(gf).data()[i] + g.value(gh).data()[i];
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1.0));
        }
    }
}
