//! Direct 2-D convolution kernels (stride 1, symmetric zero padding) and the
//! two adjoint maps needed by the tape: gradient w.r.t. the input and
//! gradient w.r.t. the kernel.
//!
//! Layouts are row-major: input `[B, C, H, W]`, kernel `[O, C, KH, KW]`,
//! output `[B, O, HO, WO]` with `HO = H + 2P - KH + 1`.
//!
//! Each output plane is written by exactly one thread with a fixed
//! accumulation order, so results are bit-identical for any thread count.

use rayon::prelude::*;

/// `y[b,o,i,j] = sum_{c,p,q} x[b,c,i+p-P,j+q-P] * k[o,c,p,q]`
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    k: &[f64],
    y: &mut [f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) {
    let ho = h + 2 * pad - kh + 1;
    let wo = w + 2 * pad - kw + 1;
    let plane = ho * wo;
    debug_assert_eq!(y.len(), b * o * plane);
    y.par_chunks_mut(plane).enumerate().for_each(|(bo, yp)| {
        let bi = bo / o;
        let oi = bo % o;
        for ci in 0..c {
            let xp = &x[(bi * c + ci) * h * w..][..h * w];
            for p in 0..kh {
                for q in 0..kw {
                    let kv = k[((oi * c + ci) * kh + p) * kw + q];
                    if kv == 0.0 {
                        continue;
                    }
                    // y[i,j] += kv * x[i+p-pad, j+q-pad] over valid ranges
                    let i0 = pad.saturating_sub(p);
                    let i1 = ho.min(h + pad - p);
                    let j0 = pad.saturating_sub(q);
                    let j1 = wo.min(w + pad - q);
                    for i in i0..i1 {
                        let xi = i + p - pad;
                        let yrow = &mut yp[i * wo + j0..i * wo + j1];
                        let xrow = &xp[xi * w + (j0 + q - pad)..][..j1 - j0];
                        for (yv, xv) in yrow.iter_mut().zip(xrow) {
                            *yv += kv * xv;
                        }
                    }
                }
            }
        }
    });
}

/// Adjoint w.r.t. the input: `dx[b,c,u,v] = sum_{o,p,q} dy[b,o,u+P-p,v+P-q] * k[o,c,p,q]`
#[allow(clippy::too_many_arguments)]
pub fn conv2d_input_grad(
    dy: &[f64],
    k: &[f64],
    dx: &mut [f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) {
    let ho = h + 2 * pad - kh + 1;
    let wo = w + 2 * pad - kw + 1;
    let plane = h * w;
    debug_assert_eq!(dx.len(), b * c * plane);
    dx.par_chunks_mut(plane).enumerate().for_each(|(bc, xp)| {
        let bi = bc / c;
        let ci = bc % c;
        for oi in 0..o {
            let dyp = &dy[(bi * o + oi) * ho * wo..][..ho * wo];
            for p in 0..kh {
                for q in 0..kw {
                    let kv = k[((oi * c + ci) * kh + p) * kw + q];
                    if kv == 0.0 {
                        continue;
                    }
                    // dx[u,v] += kv * dy[u+pad-p, v+pad-q] over valid ranges
                    let u0 = p.saturating_sub(pad);
                    let u1 = h.min(ho + p - pad);
                    let v0 = q.saturating_sub(pad);
                    let v1 = w.min(wo + q - pad);
                    for u in u0..u1 {
                        let yi = u + pad - p;
                        let xrow = &mut xp[u * w + v0..u * w + v1];
                        let yrow = &dyp[yi * wo + (v0 + pad - q)..][..v1 - v0];
                        for (xv, yv) in xrow.iter_mut().zip(yrow) {
                            *xv += kv * yv;
                        }
                    }
                }
            }
        }
    });
}

/// Adjoint w.r.t. the kernel: `dk[o,c,p,q] = sum_{b,i,j} dy[b,o,i,j] * x[b,c,i+p-P,j+q-P]`
#[allow(clippy::too_many_arguments)]
pub fn conv2d_kernel_grad(
    x: &[f64],
    dy: &[f64],
    dk: &mut [f64],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) {
    let ho = h + 2 * pad - kh + 1;
    let wo = w + 2 * pad - kw + 1;
    let plane = kh * kw;
    dk.par_chunks_mut(plane).enumerate().for_each(|(oc, kp)| {
        let oi = oc / c;
        let ci = oc % c;
        for p in 0..kh {
            for q in 0..kw {
                let i0 = pad.saturating_sub(p);
                let i1 = ho.min(h + pad - p);
                let j0 = pad.saturating_sub(q);
                let j1 = wo.min(w + pad - q);
                let mut acc = 0.0;
                for bi in 0..b {
                    let dyp = &dy[(bi * o + oi) * ho * wo..][..ho * wo];
                    let xp = &x[(bi * c + ci) * h * w..][..h * w];
                    for i in i0..i1 {
                        let xi = i + p - pad;
                        let yrow = &dyp[i * wo + j0..i * wo + j1];
                        let xrow = &xp[xi * w + (j0 + q - pad)..][..j1 - j0];
                        let mut s = 0.0;
                        for (yv, xv) in yrow.iter().zip(xrow) {
                            s += yv * xv;
                        }
                        acc += s;
                    }
                }
                kp[p * kw + q] = acc;
            }
        }
    });
}
