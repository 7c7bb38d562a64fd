//! The four training objectives: denoising MSE (optionally plus MAE),
//! contrastive, linear-regression negative contrastive (LRNCL), and the
//! per-step KL term with truncated backpropagation through sampling.
//!
//! `*_parts` builders work on shared graph nodes so one training step can
//! reuse energy evaluations across terms.

use std::collections::BTreeMap;

use diffsearch_autodiff::{Graph, NodeId, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::entropy::knn_entropy;
use crate::error::CoreError;
use crate::model::EnergyModel;
use crate::rng::randn;
use crate::schedule::NoiseSchedule;

/// Per-element forward diffusion `sqrt(ab_t) x0 + sqrt(1-ab_t) eps` where
/// each batch element carries its own timestep.
pub fn diffuse_batch(
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    s: &NoiseSchedule,
) -> Result<Tensor, CoreError> {
    let b = *x0
        .shape()
        .first()
        .ok_or_else(|| CoreError::invalid("diffuse_batch needs a batch axis"))?;
    if ts.len() != b || eps.shape() != x0.shape() {
        return Err(CoreError::invalid(format!(
            "diffuse_batch: {b} elements, {} timesteps, eps {:?}",
            ts.len(),
            eps.shape()
        )));
    }
    let inner = x0.len() / b.max(1);
    let mut out = x0.clone();
    for (i, &t) in ts.iter().enumerate() {
        if !(1..=s.t_max()).contains(&t) {
            return Err(CoreError::invalid(format!("timestep {t} outside schedule")));
        }
        let ab = s.alpha_bar(t);
        let (c0, ce) = (ab.sqrt(), (1.0 - ab).sqrt());
        for j in i * inner..(i + 1) * inner {
            out.data_mut()[j] = c0 * x0.data()[j] + ce * eps.data()[j];
        }
    }
    Ok(out)
}

/// Energy of a noisy batch plus the noise prediction (the gradient of summed
/// energy w.r.t. the noisy input).
pub struct EpsPrediction {
    pub xt: NodeId,
    pub energy: NodeId,
    pub eps: NodeId,
}

pub fn emit_eps_prediction(
    g: &mut Graph,
    model: &EnergyModel,
    params: &BTreeMap<String, NodeId>,
    cond: NodeId,
    xt_values: Tensor,
    ts: &[usize],
) -> Result<EpsPrediction, CoreError> {
    let xt = g.leaf(xt_values, true)?;
    let energy = model.emit_energy(g, params, cond, xt, ts)?;
    let total = g.sum_all(energy)?;
    let eps = g.grad(total, &[xt])?[0];
    Ok(EpsPrediction { xt, energy, eps })
}

/// Mean over the batch of the summed squared noise error, optionally plus
/// the summed absolute error.
pub fn loss_mse_parts(
    g: &mut Graph,
    eps_pred: NodeId,
    eps_true: NodeId,
    include_mae: bool,
) -> Result<NodeId, CoreError> {
    let reduce_axes: Vec<usize> = (1..g.shape(eps_pred).len()).collect();
    let diff = g.sub(eps_true, eps_pred)?;
    let sq = g.square(diff)?;
    let per = g.sum_axes(sq, &reduce_axes)?;
    let mut loss = g.mean_all(per)?;
    if include_mae {
        let ab = g.abs(diff)?;
        let pa = g.sum_axes(ab, &reduce_axes)?;
        let ma = g.mean_all(pa)?;
        loss = g.add(loss, ma)?;
    }
    Ok(loss)
}

/// Denoising loss over a batch with per-element timesteps.
#[allow(clippy::too_many_arguments)]
pub fn loss_mse(
    g: &mut Graph,
    model: &EnergyModel,
    params: &BTreeMap<String, NodeId>,
    cond: &Tensor,
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    s: &NoiseSchedule,
    include_mae: bool,
) -> Result<NodeId, CoreError> {
    let xt = diffuse_batch(x0, ts, eps, s)?;
    let cond_id = g.constant(cond.clone())?;
    let pred = emit_eps_prediction(g, model, params, cond_id, xt, ts)?;
    let eps_id = g.constant(eps.clone())?;
    loss_mse_parts(g, pred.eps, eps_id, include_mae)
}

/// `mean(softplus(E+ - E-))`, the numerically stable form of
/// `-log(exp(-E+) / (exp(-E+) + exp(-E-)))`.
pub fn loss_contrast_parts(
    g: &mut Graph,
    e_plus: NodeId,
    e_minus: NodeId,
) -> Result<NodeId, CoreError> {
    let gap = g.sub(e_plus, e_minus)?;
    let sp = g.softplus(gap)?;
    Ok(g.mean_all(sp)?)
}

pub struct LrnclLoss {
    pub node: NodeId,
    /// Elements dropped because both negatives coincided with the positive.
    pub skipped: usize,
}

/// Hinge on the fitted energy-vs-distance slope plus squared residuals to
/// the fitted line, averaged over non-degenerate batch elements.
///
/// `dists[i] = (d_minus, d_minus2)` are squared distances of the two
/// negatives; the positive sits at distance zero. The fit is linear in the
/// three energies, so slope and residuals stay differentiable.
pub fn loss_lrncl_parts(
    g: &mut Graph,
    e_plus: NodeId,
    e_minus: NodeId,
    e_minus2: NodeId,
    dists: &[(f64, f64)],
    gamma: f64,
) -> Result<LrnclLoss, CoreError> {
    let b = g.shape(e_plus)[0];
    if dists.len() != b || g.shape(e_minus)[0] != b || g.shape(e_minus2)[0] != b {
        return Err(CoreError::invalid(format!(
            "loss_lrncl: {b} energies vs {} distance pairs",
            dists.len()
        )));
    }
    // per-element least-squares weights; zeroed (and masked) when degenerate
    let mut c = [vec![0.0; b], vec![0.0; b], vec![0.0; b]];
    let mut x1 = vec![0.0; b];
    let mut x2 = vec![0.0; b];
    let mut xbar = vec![0.0; b];
    let mut mask = vec![0.0; b];
    let mut skipped = 0usize;
    for (i, &(d1, d2)) in dists.iter().enumerate() {
        let xb = (d1 + d2) / 3.0;
        let den = xb * xb + (d1 - xb) * (d1 - xb) + (d2 - xb) * (d2 - xb);
        if den <= f64::EPSILON * (1.0 + xb * xb) {
            skipped += 1;
            continue;
        }
        c[0][i] = (0.0 - xb) / den;
        c[1][i] = (d1 - xb) / den;
        c[2][i] = (d2 - xb) / den;
        x1[i] = d1;
        x2[i] = d2;
        xbar[i] = xb;
        mask[i] = 1.0;
    }
    let kept = b - skipped;
    if kept == 0 {
        return Ok(LrnclLoss {
            node: g.scalar(0.0)?,
            skipped,
        });
    }
    let cv = |g: &mut Graph, v: &[f64]| g.constant(Tensor::from_vec(v.to_vec()));

    let (c0, c1, c2) = (cv(g, &c[0])?, cv(g, &c[1])?, cv(g, &c[2])?);
    let t0 = g.mul(c0, e_plus)?;
    let t1 = g.mul(c1, e_minus)?;
    let t2 = g.mul(c2, e_minus2)?;
    let k01 = g.add(t0, t1)?;
    let slope = g.add(k01, t2)?;

    let sum01 = g.add(e_plus, e_minus)?;
    let sum = g.add(sum01, e_minus2)?;
    let ybar = g.scale(sum, 1.0 / 3.0)?;
    let xbar_c = cv(g, &xbar)?;
    let kx = g.mul(slope, xbar_c)?;
    let intercept = g.sub(ybar, kx)?;

    // residuals at x = 0, d1, d2
    let fitted0 = intercept;
    let x1c = cv(g, &x1)?;
    let kx1 = g.mul(slope, x1c)?;
    let fitted1 = g.add(kx1, intercept)?;
    let x2c = cv(g, &x2)?;
    let kx2 = g.mul(slope, x2c)?;
    let fitted2 = g.add(kx2, intercept)?;

    let r0 = g.sub(e_plus, fitted0)?;
    let r1 = g.sub(e_minus, fitted1)?;
    let r2 = g.sub(e_minus2, fitted2)?;
    let (r0s, r1s, r2s) = (g.square(r0)?, g.square(r1)?, g.square(r2)?);
    let rsum01 = g.add(r0s, r1s)?;
    let resid = g.add(rsum01, r2s)?;

    let gamma_c = g.constant(Tensor::full(&[b], gamma))?;
    let margin = g.sub(gamma_c, slope)?;
    let hinge = g.relu(margin)?;

    let elem = g.add(hinge, resid)?;
    let mask_c = cv(g, &mask)?;
    let masked = g.mul(elem, mask_c)?;
    let total = g.sum_all(masked)?;
    let node = g.scale(total, 1.0 / kept as f64)?;
    Ok(LrnclLoss { node, skipped })
}

#[derive(Debug, Clone, Copy)]
pub struct KlConfig {
    /// How many final reverse steps are differentiated through.
    pub truncation: usize,
    /// Neighbor index for the entropy estimate.
    pub entropy_k: usize,
    /// Noise scale for the sampling chain.
    pub noise_scale: f64,
}

pub struct KlLoss {
    pub node: NodeId,
    pub floored: usize,
    pub retained_steps: usize,
}

/// Runs the sampler for a conditioned batch and, over the final
/// `truncation` reverse steps, accumulates mean energy under stop-gradient
/// parameters minus the batch entropy. Earlier steps are constants.
///
/// `emit(g, x, t, stopped)` places the `[B]` energy of `x` at step `t` on
/// the graph (with parameters stop-gradient wrapped when `stopped`);
/// `plain_score(x, t)` is the tensor-level noise prediction used for the
/// non-retained prefix of the chain.
pub fn loss_kl<FE, FS>(
    g: &mut Graph,
    x_shape: &[usize],
    mut emit: FE,
    mut plain_score: FS,
    s: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    cfg: &KlConfig,
) -> Result<KlLoss, CoreError>
where
    FE: FnMut(&mut Graph, NodeId, usize, bool) -> Result<NodeId, CoreError>,
    FS: FnMut(&Tensor, usize) -> Result<Tensor, CoreError>,
{
    if cfg.truncation < 1 {
        return Err(CoreError::invalid("kl truncation must be >= 1"));
    }
    let b = x_shape[0];
    if b <= cfg.entropy_k {
        return Err(CoreError::invalid(format!(
            "kl batch {b} too small for k-NN entropy with k={}",
            cfg.entropy_k
        )));
    }
    let t_max = s.t_max();
    let trunc_hi = cfg.truncation.min(t_max);
    let d: usize = x_shape[1..].iter().product();

    // plain prefix T -> trunc_hi
    let mut x = randn(rng, x_shape);
    for t in ((trunc_hi + 1)..=t_max).rev() {
        let eps = plain_score(&x, t)?;
        let noise = randn(rng, x_shape);
        x = crate::schedule::reverse_step(&x, t, t - 1, &eps, &noise, s, cfg.noise_scale)?;
    }

    // graph suffix trunc_hi -> 0
    let mut x_node = g.leaf(x, true)?;
    let mut terms: Option<NodeId> = None;
    let mut floored = 0usize;
    for t in (1..=trunc_hi).rev() {
        let e_live = emit(g, x_node, t, false)?;
        let total = g.sum_all(e_live)?;
        let eps_node = g.grad(total, &[x_node])?[0];

        let (ab_f, ab_t) = (s.alpha_bar(t), s.alpha_bar(t - 1));
        let sigma = cfg.noise_scale * s.sigma_max(t, t - 1);
        let c_x0 = (ab_t / ab_f).sqrt();
        let c_eps = (1.0 - ab_t - sigma * sigma).max(0.0).sqrt() - c_x0 * (1.0 - ab_f).sqrt();
        let xs = g.scale(x_node, c_x0)?;
        let es = g.scale(eps_node, c_eps)?;
        let mut x_next = g.add(xs, es)?;
        if sigma > 0.0 {
            let z = randn(rng, x_shape).map(|v| v * sigma);
            let zc = g.constant(z)?;
            x_next = g.add(x_next, zc)?;
        }

        let e_stop = emit(g, x_next, t - 1, true)?;
        let mean_e = g.mean_all(e_stop)?;
        let flat = g.reshape(x_next, &[b, d])?;
        let ent = knn_entropy(g, flat, cfg.entropy_k)?;
        floored += ent.floored;
        let term = g.sub(mean_e, ent.node)?;
        terms = Some(match terms {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
        x_node = x_next;
    }
    let sum = terms.expect("trunc_hi >= 1");
    let node = g.scale(sum, 1.0 / trunc_hi as f64)?;
    Ok(KlLoss {
        node,
        floored,
        retained_steps: trunc_hi,
    })
}

/// Convenience KL entry point for a real model: shares live parameter
/// leaves and stop-gradient wraps them for the energy term.
#[allow(clippy::too_many_arguments)]
pub fn loss_kl_model(
    g: &mut Graph,
    model: &EnergyModel,
    params_live: &BTreeMap<String, NodeId>,
    cond: &Tensor,
    s: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
    cfg: &KlConfig,
) -> Result<KlLoss, CoreError> {
    let b = cond.shape()[0];
    let (h, w) = (cond.shape()[2], cond.shape()[3]);
    let x_shape = vec![b, model.arch().x_channels, h, w];
    let cond_id = g.constant(cond.clone())?;
    let mut params_stopped: Option<BTreeMap<String, NodeId>> = None;
    let model_ref = model;
    let emit = |g: &mut Graph, x: NodeId, t: usize, stopped: bool| {
        let params = if stopped {
            if params_stopped.is_none() {
                let mut stopped_map = BTreeMap::new();
                for (k, &v) in params_live.iter() {
                    stopped_map.insert(k.clone(), g.stop_grad(v)?);
                }
                params_stopped = Some(stopped_map);
            }
            params_stopped.as_ref().unwrap()
        } else {
            params_live
        };
        model_ref.emit_energy(g, params, cond_id, x, &vec![t; g.shape(x)[0]])
    };
    let plain_score = |x: &Tensor, t: usize| crate::model::ScoreModel::score(model, cond, x, t);
    loss_kl(g, &x_shape, emit, plain_score, s, rng, cfg)
}
