//! Batched denoising chains and best-of-N reranking by terminal energy.

use diffsearch_autodiff::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;
use crate::model::ScoreModel;
use crate::rng::{randn, rng_from, split_seed};
use crate::schedule::{reverse_step, NoiseSchedule};
use crate::search::BudgetLedger;

#[derive(Debug, Clone, Copy)]
pub struct ChainOptions {
    /// Multiplier on the maximal admissible sigma per step.
    pub noise_scale: f64,
    /// Inner-loop refinement iterations applied to the pre-noise state of
    /// every step; each iteration costs one score evaluation.
    pub n_opt: usize,
}

impl Default for ChainOptions {
    fn default() -> Self {
        Self {
            noise_scale: 0.9,
            n_opt: 0,
        }
    }
}

/// Step size for inner-loop descent at step `t`.
pub(crate) fn refine_step_size(s: &NoiseSchedule, t: usize) -> f64 {
    0.1 * (1.0 - s.alpha_bar(t))
}

/// Runs `l` chains batched from `t_from` down to `t_to`. Per-chain noise
/// comes from per-chain rngs, so results are identical however the batch is
/// laid out. Returns the `[L, ...]` states at `t_to`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_chains(
    model: &dyn ScoreModel,
    cond1: &Tensor,
    states: Tensor,
    t_from: usize,
    t_to: usize,
    s: &NoiseSchedule,
    opts: &ChainOptions,
    rngs: &mut [ChaCha8Rng],
    ledger: &mut BudgetLedger,
) -> Result<Tensor, CoreError> {
    let l = rngs.len();
    debug_assert_eq!(states.shape()[0], l);
    let cond_b = repeat_batch(cond1, l)?;
    let chain_shape: Vec<usize> = states.shape()[1..].to_vec();
    let mut x = states;
    for t in (t_to + 1..=t_from).rev() {
        let eps = model.score(&cond_b, &x, t)?;
        ledger.advance_evals += l as u64;
        ledger.nfe += l as u64;
        // deterministic part of the step, then inner-loop refinement, then
        // per-chain branch noise
        let zero = Tensor::zeros(x.shape());
        let mut det = reverse_step(&x, t, t - 1, &eps, &zero, s, opts.noise_scale)?;
        for _ in 0..opts.n_opt {
            let g = model.score(&cond_b, &det, t - 1)?;
            ledger.advance_evals += l as u64;
            ledger.nfe += l as u64;
            let step = refine_step_size(s, t - 1);
            for (d, gv) in det.data_mut().iter_mut().zip(g.data()) {
                *d -= step * gv;
            }
            if !det.is_finite() {
                return Err(CoreError::Numeric(format!(
                    "inner-loop refinement diverged at step {t}"
                )));
            }
        }
        let sigma = opts.noise_scale * s.sigma_max(t, t - 1);
        if sigma > 0.0 {
            let inner: usize = chain_shape.iter().product();
            for (c, rng) in rngs.iter_mut().enumerate() {
                let z = randn(rng, &chain_shape);
                for (i, zv) in z.data().iter().enumerate() {
                    det.data_mut()[c * inner + i] += sigma * zv;
                }
            }
        }
        x = det;
    }
    Ok(x)
}

pub(crate) fn repeat_batch(cond1: &Tensor, l: usize) -> Result<Tensor, CoreError> {
    let mut shape = vec![l];
    shape.extend_from_slice(cond1.shape());
    let mut data = Vec::with_capacity(cond1.len() * l);
    for _ in 0..l {
        data.extend_from_slice(cond1.data());
    }
    Ok(Tensor::new(shape, data)?)
}

pub(crate) fn init_states(
    shape1: &[usize],
    rngs: &mut [ChaCha8Rng],
) -> Result<Tensor, CoreError> {
    let l = rngs.len();
    let mut shape = vec![l];
    shape.extend_from_slice(shape1);
    let mut data = Vec::with_capacity(l * shape1.iter().product::<usize>());
    for rng in rngs.iter_mut() {
        data.extend_from_slice(randn(rng, shape1).data());
    }
    Ok(Tensor::new(shape, data)?)
}

#[derive(Debug, Clone)]
pub struct BonOutcome {
    pub winner: Tensor,
    pub winner_index: usize,
    pub candidates: Vec<Tensor>,
    pub energies: Vec<f64>,
    pub ledger: BudgetLedger,
}

/// `l` independent full denoising chains; the winner minimizes terminal
/// energy (ties to the lowest chain index).
///
/// `cond1` and the solution shape are per-problem (no batch axis).
#[allow(clippy::too_many_arguments)]
pub fn best_of_n(
    model: &dyn ScoreModel,
    cond1: &Tensor,
    x_shape1: &[usize],
    l: usize,
    s: &NoiseSchedule,
    opts: &ChainOptions,
    seed: u64,
) -> Result<BonOutcome, CoreError> {
    if l < 1 {
        return Err(CoreError::invalid("best_of_n needs L >= 1"));
    }
    let mut rngs: Vec<ChaCha8Rng> = (0..l).map(|c| rng_from(split_seed(seed, c as u64))).collect();
    let mut ledger = BudgetLedger::default();
    let init = init_states(x_shape1, &mut rngs)?;
    let x0 = run_chains(
        model,
        cond1,
        init,
        s.t_max(),
        0,
        s,
        opts,
        &mut rngs,
        &mut ledger,
    )?;
    let cond_b = repeat_batch(cond1, l)?;
    let energies = model.energy(&cond_b, &x0, 0)?;
    ledger.energy_evals += l as u64;
    let winner_index = argmin(&energies);
    let candidates: Vec<Tensor> = (0..l)
        .map(|i| crate::tasks::encode::unstack(&x0, i))
        .collect::<Result<_, _>>()?;
    Ok(BonOutcome {
        winner: candidates[winner_index].clone(),
        winner_index,
        candidates,
        energies,
        ledger,
    })
}

/// Single unguided chain (best-of-N with L = 1).
pub fn naive_chain(
    model: &dyn ScoreModel,
    cond1: &Tensor,
    x_shape1: &[usize],
    s: &NoiseSchedule,
    opts: &ChainOptions,
    seed: u64,
) -> Result<BonOutcome, CoreError> {
    best_of_n(model, cond1, x_shape1, 1, s, opts, seed)
}

pub(crate) fn argmin(values: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    best
}
