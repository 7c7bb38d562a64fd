//! Tree-search denoising and the hybrid schedule: parallel chains down to
//! the switchover step, then per-step tree search with UCB selection,
//! K-branch expansion, fast simulation rollouts, and value backpropagation.

use diffsearch_autodiff::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::CoreError;
use crate::model::ScoreModel;
use crate::rng::{randn, rng_from, split_seed};
use crate::schedule::{ddim_rollout, reverse_step, NoiseSchedule, StepSubsequence};
use crate::search::bon::{argmin, init_states, refine_step_size, repeat_batch, run_chains};
use crate::search::tree::{backpropagate, select_child, SearchTree};
use crate::search::{BudgetLedger, ChainOptions, RewardSource};

#[derive(Debug, Clone, Copy)]
pub struct MctsOptions {
    /// Number of initial chains in the best-of-N phase.
    pub l: usize,
    /// Branch count per expansion.
    pub k: usize,
    /// Rollouts per committed denoising step.
    pub n_r: usize,
    /// UCB exploration constant.
    pub c: f64,
    /// Switchover step: chains run T -> t_s, tree search runs t_s -> 0.
    /// Zero degenerates to pure best-of-N.
    pub t_s: usize,
    /// Simulation subsequence length cap.
    pub s_sim: usize,
    pub chain: ChainOptions,
}

impl Default for MctsOptions {
    fn default() -> Self {
        Self {
            l: 16,
            k: 16,
            n_r: 16,
            c: 100.0,
            t_s: 4,
            s_sim: 5,
            chain: ChainOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub committed_child: usize,
    pub q_over_n: f64,
    /// Energy estimate of the committed branch (negated mean reward).
    pub energy_estimate: f64,
    pub cumulative_nfe: u64,
}

#[derive(Debug)]
pub struct SearchOutcome {
    pub x0: Tensor,
    pub ledger: BudgetLedger,
    pub trace: Vec<TraceRow>,
    pub degenerate_expansions: u64,
}

fn as_batch1(t: &Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.clone().reshaped(&shape).expect("adding batch axis")
}

fn from_batch1(t: Tensor) -> Tensor {
    let shape: Vec<usize> = t.shape()[1..].to_vec();
    t.reshaped(&shape).expect("dropping batch axis")
}

/// Expands a leaf: one score evaluation (plus refinement), then K branches
/// sharing the deterministic part and differing by `sigma * eps_k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn expand(
    tree: &mut SearchTree,
    leaf: usize,
    model: &dyn ScoreModel,
    cond1: &Tensor,
    k: usize,
    s: &NoiseSchedule,
    chain: &ChainOptions,
    rng: &mut ChaCha8Rng,
    ledger: &mut BudgetLedger,
) -> Result<bool, CoreError> {
    if tree.is_terminal(leaf) {
        return Err(CoreError::invalid("cannot expand a terminal node"));
    }
    if !tree.node(leaf).children.is_empty() {
        return Err(CoreError::invalid("node is already expanded"));
    }
    let t = tree.node(leaf).step;
    let cond_b = as_batch1(cond1);
    let x_b = as_batch1(&tree.node(leaf).state);
    let eps = model.score(&cond_b, &x_b, t)?;
    ledger.advance_evals += 1;
    let zero = Tensor::zeros(x_b.shape());
    let mut det = reverse_step(&x_b, t, t - 1, &eps, &zero, s, chain.noise_scale)?;
    for _ in 0..chain.n_opt {
        let g = model.score(&cond_b, &det, t - 1)?;
        ledger.advance_evals += 1;
        let step = refine_step_size(s, t - 1);
        for (d, gv) in det.data_mut().iter_mut().zip(g.data()) {
            *d -= step * gv;
        }
    }
    let det = from_batch1(det);
    let sigma = chain.noise_scale * s.sigma_max(t, t - 1);
    for _ in 0..k {
        let mut child_state = det.clone();
        if sigma > 0.0 {
            let z = randn(rng, det.shape());
            for (cv, zv) in child_state.data_mut().iter_mut().zip(z.data()) {
                *cv += sigma * zv;
            }
        }
        tree.add_child(leaf, child_state, t - 1);
    }
    Ok(sigma == 0.0)
}

/// Values a node: terminal states score directly, non-terminal states run a
/// deterministic fast rollout to an `x0` estimate first.
pub(crate) fn simulate(
    tree: &SearchTree,
    node: usize,
    model: &dyn ScoreModel,
    cond1: &Tensor,
    s: &NoiseSchedule,
    s_sim: usize,
    reward: &RewardSource,
    ledger: &mut BudgetLedger,
) -> Result<f64, CoreError> {
    let n = tree.node(node);
    let cond_b = as_batch1(cond1);
    if n.step == 0 {
        return reward.reward(model, &cond_b, &as_batch1(&n.state), ledger);
    }
    let sub = StepSubsequence::uniform(n.step, s_sim, s.t_max())?;
    let (x0, evals) = ddim_rollout(&as_batch1(&n.state), n.step, &sub, model, &cond_b, s)?;
    ledger.sim_evals += evals as u64;
    ledger.simulations += 1;
    reward.reward(model, &cond_b, &x0, ledger)
}

/// One committed denoising step: `n_r` rollouts of select/expand/simulate/
/// backpropagate, then commitment to the root child with the largest mean
/// value (ties to the lowest index). The chosen child keeps its subtree.
#[allow(clippy::too_many_arguments)]
pub fn mcts_denoise_step(
    tree: &mut SearchTree,
    model: &dyn ScoreModel,
    cond1: &Tensor,
    opts: &MctsOptions,
    s: &NoiseSchedule,
    reward: &RewardSource,
    rng: &mut ChaCha8Rng,
    ledger: &mut BudgetLedger,
) -> Result<(usize, f64, u64), CoreError> {
    if tree.is_terminal(tree.root()) {
        return Err(CoreError::invalid("root is terminal"));
    }
    if opts.n_r < 1 {
        return Err(CoreError::invalid("need at least one rollout"));
    }
    // budget charge for this step; realized evals can fall short only next
    // to terminal states
    ledger.nfe += (opts.n_r * (1 + opts.chain.n_opt)) as u64;
    let mut degenerate = 0u64;

    for _ in 0..opts.n_r {
        ledger.rollouts += 1;
        // selection
        let mut path = vec![tree.root()];
        let mut cur = tree.root();
        while let Some(next) = select_child(tree, cur, opts.c) {
            path.push(next);
            cur = next;
            if tree.node(cur).n == 0 {
                break;
            }
        }
        let value = if tree.is_terminal(cur) {
            simulate(tree, cur, model, cond1, s, opts.s_sim, reward, ledger)?
        } else {
            if expand(tree, cur, model, cond1, opts.k, s, &opts.chain, rng, ledger)? {
                degenerate += 1;
            }
            let pick = rng.random_range(0..opts.k);
            let child = tree.node(cur).children[pick];
            path.push(child);
            simulate(tree, child, model, cond1, s, opts.s_sim, reward, ledger)?
        };
        backpropagate(tree, &path, value)?;
    }

    // commit to the best visited child
    let root = tree.root();
    let mut best: Option<(usize, f64)> = None;
    for &ch in &tree.node(root).children {
        let n = tree.node(ch);
        if n.n == 0 {
            continue;
        }
        let qn = n.q / n.n as f64;
        if best.map(|(_, b)| qn > b).unwrap_or(true) {
            best = Some((ch, qn));
        }
    }
    let (chosen, qn) =
        best.ok_or_else(|| CoreError::Numeric("no visited child to commit".to_string()))?;
    tree.commit(chosen)?;
    Ok((chosen, qn, degenerate))
}

/// Hybrid search: best-of-N chains from T down to `t_s`, energy reranking
/// at the switchover, then tree-search denoising to the terminal state.
#[allow(clippy::too_many_arguments)]
pub fn hmcts(
    model: &dyn ScoreModel,
    cond1: &Tensor,
    x_shape1: &[usize],
    opts: &MctsOptions,
    s: &NoiseSchedule,
    reward: &RewardSource,
    seed: u64,
) -> Result<SearchOutcome, CoreError> {
    let t_max = s.t_max();
    if opts.t_s + 1 > t_max {
        return Err(CoreError::invalid(format!(
            "t_s={} must lie in 0..={}",
            opts.t_s,
            t_max - 1
        )));
    }
    if opts.l < 1 || opts.k < 1 {
        return Err(CoreError::invalid("need L >= 1 and K >= 1"));
    }
    let mut ledger = BudgetLedger::default();
    let mut trace = Vec::new();
    let mut rngs: Vec<ChaCha8Rng> = (0..opts.l)
        .map(|c| rng_from(split_seed(seed, c as u64)))
        .collect();

    let init = init_states(x_shape1, &mut rngs)?;
    let states = run_chains(
        model,
        cond1,
        init,
        t_max,
        opts.t_s,
        s,
        &opts.chain,
        &mut rngs,
        &mut ledger,
    )?;
    let cond_b = repeat_batch(cond1, opts.l)?;
    let energies = model.energy(&cond_b, &states, opts.t_s)?;
    ledger.energy_evals += opts.l as u64;
    let winner = argmin(&energies);
    trace.push(TraceRow {
        step: opts.t_s,
        committed_child: winner,
        q_over_n: -energies[winner],
        energy_estimate: energies[winner],
        cumulative_nfe: ledger.nfe,
    });
    let chosen = crate::tasks::encode::unstack(&states, winner)?;
    if opts.t_s == 0 {
        return Ok(SearchOutcome {
            x0: chosen,
            ledger,
            trace,
            degenerate_expansions: 0,
        });
    }

    let mut tree = SearchTree::new(chosen, opts.t_s);
    let mut rng = rng_from(split_seed(seed, u64::MAX));
    let mut degenerate = 0u64;
    for t in (1..=opts.t_s).rev() {
        debug_assert_eq!(tree.node(tree.root()).step, t);
        let (child, qn, dg) =
            mcts_denoise_step(&mut tree, model, cond1, opts, s, reward, &mut rng, &mut ledger)?;
        degenerate += dg;
        trace.push(TraceRow {
            step: t - 1,
            committed_child: child,
            q_over_n: qn,
            energy_estimate: -qn,
            cumulative_nfe: ledger.nfe,
        });
    }
    Ok(SearchOutcome {
        x0: tree.node(tree.root()).state.clone(),
        ledger,
        trace,
        degenerate_expansions: degenerate,
    })
}
