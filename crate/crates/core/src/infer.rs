//! Test-set inference driver: runs the selected search method over every
//! problem, validates decoded solutions against ground truth, and emits
//! evaluation records plus per-problem traces.
//!
//! Ground truth reaches the search only through the audited external-reward
//! wrapper; the intrinsic path computes rewards purely from the model.

use rayon::prelude::*;

use diffsearch_autodiff::Tensor;

use crate::config::RewardKind;
use crate::error::CoreError;
use crate::metrics::EvalRecord;
use crate::model::{EnergyModel, ScoreModel};
use crate::rng::split_seed;
use crate::schedule::NoiseSchedule;
use crate::search::{
    best_of_n, hmcts, AuditedTensor, BudgetLedger, MctsOptions, RewardSource, TraceRow,
};
use crate::tasks::encode::{
    decode_maze_classes, decode_sudoku_digits, encode_maze, encode_sudoku,
};
use crate::tasks::{maze_validate, sudoku_validate, Dataset};

#[derive(Debug, Clone)]
pub struct InferRequest {
    pub method_tag: String,
    pub options: MctsOptions,
    pub reward: RewardKind,
    pub seed: u64,
}

#[derive(Debug)]
pub struct ProblemOutcome {
    pub id: u64,
    pub record: EvalRecord,
    pub trace: Vec<TraceRow>,
    pub ledger: BudgetLedger,
    /// Ground-truth reads made by the reward path (zero for intrinsic).
    pub gt_reads: u64,
    /// Candidate terminal energies (best-of-N path only).
    pub candidate_energies: Vec<f64>,
    /// Squared L2 distances of each candidate to the encoded ground truth.
    pub candidate_sq_dists: Vec<f64>,
}

#[derive(Debug)]
pub struct InferOutput {
    pub outcomes: Vec<ProblemOutcome>,
}

impl InferOutput {
    pub fn records(&self) -> Vec<EvalRecord> {
        self.outcomes.iter().map(|o| o.record.clone()).collect()
    }

    pub fn total_gt_reads(&self) -> u64 {
        self.outcomes.iter().map(|o| o.gt_reads).sum()
    }
}

/// Runs the request over every instance of the dataset. Problems execute in
/// parallel; per-problem seeds split off the request seed, so results do
/// not depend on the worker count.
pub fn run_inference(
    model: &EnergyModel,
    dataset: &Dataset,
    s: &NoiseSchedule,
    req: &InferRequest,
) -> Result<InferOutput, CoreError> {
    let n = dataset.len();
    let outcomes: Result<Vec<ProblemOutcome>, CoreError> = (0..n)
        .into_par_iter()
        .map(|i|

 run_problem(model, dataset, s, req, i))
        .collect();
    Ok(InferOutput {
        outcomes: outcomes?,
    })
}

fn run_problem(
    model: &EnergyModel,
    dataset: &Dataset,
    s: &NoiseSchedule,
    req: &InferRequest,
    index: usize,
) -> Result<ProblemOutcome, CoreError> {
    let pair = match dataset {
        Dataset::Maze(items) => encode_maze(&items[index]),
        Dataset::Sudoku(items) => encode_sudoku(&items[index]),
    };
    let problem_seed = split_seed(req.seed, index as u64);
    let x_shape = pair.x.shape().to_vec();
    let reference = AuditedTensor::new(pair.x.clone());
    let reward = match req.reward {
        RewardKind::IntrinsicEnergy => RewardSource::IntrinsicEnergy,
        RewardKind::ExternalMse => RewardSource::ExternalMse {
            reference: &reference,
        },
    };

    // t_s = 0 runs the plain chain ensemble and keeps every candidate so
    // downstream consistency metrics can see them
    let (x0, ledger, trace, cand_e, cand_d);
    if req.options.t_s == 0 {
        let out = best_of_n(
            model,
            &pair.cond,
            &x_shape,
            req.options.l,
            s,
            &req.options.chain,
            problem_seed,
        )?;
        cand_d = out
            .candidates
            .iter()
            .map(|c| c.sq_dist(&pair.x))
            .collect::<Vec<f64>>();
        cand_e = out.energies.clone();
        trace = vec![TraceRow {
            step: 0,
            committed_child: out.winner_index,
            q_over_n: -out.energies[out.winner_index],
            energy_estimate: out.energies[out.winner_index],
            cumulative_nfe: out.ledger.nfe,
        }];
        ledger = out.ledger;
        x0 = out.winner;
    } else {
        let out = hmcts(
            model,
            &pair.cond,
            &x_shape,
            &req.options,
            s,
            &reward,
            problem_seed,
        )?;
        cand_e = Vec::new();
        cand_d = Vec::new();
        trace = out.trace;
        ledger = out.ledger;
        x0 = out.x0;
    }

    let cond_b = pair.cond.clone().reshaped(&prepend_one(pair.cond.shape()))?;
    let x0_b = x0.clone().reshaped(&prepend_one(x0.shape()))?;
    let final_energy = model.energy(&cond_b, &x0_b, 0)?[0];
    let l2_distance = x0.sq_dist(&pair.x);

    let (success, accuracy) = match dataset {
        Dataset::Maze(items) => {
            let classes = decode_maze_classes(&x0)?;
            let verdict = maze_validate(&items[index], &classes)?;
            let truth = items[index].classes();
            let correct = classes
                .iter()
                .zip(&truth)
                .filter(|(a, b)| a == b)
                .count();
            (
                verdict.exact_match,
                correct as f64 / truth.len() as f64,
            )
        }
        Dataset::Sudoku(items) => {
            let digits = decode_sudoku_digits(&x0, items[index].box_size)?;
            let verdict = sudoku_validate(&items[index], &digits)?;
            (verdict.success, verdict.elementwise_accuracy)
        }
    };

    Ok(ProblemOutcome {
        id: index as u64,
        record: EvalRecord {
            problem_id: index as u64,
            method: req.method_tag.clone(),
            budget: req.options.l as u64,
            success,
            elementwise_accuracy: accuracy,
            final_energy,
            l2_distance,
            nfe: ledger.nfe,
        },
        trace,
        ledger,
        gt_reads: reference.read_count(),
        candidate_energies: cand_e,
        candidate_sq_dists: cand_d,
    })
}

fn prepend_one(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1];
    s.extend_from_slice(shape);
    s
}

/// Per-problem consistency inputs from a best-of-N run: `(energies,
/// distances)` of all candidates.
pub fn candidate_pairs(outcome: &ProblemOutcome) -> Option<(&[f64], &[f64])> {
    if outcome.candidate_energies.len() >= 2 {
        Some((&outcome.candidate_energies, &outcome.candidate_sq_dists))
    } else {
        None
    }
}

#[allow(unused_imports)]
use crate::tasks::encode::EncodedPair;
