//! Adam training loop over the weighted four-term objective, with
//! append-only metrics logging, periodic checkpoints, and bit-exact resume
//! at thread count one.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use diffsearch_autodiff::{Graph, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, TrainState};
use crate::error::CoreError;
use crate::losses::{
    diffuse_batch, emit_eps_prediction, loss_contrast_parts, loss_kl_model, loss_lrncl_parts,
    loss_mse_parts, KlConfig,
};
use crate::model::EnergyModel;
use crate::negatives::{gen_negatives, NegativeKind};
use crate::rng::randn;
use crate::schedule::NoiseSchedule;
use crate::tasks::encode::stack;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub mse: f64,
    pub contrast: f64,
    pub lrncl: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // the full objective is an unweighted sum
        Self {
            mse: 1.0,
            contrast: 1.0,
            lrncl: 1.0,
            kl: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamPrecision {
    /// Parameters and optimizer state are rounded through f32 after every
    /// update, so checkpoints are lossless and resume is bit-exact.
    F32,
    /// Full f64 state; checkpoints truncate to f32 (resume then only
    /// approximately reproduces an uninterrupted run).
    F64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weights: LossWeights,
    /// LRNCL slope margin.
    pub gamma: f64,
    pub entropy_k: usize,
    pub kl_truncation: usize,
    pub kl_noise_scale: f64,
    pub negative_kind: NegativeKind,
    /// Adds a summed-absolute-error term to the denoising loss.
    pub include_mae: bool,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub param_precision: ParamPrecision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            lr: 1e-4,
            weights: LossWeights::default(),
            gamma: 0.05,
            entropy_k: 3,
            kl_truncation: 2,
            kl_noise_scale: 1.0,
            negative_kind: NegativeKind::ChannelPermutation,
            include_mae: false,
            seed: 0,
            checkpoint_every: 0,
            param_precision: ParamPrecision::F32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub l_mse: f64,
    pub l_contrast: f64,
    pub l_lrncl: f64,
    pub l_kl: f64,
    pub total: f64,
    pub wall_ms: f64,
}

pub const METRICS_HEADER: &str = "step,l_mse,l_contrast,l_lrncl,l_kl,total,wall_ms";

impl LossReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.step, self.l_mse, self.l_contrast, self.l_lrncl, self.l_kl, self.total,
            self.wall_ms
        )
    }
}

/// Encoded training pairs grouped by grid shape so every batch is stackable.
#[derive(Debug, Clone)]
pub struct TrainData {
    buckets: Vec<Bucket>,
    total: usize,
}

#[derive(Debug, Clone)]
struct Bucket {
    conds: Vec<Tensor>,
    xs: Vec<Tensor>,
}

impl TrainData {
    pub fn from_pairs(pairs: Vec<crate::tasks::EncodedPair>) -> Result<Self, CoreError> {
        if pairs.is_empty() {
            return Err(CoreError::invalid("empty training set"));
        }
        let mut buckets: Vec<(Vec<usize>, Bucket)> = Vec::new();
        let total = pairs.len();
        for p in pairs {
            let shape = p.x.shape().to_vec();
            match buckets.iter_mut().find(|(s, _)| *s == shape) {
                Some((_, b)) => {
                    b.conds.push(p.cond);
                    b.xs.push(p.x);
                }
                None => buckets.push((
                    shape,
                    Bucket {
                        conds: vec![p.cond],
                        xs: vec![p.x],
                    },
                )),
            }
        }
        Ok(Self {
            buckets: buckets.into_iter().map(|(_, b)| b).collect(),
            total,
        })
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
}

/// Mutable training state: model, Adam moments, step counter, RNG stream.
pub struct TrainRun {
    pub model: EnergyModel,
    opt_m: BTreeMap<String, Tensor>,
    opt_v: BTreeMap<String, Tensor>,
    rng: ChaCha8Rng,
    seed: u64,
    step: u64,
}

pub struct TrainSinks<'a> {
    pub metrics: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<&'a Path>,
}

impl<'a> Default for TrainSinks<'a> {
    fn default() -> Self {
        Self {
            metrics: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainRun {
    pub fn new(model: EnergyModel, seed: u64) -> Self {
        let zeros: BTreeMap<String, Tensor> = model
            .params()
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            opt_m: zeros.clone(),
            opt_v: zeros,
            model,
            rng: crate::rng::rng_from(seed),
            seed,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, CoreError> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(ck.state.rng_seed);
        rng.set_word_pos(ck.state.rng_word_pos);
        let mut opt_m = BTreeMap::new();
        let mut opt_v = BTreeMap::new();
        for (k, t) in &ck.tensors {
            if let Some(name) = k.strip_prefix("opt.m.") {
                opt_m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("opt.v.") {
                opt_v.insert(name.to_string(), t.clone());
            }
        }
        let state = ck.state;
        let model = Checkpoint {
            arch: ck.arch.clone(),
            tensors: ck.model_params(),
            state,
        }
        .into_model()?;
        if opt_m.is_empty() {
            // checkpoint without optimizer state starts moments at zero
            opt_m = model
                .params()
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect();
            opt_v = opt_m.clone();
        }
        Ok(Self {
            model,
            opt_m,
            opt_v,
            rng,
            seed: state.rng_seed,
            step: state.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = self.model.params().clone();
        for (k, t) in &self.opt_m {
            tensors.insert(format!("opt.m.{k}"), t.clone());
        }
        for (k, t) in &self.opt_v {
            tensors.insert(format!("opt.v.{k}"), t.clone());
        }
        Checkpoint {
            arch: self.model.arch().clone(),
            tensors,
            state: TrainState {
                step: self.step,
                rng_seed: self.seed,
                rng_word_pos: self.rng.get_word_pos(),
            },
        }
    }

    /// One optimization step over a sampled batch.
    pub fn step_once(
        &mut self,
        data: &TrainData,
        s: &NoiseSchedule,
        cfg: &TrainConfig,
    ) -> Result<LossReport, CoreError> {
        let started = Instant::now();
        let w = &cfg.weights;
        let need_negatives = w.contrast != 0.0 || w.lrncl != 0.0;

        // --- sample the batch (fixed draw order for reproducibility) ---
        let pick = self.rng.random_range(0..data.total);
        let mut acc = 0usize;
        let mut bucket = &data.buckets[0];
        for b in &data.buckets {
            acc += b.xs.len();
            if pick < acc {
                bucket = b;
                break;
            }
        }
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| self.rng.random_range(0..bucket.xs.len()))
            .collect();
        let conds: Vec<&Tensor> = idx.iter().map(|&i| &bucket.conds[i]).collect();
        let xs: Vec<&Tensor> = idx.iter().map(|&i| &bucket.xs[i]).collect();
        let cond_b = stack(&conds)?;
        let x0_b = stack(&xs)?;
        let ts: Vec<usize> = (0..cfg.batch_size)
            .map(|_| self.rng.random_range(1..=s.t_max()))
            .collect();
        let eps = randn(&mut self.rng, x0_b.shape());

        let mut negs = Vec::new();
        if need_negatives {
            for &i in &idx {
                negs.push(gen_negatives(
                    &bucket.xs[i],
                    &cfg.negative_kind,
                    &mut self.rng,
                )?);
            }
        }

        // --- build the step graph ---
        let mut g = Graph::new();
        let params = self.model.param_nodes(&mut g, true, false)?;
        let param_names: Vec<String> = params.keys().cloned().collect();
        let cond_id = g.constant(cond_b.clone())?;

        let mut report = LossReport {
            step: self.step,
            l_mse: 0.0,
            l_contrast: 0.0,
            l_lrncl: 0.0,
            l_kl: 0.0,
            total: 0.0,
            wall_ms: 0.0,
        };
        let mut total_node = None;
        let mut add_term = |g: &mut Graph,
                            node: diffsearch_autodiff::NodeId,
                            weight: f64,
                            slot: &mut f64|
         -> Result<(), CoreError> {
            *slot = g.value(node).item();
            let scaled = g.scale(node, weight)?;
            total_node = Some(match total_node {
                None => scaled,
                Some(acc) => g.add(acc, scaled)?,
            });
            Ok(())
        };

        // E+ and the noise prediction are shared by MSE/contrast/LRNCL
        let xt = diffuse_batch(&x0_b, &ts, &eps, s)?;
        let pred = emit_eps_prediction(&mut g, &self.model, &params, cond_id, xt, &ts)?;
        if w.mse != 0.0 {
            let eps_id = g.constant(eps.clone())?;
            let mse = loss_mse_parts(&mut g, pred.eps, eps_id, cfg.include_mae)?;
            add_term(&mut g, mse, w.mse, &mut report.l_mse)?;
        }

        if need_negatives {
            // both negatives share the positive's noise draw
            let xm: Vec<&Tensor> = negs.iter().map(|n| &n.x_minus).collect();
            let xm2: Vec<&Tensor> = negs.iter().map(|n| &n.x_minus2).collect();
            let xm_b = stack(&xm)?;
            let xm2_b = stack(&xm2)?;
            let xtm = diffuse_batch(&xm_b, &ts, &eps, s)?;
            let xtm2 = diffuse_batch(&xm2_b, &ts, &eps, s)?;
            // one batched energy pass over [near; far]
            let both = Tensor::new(
                {
                    let mut sh = xtm.shape().to_vec();
                    sh[0] *= 2;
                    sh
                },
                xtm.data()
                    .iter()
                    .chain(xtm2.data())
                    .copied()
                    .collect(),
            )?;
            let cond2 = Tensor::new(
                {
                    let mut sh = cond_b.shape().to_vec();
                    sh[0] *= 2;
                    sh
                },
                cond_b
                    .data()
                    .iter()
                    .chain(cond_b.data())
                    .copied()
                    .collect(),
            )?;
            let ts2: Vec<usize> = ts.iter().chain(ts.iter()).copied().collect();
            let cond2_id = g.constant(cond2)?;
            let both_id = g.leaf(both, false)?;
            let e_both = self
                .model
                .emit_energy(&mut g, &params, cond2_id, both_id, &ts2)?;
            let e_minus = g.slice(e_both, 0, 0, cfg.batch_size)?;
            let e_minus2 = g.slice(e_both, 0, cfg.batch_size, cfg.batch_size)?;

            if w.contrast != 0.0 {
                let c = loss_contrast_parts(&mut g, pred.energy, e_minus)?;
                add_term(&mut g, c, w.contrast, &mut report.l_contrast)?;
            }
            if w.lrncl != 0.0 {
                let dists: Vec<(f64, f64)> =
                    negs.iter().map(|n| (n.d_minus, n.d_minus2)).collect();
                let l = loss_lrncl_parts(
                    &mut g,
                    pred.energy,
                    e_minus,
                    e_minus2,
                    &dists,
                    cfg.gamma,
                )?;
                add_term(&mut g, l.node, w.lrncl, &mut report.l_lrncl)?;
            }
        }

        if w.kl != 0.0 {
            let kl_cfg = KlConfig {
                truncation: cfg.kl_truncation,
                entropy_k: cfg.entropy_k,
                noise_scale: cfg.kl_noise_scale,
            };
            let kl = loss_kl_model(
                &mut g,
                &self.model,
                &params,
                &cond_b,
                s,
                &mut self.rng,
                &kl_cfg,
            )?;
            add_term(&mut g, kl.node, w.kl, &mut report.l_kl)?;
        }

        let total =
            total_node.ok_or_else(|| CoreError::invalid("all loss weights are zero"))?;
        report.total = g.value(total).item();
        if !report.total.is_finite() {
            return Err(CoreError::Numeric(format!(
                "non-finite total loss at step {} (batch id {})",
                self.step, self.step
            )));
        }

        let param_ids: Vec<diffsearch_autodiff::NodeId> =
            param_names.iter().map(|n| params[n]).collect();
        let grads = g.grad(total, &param_ids)?;
        let grad_values: Vec<(String, Tensor)> = param_names
            .iter()
            .cloned()
            .zip(grads.iter().map(|&id| g.value(id).clone()))
            .collect();
        drop(g);

        // --- Adam ---
        let (b1, b2, eps_adam): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let quantize = cfg.param_precision == ParamPrecision::F32;
        for (name, grad) in grad_values {
            let m = self.opt_m.get_mut(&name).expect("moment exists");
            let v = self.opt_v.get_mut(&name).expect("moment exists");
            let p = self
                .model
                .params_mut()
                .get_mut(&name)
                .expect("param exists");
            for i in 0..p.len() {
                let gi = grad.data()[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let mut pi = p.data()[i] - cfg.lr * mhat / (vhat.sqrt() + eps_adam);
                let (mut mq, mut vq) = (mi, vi);
                if quantize {
                    pi = (pi as f32) as f64;
                    mq = (mi as f32) as f64;
                    vq = (vi as f32) as f64;
                }
                p.data_mut()[i] = pi;
                m.data_mut()[i] = mq;
                v.data_mut()[i] = vq;
            }
        }

        self.step += 1;
        report.wall_ms = started.elapsed().as_secs_f64() * 1e3;
        Ok(report)
    }

    /// Runs `cfg.steps` optimization steps, streaming metrics rows and
    /// periodic checkpoints into the sinks. On a numeric failure the last
    /// state is dumped as `checkpoint-abort.vfsc` before the error returns.
    pub fn run(
        &mut self,
        data: &TrainData,
        s: &NoiseSchedule,
        cfg: &TrainConfig,
        sinks: &mut TrainSinks,
    ) -> Result<(), CoreError> {
        if let (Some(m), 0) = (sinks.metrics.as_deref_mut(), self.step) {
            writeln!(m, "{METRICS_HEADER}")?;
        }
        while self.step < cfg.steps {
            match self.step_once(data, s, cfg) {
                Ok(report) => {
                    if let Some(m) = sinks.metrics.as_deref_mut() {
                        writeln!(m, "{}", report.csv_row())?;
                    }
                    if let Some(dir) = sinks.checkpoint_dir {
                        let due = cfg.checkpoint_every > 0
                            && self.step % cfg.checkpoint_every == 0;
                        if due {
                            self.checkpoint()
                                .save(&dir.join(format!("checkpoint-{:07}.vfsc", self.step)))?;
                        }
                    }
                }
                Err(e) => {
                    if let Some(dir) = sinks.checkpoint_dir {
                        let _ = self.checkpoint().save(&dir.join("checkpoint-abort.vfsc"));
                    }
                    return Err(e);
                }
            }
        }
        if let Some(dir) = sinks.checkpoint_dir {
            self.checkpoint()
                .save(&dir.join("checkpoint-final.vfsc"))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;
    use crate::schedule::ScheduleKind;
    use crate::tasks::encode::EncodedPair;

    fn toy_data(n: usize, seed: u64) -> TrainData {
        // tiny 3x3 grids whose solution is the condition shifted; enough
        // structure for the denoising loss to fall
        let mut rng = crate::rng::rng_from(seed);
        let pairs: Vec<EncodedPair> = (0..n)
            .map(|_| {
                let cond = randn(&mut rng, &[2, 3, 3]);
                let x = cond.map(|v| (v * 0.5).tanh());
                EncodedPair { cond, x }
            })
            .collect();
        TrainData::from_pairs(pairs).unwrap()
    }

    fn tiny_cfg(steps: u64) -> (EnergyModel, NoiseSchedule, TrainConfig) {
        let model = EnergyModel::init(
            Arch {
                cond_channels: 2,
                x_channels: 2,
                width: 6,
                blocks: 1,
                kernel: 3,
                emb_dim: 4,
            },
            21,
        )
        .unwrap();
        let s = NoiseSchedule::build(5, ScheduleKind::LinearBeta, 1.0).unwrap();
        let cfg = TrainConfig {
            steps,
            batch_size: 6,
            lr: 3e-3,
            weights: LossWeights {
                mse: 1.0,
                contrast: 0.0,
                lrncl: 0.0,
                kl: 0.0,
            },
            seed: 5,
            ..TrainConfig::default()
        };
        (model, s, cfg)
    }

    #[test]
    fn mse_only_training_halves_the_loss() {
        let data = toy_data(64, 1);
        let (model, s, cfg) = tiny_cfg(500);
        let mut run = TrainRun::new(model, cfg.seed);
        let first = run.step_once(&data, &s, &cfg).unwrap();
        let mut last = first;
        for _ in 1..cfg.steps {
            last = run.step_once(&data, &s, &cfg).unwrap();
        }
        assert!(
            last.total <= 0.5 * first.total,
            "loss {} -> {} did not halve",
            first.total,
            last.total
        );
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = toy_data(16, 2);
        let (model, s, mut cfg) = tiny_cfg(3);
        cfg.lr = 0.0;
        let before = model.params().clone();
        let mut run = TrainRun::new(model, cfg.seed);
        for _ in 0..3 {
            run.step_once(&data, &s, &cfg).unwrap();
        }
        assert_eq!(&before, run.model.params());
    }

    #[test]
    fn resume_reproduces_uninterrupted_run_bit_exactly() {
        let data = toy_data(32, 3);
        let (model, s, mut cfg) = tiny_cfg(8);
        cfg.weights = LossWeights {
            mse: 1.0,
            contrast: 1.0,
            lrncl: 1.0,
            kl: 0.0,
        };

        let mut full = TrainRun::new(model.clone(), cfg.seed);
        for _ in 0..8 {
            full.step_once(&data, &s, &cfg).unwrap();
        }

        let mut half = TrainRun::new(model, cfg.seed);
        for _ in 0..4 {
            half.step_once(&data, &s, &cfg).unwrap();
        }
        let ck = half.checkpoint();
        let bytes = ck.to_bytes();
        let mut resumed =
            TrainRun::from_checkpoint(Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        for _ in 0..4 {
            resumed.step_once(&data, &s, &cfg).unwrap();
        }

        for (name, t) in full.model.params() {
            let r = &resumed.model.params()[name];
            assert_eq!(t.data(), r.data(), "param {name} diverged after resume");
        }
    }

    #[test]
    fn full_objective_step_is_finite() {
        let data = toy_data(16, 4);
        let (model, s, mut cfg) = tiny_cfg(1);
        cfg.weights = LossWeights::default();
        cfg.entropy_k = 2;
        cfg.batch_size = 6;
        let mut run = TrainRun::new(model, cfg.seed);
        let r = run.step_once(&data, &s, &cfg).unwrap();
        for v in [r.l_mse, r.l_contrast, r.l_lrncl, r.l_kl, r.total] {
            assert!(v.is_finite());
        }
        assert!(r.l_contrast >= 0.0 && r.l_lrncl >= 0.0);
        // total is the weighted sum of the parts
        let sum = r.l_mse + r.l_contrast + r.l_lrncl + r.l_kl;
        assert!((r.total - sum).abs() < 1e-9 * sum.abs().max(1.0));
    }

    #[test]
    fn metrics_rows_match_steps() {
        let data = toy_data(16, 5);
        let (model, s, cfg) = tiny_cfg(5);
        let mut run = TrainRun::new(model, cfg.seed);
        let mut buf = Vec::new();
        let mut sinks = TrainSinks {
            metrics: Some(&mut buf),
            checkpoint_dir: None,
        };
        run.run(&data, &s, &cfg, &mut sinks).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        assert_eq!(lines.count(), 5);
    }
}
