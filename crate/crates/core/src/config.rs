//! Declarative run configuration: one TOML file with full defaulting
//! drives dataset generation, training, inference, and sweeps.

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::model::Arch;
use crate::negatives::NegativeKind;
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::search::{ChainOptions, MctsOptions};
use crate::tasks::TaskKind;
use crate::train::{LossWeights, ParamPrecision, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSection,
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub infer: InferSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskSection::default(),
            schedule: ScheduleSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            infer: InferSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    /// Maze lattice sizes used for training data.
    pub train_sizes: Vec<usize>,
    /// Maze lattice size of the test split.
    pub test_size: usize,
    /// Sudoku box size (grid is b^2 x b^2).
    pub box_size: usize,
    pub train_givens: usize,
    pub test_givens: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            kind: TaskKind::Maze,
            train_sizes: vec![4, 5],
            test_size: 6,
            box_size: 2,
            train_givens: 10,
            test_givens: 6,
            train_count: 2048,
            test_count: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub t: usize,
    pub kind: ScheduleKind,
    pub eta: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            t: 10,
            kind: ScheduleKind::LinearBeta,
            eta: 1.0,
        }
    }
}

impl ScheduleSection {
    pub fn build(&self) -> Result<NoiseSchedule, CoreError> {
        NoiseSchedule::build(self.t, self.kind, self.eta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub width: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub emb_dim: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            width: 64,
            blocks: 2,
            kernel: 3,
            emb_dim: 64,
            seed: 0,
        }
    }
}

impl ModelSection {
    pub fn arch(&self, task: &TaskSection) -> Arch {
        let (cond_channels, x_channels) = match task.kind {
            TaskKind::Maze => (3, 3),
            TaskKind::Sudoku => {
                let n = task.box_size * task.box_size;
                (n + 1, n)
            }
        };
        Arch {
            cond_channels,
            x_channels,
            width: self.width,
            blocks: self.blocks,
            kernel: self.kernel,
            emb_dim: self.emb_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub gamma: f64,
    pub entropy_k: usize,
    pub kl_truncation: usize,
    pub kl_noise_scale: f64,
    pub negative: NegativeKind,
    /// Adds the summed-absolute-error term; defaults to on for mazes.
    pub include_mae: Option<bool>,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub precision: ParamPrecision,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 8,
            lr: 1e-4,
            weights: LossWeights::default(),
            gamma: 0.05,
            entropy_k: 3,
            kl_truncation: 2,
            kl_noise_scale: 1.0,
            negative: NegativeKind::ChannelPermutation,
            include_mae: None,
            seed: 0,
            checkpoint_every: 5000,
            precision: ParamPrecision::F32,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, task: &TaskSection) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            weights: self.weights,
            gamma: self.gamma,
            entropy_k: self.entropy_k,
            kl_truncation: self.kl_truncation,
            kl_noise_scale: self.kl_noise_scale,
            negative_kind: self.negative,
            include_mae: self
                .include_mae
                .unwrap_or(task.kind == TaskKind::Maze),
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            param_precision: self.precision,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferMethod {
    Naive,
    Bon,
    Mcts,
    Hmcts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    IntrinsicEnergy,
    ExternalMse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSection {
    pub method: InferMethod,
    pub l: usize,
    pub k: usize,
    pub n_r: usize,
    pub t_s: usize,
    pub c: f64,
    pub n_opt: usize,
    pub s_sim: usize,
    /// When unset, naive inference uses 0.1 and search methods 0.9.
    pub noise_scale: Option<f64>,
    pub reward: RewardKind,
    pub seed: u64,
}

impl Default for InferSection {
    fn default() -> Self {
        Self {
            method: InferMethod::Hmcts,
            l: 16,
            k: 16,
            n_r: 16,
            t_s: 4,
            c: 100.0,
            n_opt: 5,
            s_sim: 5,
            noise_scale: None,
            reward: RewardKind::IntrinsicEnergy,
            seed: 0,
        }
    }
}

impl InferSection {
    /// Per-method default noise scale: small for naive denoising, large for
    /// the search methods that need branch diversity.
    pub fn effective_noise_scale(&self) -> f64 {
        self.noise_scale.unwrap_or(match self.method {
            InferMethod::Naive => 0.1,
            _ => 0.9,
        })
    }

    pub fn chain_options(&self) -> ChainOptions {
        ChainOptions {
            noise_scale: self.effective_noise_scale(),
            n_opt: self.n_opt,
        }
    }

    /// Options for the unified search entry point. Naive maps to a single
    /// chain, pure tree search starts at `T - 1`.
    pub fn mcts_options(&self, t_max: usize) -> MctsOptions {
        let (l, t_s) = match self.method {
            InferMethod::Naive => (1, 0),
            InferMethod::Bon => (self.l, 0),
            InferMethod::Mcts => (self.l, t_max - 1),
            InferMethod::Hmcts => (self.l, self.t_s),
        };
        MctsOptions {
            l,
            k: self.k,
            n_r: self.n_r,
            c: self.c,
            t_s,
            s_sim: self.s_sim,
            chain: self.chain_options(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub budgets: Vec<u64>,
    pub t_s: Vec<usize>,
    pub noise_scale: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            budgets: vec![1, 4, 16],
            t_s: Vec::new(),
            noise_scale: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CoreError> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| CoreError::invalid(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hard validation plus soft warnings (budget-parity advice).
    pub fn validate(&self) -> Result<Vec<String>, CoreError> {
        let mut warnings = Vec::new();
        if self.schedule.t < 1 {
            return Err(CoreError::invalid("schedule.t must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.schedule.eta) {
            return Err(CoreError::invalid("schedule.eta must lie in [0,1]"));
        }
        match self.task.kind {
            TaskKind::Maze => {
                if self.task.train_sizes.iter().any(|&m| m < 2) || self.task.test_size < 2 {
                    return Err(CoreError::invalid("maze sizes must be >= 2"));
                }
            }
            TaskKind::Sudoku => {
                if !(self.task.box_size == 2 || self.task.box_size == 3) {
                    return Err(CoreError::invalid("sudoku box size must be 2 or 3"));
                }
                let cells = self.task.box_size.pow(4);
                if self.task.train_givens > cells || self.task.test_givens > cells {
                    return Err(CoreError::invalid("givens exceed the grid"));
                }
            }
        }
        if self.infer.t_s + 1 > self.schedule.t {
            return Err(CoreError::invalid(format!(
                "infer.t_s = {} must be below schedule.t = {}",
                self.infer.t_s, self.schedule.t
            )));
        }
        if let Some(ns) = self.infer.noise_scale {
            if !(0.0..=1.0).contains(&ns) {
                return Err(CoreError::invalid("infer.noise_scale must lie in [0,1]"));
            }
        }
        if self.infer.method == InferMethod::Hmcts || self.infer.method == InferMethod::Mcts {
            if self.infer.l != self.infer.k || self.infer.k != self.infer.n_r {
                warnings.push(format!(
                    "budget parity expects L = K = N_r, got L={} K={} N_r={}",
                    self.infer.l, self.infer.k, self.infer.n_r
                ));
            }
        }
        Ok(warnings)
    }
}
