//! Optimization: teacher skyline, baselines on sampled frames, serial
//! teacher-to-student distillation and parallel joint training.

mod adam;
mod loops;
mod objective;

pub use adam::Adam;
pub use loops::{train_baseline, train_parallel, train_student_serial, train_teacher};
pub use objective::{l2_penalty, objective, BatchTargets, TeacherOutputs};

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoders::{read_checkpoint, write_checkpoint, EncoderConfig, Model, ModelError};
use crate::losses::{Combo, LossError, LossSpec, LossTerm, PredDistance, RepMode};
use crate::metrics::MetricsError;
use crate::sampling::{SamplerKind, SamplerSpec};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] crate::autodiff::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn default_lr0() -> f64 {
    1e-3
}
fn default_decay() -> f64 {
    0.95
}
fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    5
}
fn default_l2() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr0")]
    pub lr0: f64,
    /// Multiplicative learning-rate factor applied once per epoch.
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Coefficient of `l2 * ||theta||^2` over trainable parameters.
    #[serde(default = "default_l2")]
    pub l2: f64,
    /// Overrides the encoder's dropout rate when set.
    #[serde(default)]
    pub dropout: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: default_lr0(),
            decay: default_decay(),
            batch: default_batch(),
            epochs: default_epochs(),
            l2: default_l2(),
            dropout: None,
            seed: 0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay must lie in (0, 1], got {}", self.decay));
        }
        if self.batch == 0 || self.epochs == 0 {
            return bad("batch and epochs must be >= 1".into());
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad(format!("l2 must be >= 0, got {}", self.l2));
        }
        if let Some(d) = self.dropout {
            if !(0.0..1.0).contains(&d) {
                return bad(format!("dropout must lie in [0, 1), got {d}"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("adam needs betas in [0, 1) and eps > 0".into());
        }
        Ok(())
    }

    /// `cfg` with this run's dropout override applied.
    pub fn encoder(&self, cfg: &EncoderConfig) -> EncoderConfig {
        let mut out = cfg.clone();
        if let Some(d) = self.dropout {
            out.dropout = d;
        }
        out
    }
}

/// `lr0 * decay^epoch`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 * cfg.decay.powi(epoch as i32)
}

fn default_k() -> usize {
    5
}

/// What the student sees and which objective it minimizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub combo: Combo,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_sampler")]
    pub sampler: SamplerKind,
    #[serde(default)]
    pub rep_mode: RepMode,
    #[serde(default)]
    pub pred_distance: PredDistance,
    /// Per-term weights; missing terms weigh 1.
    #[serde(default)]
    pub weights: BTreeMap<LossTerm, f64>,
}

fn default_sampler() -> SamplerKind {
    SamplerKind::Uniform
}

impl DistillConfig {
    pub fn new(combo: Combo, k: usize) -> Self {
        Self {
            combo,
            k,
            sampler: SamplerKind::Uniform,
            rep_mode: RepMode::Final,
            pred_distance: PredDistance::Sqerr,
            weights: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.k == 0 {
            return Err(TrainError::Config("k must be >= 1".into()));
        }
        self.loss_spec().validate()?;
        Ok(())
    }

    pub fn sampler_spec(&self, seed: u64) -> SamplerSpec {
        SamplerSpec { kind: self.sampler, k: self.k, seed }
    }

    /// Single-stage objective (stage one for combo `a`).
    pub fn loss_spec(&self) -> LossSpec {
        LossSpec::for_combo(self.combo, self.rep_mode, self.pred_distance, |t| {
            self.weights.get(&t).copied().unwrap_or(1.0)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
    Baseline,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
            Role::Baseline => "baseline",
        })
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "teacher" => Ok(Role::Teacher),
            "student" => Ok(Role::Student),
            "baseline" => Ok(Role::Baseline),
            _ => Err(format!("unknown role {s:?}")),
        }
    }
}

/// One line of training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean objective over the epoch's batches (including the L2 penalty).
    pub loss: f64,
    pub val_gap: f64,
    pub role: Role,
    /// Mean value of each loss term over the epoch, per video.
    #[serde(skip)]
    pub terms: Vec<(LossTerm, f64)>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    role: Role,
    encoder: EncoderConfig,
    sampler: Option<SamplerSpec>,
}

/// A trained model with what is needed to evaluate it the way it was trained.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub model: Model,
    pub role: Role,
    /// Frame selection applied to every input video; `None` means all frames.
    pub sampler: Option<SamplerSpec>,
    pub history: Vec<EpochRecord>,
    /// Index into `history` of the epoch whose parameters were kept.
    pub best_epoch: usize,
    /// Optimizer updates applied during training (all stages).
    pub updates: u64,
}

impl ModelBundle {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.history.get(self.best_epoch)
    }

    /// FDM1 checkpoint: JSON header (role, encoder config, sampler) followed
    /// by the parameters.
    pub fn save<W: Write>(&self, out: W) -> Result<(), TrainError> {
        let header = CheckpointHeader { role: self.role, encoder: self.model.config().clone(), sampler: self.sampler };
        let line = serde_json::to_string(&header).map_err(|e| TrainError::Config(e.to_string()))?;
        write_checkpoint(out, &line, self.model.params())?;
        Ok(())
    }

    /// Loads a checkpoint; history is not stored in checkpoints.
    pub fn load<R: BufRead>(input: R) -> Result<Self, TrainError> {
        let (line, params) = read_checkpoint(input)?;
        let header: CheckpointHeader =
            serde_json::from_str(&line).map_err(|e| ModelError::Checkpoint(format!("header: {e}")))?;
        let mut model = Model::new(header.encoder, 0)?;
        model.load_params(params)?;
        Ok(Self { model, role: header.role, sampler: header.sampler, history: Vec::new(), best_epoch: 0, updates: 0 })
    }

    /// History as NDJSON, one `{"epoch","loss","val_gap","role"}` per line.
    pub fn write_history<W: Write>(&self, mut out: W) -> Result<(), TrainError> {
        for r in &self.history {
            let line = serde_json::to_string(r).map_err(|e| TrainError::Config(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}
