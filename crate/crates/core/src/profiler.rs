//! Analytic FLOP counts and wall-clock inference timing.
//!
//! One multiply-add is 2 FLOPs and every elementwise operation, including
//! each activation, is 1. With `T` frames of width `D`, hidden width `h`,
//! `C` clusters, FC width `H`, embedding width `E` and `m` classes:
//!
//! | stage | count |
//! |---|---|
//! | LSTM step, input `d` | `8h(d + h) + 9h` |
//! | `lower-rnn` | `T * (step(D) + (L - 1) * step(h))` for `L` layers |
//! | `upper-rnn` | `ceil(T / l) * L * step(h)` for block length `l` |
//! | `assignment` | `2 T D C + 5 T C` |
//! | `aggregation` | `2 T D C + D C` |
//! | `normalization` | `3 D C` |
//! | `fc` | `2 D C H` |
//! | `gating` | `2 H^2 + 3 H` |
//! | `head` | `2 E m` |
//!
//! NeXtVLAD first widens each frame to `W = lambda D` (`expansion`:
//! `2 T D W`), computes one sigmoid attention weight per group (`attention`:
//! `2 T W G + T G`, plus `T G C` to scale the assignments), and then runs the
//! NetVLAD stages over `T G` vectors of width `D' = W / G` instead of `T`
//! vectors of width `D`.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::dataio::VideoRecord;
use crate::encoders::{Architecture, EncoderConfig, Model, ModelError};
use crate::metrics::EVAL_BATCH;
use crate::sampling::{clip, SamplerSpec};

const TIMING_REPS: usize = 3;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("frame count must be >= 1")]
    NoFrames,
    #[error("cannot time inference on an empty dataset")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopsReport {
    pub total: u64,
    /// Count per stage; only stages the encoder has are present.
    pub breakdown: BTreeMap<&'static str, u64>,
    pub frames_used: usize,
}

impl FlopsReport {
    pub fn stage(&self, name: &str) -> u64 {
        self.breakdown.get(name).copied().unwrap_or(0)
    }
}

/// FLOPs of one LSTM time step with input width `d` and hidden width `h`.
pub fn lstm_step_flops(d: u64, h: u64) -> u64 {
    8 * h * (d + h) + 9 * h
}

/// FLOPs of one eval-mode forward pass over `frames` frames, head included.
/// `num_classes` overrides the config's class count.
pub fn count_flops(enc: &EncoderConfig, num_classes: usize, frames: usize) -> Result<FlopsReport, ProfileError> {
    if frames == 0 {
        return Err(ProfileError::NoFrames);
    }
    enc.validate()?;
    let t = frames as u64;
    let d = enc.input_dim as u64;
    let e = enc.embedding_dim() as u64;
    let mut stages: Vec<(&'static str, u64)> = Vec::new();
    match enc.architecture {
        Architecture::Hrnn { block_len, cell, layers } => {
            let (h, layers) = (cell as u64, layers as u64);
            let blocks = frames.div_ceil(block_len) as u64;
            let per_frame = lstm_step_flops(d, h) + (layers - 1) * lstm_step_flops(h, h);
            stages.push(("lower-rnn", t * per_frame));
            stages.push(("upper-rnn", blocks * layers * lstm_step_flops(h, h)));
        }
        Architecture::Netvlad { clusters, hidden } => {
            vlad_stages(&mut stages, t, d, clusters as u64, hidden as u64);
        }
        Architecture::Nextvlad { clusters, hidden, groups, expansion } => {
            let (c, g) = (clusters as u64, groups as u64);
            let wide = expansion as u64 * d;
            stages.push(("expansion", 2 * t * d * wide));
            stages.push(("attention", 2 * t * wide * g + t * g + t * g * c));
            vlad_stages(&mut stages, t * g, wide / g, c, hidden as u64);
        }
    }
    stages.push(("head", 2 * e * num_classes as u64));
    let total = stages.iter().map(|(_, n)| n).sum();
    Ok(FlopsReport { total, breakdown: stages.into_iter().collect(), frames_used: frames })
}

/// NetVLAD stages over `n` descriptors of width `d`.
fn vlad_stages(stages: &mut Vec<(&'static str, u64)>, n: u64, d: u64, c: u64, hidden: u64) {
    stages.push(("assignment", 2 * n * d * c + 5 * n * c));
    stages.push(("aggregation", 2 * n * d * c + d * c));
    stages.push(("normalization", 3 * d * c));
    stages.push(("fc", 2 * d * c * hidden));
    stages.push(("gating", 2 * hidden * hidden + 3 * hidden));
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timing {
    /// Median wall time of one pass over the dataset.
    pub wall_seconds: f64,
    pub videos_per_second: f64,
}

/// Times eval-mode forward passes over `data` (frames already selected, no
/// metric computation). Reports the median of three passes.
pub fn time_inference(
    model: &Model,
    data: &[VideoRecord],
    sampler: Option<&SamplerSpec>,
) -> Result<Timing, ProfileError> {
    if data.is_empty() {
        return Err(ProfileError::Empty);
    }
    let mut by_len: BTreeMap<usize, Vec<Tensor>> = BTreeMap::new();
    for r in data {
        let c = clip(r, sampler);
        by_len.entry(c.shape()[0]).or_default().push(c);
    }
    let mut times = Vec::with_capacity(TIMING_REPS);
    for _ in 0..TIMING_REPS {
        let start = Instant::now();
        for clips in by_len.values() {
            for chunk in clips.chunks(EVAL_BATCH) {
                std::hint::black_box(model.predict_batch(chunk)?);
            }
        }
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let wall_seconds = times[TIMING_REPS / 2];
    Ok(Timing { wall_seconds, videos_per_second: data.len() as f64 / wall_seconds })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lstm_step_by_hand() {
        // gates: [1 x 5] @ [5 x 12] = 60 multiply-adds; 9 pointwise per unit
        assert_eq!(lstm_step_flops(2, 3), 2 * 60 + 27);
    }

    #[test]
    fn netvlad_single_frame_by_hand() {
        let enc = EncoderConfig::netvlad(3, 2);
        let r = count_flops(&enc, 2, 1).unwrap();
        let (d, c, h) = (3, 4, 32);
        assert_eq!(r.stage("assignment"), 2 * d * c + 5 * c);
        assert_eq!(r.stage("aggregation"), 2 * d * c + d * c);
        assert_eq!(r.stage("normalization"), 3 * d * c);
        assert_eq!(r.stage("fc"), 2 * d * c * h);
        assert_eq!(r.stage("gating"), 2 * h * h + 3 * h);
        assert_eq!(r.stage("head"), 2 * h * 2);
        assert_eq!(r.total, r.breakdown.values().sum::<u64>());
        assert_eq!(r.frames_used, 1);
    }

    #[test]
    fn zero_frames_is_rejected() {
        assert!(matches!(count_flops(&EncoderConfig::hrnn(4, 2), 2, 0), Err(ProfileError::NoFrames)));
    }
}
