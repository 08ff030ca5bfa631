//! Global Average Precision over pooled top-P predictions, and mean
//! per-class average precision.
//!
//! Ranking ties are broken deterministically: by score descending, then video
//! index ascending, then class index ascending.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::VideoRecord;
use crate::encoders::{Model, ModelError};
use crate::sampling::{clip, SamplerSpec};

/// Number of top classes per video that enter the GAP pool.
pub const TOP_P: usize = 20;

/// Videos per forward pass during evaluation.
pub(crate) const EVAL_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction set is empty")]
    Empty,
    #[error("no positive labels in the evaluated set")]
    NoPositives,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub scores: Vec<f64>,
    /// Ground-truth classes, strictly increasing.
    pub labels: Vec<u16>,
}

/// Scores over `m` classes for each evaluated video, in evaluation order.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    num_classes: usize,
    entries: Vec<Prediction>,
}

impl PredictionSet {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, entries: Vec::new() }
    }

    pub fn push(&mut self, id: impl Into<String>, scores: Vec<f64>, labels: Vec<u16>) -> Result<(), MetricsError> {
        let id = id.into();
        if scores.len() != self.num_classes {
            return Err(MetricsError::Invalid(format!(
                "{id}: {} scores for {} classes",
                scores.len(),
                self.num_classes
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(MetricsError::Invalid(format!("{id}: non-finite score")));
        }
        if labels.iter().any(|&l| l as usize >= self.num_classes) || labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MetricsError::Invalid(format!("{id}: labels must be increasing and < {}", self.num_classes)));
        }
        self.entries.push(Prediction { id, scores, labels });
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Prediction] {
        &self.entries
    }

    pub fn num_positives(&self) -> usize {
        self.entries.iter().map(|e| e.labels.len()).sum()
    }
}

/// Descending score; equal scores keep the lower index first.
fn by_score(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// One pooled candidate: `(score, video, class, hit)`.
type Candidate = (f64, usize, usize, bool);

/// Accumulates videos one at a time, keeping only each video's top `p`
/// classes and the running positive count.
#[derive(Debug, Clone)]
pub struct GapAccumulator {
    top_p: usize,
    pool: Vec<Candidate>,
    positives: usize,
    videos: usize,
}

impl GapAccumulator {
    pub fn new(top_p: usize) -> Result<Self, MetricsError> {
        if top_p == 0 {
            return Err(MetricsError::Invalid("P must be >= 1".into()));
        }
        Ok(Self { top_p, pool: Vec::new(), positives: 0, videos: 0 })
    }

    pub fn add(&mut self, scores: &[f64], labels: &[u16]) {
        let video = self.videos;
        self.videos += 1;
        self.positives += labels.len();
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| by_score((scores[a], a), (scores[b], b)));
        for &c in order.iter().take(self.top_p) {
            let hit = labels.binary_search(&(c as u16)).is_ok();
            self.pool.push((scores[c], video, c, hit));
        }
    }

    pub fn finish(mut self) -> Result<f64, MetricsError> {
        if self.videos == 0 {
            return Err(MetricsError::Empty);
        }
        if self.positives == 0 {
            return Err(MetricsError::NoPositives);
        }
        self.pool.sort_by(|a, b| by_score((a.0, a.1), (b.0, b.1)).then(a.2.cmp(&b.2)));
        Ok(average_precision(self.pool.iter().map(|c| c.3), self.positives))
    }
}

/// `sum over hits of (hits so far / rank)`, divided by `total`.
fn average_precision(ranked_hits: impl Iterator<Item = bool>, total: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, hit) in ranked_hits.enumerate() {
        if hit {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / total as f64
}

/// GAP over each video's top `top_p` classes. The recall denominator counts
/// every ground-truth label, including those outside a video's top `top_p`.
pub fn gap(preds: &PredictionSet, top_p: usize) -> Result<f64, MetricsError> {
    let mut acc = GapAccumulator::new(top_p)?;
    for e in &preds.entries {
        acc.add(&e.scores, &e.labels);
    }
    acc.finish()
}

/// Average precision of every class over the full video ranking; `None` for
/// classes without positives.
pub fn per_class_ap(preds: &PredictionSet) -> Result<Vec<Option<f64>>, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = preds.len();
    let mut order: Vec<usize> = (0..n).collect();
    Ok((0..preds.num_classes)
        .map(|c| {
            let is_pos = |v: usize| preds.entries[v].labels.binary_search(&(c as u16)).is_ok();
            let total = (0..n).filter(|&v| is_pos(v)).count();
            if total == 0 {
                return None;
            }
            let score = |v: usize| preds.entries[v].scores[c];
            order.sort_by(|&a, &b| by_score((score(a), a), (score(b), b)));
            Some(average_precision(order.iter().map(|&v| is_pos(v)), total))
        })
        .collect())
}

/// Unweighted mean of per-class APs over classes with at least one positive.
pub fn map(preds: &PredictionSet) -> Result<f64, MetricsError> {
    let aps: Vec<f64> = per_class_ap(preds)?.into_iter().flatten().collect();
    if aps.is_empty() {
        return Err(MetricsError::NoPositives);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub gap: f64,
    pub map: f64,
    /// `null` for classes absent from the evaluated set.
    pub per_class_ap: Vec<Option<f64>>,
    pub num_videos: usize,
    pub num_positives: usize,
}

impl MetricsReport {
    pub fn from_predictions(preds: &PredictionSet) -> Result<Self, MetricsError> {
        let per_class_ap = per_class_ap(preds)?;
        Ok(Self {
            gap: gap(preds, TOP_P)?,
            map: map(preds)?,
            per_class_ap,
            num_videos: preds.len(),
            num_positives: preds.num_positives(),
        })
    }
}

/// Eval-mode scores for every video. Videos with equal (sampled) length are
/// batched together; the result keeps dataset order.
pub fn predict_all(
    model: &Model,
    data: &[VideoRecord],
    sampler: Option<&SamplerSpec>,
) -> Result<PredictionSet, MetricsError> {
    if data.is_empty() {
        return Err(MetricsError::Empty);
    }
    let cfg = model.config();
    for r in data {
        if r.dim() != cfg.input_dim {
            return Err(MetricsError::Invalid(format!(
                "{}: feature width {} but model expects {}",
                r.id,
                r.dim(),
                cfg.input_dim
            )));
        }
        r.check_classes(cfg.num_classes).map_err(|e| MetricsError::Invalid(e.to_string()))?;
    }
    let clips: Vec<_> = data.iter().map(|r| clip(r, sampler)).collect();
    let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in clips.iter().enumerate() {
        by_len.entry(c.shape()[0]).or_default().push(i);
    }
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); data.len()];
    for idx in by_len.values() {
        for chunk in idx.chunks(EVAL_BATCH) {
            let batch: Vec<_> = chunk.iter().map(|&i| clips[i].clone()).collect();
            for (&i, p) in chunk.iter().zip(model.predict_batch(&batch)?) {
                scores[i] = p;
            }
        }
    }
    let mut preds = PredictionSet::new(cfg.num_classes);
    for (r, s) in data.iter().zip(scores) {
        preds.push(r.id.clone(), s, r.labels.clone())?;
    }
    Ok(preds)
}

/// Evaluates `model` on `data`, subsampling each video when `sampler` is set.
pub fn evaluate(
    model: &Model,
    data: &[VideoRecord],
    sampler: Option<&SamplerSpec>,
) -> Result<MetricsReport, MetricsError> {
    MetricsReport::from_predictions(&predict_all(model, data, sampler)?)
}
