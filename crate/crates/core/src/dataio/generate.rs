use serde::{Deserialize, Serialize};

use super::{DataError, VideoRecord};
use crate::rng::SplitMix64;

/// Parameters of the planted-segment generator.
///
/// Every class owns a unit-norm prototype. A video's frames are split into
/// one contiguous segment per label (lengths differ by at most one, longer
/// segments first), and each frame is its segment's prototype plus
/// `N(0, segment_noise^2)` noise per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSpec {
    pub num_videos: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Inclusive range of labels drawn per video.
    pub labels_per_video: [usize; 2],
    pub segment_noise: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            num_videos: 2400,
            num_classes: 8,
            feature_dim: 16,
            min_frames: 20,
            max_frames: 20,
            labels_per_video: [1, 3],
            segment_noise: 0.3,
            seed: 1,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: &str| Err(DataError::Invalid(format!("generator: {msg}")));
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2");
        }
        if self.num_classes > u16::MAX as usize + 1 {
            return bad("num_classes exceeds the u16 label range");
        }
        if self.feature_dim < 2 {
            return bad("feature_dim must be >= 2");
        }
        if self.min_frames < 1 || self.min_frames > self.max_frames {
            return bad("need 1 <= min_frames <= max_frames");
        }
        let [lo, hi] = self.labels_per_video;
        if lo < 1 || lo > hi || hi > self.num_classes {
            return bad("need 1 <= labels_per_video[0] <= labels_per_video[1] <= num_classes");
        }
        if !(self.segment_noise >= 0.0 && self.segment_noise.is_finite()) {
            return bad("segment_noise must be finite and >= 0");
        }
        Ok(())
    }

    /// Unit-norm class prototypes (stream 0 of the seed).
    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut rng = SplitMix64::stream(self.seed, 0);
        (0..self.num_classes)
            .map(|_| {
                let mut p: Vec<f64> = (0..self.feature_dim).map(|_| rng.normal()).collect();
                let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                p.iter_mut().for_each(|v| *v /= norm);
                p
            })
            .collect()
    }
}

/// Contiguous near-equal segment lengths; the first `n % parts` get one extra.
pub(crate) fn segment_lengths(n: usize, parts: usize) -> Vec<usize> {
    let (base, extra) = (n / parts, n % parts);
    (0..parts).map(|i| base + usize::from(i < extra)).collect()
}

/// Video `index` (stream `index + 1`); segments follow label draw order.
fn generate_one(spec: &GenSpec, prototypes: &[Vec<f64>], index: usize) -> VideoRecord {
    let mut rng = SplitMix64::stream(spec.seed, index as u64 + 1);
    let [lo, hi] = spec.labels_per_video;
    let count = rng.range_inclusive(lo, hi);
    let drawn = rng.choose_distinct(spec.num_classes, count);
    let n = rng.range_inclusive(spec.min_frames, spec.max_frames);
    // A segment needs at least one frame.
    let drawn = &drawn[..count.min(n)];

    let d = spec.feature_dim;
    let mut frames = Vec::with_capacity(n * d);
    for (&class, len) in drawn.iter().zip(segment_lengths(n, drawn.len())) {
        for _ in 0..len {
            for &p in &prototypes[class] {
                frames.push((p + spec.segment_noise * rng.normal()) as f32);
            }
        }
    }
    let mut labels: Vec<u16> = drawn.iter().map(|&c| c as u16).collect();
    labels.sort_unstable();
    VideoRecord::new(format!("vid{index:06}"), labels, frames, d).expect("generator output is valid")
}

/// Deterministic dataset for `spec`; video `i` depends only on `(seed, i)`.
pub fn generate_dataset(spec: &GenSpec) -> Result<Vec<VideoRecord>, DataError> {
    spec.validate()?;
    let prototypes = spec.prototypes();
    Ok((0..spec.num_videos).map(|i| generate_one(spec, &prototypes, i)).collect())
}
