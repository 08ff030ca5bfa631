//! Frame-selection strategies: which `k` of a video's `N` frames a model sees.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::dataio::VideoRecord;
use crate::rng::{derive_seed, SplitMix64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Uniform,
    Random,
    First,
    Middle,
    Last,
    Sme,
}

impl SamplerKind {
    pub const ALL: [SamplerKind; 6] = [
        SamplerKind::Uniform,
        SamplerKind::Random,
        SamplerKind::First,
        SamplerKind::Middle,
        SamplerKind::Last,
        SamplerKind::Sme,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Uniform => "uniform",
            SamplerKind::Random => "random",
            SamplerKind::First => "first",
            SamplerKind::Middle => "middle",
            SamplerKind::Last => "last",
            SamplerKind::Sme => "sme",
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SamplerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown sampler {s:?} (expected uniform|random|first|middle|last|sme)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SamplerSpec {
    pub fn new(kind: SamplerKind, k: usize) -> Self {
        Self { kind, k, seed: 0 }
    }

    pub fn uniform(k: usize) -> Self {
        Self::new(SamplerKind::Uniform, k)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.k == 0 {
            return Err("sampler k must be >= 1".into());
        }
        Ok(())
    }

    /// Per-video variant: random draws differ across videos but stay fixed
    /// for a given `(seed, video id)`.
    pub fn for_video(&self, video_id: &str) -> Self {
        Self { seed: derive_seed(self.seed, fnv1a(video_id.as_bytes())), ..*self }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn first(k: usize) -> impl Iterator<Item = usize> {
    0..k
}

fn middle(n: usize, k: usize) -> impl Iterator<Item = usize> {
    let start = (n - k) / 2;
    start..start + k
}

fn last(n: usize, k: usize) -> impl Iterator<Item = usize> {
    n - k..n
}

/// Strictly increasing frame indices in `[0, n)`.
///
/// When `k >= n` every frame is returned. `sme` takes the first `ceil(k/3)`,
/// middle `floor(k/3)` and last remaining frames and drops duplicates, so it
/// can return fewer than `k` indices on short videos.
pub fn sample_indices(spec: &SamplerSpec, n: usize) -> Vec<usize> {
    assert!(n >= 1, "video has no frames");
    let k = spec.k;
    if k >= n {
        return (0..n).collect();
    }
    match spec.kind {
        SamplerKind::Uniform => (0..k).map(|i| i * n / k).collect(),
        SamplerKind::First => first(k).collect(),
        SamplerKind::Middle => middle(n, k).collect(),
        SamplerKind::Last => last(n, k).collect(),
        SamplerKind::Random => {
            let mut idx = SplitMix64::new(spec.seed).choose_distinct(n, k);
            idx.sort_unstable();
            idx
        }
        SamplerKind::Sme => {
            let head = k.div_ceil(3);
            let mid = k / 3;
            let tail = k - head - mid;
            let mut idx: Vec<usize> = first(head).chain(middle(n, mid)).chain(last(n, tail)).collect();
            idx.sort_unstable();
            idx.dedup();
            idx
        }
    }
}

/// The `[T, D]` frames a model sees: every frame without a sampler,
/// otherwise the sampled indices of this video.
pub fn clip(record: &VideoRecord, sampler: Option<&SamplerSpec>) -> Tensor {
    let d = record.dim();
    let data: Vec<f64> = match sampler {
        None => record.frames().iter().map(|&v| v as f64).collect(),
        Some(spec) => sample_indices(&spec.for_video(&record.id), record.n_frames())
            .into_iter()
            .flat_map(|t| record.frame(t).iter().map(|&v| v as f64))
            .collect(),
    };
    let t = data.len() / d;
    Tensor::new(vec![t, d], data).expect("records hold at least one frame")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_every_jth_frame() {
        let idx = sample_indices(&SamplerSpec::uniform(30), 300);
        assert_eq!(idx, (0..30).map(|i| i * 10).collect::<Vec<_>>());
        assert_eq!(sample_indices(&SamplerSpec::uniform(10), 10), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn sme_hand_evaluated() {
        let idx = sample_indices(&SamplerSpec::new(SamplerKind::Sme, 6), 30);
        assert_eq!(idx, vec![0, 1, 14, 15, 28, 29]);
    }

    #[test]
    fn positional_strategies() {
        let s = |kind| sample_indices(&SamplerSpec::new(kind, 3), 10);
        assert_eq!(s(SamplerKind::First), vec![0, 1, 2]);
        assert_eq!(s(SamplerKind::Middle), vec![3, 4, 5]);
        assert_eq!(s(SamplerKind::Last), vec![7, 8, 9]);
    }

    #[test]
    fn k_at_least_n_returns_all() {
        for kind in SamplerKind::ALL {
            assert_eq!(sample_indices(&SamplerSpec::new(kind, 9), 4), vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn random_is_deterministic() {
        let spec = SamplerSpec { kind: SamplerKind::Random, k: 5, seed: 3 };
        assert_eq!(sample_indices(&spec, 20), sample_indices(&spec, 20));
        let a = sample_indices(&spec.for_video("vid000001"), 20);
        let b = sample_indices(&spec.for_video("vid000001"), 20);
        assert_eq!(a, b);
    }

    #[test]
    fn random_index_frequencies() {
        let (n, k, trials) = (20usize, 5usize, 10_000u64);
        let mut counts = vec![0usize; n];
        for seed in 0..trials {
            for i in sample_indices(&SamplerSpec { kind: SamplerKind::Random, k, seed }, n) {
                counts[i] += 1;
            }
        }
        let p = k as f64 / n as f64;
        let mean = trials as f64 * p;
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        for (i, c) in counts.iter().enumerate() {
            assert!((*c as f64 - mean).abs() <= 3.0 * sd, "index {i}: {c} vs {mean}±{}", 3.0 * sd);
        }
    }

    #[test]
    fn names_round_trip() {
        for kind in SamplerKind::ALL {
            assert_eq!(kind.name().parse::<SamplerKind>().unwrap(), kind);
        }
        assert!("stride".parse::<SamplerKind>().is_err());
    }

    proptest! {
        #[test]
        fn output_laws(n in 1usize..60, k in 1usize..70, seed in any::<u64>(), kind_ix in 0usize..6) {
            let kind = SamplerKind::ALL[kind_ix];
            let idx = sample_indices(&SamplerSpec { kind, k, seed }, n);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(idx.iter().all(|&i| i < n));
            if kind == SamplerKind::Sme {
                prop_assert!(!idx.is_empty() && idx.len() <= k.min(n));
            } else {
                prop_assert_eq!(idx.len(), k.min(n));
            }
            if kind == SamplerKind::Uniform && k < n {
                let gaps: Vec<usize> = idx.windows(2).map(|w| w[1] - w[0]).collect();
                if let (Some(lo), Some(hi)) = (gaps.iter().min(), gaps.iter().max()) {
                    prop_assert!(hi - lo <= 1);
                }
            }
        }
    }
}
