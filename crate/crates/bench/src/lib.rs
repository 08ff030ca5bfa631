//! Shared fixtures for the benchmarks.

use fewframe_core::autodiff::Tensor;
use fewframe_core::dataio::{generate_dataset, GenSpec, VideoRecord};
use fewframe_core::encoders::EncoderConfig;
use fewframe_core::sampling::{clip, SamplerSpec};

/// Desk-sized videos with `frames` frames each.
pub fn videos(n: usize, frames: usize) -> Vec<VideoRecord> {
    generate_dataset(&GenSpec { num_videos: n, min_frames: frames, max_frames: frames, ..GenSpec::default() })
        .expect("valid generator settings")
}

pub fn clips(data: &[VideoRecord], sampler: Option<&SamplerSpec>) -> Vec<Tensor> {
    data.iter().map(|r| clip(r, sampler)).collect()
}

/// The three encoders at desk size, named.
pub fn encoders() -> [(&'static str, EncoderConfig); 3] {
    let mut nextvlad = EncoderConfig::nextvlad(16, 8);
    nextvlad.dropout = 0.0;
    [("hrnn", EncoderConfig::hrnn(16, 8)), ("netvlad", EncoderConfig::netvlad(16, 8)), ("nextvlad", nextvlad)]
}
