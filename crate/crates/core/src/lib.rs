pub mod autodiff;
pub mod dataio;
pub mod encoders;
pub mod losses;
pub mod metrics;
pub mod profiler;
pub mod rng;
pub mod sampling;
pub mod training;
