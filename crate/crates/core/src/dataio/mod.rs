//! Synthetic video-feature datasets, their on-disk formats, and splits.

mod generate;
mod io;
mod split;

pub use generate::{generate_dataset, GenSpec};
pub use io::{read_bin, read_ndjson, read_records, write_bin, write_ndjson, write_records, Format};
pub use split::{split, Splits};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("byte offset {offset}: {msg}")]
    Offset { offset: u64, msg: String },
    #[error("{0}")]
    Invalid(String),
}

/// One video: sorted label set and an `N x D` frame-feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub labels: Vec<u16>,
    frames: Vec<f32>,
    n_frames: usize,
    dim: usize,
}

impl VideoRecord {
    pub fn new(id: String, labels: Vec<u16>, frames: Vec<f32>, dim: usize) -> Result<Self, DataError> {
        if labels.is_empty() {
            return Err(DataError::Invalid(format!("{id}: empty label set")));
        }
        if labels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DataError::Invalid(format!("{id}: labels not strictly increasing")));
        }
        if dim == 0 || frames.is_empty() || !frames.len().is_multiple_of(dim) {
            return Err(DataError::Invalid(format!("{id}: {} values do not form rows of width {dim}", frames.len())));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid(format!("{id}: non-finite frame value")));
        }
        let n_frames = frames.len() / dim;
        Ok(Self { id, labels, frames, n_frames, dim })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frames(&self) -> &[f32] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.frames[t * self.dim..(t + 1) * self.dim]
    }

    /// Multi-hot target over `m` classes.
    pub fn target(&self, m: usize) -> Vec<f64> {
        let mut y = vec![0.0; m];
        for &l in &self.labels {
            y[l as usize] = 1.0;
        }
        y
    }

    pub fn check_classes(&self, m: usize) -> Result<(), DataError> {
        match self.labels.last() {
            Some(&l) if (l as usize) < m => Ok(()),
            _ => Err(DataError::Invalid(format!("{}: label outside [0, {m})", self.id))),
        }
    }
}

/// Common feature width of a record list, rejecting mixed widths.
pub fn feature_dim(records: &[VideoRecord]) -> Result<usize, DataError> {
    let first = records.first().ok_or_else(|| DataError::Invalid("empty dataset".into()))?;
    if let Some(r) = records.iter().find(|r| r.dim != first.dim) {
        return Err(DataError::Invalid(format!("{}: feature width {} differs from {}", r.id, r.dim, first.dim)));
    }
    Ok(first.dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_validation() {
        assert!(VideoRecord::new("a".into(), vec![], vec![0.0; 4], 2).is_err());
        assert!(VideoRecord::new("a".into(), vec![1, 1], vec![0.0; 4], 2).is_err());
        assert!(VideoRecord::new("a".into(), vec![0], vec![0.0; 3], 2).is_err());
        assert!(VideoRecord::new("a".into(), vec![0], vec![f32::NAN, 0.0], 2).is_err());
        let r = VideoRecord::new("a".into(), vec![0, 3], vec![0.0; 6], 2).unwrap();
        assert_eq!(r.n_frames(), 3);
        assert_eq!(r.target(4), vec![1.0, 0.0, 0.0, 1.0]);
        assert!(r.check_classes(4).is_ok());
        assert!(r.check_classes(3).is_err());
    }
}
