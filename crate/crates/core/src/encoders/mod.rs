//! Video encoders (hierarchical LSTM, NetVLAD, NeXtVLAD) and the shared
//! per-class sigmoid head.

mod checkpoint;
mod hrnn;
mod params;
mod vlad;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use hrnn::block_count;
pub use params::{Bound, ParamId, ParamStore};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Tensor, TensorError, Var};
use crate::rng::SplitMix64;
use hrnn::Hrnn;
use vlad::{NetVlad, NextVlad};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum Architecture {
    /// Lower LSTM over blocks of `block_len` frames, upper LSTM over blocks.
    Hrnn {
        block_len: usize,
        cell: usize,
        #[serde(default = "default_layers")]
        layers: usize,
    },
    Netvlad {
        clusters: usize,
        hidden: usize,
    },
    Nextvlad {
        clusters: usize,
        hidden: usize,
        groups: usize,
        #[serde(default = "default_expansion")]
        expansion: usize,
    },
}

fn default_layers() -> usize {
    2
}

fn default_expansion() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl EncoderConfig {
    /// Desk-scale H-RNN: 4-frame blocks, 32-unit cells, two layers.
    pub fn hrnn(input_dim: usize, num_classes: usize) -> Self {
        Self {
            architecture: Architecture::Hrnn { block_len: 4, cell: 32, layers: 2 },
            input_dim,
            num_classes,
            dropout: 0.0,
        }
    }

    pub fn netvlad(input_dim: usize, num_classes: usize) -> Self {
        Self { architecture: Architecture::Netvlad { clusters: 4, hidden: 32 }, input_dim, num_classes, dropout: 0.0 }
    }

    pub fn nextvlad(input_dim: usize, num_classes: usize) -> Self {
        Self {
            architecture: Architecture::Nextvlad { clusters: 4, hidden: 32, groups: 8, expansion: 2 },
            input_dim,
            num_classes,
            dropout: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.input_dim == 0 || self.num_classes == 0 {
            return bad("input_dim and num_classes must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        match self.architecture {
            Architecture::Hrnn { block_len, cell, layers } => {
                if block_len == 0 || cell == 0 || layers == 0 {
                    return bad("hrnn needs block_len, cell, layers >= 1");
                }
            }
            Architecture::Netvlad { clusters, hidden } => {
                if clusters < 2 || hidden == 0 {
                    return bad("netvlad needs clusters >= 2 and hidden >= 1");
                }
            }
            Architecture::Nextvlad { clusters, hidden, groups, expansion } => {
                if clusters < 2 || hidden == 0 || groups == 0 || expansion == 0 {
                    return bad("nextvlad needs clusters >= 2 and hidden, groups, expansion >= 1");
                }
                if !(expansion * self.input_dim).is_multiple_of(groups) {
                    return bad("nextvlad groups must divide expansion * input_dim");
                }
            }
        }
        Ok(())
    }

    /// Width of the video embedding.
    pub fn embedding_dim(&self) -> usize {
        match self.architecture {
            Architecture::Hrnn { cell, .. } => cell,
            Architecture::Netvlad { hidden, .. } | Architecture::Nextvlad { hidden, .. } => hidden,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.architecture {
            Architecture::Hrnn { .. } => "hrnn",
            Architecture::Netvlad { .. } => "netvlad",
            Architecture::Nextvlad { .. } => "nextvlad",
        }
    }

    /// Config for a model that sees `k` of `n` frames.
    ///
    /// Only the H-RNN block length changes: `round(block_len * k / n)`
    /// (at least 1), so teacher and student produce the same number of blocks
    /// when `n / k` divides evenly.
    pub fn for_frames(&self, k: usize, n: usize) -> Self {
        let mut out = self.clone();
        if let Architecture::Hrnn { block_len, .. } = &mut out.architecture {
            if k < n {
                *block_len = ((*block_len * k + n / 2) / n).max(1);
            }
        }
        out
    }

    /// Teacher/student pairs must agree on everything that shapes the
    /// embedding and head.
    pub fn check_parity(&self, other: &Self) -> Result<(), ModelError> {
        let same_arch = match (&self.architecture, &other.architecture) {
            (Architecture::Hrnn { cell: a, layers: la, .. }, Architecture::Hrnn { cell: b, layers: lb, .. }) => {
                a == b && la == lb
            }
            (x, y) => x == y,
        };
        if !same_arch || self.input_dim != other.input_dim || self.num_classes != other.num_classes {
            return Err(ModelError::Config(format!(
                "teacher/student mismatch: {:?} vs {:?}",
                self.architecture, other.architecture
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Encoder {
    Hrnn(Hrnn),
    NetVlad(NetVlad),
    NextVlad(NextVlad),
}

#[derive(Debug, Clone, Copy)]
struct Head {
    weight: ParamId,
    bias: ParamId,
}

/// Graph outputs of an encoder for a batch of equal-length clips.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `[B, E]`.
    pub embedding: Var,
    /// H-RNN block embeddings, each `[B, cell]`; empty for VLAD encoders.
    pub intermediates: Vec<Var>,
}

/// Plain-value encoder output for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoEmbedding {
    pub embedding: Vec<f64>,
    pub intermediates: Option<Vec<Vec<f64>>>,
}

const INIT_STREAM: u64 = 0x494e_4954;

/// Encoder plus classifier head with all parameters in one store.
#[derive(Debug, Clone)]
pub struct Model {
    config: EncoderConfig,
    params: ParamStore,
    encoder: Encoder,
    head: Head,
}

impl Model {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = SplitMix64::stream(seed, INIT_STREAM);
        let mut params = ParamStore::new();
        let d = config.input_dim;
        let encoder = match config.architecture {
            Architecture::Hrnn { block_len, cell, layers } => {
                Encoder::Hrnn(Hrnn::new(&mut params, &mut rng, d, block_len, cell, layers, config.dropout))
            }
            Architecture::Netvlad { clusters, hidden } => {
                Encoder::NetVlad(NetVlad::new(&mut params, &mut rng, d, clusters, hidden))
            }
            Architecture::Nextvlad { clusters, hidden, groups, expansion } => Encoder::NextVlad(NextVlad::new(
                &mut params,
                &mut rng,
                d,
                clusters,
                hidden,
                groups,
                expansion,
                config.dropout,
            )),
        };
        let e = config.embedding_dim();
        let head = Head {
            weight: params.xavier("head.weight", e, config.num_classes, &mut rng),
            bias: params.zeros("head.bias", &[config.num_classes]),
        };
        Ok(Self { config, params, encoder, head })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn is_head_param(name: &str) -> bool {
        name.starts_with("head.")
    }

    /// Copies head weights from `other` (shared output layer).
    pub fn copy_head_from(&mut self, other: &Model) -> Result<(), ModelError> {
        for id in [self.head.weight, self.head.bias] {
            let name = self.params.names()[id.0].clone();
            let src =
                other.params.by_name(&name).ok_or_else(|| ModelError::Config(format!("source model lacks {name}")))?;
            if src.shape() != self.params.get(id).shape() {
                return Err(ModelError::Config(format!("head shape mismatch for {name}")));
            }
            *self.params.get_mut(id) = src.clone();
        }
        Ok(())
    }

    /// Replaces every parameter by the same-named tensor in `loaded`.
    pub fn load_params(&mut self, loaded: Vec<(String, Tensor)>) -> Result<(), ModelError> {
        if loaded.len() != self.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                loaded.len()
            )));
        }
        for (name, t) in loaded {
            let slot = self
                .params
                .by_name_mut(&name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unexpected parameter {name}")))?;
            if slot.shape() != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "{name}: shape {:?} does not match {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// Encodes a batch of clips that all have the same frame count.
    /// Each clip is a `[T, D]` tensor.
    pub fn encode(&self, g: &mut Graph, bound: &Bound, clips: &[Tensor], train: bool) -> Result<Encoded, ModelError> {
        let first = clips.first().ok_or_else(|| ModelError::Config("empty batch".into()))?;
        let (t, d) = match first.shape() {
            [t, d] => (*t, *d),
            other => return Err(ModelError::Config(format!("clip must be [T, D], got {other:?}"))),
        };
        if d != self.config.input_dim {
            return Err(ModelError::Config(format!("clip width {d} != input_dim {}", self.config.input_dim)));
        }
        if clips.iter().any(|c| c.shape() != first.shape()) {
            return Err(ModelError::Config("batch clips must share a shape".into()));
        }
        if t == 0 {
            return Err(ModelError::Config("clip has no frames".into()));
        }
        match &self.encoder {
            Encoder::Hrnn(m) => m.encode(g, bound, clips, train),
            Encoder::NetVlad(m) => m.encode(g, bound, clips),
            Encoder::NextVlad(m) => m.encode(g, bound, clips, train),
        }
    }

    /// Per-class probabilities `sigmoid(e W + b)`, `[B, m]`.
    pub fn classify(&self, g: &mut Graph, bound: &Bound, embedding: Var) -> Result<Var, ModelError> {
        let w = bound.var(self.head.weight);
        let width = g.shape(embedding).last().copied().unwrap_or(0);
        if width != g.shape(w)[0] {
            return Err(ModelError::Config(format!(
                "embedding width {width} does not match head input {}",
                g.shape(w)[0]
            )));
        }
        let z = g.matmul(embedding, w)?;
        let z = g.add(z, bound.var(self.head.bias))?;
        Ok(g.sigmoid(z))
    }

    /// Eval-mode embedding of a single `[T, D]` clip.
    pub fn embed(&self, clip: &Tensor) -> Result<VideoEmbedding, ModelError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, |_| false);
        let enc = self.encode(&mut g, &bound, std::slice::from_ref(clip), false)?;
        let intermediates = match self.encoder {
            Encoder::Hrnn(_) => Some(enc.intermediates.iter().map(|&v| g.value(v).data().to_vec()).collect()),
            _ => None,
        };
        Ok(VideoEmbedding { embedding: g.value(enc.embedding).data().to_vec(), intermediates })
    }

    /// Eval-mode class probabilities for a single clip.
    pub fn predict(&self, clip: &Tensor) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, |_| false);
        let enc = self.encode(&mut g, &bound, std::slice::from_ref(clip), false)?;
        let p = self.classify(&mut g, &bound, enc.embedding)?;
        Ok(g.value(p).data().to_vec())
    }

    /// Eval-mode probabilities for equal-length clips, one row per clip.
    pub fn predict_batch(&self, clips: &[Tensor]) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, |_| false);
        let enc = self.encode(&mut g, &bound, clips, false)?;
        let p = self.classify(&mut g, &bound, enc.embedding)?;
        let m = self.config.num_classes;
        Ok(g.value(p).data().chunks(m).map(<[f64]>::to_vec).collect())
    }

    /// Soft assignments `[T(*G), C]` and the unnormalized VLAD descriptor
    /// `[C, D']` of one clip (VLAD encoders only).
    pub fn vlad_descriptor(&self, clip: &Tensor) -> Result<(Tensor, Tensor), ModelError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, |_| false);
        let (assign, raw) = match &self.encoder {
            Encoder::NetVlad(m) => m.descriptor(&mut g, &bound, std::slice::from_ref(clip))?,
            Encoder::NextVlad(m) => m.descriptor(&mut g, &bound, std::slice::from_ref(clip))?,
            Encoder::Hrnn(_) => return Err(ModelError::Config("hrnn has no VLAD descriptor".into())),
        };
        let a = g.value(assign);
        let r = g.value(raw);
        Ok((
            Tensor::new(a.shape()[1..].to_vec(), a.data().to_vec())?,
            Tensor::new(r.shape()[1..].to_vec(), r.data().to_vec())?,
        ))
    }
}

/// Stacks clips `[T, D]` into a `[B, T, D]` tensor.
pub(crate) fn stack(clips: &[Tensor]) -> Tensor {
    let mut shape = vec![clips.len()];
    shape.extend_from_slice(clips[0].shape());
    let data = clips.iter().flat_map(|c| c.data().iter().copied()).collect();
    Tensor::new(shape, data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::nextvlad(16, 8);
        assert!(c.validate().is_ok());
        c.architecture = Architecture::Nextvlad { clusters: 4, hidden: 8, groups: 3, expansion: 2 };
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::netvlad(16, 8);
        c.architecture = Architecture::Netvlad { clusters: 1, hidden: 8 };
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::hrnn(16, 8);
        c.architecture = Architecture::Hrnn { block_len: 0, cell: 8, layers: 2 };
        assert!(c.validate().is_err());
        let mut c = EncoderConfig::hrnn(16, 8);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_shape() {
        let c = EncoderConfig::hrnn(16, 8);
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"type\":\"hrnn\""), "{s}");
        let back: EncoderConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        let bad = s.replace("\"cell\"", "\"cells\"");
        assert!(serde_json::from_str::<EncoderConfig>(&bad).is_err());
    }

    #[test]
    fn student_block_length() {
        let teacher = EncoderConfig::hrnn(16, 8);
        let student = teacher.for_frames(5, 20);
        assert_eq!(student.architecture, Architecture::Hrnn { block_len: 1, cell: 32, layers: 2 });
        assert!(teacher.check_parity(&student).is_ok());
        let mut wide = student.clone();
        wide.architecture = Architecture::Hrnn { block_len: 1, cell: 16, layers: 2 };
        assert!(teacher.check_parity(&wide).is_err());
        let mut t20 = teacher.clone();
        t20.architecture = Architecture::Hrnn { block_len: 20, cell: 32, layers: 2 };
        assert_eq!(t20.for_frames(75, 300).architecture, Architecture::Hrnn { block_len: 5, cell: 32, layers: 2 });
    }

    #[test]
    fn head_zero_embedding_gives_half() {
        let mut m = Model::new(EncoderConfig::netvlad(4, 3), 1).unwrap();
        for (name, t) in m.params_mut().iter_mut() {
            if name.starts_with("head.") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::new();
        let bound = m.bind(&mut g, |_| false);
        let e = g.constant(Tensor::zeros(&[1, 32]));
        let p = m.classify(&mut g, &bound, e).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn head_width_mismatch_rejected() {
        let m = Model::new(EncoderConfig::netvlad(4, 3), 1).unwrap();
        let mut g = Graph::new();
        let bound = m.bind(&mut g, |_| false);
        let e = g.constant(Tensor::zeros(&[1, 7]));
        assert!(m.classify(&mut g, &bound, e).is_err());
    }

    #[test]
    fn sigmoid_head_is_not_normalized() {
        let m = Model::new(EncoderConfig::netvlad(4, 5), 3).unwrap();
        let mut rng = SplitMix64::new(8);
        let clip = Tensor::new(vec![3, 4], (0..12).map(|_| rng.normal()).collect()).unwrap();
        let p = m.predict(&clip).unwrap();
        assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() > 1e-6);
    }

    #[test]
    fn clip_width_checked() {
        let m = Model::new(EncoderConfig::hrnn(4, 2), 1).unwrap();
        assert!(m.predict(&Tensor::zeros(&[3, 5])).is_err());
    }
}
