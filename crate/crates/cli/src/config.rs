//! Experiment configuration files and run manifests.

use std::fs;
use std::path::{Path, PathBuf};

use fewframe_core::dataio::{Format, GenSpec};
use fewframe_core::encoders::EncoderConfig;
use fewframe_core::sampling::SamplerKind;
use fewframe_core::training::{DistillConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::Failure;

fn default_split() -> [f64; 3] {
    [0.7, 0.15, 0.15]
}

/// Where videos come from and how they are split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Existing dataset file (`.bin` or `.ndjson`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Planted-segment generator settings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gen: Option<GenSpec>,
    /// Train / validation / test fractions.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    /// Seed of the split shuffle.
    #[serde(default)]
    pub seed: u64,
    /// Format of the split files written by `gen-data`.
    #[serde(default = "default_format")]
    pub format: Format,
}

fn default_format() -> Format {
    Format::Bin
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill: Option<DistillConfig>,
    pub output: OutputSection,
}

impl ExperimentConfig {
    /// Config that only names an output directory.
    pub fn output_only(dir: PathBuf) -> Self {
        Self { data: None, encoder: None, train: TrainConfig::default(), distill: None, output: OutputSection { dir } }
    }

    /// Checks every section that is present, and cross-checks them.
    pub fn validate(&self) -> Result<(), Failure> {
        self.train.validate().map_err(Failure::config)?;
        if let Some(data) = &self.data {
            match (&data.path, &data.gen) {
                (Some(_), None) => {}
                (None, Some(gen)) => gen.validate().map_err(Failure::config)?,
                _ => return Err(Failure::config_msg("data needs exactly one of `path` and `gen`")),
            }
            if data.split.iter().any(|f| f.is_nan() || *f <= 0.0) || (data.split.iter().sum::<f64>() - 1.0).abs() > 1e-9
            {
                return Err(Failure::config_msg(format!(
                    "data.split must be three positive fractions summing to 1, got {:?}",
                    data.split
                )));
            }
        }
        if let Some(enc) = &self.encoder {
            enc.validate().map_err(Failure::config)?;
            if let Some(gen) = self.data.as_ref().and_then(|d| d.gen.as_ref()) {
                if gen.feature_dim != enc.input_dim || gen.num_classes != enc.num_classes {
                    return Err(Failure::config_msg(format!(
                        "encoder expects D={} m={} but the generator makes D={} m={}",
                        enc.input_dim, enc.num_classes, gen.feature_dim, gen.num_classes
                    )));
                }
            }
        }
        if let Some(distill) = &self.distill {
            distill.validate().map_err(Failure::config)?;
        }
        Ok(())
    }

    pub fn data(&self) -> Result<&DataSection, Failure> {
        self.data.as_ref().ok_or_else(|| Failure::config_msg("config has no `data` section"))
    }

    pub fn encoder(&self) -> Result<&EncoderConfig, Failure> {
        self.encoder.as_ref().ok_or_else(|| Failure::config_msg("config has no `encoder` section"))
    }

    pub fn split_path(&self, name: &str) -> PathBuf {
        let ext = match self.data.as_ref().map_or(Format::Bin, |d| d.format) {
            Format::Bin => "bin",
            Format::Ndjson => "ndjson",
        };
        self.output.dir.join(format!("{name}.{ext}"))
    }
}

/// Inputs given as paths or lists on the command line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inputs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frames: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<SamplerKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

impl Inputs {
    /// Values given on the command line win over recorded ones.
    pub fn or(self, recorded: Inputs) -> Inputs {
        Inputs {
            teacher: self.teacher.or(recorded.teacher),
            model: self.model.or(recorded.model),
            data: self.data.or(recorded.data),
            frames: if self.frames.is_empty() { recorded.frames } else { self.frames },
            encoder: self.encoder.or(recorded.encoder),
            sampler: self.sampler.or(recorded.sampler),
            k: self.k.or(recorded.k),
        }
    }
}

/// Written next to a command's outputs; accepted back as `--config` to
/// replay the command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub config: ExperimentConfig,
    #[serde(default)]
    pub inputs: Inputs,
    /// Files written, relative to `config.output.dir`.
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn file_name(stem: &str) -> String {
        format!("{stem}.manifest.json")
    }
}

/// A `--config` file: either a plain experiment config or a manifest.
pub struct Loaded {
    pub config: ExperimentConfig,
    pub inputs: Inputs,
}

pub fn load(path: &Path, command: &str) -> Result<Loaded, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::config_msg(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Failure::config_msg(format!("{}: {e}", path.display())))?;
    let is_manifest = value.get("command").is_some();
    let loaded = if is_manifest {
        let m: Manifest =
            serde_json::from_value(value).map_err(|e| Failure::config_msg(format!("{}: {e}", path.display())))?;
        if m.command != command {
            return Err(Failure::config_msg(format!(
                "{} is a manifest of `{}`, not `{command}`",
                path.display(),
                m.command
            )));
        }
        Loaded { config: m.config, inputs: m.inputs }
    } else {
        let config: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| Failure::config_msg(format!("{}: {e}", path.display())))?;
        Loaded { config, inputs: Inputs::default() }
    };
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<ExperimentConfig, serde_json::Error> {
        serde_json::from_str(s)
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse(r#"{"output":{"dir":"out"}}"#).unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert!(c.data.is_none() && c.encoder.is_none() && c.distill.is_none());
        assert!(c.validate().is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse(r#"{"output":{"dir":"out"},"extra":1}"#).is_err());
        assert!(parse(r#"{"output":{"dir":"out"},"train":{"lr":0.1}}"#).is_err());
        assert!(parse(r#"{"output":{"dir":"out"},"data":{"gen":{},"bogus":true}}"#).is_err());
    }

    #[test]
    fn data_needs_exactly_one_source() {
        let both = r#"{"output":{"dir":"o"},"data":{"path":"x.bin","gen":{"num_videos":4,"num_classes":2,
            "feature_dim":2,"min_frames":1,"max_frames":1,"labels_per_video":[1,1],"segment_noise":0.1,"seed":0}}}"#;
        assert!(parse(both).unwrap().validate().is_err());
        let none = r#"{"output":{"dir":"o"},"data":{"seed":3}}"#;
        assert!(parse(none).unwrap().validate().is_err());
        let bad_split = r#"{"output":{"dir":"o"},"data":{"path":"x.bin","split":[0.5,0.5,0.5]}}"#;
        assert!(parse(bad_split).unwrap().validate().is_err());
    }

    #[test]
    fn encoder_must_match_generator() {
        let mut c = ExperimentConfig::output_only("o".into());
        c.data = Some(DataSection {
            path: None,
            gen: Some(GenSpec::default()),
            split: default_split(),
            seed: 0,
            format: Format::Bin,
        });
        c.encoder = Some(EncoderConfig::hrnn(16, 8));
        assert!(c.validate().is_ok());
        c.encoder = Some(EncoderConfig::hrnn(12, 8));
        assert!(c.validate().is_err());
    }

    #[test]
    fn inputs_prefer_the_command_line() {
        let cli = Inputs { model: Some("a".into()), ..Inputs::default() };
        let rec = Inputs { model: Some("b".into()), data: Some("d".into()), frames: vec![3], ..Inputs::default() };
        let merged = cli.or(rec);
        assert_eq!(merged.model, Some("a".into()));
        assert_eq!(merged.data, Some("d".into()));
        assert_eq!(merged.frames, vec![3]);
    }
}
