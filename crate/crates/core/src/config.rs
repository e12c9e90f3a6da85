//! Run configuration: one JSON document with `model`, `train`, `sampling`,
//! `streaming` and `paths` sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::infer::{SamplingConfig, StreamingPolicy};
use crate::model::{InvalidField, ModelConfig};
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("config parse error at {pointer}: {message}")]
    Parse { pointer: String, message: String },

    #[error("invalid config value at {pointer}: {message}")]
    Invalid { pointer: String, message: String },
}

impl ConfigError {
    /// JSON pointer to the offending field, when known.
    pub fn pointer(&self) -> Option<&str> {
        match self {
            ConfigError::Io { .. } => None,
            ConfigError::Parse { pointer, .. } | ConfigError::Invalid { pointer, .. } => Some(pointer),
        }
    }
}

fn d_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn d_dev_fraction() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Text file to train and evaluate on.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    /// Fraction of the corpus, taken from its end, held out for evaluation.
    #[serde(default = "d_dev_fraction")]
    pub dev_fraction: f64,
    #[serde(default)]
    pub checkpoint_in: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint_out: Option<PathBuf>,
    #[serde(default = "d_output_dir")]
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            corpus: None,
            dev_fraction: d_dev_fraction(),
            checkpoint_in: None,
            checkpoint_out: None,
            output_dir: d_output_dir(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub streaming: StreamingPolicy,
    #[serde(default)]
    pub paths: PathsConfig,
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } | Segment::Enum { variant: key } => {
                out.push_str(&key.replace('~', "~0").replace('/', "~1"))
            }
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

fn invalid(section: &str, e: InvalidField) -> ConfigError {
    ConfigError::Invalid { pointer: format!("/{section}/{}", e.field), message: e.message }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            pointer: pointer_of(e.path()),
            message: e.inner().to_string(),
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Field checks for every section plus the cross-section constraints.
    pub fn check(&self) -> Result<(), ConfigError> {
        self.model.check().map_err(|e| invalid("model", e))?;
        self.train.check().map_err(|e| invalid("train", e))?;
        self.sampling.check().map_err(|e| invalid("sampling", e))?;
        self.streaming.check().map_err(|e| invalid("streaming", e))?;
        if self.train.seq_len > self.model.max_seq_len {
            return Err(ConfigError::Invalid {
                pointer: "/train/seq_len".into(),
                message: format!("{} exceeds model.max_seq_len {}", self.train.seq_len, self.model.max_seq_len),
            });
        }
        if !(0.0..1.0).contains(&self.paths.dev_fraction) {
            return Err(ConfigError::Invalid {
                pointer: "/paths/dev_fraction".into(),
                message: format!("{} is outside [0, 1)", self.paths.dev_fraction),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"model": {"n_layers": 4, "warmup_count": 2, "hidden_size": 64,
        "n_heads": 4, "n_kv_heads": 2, "intermediate_size": 128},
        "train": {"seq_len": 64}}"#;

    #[test]
    fn defaults_apply() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!((c.model.train_m, c.model.train_b), (7, 2));
        assert_eq!(c.streaming.n_sinks, 4);
        assert_eq!(c.model.vocab_size, 258);
    }

    #[test]
    fn round_trip() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        let again = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.to_json(), again.to_json());
    }

    #[test]
    fn errors_name_the_field() {
        let odd = MINIMAL.replace(r#""warmup_count": 2"#, r#""warmup_count": 3"#);
        let e = RunConfig::from_json(&odd).unwrap_err();
        assert_eq!(e.pointer(), Some("/model/warmup_count"), "{e}");

        let unknown = MINIMAL.replace(r#""seq_len": 64"#, r#""seq_len": 64, "sequence": 1"#);
        let e = RunConfig::from_json(&unknown).unwrap_err();
        assert!(matches!(e, ConfigError::Parse { .. }));
        assert!(e.pointer().unwrap().starts_with("/train"), "{e}");

        let typed = MINIMAL.replace(r#""hidden_size": 64"#, r#""hidden_size": "wide""#);
        assert_eq!(RunConfig::from_json(&typed).unwrap_err().pointer(), Some("/model/hidden_size"));

        let long = MINIMAL.replace(r#""seq_len": 64"#, r#""seq_len": 512"#);
        assert_eq!(RunConfig::from_json(&long).unwrap_err().pointer(), Some("/train/seq_len"));
    }
}
