use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptConfig, Method};
use crate::data::{derive_seed, Setup, SourceSpec, StreamConfig, TransformKind};
use crate::error::{Error, Result};
use crate::metrics::TransferReading;
use crate::nn::{Architecture, Paradigm};
use crate::pretrain::PretrainConfig;

/// Widths shared by the cascade and parallel assemblies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub aux_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64], aux_hidden: 64 }
    }
}

/// Everything a command needs; every field has an explicit default so
/// `--print-config` shows the complete set of knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Task definition. Its `seed` is replaced by the experiment seed.
    pub source: SourceSpec,
    pub model: ModelConfig,
    /// Stream template. Its `seed` is mixed with the experiment seed.
    pub stream: StreamConfig,
    /// Its `seed` is replaced by the experiment seed.
    pub pretrain: PretrainConfig,
    /// Template for every method; `method` is overridden per run.
    pub adapt: AdaptConfig,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Batch sizes of the batch-size and meta-ablation studies.
    pub batch_sizes: Vec<usize>,
    pub transfer_reading: TransferReading,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            source: SourceSpec::default(),
            model: ModelConfig::default(),
            stream: StreamConfig::new(Setup::Instantaneous, TransformKind::ALL.to_vec(), 32, 20, 100),
            pretrain: PretrainConfig::default(),
            adapt: AdaptConfig::default(),
            methods: vec![Method::Ours, Method::Tent, Method::AdaBn, Method::Erm, Method::Ttt],
            seeds: vec![0, 1, 2],
            batch_sizes: vec![128, 64, 32, 16],
            transfer_reading: TransferReading::Frozen,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// Parses JSON, naming the offending field and position on failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            let inner = e.into_inner();
            Error::ConfigField { field, line: inner.line(), column: inner.column(), message: inner.to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must be nonempty".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("methods must be nonempty".into()));
        }
        if self.batch_sizes.iter().any(|&b| b < 2) {
            return Err(Error::InvalidConfig("batch_sizes entries must be >= 2".into()));
        }
        if self.model.hidden.is_empty() {
            return Err(Error::InvalidConfig("model.hidden needs at least one block".into()));
        }
        self.source.validate()?;
        self.stream.validate()?;
        self.pretrain.validate()?;
        self.adapt.validate()?;
        Ok(())
    }

    pub fn arch(&self, paradigm: Paradigm) -> Architecture {
        let (f, k) = (self.source.dim, self.source.num_classes);
        let a = match paradigm {
            Paradigm::Cascade => Architecture::cascade(f, self.model.hidden.clone(), k),
            Paradigm::Parallel => Architecture::parallel(f, self.model.hidden.clone(), k),
        };
        a.with_aux_hidden(self.model.aux_hidden)
    }

    pub fn source_for(&self, seed: u64) -> SourceSpec {
        self.source.clone().with_seed(seed)
    }

    pub fn pretrain_for(&self, seed: u64) -> PretrainConfig {
        PretrainConfig { seed, ..self.pretrain.clone() }
    }

    pub fn adapt_for(&self, method: Method, seed: u64) -> AdaptConfig {
        AdaptConfig { method, seed, ..self.adapt.clone() }
    }

    /// Stream template with the given setup and batch size, seeded for `seed`.
    pub fn stream_for(&self, seed: u64, setup: Setup, batch_size: usize) -> StreamConfig {
        StreamConfig { setup, batch_size, seed: derive_seed(self.stream.seed, seed), ..self.stream.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_field_is_named() {
        let err = ExperimentConfig::from_json(r#"{"pretrain": {"alpah": 0.1}}"#).unwrap_err();
        match err {
            Error::ConfigField { field, line, .. } => {
                assert_eq!(field, "pretrain.alpah");
                assert_eq!(line, 1);
            }
            e => panic!("{e}"),
        }
        let err = ExperimentConfig::from_json("{\n  \"seeds\": [0, \"x\"]\n}").unwrap_err();
        assert!(matches!(err, Error::ConfigField { ref field, line: 2, .. } if field == "seeds[1]"), "{err}");
    }

    #[test]
    fn empty_seeds_rejected() {
        assert!(matches!(ExperimentConfig::from_json(r#"{"seeds": []}"#), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn default_model_sizes() {
        let cfg = ExperimentConfig::default();
        let arch = cfg.arch(Paradigm::Cascade);
        assert_eq!((arch.input_dim, arch.num_classes), (16, 5));
        assert_eq!(arch.hidden, vec![64, 64]);
    }
}
