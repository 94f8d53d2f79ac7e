//! Binary checkpoint container.
//!
//! Layout: 8-byte magic `CTTACKPT`, `u32` LE format version, `u64` LE header
//! length, UTF-8 JSON header, then little-endian `f64` arrays in order:
//! extractor, main head, auxiliary head, and per batch-norm layer the running
//! mean followed by the running variance.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::arch::Architecture;
use crate::nn::batchnorm::RunningMoments;
use crate::nn::model::Model;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"CTTACKPT";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model,
    /// Pre-training method that produced the parameters.
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    architecture: Architecture,
    method: String,
    seed: u64,
    config_hash: String,
    bn_momentum: f64,
    bn_eps: f64,
    partition_lengths: [usize; 3],
    bn_dims: Vec<usize>,
}

impl ModelCheckpoint {
    pub fn new(model: Model, method: impl Into<String>, seed: u64, config_hash: impl Into<String>) -> Self {
        Self { model, method: method.into(), seed, config_hash: config_hash.into() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let l = self.model.layout();
        let header = Header {
            format_version: FORMAT_VERSION,
            architecture: self.model.arch().clone(),
            method: self.method.clone(),
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            bn_momentum: self.model.bn_momentum,
            bn_eps: self.model.bn_eps,
            partition_lengths: [l.phi.len(), l.theta_m.len(), l.theta_a.len()],
            bn_dims: l.phi_bn.iter().map(|s| s.dim).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.model.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &self.model.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for r in &self.model.bn {
            for v in r.mean.iter().chain(&r.var) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| Error::CorruptCheckpoint("truncated magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(take::<4>(&mut cur)?);
        if version != FORMAT_VERSION {
            return Err(Error::UnknownFormatVersion(version));
        }
        let hlen = u64::from_le_bytes(take::<8>(&mut cur)?) as usize;
        if cur.len() < hlen {
            return Err(Error::CorruptCheckpoint("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&cur[..hlen])?;
        cur = &cur[hlen..];
        if header.format_version != FORMAT_VERSION {
            return Err(Error::UnknownFormatVersion(header.format_version));
        }
        header.architecture.validate()?;
        let layout = header.architecture.layout();
        let expected = [layout.phi.len(), layout.theta_m.len(), layout.theta_a.len()];
        let dims: Vec<usize> = layout.phi_bn.iter().map(|s| s.dim).collect();
        if header.partition_lengths != expected || header.bn_dims != dims {
            return Err(Error::CorruptCheckpoint("array lengths disagree with architecture".into()));
        }
        let n_bn: usize = dims.iter().map(|d| 2 * d).sum();
        if cur.len() != 8 * (layout.total() + n_bn) {
            return Err(Error::CorruptCheckpoint(format!(
                "body has {} bytes, expected {}",
                cur.len(),
                8 * (layout.total() + n_bn)
            )));
        }
        let mut floats = cur.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let params: Vec<f64> = floats.by_ref().take(layout.total()).collect();
        let bn = dims
            .iter()
            .map(|&d| RunningMoments {
                mean: floats.by_ref().take(d).collect(),
                var: floats.by_ref().take(d).collect(),
            })
            .collect();
        let model = Model::from_parts(header.architecture, params, bn, header.bn_momentum, header.bn_eps)?;
        Ok(Self { model, method: header.method, seed: header.seed, config_hash: header.config_hash })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn take<const N: usize>(cur: &mut &[u8]) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    cur.read_exact(&mut b).map_err(|_| Error::CorruptCheckpoint("truncated".into()))?;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch::Architecture;
    use proptest::prelude::*;

    fn ckpt(seed: u64) -> ModelCheckpoint {
        let mut m = Model::init(&Architecture::cascade(5, vec![7, 6], 3), seed).unwrap();
        m.bn[0].mean[2] = 0.123456789;
        m.bn[1].var[0] = 3.5;
        ModelCheckpoint::new(m, "meta", seed, "abc123")
    }

    #[test]
    fn rejects_unknown_version() {
        let mut b = ckpt(1).to_bytes();
        b[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(ModelCheckpoint::from_bytes(&b), Err(Error::UnknownFormatVersion(7))));
    }

    #[test]
    fn rejects_truncated_body() {
        let b = ckpt(1).to_bytes();
        assert!(matches!(ModelCheckpoint::from_bytes(&b[..b.len() - 8]), Err(Error::CorruptCheckpoint(_))));
        assert!(ModelCheckpoint::from_bytes(b"nonsense").is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = ckpt(4);
        c.save(&path).unwrap();
        assert_eq!(ModelCheckpoint::load(&path).unwrap(), c);
    }

    proptest! {
        #[test]
        fn serialize_deserialize_serialize_is_byte_identical(seed in 0u64..1000, scale in -1e6f64..1e6) {
            let mut c = ckpt(seed);
            c.model.params[3] *= scale;
            let bytes = c.to_bytes();
            let back = ModelCheckpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
