use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Value;
use crate::data::source::{LabeledSet, SourceSpec};
use crate::data::transform::{Transform, TransformKind};
use crate::error::{Error, Result};

/// Severity sequence of one corruption kind in the gradual setup.
pub const GRADUAL_SEVERITIES: [u8; 9] = [1, 2, 3, 4, 5, 4, 3, 2, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setup {
    /// Each kind once at severity 5.
    Instantaneous,
    /// Each kind swept through severities 1..5..1.
    Gradual,
    /// Each kind once at the given severity; used by per-severity studies.
    Fixed(u8),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub setup: Setup,
    pub kinds: Vec<TransformKind>,
    pub batch_size: usize,
    pub batches_per_domain: usize,
    #[serde(default = "default_holdout")]
    pub holdout_size: usize,
    pub seed: u64,
}

fn default_holdout() -> usize {
    512
}

impl StreamConfig {
    pub fn new(
        setup: Setup,
        kinds: Vec<TransformKind>,
        batch_size: usize,
        batches_per_domain: usize,
        seed: u64,
    ) -> Self {
        Self { setup, kinds, batch_size, batches_per_domain, holdout_size: default_holdout(), seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!("batch_size must be >= 2, got {}", self.batch_size)));
        }
        if self.batches_per_domain == 0 {
            return Err(Error::InvalidConfig("batches_per_domain must be >= 1".into()));
        }
        if self.kinds.is_empty() {
            return Err(Error::InvalidConfig("stream needs at least one transform kind".into()));
        }
        if let Setup::Fixed(s) = self.setup {
            if !(1..=5).contains(&s) {
                return Err(Error::InvalidConfig(format!("fixed severity must be in 1..=5, got {s}")));
            }
        }
        if self.holdout_size == 0 {
            return Err(Error::InvalidConfig("holdout_size must be >= 1".into()));
        }
        Ok(())
    }

    /// (kind index, severity) of every domain in order.
    pub fn schedule(&self) -> Vec<(usize, u8)> {
        match self.setup {
            Setup::Instantaneous => (0..self.kinds.len()).map(|k| (k, 5)).collect(),
            Setup::Fixed(s) => (0..self.kinds.len()).map(|k| (k, s)).collect(),
            Setup::Gradual => {
                (0..self.kinds.len()).flat_map(|k| GRADUAL_SEVERITIES.iter().map(move |&s| (k, s))).collect()
            }
        }
    }
}

/// Features without labels; the only thing adaptation code ever receives.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledBatch(Value);

impl UnlabeledBatch {
    pub fn new(x: Value) -> Self {
        Self(x)
    }

    pub fn x(&self) -> &Value {
        &self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    pub transform: Transform,
    batches: Vec<UnlabeledBatch>,
    labels: Vec<Vec<usize>>,
    /// Labeled evaluation set, never shown to adaptation.
    pub holdout: LabeledSet,
}

impl Domain {
    pub fn batches(&self) -> &[UnlabeledBatch] {
        &self.batches
    }

    /// Hidden labels of each batch, for scoring online predictions.
    pub fn batch_labels(&self) -> &[Vec<usize>] {
        &self.labels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainStream {
    pub config: StreamConfig,
    pub source: SourceSpec,
    pub domains: Vec<Domain>,
}

/// Label-free view of a stream.
#[derive(Clone, Debug)]
pub struct UnlabeledStream<'a> {
    pub domains: Vec<&'a [UnlabeledBatch]>,
}

impl<'a> UnlabeledStream<'a> {
    pub fn total_batches(&self) -> usize {
        self.domains.iter().map(|d| d.len()).sum()
    }

    /// Stream made of domain `i` only.
    pub fn single(&self, i: usize) -> UnlabeledStream<'a> {
        UnlabeledStream { domains: vec![self.domains[i]] }
    }
}

/// Regeneration recipe of a stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamManifest {
    pub config: StreamConfig,
    pub severities: Vec<u8>,
    pub source: SourceSpec,
}

impl DomainStream {
    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn unlabeled(&self) -> UnlabeledStream<'_> {
        UnlabeledStream { domains: self.domains.iter().map(|d| d.batches()).collect() }
    }

    pub fn severities(&self) -> Vec<u8> {
        self.domains.iter().map(|d| d.transform.severity).collect()
    }

    pub fn manifest(&self) -> StreamManifest {
        StreamManifest { config: self.config.clone(), severities: self.severities(), source: self.source.clone() }
    }

    /// Copy of the stream with every hidden batch label replaced by `f(label)`.
    pub fn relabeled(&self, f: impl Fn(usize) -> usize) -> DomainStream {
        let mut s = self.clone();
        for d in &mut s.domains {
            for l in d.labels.iter_mut().flatten() {
                *l = f(*l);
            }
        }
        s
    }
}

impl StreamManifest {
    pub fn build(&self) -> Result<DomainStream> {
        let s = build_stream(&self.config, &self.source)?;
        if s.severities() != self.severities {
            return Err(Error::InvalidConfig("manifest severities disagree with its setup".into()));
        }
        Ok(s)
    }
}

/// SplitMix64 of `seed` combined with `index`; decorrelates per-item seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Builds the domain sequence of `config` over fresh samples of `source`.
pub fn build_stream(config: &StreamConfig, source: &SourceSpec) -> Result<DomainStream> {
    config.validate()?;
    source.validate()?;
    let domains = config
        .schedule()
        .into_iter()
        .enumerate()
        .map(|(d, (k, severity))| {
            // one direction per kind so a gradual sweep is one corruption getting worse
            let transform = Transform::new(config.kinds[k], severity, derive_seed(config.seed, 1_000_000 + k as u64))?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, d as u64));
            let n = config.batch_size * config.batches_per_domain;
            let online = source.sample(n, &mut rng);
            let shifted = transform.apply(&online.x, &mut rng)?;
            let mut batches = Vec::with_capacity(config.batches_per_domain);
            let mut labels = Vec::with_capacity(config.batches_per_domain);
            for b in 0..config.batches_per_domain {
                let idx: Vec<usize> = (b * config.batch_size..(b + 1) * config.batch_size).collect();
                batches.push(UnlabeledBatch(shifted.select_rows(&idx)));
                labels.push(idx.iter().map(|&i| online.y[i]).collect());
            }
            let clean = source.sample(config.holdout_size, &mut rng);
            let holdout = LabeledSet { x: transform.apply(&clean.x, &mut rng)?, y: clean.y };
            Ok(Domain { transform, batches, labels, holdout })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DomainStream { config: config.clone(), source: source.clone(), domains })
}

/// One transformed mini-batch split into disjoint meta-train and meta-validation rows.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaBatch {
    pub trn: LabeledSet,
    pub val: LabeledSet,
    pub transform: Option<Transform>,
}

/// First `floor(ratio * B)` rows become meta-train, the rest meta-validation.
pub fn split_meta_batch(batch: &LabeledSet, ratio: f64) -> Result<MetaBatch> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidConfig(format!("split ratio must be in (0,1), got {ratio}")));
    }
    let b = batch.len();
    if b < 4 {
        return Err(Error::BatchTooSmall { needed: 4, got: b });
    }
    let n_trn = (ratio * b as f64).floor() as usize;
    if n_trn < 2 || b - n_trn < 2 {
        return Err(Error::BatchTooSmall { needed: 4, got: b });
    }
    let trn: Vec<usize> = (0..n_trn).collect();
    let val: Vec<usize> = (n_trn..b).collect();
    Ok(MetaBatch { trn: batch.select(&trn), val: batch.select(&val), transform: None })
}
