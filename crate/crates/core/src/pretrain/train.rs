use std::fmt;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, gen_source, split_meta_batch, LabeledSet, SourceSpec, TransformKind, TransformPool};
use crate::error::{Error, Result};
use crate::hash::config_hash;
use crate::nn::{Architecture, BnMode, Model, ModelCheckpoint, Paradigm, ParamMask};
use crate::pretrain::meta::{outer_step, MetaMode, MetaSpec, OuterSettings, TRAIN_MODE};
use crate::pretrain::objective::{evaluate, Loss};
use crate::pretrain::optim::{LrDecay, Optimizer, OptimizerKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMethod {
    /// Meta-learned cascade.
    Meta,
    /// Cascade trained on the joint supervised-plus-entropy loss.
    Mtl,
    /// Cross-entropy only, clean source data.
    Erm,
    /// Parallel model, joint cross-entropy and rotation loss, clean source data.
    Ttt,
    /// Parallel model, meta-learned with the rotation task as inner loss.
    TttMeta,
}

impl PretrainMethod {
    pub const ALL: [PretrainMethod; 5] =
        [PretrainMethod::Meta, PretrainMethod::Mtl, PretrainMethod::Erm, PretrainMethod::Ttt, PretrainMethod::TttMeta];

    pub fn paradigm(self) -> Paradigm {
        match self {
            PretrainMethod::Ttt | PretrainMethod::TttMeta => Paradigm::Parallel,
            _ => Paradigm::Cascade,
        }
    }

    /// Whether batches are passed through a transform sampled from the pool.
    pub fn randomized(self) -> bool {
        matches!(self, PretrainMethod::Meta | PretrainMethod::Mtl | PretrainMethod::TttMeta)
    }
}

impl fmt::Display for PretrainMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PretrainMethod::Meta => "meta",
            PretrainMethod::Mtl => "mtl",
            PretrainMethod::Erm => "erm",
            PretrainMethod::Ttt => "ttt",
            PretrainMethod::TttMeta => "ttt_meta",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for PretrainMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.to_string() == s).ok_or_else(|| {
            let valid: Vec<String> = Self::ALL.iter().map(|m| m.to_string()).collect();
            Error::InvalidConfig(format!("unknown pretrain method {s:?}; valid: {}", valid.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Inner (simulated test-time) step size.
    pub alpha: f64,
    /// Training step size (outer step for meta methods).
    pub beta: f64,
    /// Weight of the unsupervised term.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub lr_decay: LrDecay,
    pub meta_mode: MetaMode,
    /// Fraction of each batch used for the inner step.
    pub split_ratio: f64,
    /// Transform kind excluded from domain randomization.
    pub held_out_kind: Option<TransformKind>,
    pub pool_severities: Vec<u8>,
    pub hvp_eps: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta: 1e-3,
            lambda: 1.0,
            epochs: 30,
            batch_size: 32,
            optimizer: OptimizerKind::Nesterov,
            momentum: 0.9,
            lr_decay: LrDecay::Linear,
            meta_mode: MetaMode::Exact,
            split_ratio: 0.5,
            held_out_kind: Some(TransformKind::Shift),
            pool_severities: vec![1, 2, 3],
            hvp_eps: 1e-5,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return bad("alpha and beta must be positive");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if self.batch_size < 4 {
            return bad("batch_size must be at least 4");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad("split_ratio must be in (0, 1)");
        }
        if !(self.hvp_eps > 0.0) {
            return bad("hvp_eps must be positive");
        }
        if self.pool_severities.iter().any(|s| !(1..=5).contains(s)) {
            return bad("pool severities must be in 1..=5");
        }
        Ok(())
    }

    pub fn pool(&self) -> TransformPool {
        let kinds = TransformKind::ALL.into_iter().filter(|k| Some(*k) != self.held_out_kind).collect();
        TransformPool::new(kinds, self.pool_severities.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean cross-entropy over the epoch's batches.
    pub ce_loss: f64,
    /// Mean unsupervised loss (auxiliary entropy, or rotation loss for parallel models).
    pub ent_loss: f64,
    /// Accuracy on the clean source holdout with stored statistics.
    pub holdout_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub method: PretrainMethod,
    pub seed: u64,
    pub config_hash: String,
    pub epochs: Vec<EpochRecord>,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl PretrainReport {
    pub fn final_holdout_acc(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.holdout_acc)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# method={} seed={} config_hash={}\n", self.method, self.seed, self.config_hash);
        out.push_str("epoch,ce_loss,ent_loss,holdout_acc\n");
        for e in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.ce_loss, e.ent_loss, e.holdout_acc));
        }
        out
    }
}

#[derive(Serialize)]
struct HashedInputs<'a> {
    method: PretrainMethod,
    arch: &'a Architecture,
    source: &'a SourceSpec,
    config: &'a PretrainConfig,
}

/// Trains a fresh model of `arch` on data drawn from `source`.
pub fn pretrain(
    method: PretrainMethod,
    arch: &Architecture,
    source: &SourceSpec,
    config: &PretrainConfig,
) -> Result<(ModelCheckpoint, PretrainReport)> {
    let start = Instant::now();
    config.validate()?;
    if arch.paradigm != method.paradigm() {
        return Err(Error::MethodModelMismatch { method: method.to_string(), paradigm: arch.paradigm.to_string() });
    }
    if arch.input_dim != source.dim || arch.num_classes != source.num_classes {
        return Err(Error::InvalidConfig("architecture does not match the source task".into()));
    }
    let (train, holdout) = gen_source(source)?;
    if config.epochs > 0 && train.len() < config.batch_size {
        return Err(Error::InvalidConfig("fewer training samples than one batch".into()));
    }
    let hash = config_hash(&HashedInputs { method, arch, source, config });
    let mut model = Model::init(arch, derive_seed(config.seed, 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
    let mut opt = Optimizer::new(config.optimizer, config.momentum, model.num_params());
    let pool = config.pool();
    let mut records = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        let lr = config.lr_decay.rate(config.beta, epoch, config.epochs);
        order.shuffle(&mut rng);
        let (mut ce, mut aux, mut n) = (0.0, 0.0, 0usize);
        for idx in order.chunks_exact(config.batch_size) {
            let mut batch = train.select(idx);
            if method.randomized() {
                let t = pool.sample(&mut rng)?;
                batch.x = t.apply(&batch.x, &mut rng)?;
            }
            let terms = train_step(method, &mut model, &mut opt, &batch, config, lr)?;
            ce += terms[0];
            aux += terms[1];
            n += 1;
        }
        records.push(EpochRecord {
            epoch,
            lr,
            ce_loss: ce / n as f64,
            ent_loss: aux / n as f64,
            holdout_acc: model.accuracy(&holdout.x, &holdout.y, BnMode::RunningStats)?,
        });
    }
    let report = PretrainReport {
        method,
        seed: config.seed,
        config_hash: hash.clone(),
        epochs: records,
        wall_time: start.elapsed(),
    };
    Ok((ModelCheckpoint::new(model, method.to_string(), config.seed, hash), report))
}

/// One update; returns the (cross-entropy, unsupervised) terms it saw.
fn train_step(
    method: PretrainMethod,
    model: &mut Model,
    opt: &mut Optimizer,
    batch: &LabeledSet,
    config: &PretrainConfig,
    lr: f64,
) -> Result<[f64; 2]> {
    let total = model.num_params();
    let (objective, mask) = match method {
        PretrainMethod::Meta | PretrainMethod::TttMeta => {
            let mb = split_meta_batch(batch, config.split_ratio)?;
            let spec = MetaSpec::for_model(model, config.lambda);
            let s = OuterSettings { alpha: config.alpha, beta: lr, mode: config.meta_mode, hvp_eps: config.hvp_eps };
            let mg = outer_step(model, opt, &mb, &spec, &s)?;
            return Ok([mg.terms[0], mg.terms[1]]);
        }
        PretrainMethod::Mtl => (vec![(Loss::MainCe, 1.0), (Loss::AuxEntropy, config.lambda)], ParamMask::all(total)),
        PretrainMethod::Erm => {
            let l = model.layout();
            let psi = ParamMask::from_ranges(total, [l.phi.clone(), l.theta_m.clone()]);
            (vec![(Loss::MainCe, 1.0), (Loss::AuxEntropy, 0.0)], psi)
        }
        PretrainMethod::Ttt => (vec![(Loss::MainCe, 1.0), (Loss::Rotation, config.lambda)], ParamMask::all(total)),
    };
    let e = evaluate(model, &model.params, &batch.x, Some(&batch.y), &objective, TRAIN_MODE)?;
    e.absorb_bn(model, TRAIN_MODE);
    let mut params = std::mem::take(&mut model.params);
    let r = opt.step(&mut params, &e.grad, lr, &mask);
    model.params = params;
    r?;
    Ok([e.terms[0], e.terms[1]])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (Architecture, SourceSpec, PretrainConfig) {
        let src = SourceSpec::random_centers(3, 4, 2.0, 0.7, 1).with_sizes(64, 64);
        let arch = Architecture::cascade(4, vec![8], 3).with_aux_hidden(6);
        let cfg = PretrainConfig { epochs: 3, batch_size: 16, beta: 1e-2, ..Default::default() };
        (arch, src, cfg)
    }

    #[test]
    fn zero_epochs_returns_init() {
        let (arch, src, cfg) = small();
        let cfg = PretrainConfig { epochs: 0, ..cfg };
        let (ck, rep) = pretrain(PretrainMethod::Meta, &arch, &src, &cfg).unwrap();
        assert!(rep.epochs.is_empty());
        assert_eq!(ck.model, Model::init(&arch, derive_seed(0, 0)).unwrap());
    }

    #[test]
    fn deterministic() {
        let (arch, src, cfg) = small();
        let a = pretrain(PretrainMethod::Meta, &arch, &src, &cfg).unwrap();
        let b = pretrain(PretrainMethod::Meta, &arch, &src, &cfg).unwrap();
        assert_eq!(a.0.to_bytes(), b.0.to_bytes());
        assert_eq!(a.1.to_csv(), b.1.to_csv());
        assert_eq!(a.1.epochs.len(), 3);
    }

    #[test]
    fn erm_leaves_aux_head_at_init() {
        let (arch, src, cfg) = small();
        let (ck, _) = pretrain(PretrainMethod::Erm, &arch, &src, &cfg).unwrap();
        let init = Model::init(&arch, derive_seed(0, 0)).unwrap();
        let ta = init.layout().theta_a.clone();
        assert_eq!(ck.model.params[ta.clone()], init.params[ta.clone()]);
        assert_ne!(ck.model.params[..ta.start], init.params[..ta.start]);
    }

    #[test]
    fn paradigm_mismatch() {
        let (arch, src, cfg) = small();
        assert!(matches!(pretrain(PretrainMethod::Ttt, &arch, &src, &cfg), Err(Error::MethodModelMismatch { .. })));
    }

    #[test]
    fn method_names_round_trip() {
        for m in PretrainMethod::ALL {
            assert_eq!(m.to_string().parse::<PretrainMethod>().unwrap(), m);
        }
        assert!("bogus".parse::<PretrainMethod>().is_err());
    }
}
