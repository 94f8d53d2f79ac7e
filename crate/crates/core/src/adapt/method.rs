use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BnMode, Model, Paradigm, ParamMask};
use crate::pretrain::{Loss, OptimizerKind};

/// Test-time adaptation method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Auxiliary-head entropy through the cascade; updates extractor BN affine and the main head.
    Ours,
    /// Main-head entropy; updates extractor BN affine only.
    Tent,
    /// Batch statistics only.
    AdaBn,
    /// Frozen source model.
    Erm,
    /// Rotation task on the parallel model; updates the whole extractor.
    Ttt,
    /// Ours without the auxiliary head: main-head entropy, same parameters as Ours.
    NoAux,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Ours, Method::Tent, Method::AdaBn, Method::Erm, Method::Ttt, Method::NoAux];

    /// Required paradigm, if any.
    pub fn paradigm(self) -> Option<Paradigm> {
        match self {
            Method::Ours | Method::NoAux => Some(Paradigm::Cascade),
            Method::Ttt => Some(Paradigm::Parallel),
            _ => None,
        }
    }

    pub fn check_model(self, model: &Model) -> Result<()> {
        match self.paradigm() {
            Some(p) if p != model.paradigm() => {
                Err(Error::MethodModelMismatch { method: self.to_string(), paradigm: model.paradigm().to_string() })
            }
            _ => Ok(()),
        }
    }

    /// Unsupervised objective minimized at test time, if any.
    pub fn loss(self) -> Option<Loss> {
        match self {
            Method::Ours => Some(Loss::AuxEntropy),
            Method::Tent | Method::NoAux => Some(Loss::MainEntropy),
            Method::Ttt => Some(Loss::Rotation),
            Method::AdaBn | Method::Erm => None,
        }
    }

    /// Batch-norm mode of test-time forward passes.
    pub fn bn_mode(self) -> BnMode {
        match self {
            Method::Erm => BnMode::RunningStats,
            _ => BnMode::BatchStats,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::Ours => "ours",
            Method::Tent => "tent",
            Method::AdaBn => "adabn",
            Method::Erm => "erm",
            Method::Ttt => "ttt",
            Method::NoAux => "no_aux",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.to_string() == s).ok_or_else(|| {
            let valid: Vec<String> = Self::ALL.iter().map(|m| m.to_string()).collect();
            Error::InvalidConfig(format!("unknown method {s:?}; valid: {}", valid.join(", ")))
        })
    }
}

/// Parameters a method may change at test time. The auxiliary head is never among them.
pub fn trainable_mask(model: &Model, method: Method) -> Result<ParamMask> {
    method.check_model(model)?;
    let l = model.layout();
    let total = l.total();
    Ok(match method {
        Method::Ours | Method::NoAux => {
            ParamMask::from_ranges(total, l.bn_affine_ranges().into_iter().chain([l.theta_m.clone()]))
        }
        Method::Tent => ParamMask::from_ranges(total, l.bn_affine_ranges()),
        Method::Ttt => ParamMask::from_ranges(total, [l.phi.clone()]),
        Method::AdaBn | Method::Erm => ParamMask::none(total),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub method: Method,
    pub online_lr: f64,
    /// Gradient steps per batch; ignored by methods without a loss.
    pub steps_per_batch: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    /// Record predictions from the pass before the update instead of after it.
    pub predict_before_adapt: bool,
    /// Batch-norm mode of frozen holdout evaluation.
    pub eval_bn_mode: BnMode,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            method: Method::Ours,
            online_lr: 1e-3,
            steps_per_batch: 1,
            optimizer: OptimizerKind::Nesterov,
            momentum: 0.9,
            predict_before_adapt: false,
            eval_bn_mode: BnMode::RunningStats,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn new(method: Method) -> Self {
        Self { method, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.effective_steps() > 0 && !(self.online_lr >= 0.0 && self.online_lr.is_finite()) {
            return Err(Error::InvalidConfig("online_lr must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        if self.eval_bn_mode == BnMode::TrainStats {
            return Err(Error::InvalidConfig("eval_bn_mode must be running_stats or batch_stats".into()));
        }
        Ok(())
    }

    pub fn effective_steps(&self) -> usize {
        if self.method.loss().is_some() {
            self.steps_per_batch
        } else {
            0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;

    #[test]
    fn default_mask_sizes() {
        let m = Model::init(&Architecture::cascade(16, vec![64, 64], 5), 0).unwrap();
        assert_eq!(trainable_mask(&m, Method::Ours).unwrap().count(), 581);
        assert_eq!(trainable_mask(&m, Method::Tent).unwrap().count(), 256);
        assert!(trainable_mask(&m, Method::Erm).unwrap().is_empty());
        assert!(trainable_mask(&m, Method::AdaBn).unwrap().is_empty());
        assert!(trainable_mask(&m, Method::Ttt).is_err());
        let ta = m.layout().theta_a.clone();
        for method in [Method::Ours, Method::Tent, Method::NoAux] {
            let mask = trainable_mask(&m, method).unwrap();
            assert!(ta.clone().all(|i| !mask.contains(i)));
        }
    }

    #[test]
    fn ttt_mask_is_extractor() {
        let m = Model::init(&Architecture::parallel(16, vec![64, 64], 5), 0).unwrap();
        let mask = trainable_mask(&m, Method::Ttt).unwrap();
        assert_eq!(mask.count(), m.layout().phi.len());
        assert!(trainable_mask(&m, Method::Ours).is_err());
    }

    #[test]
    fn names() {
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        let err = "cotta".parse::<Method>().unwrap_err().to_string();
        assert!(err.contains("ours") && err.contains("ttt"));
    }
}
