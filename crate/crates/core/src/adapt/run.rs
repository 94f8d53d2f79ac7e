use serde::{Deserialize, Serialize};

use crate::adapt::method::{trainable_mask, AdaptConfig, Method};
use crate::data::{DomainStream, LabeledSet, UnlabeledBatch, UnlabeledStream};
use crate::error::{Error, Result};
use crate::hash::config_hash;
use crate::nn::{entropy, BnMode, Model, ModelCheckpoint, ParamMask};
use crate::pretrain::{evaluate as evaluate_objective, Optimizer};

/// Outcome of one online batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutcome {
    pub predictions: Vec<usize>,
    pub mean_entropy_main: f64,
    pub mean_entropy_aux: f64,
    /// Adaptation loss before the first step, if the method has one.
    pub loss: Option<f64>,
}

/// Mutable state of a continual run: model, optimizer buffers and mask.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub model: Model,
    config: AdaptConfig,
    mask: ParamMask,
    opt: Optimizer,
}

impl Adapter {
    pub fn new(model: Model, config: &AdaptConfig) -> Result<Self> {
        config.validate()?;
        let mask = trainable_mask(&model, config.method)?;
        let opt = Optimizer::new(config.optimizer, config.momentum, model.num_params());
        Ok(Self { model, config: config.clone(), mask, opt })
    }

    /// Re-estimates batch statistics, takes the method's gradient steps, and
    /// predicts.
    pub fn adapt_batch(&mut self, batch: &UnlabeledBatch) -> Result<BatchOutcome> {
        let x = batch.x();
        if x.rows() < 2 {
            return Err(Error::BatchTooSmall { needed: 2, got: x.rows() });
        }
        let method = self.config.method;
        let mode = method.bn_mode();
        let (before_main, before_aux) = self.model.forward_mut(x, mode)?;
        let mut loss = None;
        if let Some(l) = method.loss() {
            for _ in 0..self.config.effective_steps() {
                let e = evaluate_objective(&self.model, &self.model.params, x, None, &[(l, 1.0)], mode)?;
                loss.get_or_insert(e.loss);
                self.opt.step(&mut self.model.params, &e.grad, self.config.online_lr, &self.mask)?;
            }
        }
        let (main, aux) = if self.config.predict_before_adapt {
            if loss.is_some() {
                // refresh statistics for the updated parameters
                self.model.forward_mut(x, mode)?;
            }
            (before_main, before_aux)
        } else if loss.is_none() {
            (before_main, before_aux)
        } else {
            self.model.forward_mut(x, mode)?
        };
        Ok(BatchOutcome {
            predictions: main.argmax_rows(),
            mean_entropy_main: entropy(&main),
            mean_entropy_aux: entropy(&aux),
            loss,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub domain: usize,
    pub batch: usize,
    pub predictions: Vec<usize>,
    /// Filled by [`AdaptTrace::score`].
    pub n_correct: Option<usize>,
    pub n_total: usize,
    pub mean_entropy_main: f64,
    pub mean_entropy_aux: f64,
    pub loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptTrace {
    pub method: Method,
    pub seed: u64,
    pub config_hash: String,
    pub records: Vec<BatchRecord>,
}

/// Trace plus the model after each domain.
#[derive(Clone, Debug)]
pub struct AdaptRun {
    pub trace: AdaptTrace,
    pub snapshots: Vec<ModelCheckpoint>,
}

impl AdaptTrace {
    pub fn domain_count(&self) -> usize {
        self.records.last().map_or(0, |r| r.domain + 1)
    }

    /// Fills correct counts from the stream's hidden labels.
    pub fn score(&mut self, stream: &DomainStream) -> Result<()> {
        for r in &mut self.records {
            let labels = stream
                .domains
                .get(r.domain)
                .and_then(|d| d.batch_labels().get(r.batch))
                .ok_or_else(|| Error::InvalidConfig("trace does not match stream".into()))?;
            if labels.len() != r.predictions.len() {
                return Err(Error::InvalidConfig("trace does not match stream".into()));
            }
            r.n_correct = Some(r.predictions.iter().zip(labels).filter(|(p, y)| p == y).count());
        }
        Ok(())
    }

    /// CSV `domain,batch,n_correct,n_total,mean_entropy_main,mean_entropy_aux,loss`
    /// after a comment line with method, seed and config hash.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# method={} seed={} config_hash={}\n", self.method, self.seed, self.config_hash);
        out.push_str("domain,batch,n_correct,n_total,mean_entropy_main,mean_entropy_aux,loss\n");
        for r in &self.records {
            let opt = |v: Option<String>| v.unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.domain,
                r.batch,
                opt(r.n_correct.map(|c| c.to_string())),
                r.n_total,
                r.mean_entropy_main,
                r.mean_entropy_aux,
                opt(r.loss.map(|l| l.to_string()))
            ));
        }
        out
    }
}

#[derive(Serialize)]
struct RunIdentity<'a> {
    checkpoint: &'a str,
    config: &'a AdaptConfig,
}

/// Adapts `checkpoint` through every batch of `stream` in order without resets.
pub fn run_continual(
    checkpoint: &ModelCheckpoint,
    stream: &UnlabeledStream<'_>,
    config: &AdaptConfig,
) -> Result<AdaptRun> {
    let hash = config_hash(&RunIdentity { checkpoint: &checkpoint.config_hash, config });
    let mut adapter = Adapter::new(checkpoint.model.clone(), config)?;
    let mut records = Vec::with_capacity(stream.total_batches());
    let mut snapshots = Vec::with_capacity(stream.domains.len());
    for (d, batches) in stream.domains.iter().enumerate() {
        for (b, batch) in batches.iter().enumerate() {
            let o = adapter.adapt_batch(batch)?;
            records.push(BatchRecord {
                domain: d,
                batch: b,
                n_total: o.predictions.len(),
                predictions: o.predictions,
                n_correct: None,
                mean_entropy_main: o.mean_entropy_main,
                mean_entropy_aux: o.mean_entropy_aux,
                loss: o.loss,
            });
        }
        snapshots.push(ModelCheckpoint::new(
            adapter.model.clone(),
            config.method.to_string(),
            config.seed,
            hash.clone(),
        ));
    }
    Ok(AdaptRun {
        trace: AdaptTrace { method: config.method, seed: config.seed, config_hash: hash, records },
        snapshots,
    })
}

/// Frozen accuracy of `model` on `holdout`; nothing is mutated.
pub fn evaluate(model: &Model, holdout: &LabeledSet, mode: BnMode) -> Result<f64> {
    if holdout.is_empty() {
        return Err(Error::InvalidConfig("empty holdout".into()));
    }
    model.accuracy(&holdout.x, &holdout.y, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_stream, Setup, SourceSpec, StreamConfig, TransformKind};
    use crate::nn::{Architecture, Paradigm};
    use crate::pretrain::{pretrain, PretrainConfig, PretrainMethod};

    fn setup(method: PretrainMethod) -> (ModelCheckpoint, DomainStream) {
        let src = SourceSpec::random_centers(3, 6, 1.5, 1.0, 1).with_sizes(256, 64);
        let arch = match method.paradigm() {
            Paradigm::Cascade => Architecture::cascade(6, vec![16, 16], 3),
            Paradigm::Parallel => Architecture::parallel(6, vec![16, 16], 3),
        };
        let cfg = PretrainConfig { epochs: 2, batch_size: 16, beta: 1e-2, ..Default::default() };
        let (ck, _) = pretrain(method, &arch, &src, &cfg).unwrap();
        let mut sc = StreamConfig::new(Setup::Gradual, vec![TransformKind::GaussNoise, TransformKind::Shift], 8, 2, 4);
        sc.holdout_size = 30;
        (ck, build_stream(&sc, &src).unwrap())
    }

    #[test]
    fn erm_is_frozen() {
        let (ck, s) = setup(PretrainMethod::Meta);
        let run = run_continual(&ck, &s.unlabeled(), &AdaptConfig::new(Method::Erm)).unwrap();
        assert_eq!(run.trace.records.len(), 36);
        assert_eq!(run.snapshots.len(), 18);
        for snap in &run.snapshots {
            assert_eq!(snap.model, ck.model);
        }
        let first = &s.domains[0].batches()[0];
        assert_eq!(run.trace.records[0].predictions, ck.model.predict(first.x(), BnMode::RunningStats).unwrap());
    }

    #[test]
    fn zero_lr_ours_equals_adabn() {
        let (ck, s) = setup(PretrainMethod::Meta);
        let ours = AdaptConfig { online_lr: 0.0, ..AdaptConfig::new(Method::Ours) };
        let a = run_continual(&ck, &s.unlabeled(), &ours).unwrap();
        let b = run_continual(&ck, &s.unlabeled(), &AdaptConfig::new(Method::AdaBn)).unwrap();
        let preds = |r: &AdaptRun| r.trace.records.iter().map(|r| r.predictions.clone()).collect::<Vec<_>>();
        assert_eq!(preds(&a), preds(&b));
        assert_eq!(a.snapshots.last().unwrap().model, b.snapshots.last().unwrap().model);
    }

    #[test]
    fn one_step_lowers_aux_entropy() {
        let (ck, s) = setup(PretrainMethod::Meta);
        let x = s.domains[3].batches()[0].x();
        let cfg = AdaptConfig { online_lr: 1e-2, ..AdaptConfig::new(Method::Ours) };
        let mut ad = Adapter::new(ck.model.clone(), &cfg).unwrap();
        let before = entropy(&ad.model.logits(x, BnMode::BatchStats).unwrap().1);
        ad.adapt_batch(&s.domains[3].batches()[0]).unwrap();
        let after = entropy(&ad.model.logits(x, BnMode::BatchStats).unwrap().1);
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn mask_discipline_and_ours_vs_tent() {
        let (ck, s) = setup(PretrainMethod::Meta);
        let tm = ck.model.layout().theta_m.clone();
        for method in [Method::Ours, Method::Tent, Method::AdaBn, Method::NoAux] {
            let cfg = AdaptConfig { online_lr: 1e-2, ..AdaptConfig::new(method) };
            let run = run_continual(&ck, &s.unlabeled(), &cfg).unwrap();
            let mask = trainable_mask(&ck.model, method).unwrap();
            let last = &run.snapshots.last().unwrap().model;
            for i in 0..ck.model.num_params() {
                if !mask.contains(i) {
                    assert_eq!(last.params[i].to_bits(), ck.model.params[i].to_bits(), "{method} {i}");
                }
            }
            let moved = last.params[tm.clone()] != ck.model.params[tm.clone()];
            assert_eq!(moved, matches!(method, Method::Ours | Method::NoAux), "{method}");
            assert_ne!(last.bn, ck.model.bn);
        }
    }

    #[test]
    fn ttt_runs_on_parallel_and_rejects_cascade() {
        let (ck, s) = setup(PretrainMethod::Ttt);
        let run = run_continual(&ck, &s.unlabeled(), &AdaptConfig::new(Method::Ttt)).unwrap();
        let l = ck.model.layout();
        let last = &run.snapshots.last().unwrap().model;
        assert_eq!(last.params[l.phi.end..], ck.model.params[l.phi.end..]);
        assert!(run_continual(&ck, &s.unlabeled(), &AdaptConfig::new(Method::Ours)).is_err());
    }

    #[test]
    fn labels_are_not_read() {
        let (ck, s) = setup(PretrainMethod::Meta);
        let poisoned = s.relabeled(|_| 999);
        let cfg = AdaptConfig::new(Method::Ours);
        let a = run_continual(&ck, &s.unlabeled(), &cfg).unwrap();
        let b = run_continual(&ck, &poisoned.unlabeled(), &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.to_csv(), b.trace.to_csv());
    }

    #[test]
    fn evaluate_is_pure_and_scores() {
        let (ck, s) = setup(PretrainMethod::Meta);
        let h = &s.domains[0].holdout;
        let a = evaluate(&ck.model, h, BnMode::RunningStats).unwrap();
        let copy = ck.model.clone();
        assert_eq!(a, evaluate(&ck.model, h, BnMode::RunningStats).unwrap());
        assert_eq!(copy, ck.model);
        let mut run = run_continual(&ck, &s.unlabeled(), &AdaptConfig::new(Method::Tent)).unwrap();
        run.trace.score(&s).unwrap();
        assert!(run.trace.records.iter().all(|r| r.n_correct.unwrap() <= r.n_total));
    }
}
