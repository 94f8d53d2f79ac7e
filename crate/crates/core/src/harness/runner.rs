use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

use crate::adapt::{run_continual, AdaptConfig, AdaptRun, Method};
use crate::data::{build_stream, DomainStream, Setup};
use crate::error::Result;
use crate::harness::config::ExperimentConfig;
use crate::metrics::{accuracy_matrix, AccuracyMatrix, MetricsReport, TransferReading};
use crate::nn::ModelCheckpoint;
use crate::pretrain::{pretrain, PretrainMethod, PretrainReport};

/// Checkpoint a test-time method starts from when a study does not say
/// otherwise. Baselines that need no special pre-training get the ERM model.
pub fn default_pretraining(method: Method) -> PretrainMethod {
    match method {
        Method::Ours | Method::NoAux => PretrainMethod::Meta,
        Method::Ttt => PretrainMethod::Ttt,
        Method::Tent | Method::AdaBn | Method::Erm => PretrainMethod::Erm,
    }
}

pub fn pretrain_cell(
    cfg: &ExperimentConfig,
    method: PretrainMethod,
    seed: u64,
) -> Result<(ModelCheckpoint, PretrainReport)> {
    pretrain(method, &cfg.arch(method.paradigm()), &cfg.source_for(seed), &cfg.pretrain_for(seed))
}

/// Pre-trained checkpoints keyed by (method, seed), trained at most once.
pub struct CheckpointStore<'a> {
    cfg: &'a ExperimentConfig,
    map: Mutex<HashMap<(PretrainMethod, u64), Arc<ModelCheckpoint>>>,
}

impl<'a> CheckpointStore<'a> {
    pub fn new(cfg: &'a ExperimentConfig) -> Self {
        Self { cfg, map: Mutex::new(HashMap::new()) }
    }

    pub fn config(&self) -> &ExperimentConfig {
        self.cfg
    }

    /// Whether checkpoints trained under this store's config are valid for `cfg`.
    pub fn serves(&self, cfg: &ExperimentConfig) -> bool {
        self.cfg.source == cfg.source && self.cfg.model == cfg.model && self.cfg.pretrain == cfg.pretrain
    }

    /// Trains the missing checkpoints among `keys` in parallel.
    pub fn prepare(&self, keys: &[(PretrainMethod, u64)]) -> Result<()> {
        let mut todo: Vec<_> = {
            let map = self.map.lock().expect("store lock");
            keys.iter().filter(|k| !map.contains_key(k)).copied().collect()
        };
        todo.sort_by_key(|&(m, s)| (m.to_string(), s));
        todo.dedup();
        let trained: Vec<_> = todo
            .par_iter()
            .map(|&(m, s)| pretrain_cell(self.cfg, m, s).map(|(c, _)| ((m, s), Arc::new(c))))
            .collect::<Result<_>>()?;
        self.map.lock().expect("store lock").extend(trained);
        Ok(())
    }

    pub fn get(&self, method: PretrainMethod, seed: u64) -> Result<Arc<ModelCheckpoint>> {
        if let Some(c) = self.map.lock().expect("store lock").get(&(method, seed)) {
            return Ok(c.clone());
        }
        self.prepare(&[(method, seed)])?;
        Ok(self.map.lock().expect("store lock")[&(method, seed)].clone())
    }
}

/// Outcome of adapting one checkpoint through one stream.
pub struct CellResult {
    pub report: MetricsReport,
    pub run: AdaptRun,
    pub matrix: Option<AccuracyMatrix>,
}

/// Runs, scores, and (optionally) fills the accuracy matrix.
pub fn adapt_cell(
    ckpt: &ModelCheckpoint,
    stream: &DomainStream,
    config: &AdaptConfig,
    matrix: Option<TransferReading>,
) -> Result<CellResult> {
    let (run, matrix) = match matrix {
        Some(reading) => {
            let (m, run) = accuracy_matrix(ckpt, stream, config, reading)?;
            (run, Some(m))
        }
        None => {
            let mut run = run_continual(ckpt, &stream.unlabeled(), config)?;
            run.trace.score(stream)?;
            (run, None)
        }
    };
    let report = MetricsReport::new(&run.trace, matrix.as_ref())?;
    Ok(CellResult { report, run, matrix })
}

/// The stream of experiment seed `seed` with the given setup and batch size.
pub fn stream_cell(cfg: &ExperimentConfig, seed: u64, setup: Setup, batch_size: usize) -> Result<DomainStream> {
    build_stream(&cfg.stream_for(seed, setup, batch_size), &cfg.source_for(seed))
}

/// Caps rayon's global pool at `CASCADE_TTA_THREADS` when set. Later calls
/// are no-ops.
pub fn configure_threads() {
    if let Some(n) = std::env::var("CASCADE_TTA_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairings_respect_paradigms() {
        for m in Method::ALL {
            if let Some(p) = m.paradigm() {
                assert_eq!(default_pretraining(m).paradigm(), p, "{m}");
            }
        }
    }
}
