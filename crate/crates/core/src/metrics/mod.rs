//! Online error, the accuracy matrix with average accuracy and forward
//! transfer, and entropy-versus-error tables.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{evaluate, run_continual, AdaptConfig, AdaptRun, AdaptTrace};
use crate::data::DomainStream;
use crate::error::{Error, Result};
use crate::nn::ModelCheckpoint;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineError {
    /// Unweighted mean of the per-domain errors.
    pub mean: f64,
    /// Errors pooled over all batches.
    pub batch_weighted: f64,
    pub per_domain: Vec<f64>,
}

/// Per-domain error `1 - sum(correct) / sum(total)`, then the mean over domains.
pub fn online_error(trace: &AdaptTrace) -> Result<OnlineError> {
    if trace.records.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let n = trace.domain_count();
    let mut correct = vec![0usize; n];
    let mut total = vec![0usize; n];
    for r in &trace.records {
        correct[r.domain] += r.n_correct.ok_or(Error::EmptyTrace)?;
        total[r.domain] += r.n_total;
    }
    let per_domain: Vec<f64> =
        correct.iter().zip(&total).filter(|(_, t)| **t > 0).map(|(c, t)| 1.0 - *c as f64 / *t as f64).collect();
    let all_c: usize = correct.iter().sum();
    let all_t: usize = total.iter().sum();
    Ok(OnlineError {
        mean: per_domain.iter().sum::<f64>() / per_domain.len() as f64,
        batch_weighted: 1.0 - all_c as f64 / all_t as f64,
        per_domain,
    })
}

/// `r[i][j]`: accuracy on domain `i` after observing domains `0..=j` (0-based);
/// `solo[t]`: accuracy on domain `t` after adapting a fresh copy on `t` alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub n: usize,
    pub r: Vec<Vec<Option<f64>>>,
    pub solo: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn empty(n: usize) -> Self {
        Self { n, r: vec![vec![None; n]; n], solo: vec![None; n] }
    }

    fn entry(&self, i: usize, j: usize) -> Result<f64> {
        self.r[i][j].ok_or_else(|| Error::IncompleteMatrix(format!("R[{i}][{j}] missing")))
    }

    /// Mean of the final column.
    pub fn average_accuracy(&self) -> Result<f64> {
        if self.n == 0 {
            return Err(Error::IncompleteMatrix("no domains".into()));
        }
        let mut s = 0.0;
        for t in 0..self.n {
            s += self.entry(t, self.n - 1)?;
        }
        Ok(s / self.n as f64)
    }

    /// Mean over domains after the first of diagonal minus solo accuracy.
    pub fn forward_transfer(&self) -> Result<f64> {
        if self.n < 2 {
            return Err(Error::IncompleteMatrix("forward transfer needs at least two domains".into()));
        }
        let mut s = 0.0;
        for t in 1..self.n {
            let solo = self.solo[t].ok_or_else(|| Error::IncompleteMatrix(format!("solo[{t}] missing")))?;
            s += self.entry(t, t)? - solo;
        }
        Ok(s / (self.n - 1) as f64)
    }
}

/// Which accuracy stands for "after adapting to domain t" in forward transfer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferReading {
    /// Frozen evaluation of the snapshot taken after the domain.
    Frozen,
    /// Online accuracy while adapting through the domain.
    Online,
}

fn online_accuracy(trace: &AdaptTrace, domain: usize) -> Result<f64> {
    let (mut c, mut t) = (0usize, 0usize);
    for r in trace.records.iter().filter(|r| r.domain == domain) {
        c += r.n_correct.ok_or(Error::EmptyTrace)?;
        t += r.n_total;
    }
    if t == 0 {
        return Err(Error::EmptyTrace);
    }
    Ok(c as f64 / t as f64)
}

/// Runs the stream once (scored), fills `R[i][j]` for `j >= i`, and the solo
/// entries from single-domain runs of the pristine checkpoint.
pub fn accuracy_matrix(
    pretrained: &ModelCheckpoint,
    stream: &DomainStream,
    config: &AdaptConfig,
    reading: TransferReading,
) -> Result<(AccuracyMatrix, AdaptRun)> {
    let n = stream.len();
    let mut run = run_continual(pretrained, &stream.unlabeled(), config)?;
    run.trace.score(stream)?;
    let mode = config.eval_bn_mode;
    let rows: Vec<Vec<Option<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    if j < i {
                        Ok(None)
                    } else if j == i && reading == TransferReading::Online {
                        online_accuracy(&run.trace, i).map(Some)
                    } else {
                        evaluate(&run.snapshots[j].model, &stream.domains[i].holdout, mode).map(Some)
                    }
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let unlabeled = stream.unlabeled();
    let mut solo: Vec<Option<f64>> = (1..n)
        .into_par_iter()
        .map(|t| {
            let mut solo_run = run_continual(pretrained, &unlabeled.single(t), config)?;
            match reading {
                TransferReading::Frozen => {
                    evaluate(&solo_run.snapshots[0].model, &stream.domains[t].holdout, mode).map(Some)
                }
                TransferReading::Online => {
                    for r in &mut solo_run.trace.records {
                        r.domain = t;
                    }
                    solo_run.trace.score(stream)?;
                    online_accuracy(&solo_run.trace, t).map(Some)
                }
            }
        })
        .collect::<Result<_>>()?;
    solo.insert(0, None);
    Ok((AccuracyMatrix { n, r: rows, solo }, run))
}

/// Point of the running entropy/error curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub samples_adapted: usize,
    pub mean_entropy: f64,
    pub running_error: f64,
}

/// One row per record: samples seen so far, that batch's mean main-logit
/// entropy, and the error over all samples so far.
pub fn entropy_error_curve(trace: &AdaptTrace) -> Result<Vec<CurvePoint>> {
    if trace.records.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let (mut seen, mut correct) = (0usize, 0usize);
    trace
        .records
        .iter()
        .map(|r| {
            seen += r.n_total;
            correct += r.n_correct.ok_or(Error::EmptyTrace)?;
            Ok(CurvePoint {
                samples_adapted: seen,
                mean_entropy: r.mean_entropy_main,
                running_error: 1.0 - correct as f64 / seen as f64,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityPoint {
    pub severity: u8,
    pub mean_entropy: f64,
    pub error: f64,
}

/// Batch-averaged main-logit entropy and pooled error per severity over
/// scored traces tagged with the severity of their stream.
pub fn severity_curve(traces: &[(u8, &AdaptTrace)]) -> Result<Vec<SeverityPoint>> {
    let mut sevs: Vec<u8> = traces.iter().map(|(s, _)| *s).collect();
    sevs.sort_unstable();
    sevs.dedup();
    sevs.into_iter()
        .map(|s| {
            let (mut ent, mut nb, mut c, mut t) = (0.0, 0usize, 0usize, 0usize);
            for (_, tr) in traces.iter().filter(|(v, _)| *v == s) {
                for r in &tr.records {
                    ent += r.mean_entropy_main;
                    nb += 1;
                    c += r.n_correct.ok_or(Error::EmptyTrace)?;
                    t += r.n_total;
                }
            }
            if nb == 0 {
                return Err(Error::EmptyTrace);
            }
            Ok(SeverityPoint { severity: s, mean_entropy: ent / nb as f64, error: 1.0 - c as f64 / t as f64 })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    #[serde(rename = "E")]
    pub online_error: f64,
    pub batch_weighted_error: f64,
    #[serde(rename = "A")]
    pub average_accuracy: Option<f64>,
    #[serde(rename = "F")]
    pub forward_transfer: Option<f64>,
    pub per_domain_errors: Vec<f64>,
    pub matrix: Option<Vec<Vec<Option<f64>>>>,
    pub solo: Option<Vec<Option<f64>>>,
}

impl MetricsReport {
    pub fn new(trace: &AdaptTrace, matrix: Option<&AccuracyMatrix>) -> Result<Self> {
        let e = online_error(trace)?;
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            method: trace.method.to_string(),
            seed: trace.seed,
            config_hash: trace.config_hash.clone(),
            online_error: e.mean,
            batch_weighted_error: e.batch_weighted,
            average_accuracy: matrix.map(|m| m.average_accuracy()).transpose()?,
            forward_transfer: matrix.and_then(|m| m.forward_transfer().ok()),
            per_domain_errors: e.per_domain,
            matrix: matrix.map(|m| m.r.clone()),
            solo: matrix.map(|m| m.solo.clone()),
        })
    }

    /// One row per domain: `domain,online_error,final_accuracy,diagonal,solo`.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# schema={} method={} seed={} config_hash={} E={} A={} F={}\n",
            self.schema_version,
            self.method,
            self.seed,
            self.config_hash,
            self.online_error,
            fmt_opt(self.average_accuracy),
            fmt_opt(self.forward_transfer)
        );
        out.push_str("domain,online_error,final_accuracy,diagonal,solo\n");
        let n = self.per_domain_errors.len();
        for (d, e) in self.per_domain_errors.iter().enumerate() {
            let m = self.matrix.as_ref();
            let last = m.and_then(|m| m[d][n - 1]);
            let diag = m.and_then(|m| m[d][d]);
            let solo = self.solo.as_ref().and_then(|s| s[d]);
            out.push_str(&format!("{d},{e},{},{},{}\n", fmt_opt(last), fmt_opt(diag), fmt_opt(solo)));
        }
        out
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
