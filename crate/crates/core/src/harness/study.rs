//! Toy-scale reproductions of the comparison tables and ablations.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptTrace, Method};
use crate::data::Setup;
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::runner::{adapt_cell, default_pretraining, stream_cell, CellResult, CheckpointStore};
use crate::hash::config_hash;
use crate::pretrain::PretrainMethod;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    /// Per-domain online error on the instantaneous stream.
    Main,
    /// E, A, F on the gradual stream.
    Gradual,
    /// Online error across batch sizes.
    BatchSize,
    /// Auxiliary-head entropy against main-head entropy, per severity.
    AuxAblation,
    /// Meta-learned against multi-task pre-training, across batch sizes.
    MtlAblation,
    /// Entropy and error against severity and against samples adapted.
    Uncertainty,
}

impl Study {
    pub const ALL: [Study; 6] =
        [Study::Main, Study::Gradual, Study::BatchSize, Study::AuxAblation, Study::MtlAblation, Study::Uncertainty];
}

impl fmt::Display for Study {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Study::Main => "main",
            Study::Gradual => "gradual",
            Study::BatchSize => "batch_size",
            Study::AuxAblation => "aux_ablation",
            Study::MtlAblation => "mtl_ablation",
            Study::Uncertainty => "uncertainty",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Study {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.to_string() == s).ok_or_else(|| {
            let valid: Vec<String> = Self::ALL.iter().map(|m| m.to_string()).collect();
            Error::InvalidConfig(format!("unknown study {s:?}; valid: {}", valid.join(", ")))
        })
    }
}

/// A test-time method started from a particular pre-training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub label: String,
    pub pretrain: PretrainMethod,
    pub method: Method,
}

impl Arm {
    pub fn standard(method: Method) -> Self {
        Self { label: method.to_string(), pretrain: default_pretraining(method), method }
    }

    pub fn with(label: &str, pretrain: PretrainMethod, method: Method) -> Self {
        Self { label: label.into(), pretrain, method }
    }
}

/// Seed-aggregated value. For summary columns `per_seed` holds the summary
/// of each seed's row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

impl Cell {
    pub fn from_values(per_seed: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&per_seed);
        Self { mean, std, per_seed }
    }
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub label: String,
    pub cells: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
}

impl Table {
    pub fn row(&self, label: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn cell(&self, row: &str, column: &str) -> Option<&Cell> {
        let j = self.columns.iter().position(|c| c == column)?;
        self.row(row).map(|r| &r.cells[j])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub study: Study,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub tables: Vec<Table>,
}

impl StudyReport {
    pub fn table(&self, title: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.title == title)
    }

    /// Long format: `table,row,column,mean,std,per_seed` with `;`-joined seeds.
    pub fn to_csv(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut out = format!("# study={} config_hash={} seeds={}\n", self.study, self.config_hash, seeds.join(";"));
        out.push_str("table,row,column,mean,std,per_seed\n");
        for t in &self.tables {
            for r in &t.rows {
                for (c, cell) in t.columns.iter().zip(&r.cells) {
                    let ps: Vec<String> = cell.per_seed.iter().map(f64::to_string).collect();
                    out.push_str(&format!("{},{},{c},{},{},{}\n", t.title, r.label, cell.mean, cell.std, ps.join(";")));
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for StudyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "study {} (config {}, {} seeds)", self.study, self.config_hash, self.seeds.len())?;
        for t in &self.tables {
            writeln!(f, "\n{}", t.title)?;
            write!(f, "{:<12}", "")?;
            for c in &t.columns {
                write!(f, " {c:>14}")?;
            }
            writeln!(f)?;
            for r in &t.rows {
                write!(f, "{:<12}", r.label)?;
                for c in &r.cells {
                    write!(f, " {:>14}", format!("{:.2}±{:.2}", c.mean, c.std))?;
                }
                writeln!(f)?;
            }
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct StudyIdentity<'a> {
    study: Study,
    config: &'a ExperimentConfig,
}

/// One adaptation run to schedule: arm, seed, stream setup and batch size.
#[derive(Clone, Debug)]
struct Job {
    arm: usize,
    seed: u64,
    setup: Setup,
    batch_size: usize,
    batches_per_domain: usize,
    matrix: bool,
}

fn run_jobs(
    cfg: &ExperimentConfig,
    store: &CheckpointStore<'_>,
    arms: &[Arm],
    jobs: &[Job],
) -> Result<Vec<CellResult>> {
    let keys: Vec<_> = jobs.iter().map(|j| (arms[j.arm].pretrain, j.seed)).collect();
    store.prepare(&keys)?;
    jobs.par_iter()
        .map(|j| {
            let arm = &arms[j.arm];
            let ckpt = store.get(arm.pretrain, j.seed)?;
            let mut scfg = cfg.clone();
            scfg.stream.batches_per_domain = j.batches_per_domain;
            let stream = stream_cell(&scfg, j.seed, j.setup, j.batch_size)?;
            let reading = j.matrix.then_some(cfg.transfer_reading);
            adapt_cell(&ckpt, &stream, &cfg.adapt_for(arm.method, j.seed), reading)
        })
        .collect()
}

/// `values[arm][column][seed]` into a table.
fn table_from(title: &str, columns: Vec<String>, arms: &[Arm], values: Vec<Vec<Vec<f64>>>) -> Table {
    let rows = arms
        .iter()
        .zip(values)
        .map(|(a, cols)| Row { label: a.label.clone(), cells: cols.into_iter().map(Cell::from_values).collect() })
        .collect();
    Table { title: title.into(), columns, rows }
}

/// Appends `mean` and `std` across the existing columns (per seed, then
/// aggregated), the shape of a "Mean ± Std" column.
fn with_spread(mut t: Table) -> Table {
    for r in &mut t.rows {
        let n_seeds = r.cells[0].per_seed.len();
        let col_means: Vec<f64> = r.cells.iter().map(|c| c.mean).collect();
        let (m, s) = mean_std(&col_means);
        let per_seed_mean: Vec<f64> =
            (0..n_seeds).map(|k| mean_std(&r.cells.iter().map(|c| c.per_seed[k]).collect::<Vec<_>>()).0).collect();
        let per_seed_std: Vec<f64> =
            (0..n_seeds).map(|k| mean_std(&r.cells.iter().map(|c| c.per_seed[k]).collect::<Vec<_>>()).1).collect();
        r.cells.push(Cell { mean: m, std: mean_std(&per_seed_mean).1, per_seed: per_seed_mean });
        r.cells.push(Cell { mean: s, std: mean_std(&per_seed_std).1, per_seed: per_seed_std });
    }
    t.columns.push("mean".into());
    t.columns.push("std".into());
    t
}

fn pct(x: f64) -> f64 {
    100.0 * x
}

pub fn run_study(study: Study, cfg: &ExperimentConfig) -> Result<StudyReport> {
    run_study_with(study, cfg, &CheckpointStore::new(cfg))
}

/// As [`run_study`], reusing checkpoints already in `store`. The store must
/// have been built for the same source, model and pre-training settings.
pub fn run_study_with(study: Study, cfg: &ExperimentConfig, store: &CheckpointStore<'_>) -> Result<StudyReport> {
    cfg.validate()?;
    if !store.serves(cfg) {
        return Err(Error::InvalidConfig("checkpoint store was built for different pre-training settings".into()));
    }
    let hash = config_hash(&StudyIdentity { study, config: cfg });
    let seeds = cfg.seeds.clone();
    let ns = seeds.len();
    let b = cfg.stream.batch_size;
    let bpd = cfg.stream.batches_per_domain;
    let job =
        |arm, seed, setup, batch_size, matrix| Job { arm, seed, setup, batch_size, batches_per_domain: bpd, matrix };
    // jobs are laid out arm-major, then variant, then seed
    let grid = |arms: &[Arm], variants: &[(Setup, usize)], matrix: bool| -> Vec<Job> {
        let mut jobs = Vec::new();
        for a in 0..arms.len() {
            for &(setup, bs) in variants {
                for &s in &seeds {
                    jobs.push(job(a, s, setup, bs, matrix));
                }
            }
        }
        jobs
    };
    let regroup = |results: &[CellResult], n_arms: usize, n_var: usize, f: &dyn Fn(&CellResult, usize) -> f64| {
        (0..n_arms)
            .map(|a| {
                (0..n_var)
                    .map(|v| (0..ns).map(|k| f(&results[(a * n_var + v) * ns + k], v)).collect())
                    .collect::<Vec<Vec<f64>>>()
            })
            .collect::<Vec<_>>()
    };

    let tables = match study {
        Study::Main => {
            let arms: Vec<Arm> = cfg.methods.iter().map(|&m| Arm::standard(m)).collect();
            let results = run_jobs(cfg, store, &arms, &grid(&arms, &[(Setup::Instantaneous, b)], false))?;
            let n_dom = results[0].report.per_domain_errors.len();
            let mut columns: Vec<String> = cfg.stream.kinds.iter().map(|k| k.to_string()).collect();
            columns.push("mean".into());
            let values = (0..arms.len())
                .map(|a| {
                    (0..=n_dom)
                        .map(|d| {
                            (0..ns)
                                .map(|k| {
                                    let r = &results[a * ns + k].report;
                                    pct(if d < n_dom { r.per_domain_errors[d] } else { r.online_error })
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect();
            vec![table_from("online error (%)", columns, &arms, values)]
        }
        Study::Gradual => {
            let arms: Vec<Arm> = cfg.methods.iter().map(|&m| Arm::standard(m)).collect();
            let results = run_jobs(cfg, store, &arms, &grid(&arms, &[(Setup::Gradual, b)], true))?;
            let values = (0..arms.len())
                .map(|a| {
                    let col = |f: &dyn Fn(&CellResult) -> f64| (0..ns).map(|k| f(&results[a * ns + k])).collect();
                    vec![
                        col(&|r| pct(r.report.online_error)),
                        col(&|r| pct(r.report.average_accuracy.unwrap_or(f64::NAN))),
                        col(&|r| pct(r.report.forward_transfer.unwrap_or(f64::NAN))),
                    ]
                })
                .collect();
            vec![table_from("gradual (%)", vec!["E".into(), "A".into(), "F".into()], &arms, values)]
        }
        Study::BatchSize | Study::MtlAblation => {
            let arms: Vec<Arm> = if study == Study::BatchSize {
                cfg.methods.iter().map(|&m| Arm::standard(m)).collect()
            } else {
                vec![
                    Arm::with("ttt", PretrainMethod::Ttt, Method::Ttt),
                    Arm::with("ttt_meta", PretrainMethod::TttMeta, Method::Ttt),
                    Arm::with("ours_mtl", PretrainMethod::Mtl, Method::Ours),
                    Arm::with("ours", PretrainMethod::Meta, Method::Ours),
                ]
            };
            let variants: Vec<(Setup, usize)> = cfg.batch_sizes.iter().map(|&bs| (Setup::Instantaneous, bs)).collect();
            let results = run_jobs(cfg, store, &arms, &grid(&arms, &variants, false))?;
            let values = regroup(&results, arms.len(), variants.len(), &|r, _| pct(r.report.online_error));
            let columns = cfg.batch_sizes.iter().map(|bs| format!("b{bs}")).collect();
            vec![with_spread(table_from("online error (%) by batch size", columns, &arms, values))]
        }
        Study::AuxAblation => {
            let arms = vec![Arm::standard(Method::Ours), Arm::standard(Method::NoAux)];
            let variants: Vec<(Setup, usize)> = (1..=5).map(|s| (Setup::Fixed(s), b)).collect();
            let results = run_jobs(cfg, store, &arms, &grid(&arms, &variants, false))?;
            let values = regroup(&results, arms.len(), 5, &|r, _| pct(r.report.online_error));
            let mut t = table_from("online error (%) by severity", severity_columns(), &arms, values);
            append_mean(&mut t);
            vec![t]
        }
        Study::Uncertainty => uncertainty(cfg, store, &seeds)?,
    };
    Ok(StudyReport { study, config_hash: hash, seeds, tables })
}

fn severity_columns() -> Vec<String> {
    (1..=5).map(|s| format!("sev{s}")).collect()
}

/// Appends the per-seed mean over existing columns.
fn append_mean(t: &mut Table) {
    for r in &mut t.rows {
        let n = r.cells[0].per_seed.len();
        let ps = (0..n).map(|k| r.cells.iter().map(|c| c.per_seed[k]).sum::<f64>() / r.cells.len() as f64).collect();
        r.cells.push(Cell::from_values(ps));
    }
    t.columns.push("mean".into());
}

/// Mean main-head entropy, auxiliary entropy and error over a slice of records.
fn record_stats(trace: &AdaptTrace, from: usize, to: usize) -> (f64, f64, f64) {
    let recs = &trace.records[from..to];
    let n = recs.len() as f64;
    let ent = recs.iter().map(|r| r.mean_entropy_main).sum::<f64>() / n;
    let aux = recs.iter().map(|r| r.mean_entropy_aux).sum::<f64>() / n;
    let (c, t) = recs.iter().fold((0, 0), |(c, t), r| (c + r.n_correct.unwrap_or(0), t + r.n_total));
    (ent, aux, 1.0 - c as f64 / t as f64)
}

/// Severity table under ERM and Ours, and quartile table of single-domain Ours
/// runs over a stream four times the usual length.
fn uncertainty(cfg: &ExperimentConfig, store: &CheckpointStore<'_>, seeds: &[u64]) -> Result<Vec<Table>> {
    let ns = seeds.len();
    let b = cfg.stream.batch_size;
    let bpd = cfg.stream.batches_per_domain;
    let arms = vec![Arm::standard(Method::Erm), Arm::standard(Method::Ours)];
    let mut jobs = Vec::new();
    for a in 0..2 {
        for s in 1..=5u8 {
            for &seed in seeds {
                jobs.push(Job {
                    arm: a,
                    seed,
                    setup: Setup::Fixed(s),
                    batch_size: b,
                    batches_per_domain: bpd,
                    matrix: false,
                });
            }
        }
    }
    let long = bpd * 4;
    for &seed in seeds {
        jobs.push(Job {
            arm: 1,
            seed,
            setup: Setup::Instantaneous,
            batch_size: b,
            batches_per_domain: long,
            matrix: false,
        });
    }
    let results = run_jobs(cfg, store, &arms, &jobs)?;

    let mut sev_rows = Vec::new();
    for (a, arm) in arms.iter().enumerate() {
        let cell_at = |s: usize, f: &dyn Fn(&CellResult) -> f64| {
            Cell::from_values((0..ns).map(|k| f(&results[(a * 5 + s) * ns + k])).collect())
        };
        let all = |t: &AdaptTrace| record_stats(t, 0, t.records.len());
        sev_rows.push(Row {
            label: format!("{}_entropy", arm.label),
            cells: (0..5).map(|s| cell_at(s, &|r| all(&r.run.trace).0)).collect(),
        });
        sev_rows.push(Row {
            label: format!("{}_error", arm.label),
            cells: (0..5).map(|s| cell_at(s, &|r| pct(r.report.online_error))).collect(),
        });
    }

    // quartiles of each domain's batches, averaged over domains per seed
    let long_results = &results[2 * 5 * ns..];
    let n_dom = cfg.stream.kinds.len();
    let mut quart = vec![vec![vec![0.0; ns]; 4]; 3];
    for (k, r) in long_results.iter().enumerate() {
        for d in 0..n_dom {
            for q in 0..4 {
                let (from, to) = (d * long + q * long / 4, d * long + (q + 1) * long / 4);
                let (e, a, err) = record_stats(&r.run.trace, from, to);
                quart[0][q][k] += e / n_dom as f64;
                quart[1][q][k] += a / n_dom as f64;
                quart[2][q][k] += pct(err) / n_dom as f64;
            }
        }
    }
    let labels = ["ours_entropy", "ours_aux_entropy", "ours_error"];
    let q_rows = labels
        .iter()
        .zip(quart)
        .map(|(l, qs)| Row { label: l.to_string(), cells: qs.into_iter().map(Cell::from_values).collect() })
        .collect();
    Ok(vec![
        Table { title: "entropy (nats) and error (%) by severity".into(), columns: severity_columns(), rows: sev_rows },
        Table {
            title: format!("single-domain quartiles ({long} batches per domain)"),
            columns: (1..=4).map(|q| format!("q{q}")).collect(),
            rows: q_rows,
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spread_columns() {
        let arms = vec![Arm::standard(Method::Ours)];
        let t = with_spread(table_from(
            "t",
            vec!["a".into(), "b".into()],
            &arms,
            vec![vec![vec![1.0, 3.0], vec![3.0, 5.0]]],
        ));
        assert_eq!(t.columns, vec!["a", "b", "mean", "std"]);
        let r = &t.rows[0];
        assert_eq!(r.cells[0].mean, 2.0);
        assert_eq!(r.cells[2].mean, 3.0);
        assert_eq!(r.cells[3].mean, 1.0);
        assert_eq!(r.cells[2].per_seed, vec![2.0, 4.0]);
        assert_eq!(t.cell("ours", "std").unwrap().per_seed, vec![1.0, 1.0]);
    }

    #[test]
    fn mean_std_is_population() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    }

    #[test]
    fn names_round_trip() {
        for s in Study::ALL {
            assert_eq!(s.to_string().parse::<Study>().unwrap(), s);
        }
        assert!("tab9".parse::<Study>().is_err());
    }
}
