//! Fixed-seed property suites runnable from the command line.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptConfig, Method};
use crate::autodiff::{batch_moments, finite_diff_grad, max_relative_error, relative_error, Graph, NormStats, Value};
use crate::data::{build_stream, split_meta_batch, MetaBatch, Setup, SourceSpec, StreamConfig, TransformKind};
use crate::error::{Error, Result};
use crate::metrics::{accuracy_matrix, AccuracyMatrix, TransferReading};
use crate::nn::{Architecture, BnMode, Model, ModelCheckpoint, Paradigm, DEFAULT_EPSILON};
use crate::pretrain::{
    alignment_check, composed_meta_objective, evaluate, meta_gradient, objective_value, Loss, MetaMode, MetaSpec,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Gradcheck,
    Theorem1,
    Metrics,
    Bn,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Gradcheck, Suite::Theorem1, Suite::Metrics, Suite::Bn];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Suite::Gradcheck => "gradcheck",
            Suite::Theorem1 => "theorem1",
            Suite::Metrics => "metrics",
            Suite::Bn => "bn",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.to_string() == s).ok_or_else(|| {
            let valid: Vec<String> = Self::ALL.iter().map(|m| m.to_string()).collect();
            Error::InvalidConfig(format!("unknown suite {s:?}; valid: {}", valid.join(", ")))
        })
    }
}

/// One measured deviation against its bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    /// `value < bound`, or `value > bound` for lower-bound checks.
    pub lower_bound: bool,
}

impl Check {
    pub fn below(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self { name: name.into(), value, bound, lower_bound: false }
    }

    pub fn above(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self { name: name.into(), value, bound, lower_bound: true }
    }

    /// Reported without being asserted.
    pub fn info(name: impl Into<String>, value: f64) -> Self {
        Self::below(name, value, f64::INFINITY)
    }

    pub fn passed(&self) -> bool {
        if self.lower_bound {
            self.value > self.bound
        } else {
            self.value < self.bound
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.bound.is_infinite() {
            return write!(f, "{}: {:.3e} (reported)", self.name, self.value);
        }
        let op = if self.lower_bound { ">" } else { "<" };
        let tag = if self.passed() { "ok" } else { "FAIL" };
        write!(f, "{}: {:.3e} {op} {:.0e} {tag}", self.name, self.value, self.bound)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        write!(f, "{} {}", self.suite, if self.passed() { "passed" } else { "FAILED" })
    }
}

pub fn run_suite(suite: Suite) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::Gradcheck => gradcheck()?,
        Suite::Theorem1 => [meta_exactness()?, decomposition()?].concat(),
        Suite::Metrics => metrics()?,
        Suite::Bn => bn()?,
    };
    Ok(SuiteReport { suite, checks })
}

const FD_EPS: f64 = 1e-5;
/// Gradient entries below this magnitude are compared absolutely.
const GRAD_FLOOR: f64 = 1e-6;

fn random_batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Value {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    Value::matrix(rows, cols, (0..rows * cols).map(|_| n.sample(rng)).collect()).expect("rows x cols")
}

/// Random small model with jittered parameters: zero-initialized biases can
/// leave a relu input exactly at its kink, where central differences are
/// meaningless.
fn random_model(rng: &mut ChaCha8Rng, paradigm: Paradigm) -> Model {
    let f = rng.random_range(3..=6);
    let hidden: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(3..=8)).collect();
    let k = rng.random_range(2..=5);
    let arch = match paradigm {
        Paradigm::Cascade => Architecture::cascade(f, hidden, k),
        Paradigm::Parallel => Architecture::parallel(f, hidden, k),
    }
    .with_aux_hidden(rng.random_range(3..=6));
    let mut m = Model::init(&arch, rng.random()).expect("valid random arch");
    m.params.iter_mut().for_each(|p| *p += rng.random_range(-0.1..0.1));
    for bn in &mut m.bn {
        bn.mean.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        bn.var.iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0));
    }
    m
}

/// Reverse-mode gradients of every loss against central differences on 20
/// random (model, batch) pairs.
pub fn gradcheck() -> Result<Vec<Check>> {
    let mut worst: Vec<(String, f64)> = Vec::new();
    for pair in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(pair);
        let paradigm = if pair % 2 == 0 { Paradigm::Cascade } else { Paradigm::Parallel };
        let m = random_model(&mut rng, paradigm);
        let k = m.arch().num_classes;
        let rows = rng.random_range(4..=10);
        let x = random_batch(&mut rng, rows, m.arch().input_dim);
        let y: Vec<usize> = (0..rows).map(|_| rng.random_range(0..k)).collect();
        let mode = if pair % 4 < 2 { BnMode::TrainStats } else { BnMode::RunningStats };
        let ssl = match paradigm {
            Paradigm::Cascade => Loss::AuxEntropy,
            Paradigm::Parallel => Loss::Rotation,
        };
        let objectives: [(&str, Vec<(Loss, f64)>); 4] = [
            ("ce", vec![(Loss::MainCe, 1.0)]),
            ("main_entropy", vec![(Loss::MainEntropy, 1.0)]),
            (if ssl == Loss::Rotation { "rotation" } else { "aux_entropy" }, vec![(ssl, 1.0)]),
            ("combined", vec![(Loss::MainCe, 1.0), (ssl, 0.7)]),
        ];
        for (name, obj) in objectives {
            let e = evaluate(&m, &m.params, &x, Some(&y), &obj, mode)?;
            let fd = finite_diff_grad(|p| objective_value(&m, p, &x, Some(&y), &obj, mode), &m.params, FD_EPS)?;
            let err = max_relative_error(&e.grad, &fd, GRAD_FLOOR);
            match worst.iter_mut().find(|(n, _)| n == name) {
                Some(w) => w.1 = w.1.max(err),
                None => worst.push((name.to_string(), err)),
            }
        }
    }
    Ok(worst
        .into_iter()
        .map(|(name, err)| Check::below(format!("gradcheck {name} max relative error over 20 pairs"), err, 1e-4))
        .collect())
}

fn tiny_meta_problem(seed: u64, paradigm: Paradigm) -> (Model, MetaBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let arch = match paradigm {
        Paradigm::Cascade => Architecture::cascade(4, vec![6], 3),
        Paradigm::Parallel => Architecture::parallel(4, vec![5], 3),
    }
    .with_aux_hidden(4);
    let mut m = Model::init(&arch, seed).expect("tiny arch");
    m.params.iter_mut().for_each(|p| *p += rng.random_range(-0.1..0.1));
    let batch = SourceSpec::random_centers(3, 4, 1.0, 1.0, seed).sample(16, &mut rng);
    (m, split_meta_batch(&batch, 0.5).expect("16 rows split"))
}

/// Exact meta-gradients against differences of the composed objective, and
/// the first-order approximation's deviation.
pub fn meta_exactness() -> Result<Vec<Check>> {
    let (mut exact_err, mut fo_dev, mut fo_dev_zero, mut max_params) = (0.0f64, f64::INFINITY, 0.0f64, 0usize);
    for seed in 0..4u64 {
        for paradigm in [Paradigm::Cascade, Paradigm::Parallel] {
            let (m, mb) = tiny_meta_problem(seed, paradigm);
            max_params = max_params.max(m.num_params());
            let spec = MetaSpec::for_model(&m, 1.0);
            for alpha in [0.01, 0.05] {
                let mg = meta_gradient(&m, &m.params, &mb, &spec, alpha, MetaMode::Exact, 1e-5)?;
                let fd = finite_diff_grad(|p| composed_meta_objective(&m, p, &mb, &spec, alpha), &m.params, FD_EPS)?;
                exact_err = exact_err.max(relative_error(&mg.grad, &fd));
            }
            let ex = meta_gradient(&m, &m.params, &mb, &spec, 1e-2, MetaMode::Exact, 1e-5)?;
            let fo = meta_gradient(&m, &m.params, &mb, &spec, 1e-2, MetaMode::FirstOrder, 1e-5)?;
            fo_dev = fo_dev.min(relative_error(&ex.grad, &fo.grad));
            let ex0 = meta_gradient(&m, &m.params, &mb, &spec, 0.0, MetaMode::Exact, 1e-5)?;
            let fo0 = meta_gradient(&m, &m.params, &mb, &spec, 0.0, MetaMode::FirstOrder, 1e-5)?;
            fo_dev_zero = fo_dev_zero.max(relative_error(&ex0.grad, &fo0.grad));
        }
    }
    Ok(vec![
        Check::below("meta-gradient params per model (max)", max_params as f64, 201.0),
        Check::below("exact meta-gradient vs composed finite differences (relative)", exact_err, 1e-3),
        Check::above("first-order deviation from exact at alpha=1e-2 (min)", fo_dev, 0.0),
        Check::below("first-order deviation from exact at alpha=0 (max, must be 0)", fo_dev_zero, f64::MIN_POSITIVE),
    ])
}

/// The cascade meta-gradient equals `(I - alpha H)(grad CE + lambda grad ENT)`
/// at the adapted point, with the Hessian at the pre-step point.
pub fn decomposition() -> Result<Vec<Check>> {
    let (mut at_psi, mut at_psi_prime) = (0.0f64, 0.0f64);
    let cases: Vec<(Model, MetaBatch)> = (0..3u64)
        .map(|s| tiny_meta_problem(s, Paradigm::Cascade))
        .chain((0..2u64).map(|s| {
            let src = SourceSpec::default().with_seed(s);
            let m = Model::init(&Architecture::cascade(16, vec![64, 64], 5), s).expect("default arch");
            let batch = src.sample(32, &mut ChaCha8Rng::seed_from_u64(s));
            (m, split_meta_batch(&batch, 0.5).expect("32 rows split"))
        }))
        .collect();
    for (m, mb) in &cases {
        for (lambda, alpha) in [(1.0, 1e-3), (1.0, 5e-2), (0.3, 1e-2)] {
            let c = alignment_check(m, &m.params, mb, lambda, alpha, 1e-5)?;
            at_psi = at_psi.max(c.residual_at_psi);
            at_psi_prime = at_psi_prime.max(c.residual_at_psi_prime);
        }
    }
    Ok(vec![
        Check::below("decomposition residual, Hessian at psi (relative)", at_psi, 1e-3),
        Check::info("decomposition residual, Hessian at psi' (relative)", at_psi_prime),
    ])
}

/// Reference arithmetic kept deliberately separate from `AccuracyMatrix`.
fn reference_a_f(r: &[Vec<Option<f64>>], solo: &[Option<f64>]) -> (f64, f64) {
    let n = r.len();
    let mut a = 0.0;
    for row in r {
        a += row[n - 1].expect("final column");
    }
    let mut f = 0.0;
    for t in 1..n {
        f += r[t][t].expect("diagonal") - solo[t].expect("solo");
    }
    (a / n as f64, f / (n - 1) as f64)
}

pub fn metrics() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut da, mut df) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.random_range(2..=12);
        let r: Vec<Vec<Option<f64>>> =
            (0..n).map(|i| (0..n).map(|j| (j >= i).then(|| rng.random::<f64>())).collect()).collect();
        let solo: Vec<Option<f64>> = (0..n).map(|t| (t > 0).then(|| rng.random::<f64>())).collect();
        let m = AccuracyMatrix { n, r: r.clone(), solo: solo.clone() };
        let (a, f) = reference_a_f(&r, &solo);
        da = da.max((m.average_accuracy()? - a).abs());
        df = df.max((m.forward_transfer()? - f).abs());
    }
    // ERM leaves the checkpoint untouched, so diagonal and solo runs coincide.
    let mut erm_f = 0.0f64;
    let src = SourceSpec::random_centers(3, 4, 1.0, 1.0, 5).with_sizes(0, 0);
    let ckpt = ModelCheckpoint::new(Model::init(&Architecture::cascade(4, vec![8], 3), 2)?, "erm", 0, "verify");
    for (setup, seed) in [(Setup::Gradual, 1u64), (Setup::Instantaneous, 2)] {
        let mut sc = StreamConfig::new(setup, vec![TransformKind::GaussNoise, TransformKind::Rotation], 8, 2, seed);
        sc.holdout_size = 64;
        let stream = build_stream(&sc, &src)?;
        let (m, _) = accuracy_matrix(&ckpt, &stream, &AdaptConfig::new(Method::Erm), TransferReading::Frozen)?;
        erm_f = erm_f.max(m.forward_transfer()?.abs());
    }
    Ok(vec![
        Check::below("average_accuracy vs reference over 1000 matrices", da, 1e-12),
        Check::below("forward_transfer vs reference over 1000 matrices", df, 1e-12),
        Check::below("|F| under ERM (must be exactly 0)", erm_f, f64::MIN_POSITIVE),
    ])
}

/// Batch-statistics normalization of the graph op and the standalone layer.
/// With `eps = 0` the output moments are exactly standardized; with the
/// default `eps` the variance must equal `v / (v + eps)`.
pub fn bn() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut dmean, mut dvar, mut deps) = (0.0f64, 0.0f64, 0.0f64);
    for b in [2usize, 16, 128] {
        for _ in 0..10 {
            let f = rng.random_range(1..=12);
            let raw = random_batch(&mut rng, b, f);
            let offsets: Vec<f64> = (0..f).map(|_| rng.random_range(-5.0..5.0)).collect();
            let scales: Vec<f64> = (0..f).map(|_| rng.random_range(-3.0f64..3.0).exp()).collect();
            let data = (0..b).flat_map(|i| (0..f).map(|j| offsets[j] + scales[j] * raw.get(i, j)).collect::<Vec<_>>());
            let x = Value::matrix(b, f, data.collect())?;
            let (_, in_var) = batch_moments(&x);
            for eps in [0.0, DEFAULT_EPSILON] {
                let mut g = Graph::new();
                let xi = g.input(x.clone());
                let gamma = g.param(Value::vector(vec![1.0; f]));
                let beta = g.param(Value::vector(vec![0.0; f]));
                let out = g.batch_norm(xi, gamma, beta, eps, NormStats::Batch);
                g.forward()?;
                let y = g.value(out).expect("forward ran").clone();
                let mut layer = crate::nn::BatchNormState::new(f, BnMode::BatchStats);
                layer.epsilon = eps;
                let y2 = layer.forward(&x)?;
                for y in [&y, &y2] {
                    let (m, v) = batch_moments(y);
                    for j in 0..f {
                        if eps == 0.0 {
                            dmean = dmean.max(m[j].abs());
                            dvar = dvar.max((v[j] - 1.0).abs());
                        } else {
                            deps = deps.max((v[j] - in_var[j] / (in_var[j] + eps)).abs());
                        }
                    }
                }
            }
        }
    }
    Ok(vec![
        Check::below("max |mean| of normalized features, B in {2,16,128}", dmean, 1e-8),
        Check::below("max |var - 1| of normalized features, B in {2,16,128}", dvar, 1e-6),
        Check::below("max |var - v/(v+eps)| at the default eps", deps, 1e-9),
    ])
}
