use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Value;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    GaussNoise,
    Rotation,
    Scale,
    Shift,
    FeatureMask,
}

impl TransformKind {
    pub const ALL: [TransformKind; 5] = [
        TransformKind::GaussNoise,
        TransformKind::Rotation,
        TransformKind::Scale,
        TransformKind::Shift,
        TransformKind::FeatureMask,
    ];

    /// Magnitude at severities 1..=5: noise stddev, rotation degrees,
    /// contraction factor (features are divided by it), shift norm, masked
    /// fraction.
    pub fn magnitudes(self) -> [f64; 5] {
        match self {
            TransformKind::GaussNoise => [0.25, 0.5, 0.8, 1.2, 1.6],
            TransformKind::Rotation => [20.0, 45.0, 70.0, 100.0, 135.0],
            TransformKind::Scale => [1.25, 1.5, 2.0, 2.5, 3.3],
            TransformKind::Shift => [0.5, 1.5, 2.5, 3.5, 5.0],
            TransformKind::FeatureMask => [0.05, 0.15, 0.25, 0.4, 0.55],
        }
    }

    /// Whether applying the transform consumes randomness per row.
    pub fn is_stochastic(self) -> bool {
        matches!(self, TransformKind::GaussNoise | TransformKind::FeatureMask)
    }
}

impl std::fmt::Display for TransformKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TransformKind::GaussNoise => "gauss_noise",
            TransformKind::Rotation => "rotation",
            TransformKind::Scale => "scale",
            TransformKind::Shift => "shift",
            TransformKind::FeatureMask => "feature_mask",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for TransformKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TransformKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown transform kind {s:?}")))
    }
}

/// A covariate shift of one kind at one severity. `seed` fixes the shift direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transform {
    pub kind: TransformKind,
    pub severity: u8,
    pub seed: u64,
}

impl Transform {
    pub fn new(kind: TransformKind, severity: u8, seed: u64) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::InvalidSpec(format!("severity must be in 1..=5, got {severity}")));
        }
        Ok(Self { kind, severity, seed })
    }

    pub fn magnitude(&self) -> f64 {
        self.kind.magnitudes()[self.severity as usize - 1]
    }

    /// Applies the transform row-wise; labels are untouched by construction.
    pub fn apply<R: Rng>(&self, x: &Value, rng: &mut R) -> Result<Value> {
        if x.shape().len() != 2 {
            return Err(shape_err("apply_transform", "[B, F]", x.shape()));
        }
        let (b, f) = (x.rows(), x.cols());
        let m = self.magnitude();
        let mut out = x.clone();
        match self.kind {
            TransformKind::GaussNoise => {
                let normal = Normal::new(0.0, m).expect("positive stddev");
                out.data_mut().iter_mut().for_each(|v| *v += normal.sample(rng));
            }
            TransformKind::Rotation => {
                if f < 2 {
                    return Err(shape_err("apply_transform(rotation)", "F >= 2", f));
                }
                out = rotate_plane(x, m.to_radians());
            }
            TransformKind::Scale => out.data_mut().iter_mut().for_each(|v| *v /= m),
            TransformKind::Shift => {
                let d = shift_direction(f, self.seed);
                for i in 0..b {
                    for j in 0..f {
                        out.data_mut()[i * f + j] += m * d[j];
                    }
                }
            }
            TransformKind::FeatureMask => {
                let k = ((m * f as f64).round() as usize).clamp(1, f);
                for i in 0..b {
                    for j in sample_indices(rng, f, k) {
                        out.data_mut()[i * f + j] = 0.0;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Unit vector with random signs and magnitudes, fixed by `seed`.
pub fn shift_direction(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1fe_c7ed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut d: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
    let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    d.iter_mut().for_each(|v| *v /= n);
    d
}

/// Rotates coordinates (0, 1) of every row by `angle` radians.
pub fn rotate_plane(x: &Value, angle: f64) -> Value {
    let (c, s) = (angle.cos(), angle.sin());
    rotate_with(x, c, s)
}

fn rotate_with(x: &Value, c: f64, s: f64) -> Value {
    let f = x.cols();
    let mut out = x.clone();
    for i in 0..x.rows() {
        let (a, b) = (x.data()[i * f], x.data()[i * f + 1]);
        out.data_mut()[i * f] = c * a - s * b;
        out.data_mut()[i * f + 1] = s * a + c * b;
    }
    out
}

/// Rotation by `quarter_turns * 90` degrees in coordinates (0, 1), exact.
pub fn rotate_quarter(x: &Value, quarter_turns: usize) -> Value {
    let (c, s) = match quarter_turns % 4 {
        0 => (1.0, 0.0),
        1 => (0.0, 1.0),
        2 => (-1.0, 0.0),
        _ => (0.0, -1.0),
    };
    rotate_with(x, c, s)
}

/// Self-supervised rotation task: the batch is replicated under the four
/// quarter-turn rotations (block `r` holds rotation `r`), labels are `r`.
pub fn ssl_transform_labels(x: &Value) -> Result<(Value, Vec<usize>)> {
    if x.shape().len() != 2 || x.cols() < 2 {
        return Err(shape_err("ssl_transform_labels", "[B, F>=2]", x.shape()));
    }
    let b = x.rows();
    let mut data = Vec::with_capacity(4 * x.len());
    let mut labels = Vec::with_capacity(4 * b);
    for r in 0..4 {
        data.extend_from_slice(rotate_quarter(x, r).data());
        labels.extend(std::iter::repeat_n(r, b));
    }
    Ok((Value::matrix(4 * b, x.cols(), data)?, labels))
}

/// Set of (kind, severity) pairs sampled uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformPool {
    pub kinds: Vec<TransformKind>,
    pub severities: Vec<u8>,
}

impl TransformPool {
    pub fn new(kinds: Vec<TransformKind>, severities: Vec<u8>) -> Self {
        Self { kinds, severities }
    }

    /// All kinds except `held_out`, at severities 1..=3.
    pub fn pretraining(held_out: Option<TransformKind>) -> Self {
        let kinds = TransformKind::ALL.into_iter().filter(|k| Some(*k) != held_out).collect();
        Self::new(kinds, vec![1, 2, 3])
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<Transform> {
        if self.kinds.is_empty() || self.severities.is_empty() {
            return Err(Error::EmptyPool);
        }
        let n = self.kinds.len() * self.severities.len();
        let pick = rng.random_range(0..n);
        let kind = self.kinds[pick / self.severities.len()];
        let severity = self.severities[pick % self.severities.len()];
        Transform::new(kind, severity, rng.random())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(seed: u64) -> Value {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Value::matrix(8, 5, (0..40).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn magnitudes_increase_with_severity() {
        for k in TransformKind::ALL {
            let m = k.magnitudes();
            assert!(m.windows(2).all(|w| w[0] < w[1]), "{k}");
        }
    }

    #[test]
    fn rotation_then_inverse_is_identity() {
        let x = batch(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in 1..=5 {
            let t = Transform::new(TransformKind::Rotation, s, 0).unwrap();
            let y = t.apply(&x, &mut rng).unwrap();
            let back = rotate_plane(&y, -t.magnitude().to_radians());
            for (a, b) in back.data().iter().zip(x.data()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn noise_reproducible_under_seed() {
        let x = batch(2);
        let t = Transform::new(TransformKind::GaussNoise, 3, 0).unwrap();
        let a = t.apply(&x, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = t.apply(&x, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, x);
    }

    #[test]
    fn mask_zeroes_expected_count() {
        let x = Value::matrix(4, 10, vec![1.0; 40]).unwrap();
        let t = Transform::new(TransformKind::FeatureMask, 5, 0).unwrap();
        let expected = (t.magnitude() * 10.0).round() as usize;
        let y = t.apply(&x, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for i in 0..4 {
            assert_eq!(y.row(i).iter().filter(|v| **v == 0.0).count(), expected);
        }
    }

    #[test]
    fn shift_has_requested_norm() {
        let x = Value::zeros(vec![2, 6]);
        let t = Transform::new(TransformKind::Shift, 4, 77).unwrap();
        let y = t.apply(&x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let n = y.row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - TransformKind::Shift.magnitudes()[3]).abs() < 1e-12);
        assert_eq!(y.row(0), y.row(1));
    }

    #[test]
    fn rotation_needs_two_columns() {
        let x = Value::zeros(vec![3, 1]);
        let t = Transform::new(TransformKind::Rotation, 1, 0).unwrap();
        assert!(matches!(t.apply(&x, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::ShapeMismatch { .. })));
        assert!(Transform::new(TransformKind::Rotation, 6, 0).is_err());
    }

    #[test]
    fn ssl_expansion() {
        let x = batch(3);
        let (y, labels) = ssl_transform_labels(&x).unwrap();
        assert_eq!(y.rows(), 4 * x.rows());
        assert_eq!(&y.data()[..x.len()], x.data());
        assert!(labels[..8].iter().all(|&l| l == 0));
        assert_eq!(labels[31], 3);
        let twice = rotate_quarter(&rotate_quarter(&x, 2), 2);
        for (a, b) in twice.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn pool_sampling() {
        let single = TransformPool::new(vec![TransformKind::Scale], vec![4]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let t = single.sample(&mut rng).unwrap();
            assert_eq!((t.kind, t.severity), (TransformKind::Scale, 4));
        }
        assert!(matches!(TransformPool::new(vec![], vec![1]).sample(&mut rng), Err(Error::EmptyPool)));
    }

    #[test]
    fn pool_is_uniform_over_pairs() {
        let pool = TransformPool::new(TransformKind::ALL.to_vec(), vec![1, 2, 3, 4, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = std::collections::HashMap::new();
        let n = 100_000;
        for _ in 0..n {
            let t = pool.sample(&mut rng).unwrap();
            *counts.entry((t.kind, t.severity)).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 25);
        let expected = n as f64 / 25.0;
        let mut chi2 = 0.0;
        for c in counts.values() {
            assert!((*c as f64 - expected).abs() < 0.2 * expected);
            chi2 += (*c as f64 - expected).powi(2) / expected;
        }
        // 24 degrees of freedom, 99.9th percentile is about 51.2
        assert!(chi2 < 51.2, "chi2 = {chi2}");
    }
}
