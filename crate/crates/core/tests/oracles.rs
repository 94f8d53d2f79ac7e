//! End-to-end oracles on the default task: separability, severity
//! calibration, and source accuracy of the pre-trained checkpoints.

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cascade_tta::adapt::evaluate;
use cascade_tta::autodiff::{Graph, Value};
use cascade_tta::data::{LabeledSet, SourceSpec, Transform, TransformKind};
use cascade_tta::harness::{pretrain_cell, ExperimentConfig};
use cascade_tta::nn::{entropy, BnMode, ModelCheckpoint};
use cascade_tta::pretrain::PretrainMethod;

#[test]
fn linear_probe_separates_two_gaussians() {
    let dim = 4;
    let centers = vec![[3.0, 0.0, 0.0, 0.0].to_vec(), [-3.0, 0.0, 0.0, 0.0].to_vec()];
    let spec = SourceSpec { num_classes: 2, dim, centers, stddev: 0.5, n_train: 0, n_holdout: 0, seed: 0 };
    spec.validate().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let train = spec.sample(500, &mut rng);
    let test = spec.sample(1000, &mut rng);

    let mut g = Graph::new();
    let w = g.param(Value::matrix(dim, 2, vec![0.0; dim * 2]).unwrap());
    let b = g.param(Value::vector(vec![0.0; 2]));
    let x = g.input(train.x.clone());
    let logits = g.dense(x, w, b);
    g.cross_entropy(logits, train.y.clone());
    let (mut wv, mut bv) = (vec![0.0; dim * 2], vec![0.0; 2]);
    for _ in 0..100 {
        g.forward().unwrap();
        let grad = g.backward().unwrap();
        wv.iter_mut().zip(grad.leaf(0).data()).for_each(|(p, d)| *p -= 0.5 * d);
        bv.iter_mut().zip(grad.leaf(1).data()).for_each(|(p, d)| *p -= 0.5 * d);
        g.bind(w, Value::matrix(dim, 2, wv.clone()).unwrap()).unwrap();
        g.bind(b, Value::vector(bv.clone())).unwrap();
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let r = test.x.row(i);
            let s: Vec<f64> = (0..2).map(|k| bv[k] + (0..dim).map(|j| r[j] * wv[j * 2 + k]).sum::<f64>()).collect();
            (s[1] > s[0]) as usize == test.y[i]
        })
        .count();
    assert!(correct as f64 / test.len() as f64 >= 0.99, "{correct}/1000");
}

fn erm() -> &'static ModelCheckpoint {
    static CK: OnceLock<ModelCheckpoint> = OnceLock::new();
    CK.get_or_init(|| pretrain_cell(&ExperimentConfig::default(), PretrainMethod::Erm, 0).unwrap().0)
}

fn holdout() -> LabeledSet {
    let cfg = ExperimentConfig::default();
    cfg.source_for(0).sample(2000, &mut ChaCha8Rng::seed_from_u64(77))
}

fn shifted(set: &LabeledSet, kind: TransformKind, severity: u8) -> LabeledSet {
    let t = Transform::new(kind, severity, 5).unwrap();
    LabeledSet { x: t.apply(&set.x, &mut ChaCha8Rng::seed_from_u64(9)).unwrap(), y: set.y.clone() }
}

#[test]
fn erm_error_grows_with_severity() {
    let (ck, set) = (erm(), holdout());
    for kind in TransformKind::ALL {
        let errs: Vec<f64> = (1..=5u8)
            .map(|s| 1.0 - evaluate(&ck.model, &shifted(&set, kind, s), BnMode::RunningStats).unwrap())
            .collect();
        for w in errs.windows(2) {
            assert!(w[1] >= w[0] - 0.02, "{kind}: {errs:?}");
        }
        assert!(errs[4] >= 3.0 * errs[0], "{kind}: {errs:?}");
    }
}

#[test]
fn erm_entropy_higher_at_severity_five() {
    let (ck, set) = (erm(), holdout());
    for kind in TransformKind::ALL {
        let h = |s| entropy(&ck.model.logits(&shifted(&set, kind, s).x, BnMode::RunningStats).unwrap().0);
        assert!(h(5) > h(1), "{kind}: {} vs {}", h(5), h(1));
    }
}

#[test]
fn pretrained_checkpoints_fit_the_source() {
    let cfg = ExperimentConfig::default();
    let set = holdout();
    for m in [PretrainMethod::Meta, PretrainMethod::Erm] {
        let ck = if m == PretrainMethod::Erm { erm().clone() } else { pretrain_cell(&cfg, m, 0).unwrap().0 };
        let acc = evaluate(&ck.model, &set, BnMode::RunningStats).unwrap();
        assert!(acc >= 0.95, "{m}: {acc}");
    }
}
