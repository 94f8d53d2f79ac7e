//! Meta-gradient on the default-size model, where relu kinks sit close
//! enough to the pre-step point that a fixed-step Hessian probe can straddle one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cascade_tta::data::{split_meta_batch, SourceSpec};
use cascade_tta::nn::{Architecture, Model};
use cascade_tta::pretrain::{composed_meta_objective, meta_gradient, MetaMode, MetaSpec};

#[test]
fn directional_derivative_on_default_model() {
    for seed in 0..4u64 {
        let m = Model::init(&Architecture::cascade(16, vec![64, 64], 5), seed).unwrap();
        let batch = SourceSpec::default().with_seed(seed).sample(32, &mut ChaCha8Rng::seed_from_u64(seed));
        let mb = split_meta_batch(&batch, 0.5).unwrap();
        let spec = MetaSpec::cascade(&m, 1.0);
        let alpha = 0.1;
        let exact = meta_gradient(&m, &m.params, &mb, &spec, alpha, MetaMode::Exact, 1e-5).unwrap();
        let first = meta_gradient(&m, &m.params, &mb, &spec, alpha, MetaMode::FirstOrder, 1e-5).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(seed + 10);
        let d: Vec<f64> = (0..m.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        // small step: the composed objective itself has kinks within 1e-6
        let h = 1e-7;
        let at = |s: f64| {
            let p: Vec<f64> = m.params.iter().zip(&d).map(|(a, b)| a + s * h * b).collect();
            composed_meta_objective(&m, &p, &mb, &spec, alpha).unwrap()
        };
        let fd = (at(1.0) - at(-1.0)) / (2.0 * h);
        let dot = |g: &[f64]| g.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>();
        let (ex, fo) = (dot(&exact.grad), dot(&first.grad));
        assert!((ex - fd).abs() <= 1e-5 * fd.abs(), "seed {seed}: exact {ex} fd {fd}");
        assert!((fo - fd).abs() >= 1e-2 * fd.abs(), "seed {seed}: first-order {fo} fd {fd}");
    }
}
