//! Central finite differences for checking analytic gradients, and the
//! suites that compare every hand-written backward pass against them.

use ndarray::{Array2, Array3};
use rand::Rng as _;
use serde::Serialize;

use crate::alphabet::{Alphabet, Transcription};
use crate::ctc::{ctc_forward, ctc_grad, LogitSeq};
use crate::model::{model_backward, model_forward, Activation, FeatureMap, Mode, ModelConfig, ModelParams, SepConvLayer};
use crate::policy::{mixed_objective_with_samples, Estimator, MixedLossConfig};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::sampler::sample_path;

/// Step used by every finite-difference check in this crate.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, REL_ERROR_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate. `x` is restored
/// before returning.
pub fn central_differences(x: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let plus = f(x);
            x[i] = orig - h;
            let minus = f(x);
            x[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Largest [`rel_error`] over paired entries.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

/// Outcome of one finite-difference suite.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn uniform2(rng: &mut Rng, dim: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_fn(dim, |_| rng.random_range(-scale..scale))
}

fn uniform3(rng: &mut Rng, dim: (usize, usize, usize), scale: f64) -> Array3<f64> {
    Array3::from_shape_fn(dim, |_| rng.random_range(-scale..scale))
}

/// CTC loss and the mixed objective with a frozen sample, differentiated
/// with respect to logits.
pub fn check_loss_layer(seed: u64, instances: usize) -> CheckResult {
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let k = rng.random_range(2..=5);
        let alphabet = Alphabet::letters(k - 1).expect("k >= 2");
        let len = rng.random_range(0..=3);
        let reference = Transcription((0..len).map(|_| rng.random_range(1..k)).collect());
        let t = reference.min_frames().max(1) + rng.random_range(0..4);
        let z = uniform2(&mut rng, (t, k), 2.0);
        let logits = LogitSeq::new(z.clone()).expect("finite");
        let draw = sample_path(&logits, derive_seed(seed, &[i as u64]));
        let mixed = MixedLossConfig {
            lambda: 0.5,
            estimator: Estimator::SelfCritical,
            samples: 1,
        };
        let analytic = ctc_grad(&logits, &reference, &alphabet).expect("feasible");
        let mixed_analytic =
            mixed_objective_with_samples(&logits, &reference, &alphabet, &mixed, vec![draw.clone()]).expect("feasible");
        let mut flat = z.into_raw_vec_and_offset().0;
        let as_logits = |v: &[f64]| LogitSeq::new(Array2::from_shape_vec((t, k), v.to_vec()).unwrap()).unwrap();
        let num = central_differences(&mut flat, FD_STEP, |v| -ctc_forward(&as_logits(v), &reference, &alphabet).unwrap());
        worst = worst.max(max_rel_error(analytic.grad.as_slice().unwrap(), &num));
        let num = central_differences(&mut flat, FD_STEP, |v| {
            mixed_objective_with_samples(&as_logits(v), &reference, &alphabet, &mixed, vec![draw.clone()])
                .unwrap()
                .total
                .loss
        });
        worst = worst.max(max_rel_error(mixed_analytic.total.grad.as_slice().unwrap(), &num));
    }
    CheckResult {
        name: "loss layer (ctc_grad, mixed objective)",
        instances,
        max_rel_error: worst,
        tolerance: 1e-6,
    }
}

/// Input and weight gradients of strided, residual separable conv layers
/// under a random linear read-out.
pub fn check_sepconv(seed: u64, instances: usize) -> CheckResult {
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let (sf, st) = if i % 2 == 0 { (1, 1) } else { (2, 2) };
        let (d, n) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let layer = SepConvLayer {
            channelwise: uniform3(&mut rng, (3, 3, d), 1.0),
            pointwise: uniform2(&mut rng, (d, n), 1.0),
            stride_f: sf,
            stride_t: st,
            has_residual: true,
            projection: (sf != 1 || st != 1 || d != n).then(|| uniform2(&mut rng, (d, n), 1.0)),
            activation: Activation::Identity,
        };
        let x = FeatureMap::new(uniform3(&mut rng, (5, 4, d), 1.0)).expect("finite");
        let (y, cache) = layer.forward_cached(&x).expect("valid layer");
        let read = uniform3(&mut rng, y.dim(), 1.0);
        let (dx, grads) = layer.backward(&x, &cache, &read).expect("valid layer");
        let loss = |l: &SepConvLayer, x: &FeatureMap| (l.forward(x).unwrap().values() * &read).sum();

        let mut xv = x.values().as_slice().unwrap().to_vec();
        let num = central_differences(&mut xv, FD_STEP, |v| {
            loss(&layer, &FeatureMap::new(Array3::from_shape_vec(x.dim(), v.to_vec()).unwrap()).unwrap())
        });
        worst = worst.max(max_rel_error(dx.as_slice().unwrap(), &num));

        let mut probe = layer.clone();
        let mut w = layer.channelwise.as_slice().unwrap().to_vec();
        let num = central_differences(&mut w, FD_STEP, |v| {
            probe.channelwise.as_slice_mut().unwrap().copy_from_slice(v);
            loss(&probe, &x)
        });
        worst = worst.max(max_rel_error(grads.channelwise.as_slice().unwrap(), &num));

        let mut probe = layer.clone();
        let mut w = layer.pointwise.as_slice().unwrap().to_vec();
        let num = central_differences(&mut w, FD_STEP, |v| {
            probe.pointwise.as_slice_mut().unwrap().copy_from_slice(v);
            loss(&probe, &x)
        });
        worst = worst.max(max_rel_error(grads.pointwise.as_slice().unwrap(), &num));

        if let (Some(p), Some(g)) = (&layer.projection, &grads.projection) {
            let mut probe = layer.clone();
            let mut w = p.as_slice().unwrap().to_vec();
            let num = central_differences(&mut w, FD_STEP, |v| {
                probe.projection.as_mut().unwrap().as_slice_mut().unwrap().copy_from_slice(v);
                loss(&probe, &x)
            });
            worst = worst.max(max_rel_error(g.as_slice().unwrap(), &num));
        }
    }
    CheckResult {
        name: "separable conv backward",
        instances,
        max_rel_error: worst,
        tolerance: 1e-6,
    }
}

/// Every parameter of a small model under the mixed objective, with the
/// policy sample drawn once and then held fixed.
pub fn check_full_model(seed: u64, instances: usize) -> CheckResult {
    let config = ModelConfig {
        input_freq: 4,
        input_channels: 1,
        classes: 3,
        conv_blocks: vec![[2, 3, 3, 1, 1].into(), [3, 3, 3, 2, 2].into()],
        residual: true,
        activation: Activation::Relu,
        hidden: 5,
        dropout: Default::default(),
    };
    let alphabet = Alphabet::letters(2).expect("two letters");
    let mut rng = rng_from_seed(seed);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut params = ModelParams::init(&config, derive_seed(seed, &[i as u64])).expect("valid config");
        for t in params.tensors_mut() {
            t.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
        let x = FeatureMap::new(uniform3(&mut rng, (4, 10, 1), 1.0)).expect("finite");
        let reference = Transcription(vec![1, 2]);
        let mixed = MixedLossConfig {
            lambda: 1.0,
            estimator: Estimator::SelfCritical,
            samples: 1,
        };
        let (logits, cache) = model_forward(&x, &params, Mode::Eval).expect("valid input");
        let draw = sample_path(&logits, derive_seed(seed, &[i as u64, 1]));
        let out = mixed_objective_with_samples(&logits, &reference, &alphabet, &mixed, vec![draw.clone()])
            .expect("feasible");
        let grads = model_backward(&cache, &out.total, &params).expect("fresh cache");
        let mut flat = params.to_flat();
        let mut probe = params.clone();
        let num = central_differences(&mut flat, FD_STEP, |v| {
            probe.load_flat(v).unwrap();
            let (l, _) = model_forward(&x, &probe, Mode::Eval).unwrap();
            mixed_objective_with_samples(&l, &reference, &alphabet, &mixed, vec![draw.clone()])
                .unwrap()
                .total
                .loss
        });
        worst = worst.max(max_rel_error(&grads.to_flat(), &num));
    }
    CheckResult {
        name: "full model, mixed objective, frozen sample",
        instances,
        max_rel_error: worst,
        tolerance: 1e-5,
    }
}

/// The three suites at their default sizes.
pub fn run_suite(seed: u64) -> Vec<CheckResult> {
    vec![
        check_loss_layer(derive_seed(seed, &[1]), 50),
        check_sepconv(derive_seed(seed, &[2]), 20),
        check_full_model(derive_seed(seed, &[3]), 4),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic() {
        let mut x = vec![1.5, -0.5];
        let num = central_differences(&mut x, FD_STEP, |v| v[0].powi(3) + 2.0 * v[1]);
        assert_eq!(x, vec![1.5, -0.5]);
        assert!(max_rel_error(&[3.0 * 1.5 * 1.5, 2.0], &num) < 1e-9);
    }

    #[test]
    fn default_suite_passes() {
        for r in run_suite(0) {
            assert!(r.passed(), "{}: {}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn floor_applies_to_tiny_values() {
        assert!((rel_error(1e-9, 2e-9) - 1e-5).abs() < 1e-18);
        assert!((rel_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
