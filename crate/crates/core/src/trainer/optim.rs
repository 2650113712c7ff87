//! Gradient clipping, Nesterov SGD and the plateau schedule.

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Global L2 norm over every tensor.
pub fn global_norm(grads: &ModelParams) -> f64 {
    grads.squared_norm().sqrt()
}

/// Rescales `grads` in place so their global norm is at most `clip_norm`.
/// Returns the norm before clipping. A non-finite entry is reported with the
/// name of the tensor holding it and leaves `grads` untouched.
pub fn clip_gradients(grads: &mut ModelParams, clip_norm: f64) -> Result<f64> {
    for t in grads.tensors() {
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(t.name));
        }
    }
    let norm = global_norm(grads);
    if norm > clip_norm {
        grads.scale(clip_norm / norm);
    }
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One Nesterov step on flat slices:
///
/// ```text
/// d = g + wd * theta
/// v <- mu * v - lr * d
/// theta <- theta + mu * v - lr * d
/// ```
pub fn nesterov_update(theta: &mut [f64], velocity: &mut [f64], grad: &[f64], cfg: StepConfig) {
    assert!(theta.len() == velocity.len() && theta.len() == grad.len());
    let StepConfig {
        lr,
        momentum: mu,
        weight_decay: wd,
    } = cfg;
    for ((p, v), &g) in theta.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        let d = g + wd * *p;
        *v = mu * *v - lr * d;
        *p += mu * *v - lr * d;
    }
}

/// [`nesterov_update`] applied tensor by tensor.
pub fn sgd_nesterov_step(params: &mut ModelParams, velocity: &mut ModelParams, grads: &ModelParams, cfg: StepConfig) {
    let g = grads.tensors();
    let v = velocity.tensors_mut();
    for ((p, v), g) in params.tensors_mut().into_iter().zip(v).zip(g) {
        nesterov_update(p, v, g.data, cfg);
    }
}

/// Plateau bookkeeping carried between epochs.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PlateauState {
    pub lr: f64,
    pub lambda: f64,
    pub best_val: Option<f64>,
    /// Consecutive epochs without enough improvement.
    pub stale_epochs: usize,
    pub lambda_switched: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateauConfig {
    pub patience: usize,
    pub epsilon_improve: f64,
    pub lambda_final: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PlateauEvent {
    pub improved: bool,
    pub lr_halved: bool,
    pub lambda_switched: bool,
}

/// Feed one validation loss. A loss counts as progress only if it beats the
/// best so far by more than `epsilon_improve` relative. After `patience`
/// stale epochs the learning rate halves; the first such plateau also moves
/// lambda to its final value.
pub fn plateau_scheduler(state: &mut PlateauState, val_loss: f64, cfg: &PlateauConfig) -> PlateauEvent {
    let mut event = PlateauEvent::default();
    let improved = match state.best_val {
        None => true,
        Some(best) => val_loss < best - cfg.epsilon_improve * best.abs(),
    };
    if improved {
        state.best_val = Some(val_loss);
        state.stale_epochs = 0;
        event.improved = true;
        return event;
    }
    state.stale_epochs += 1;
    if state.stale_epochs >= cfg.patience {
        state.stale_epochs = 0;
        state.lr *= 0.5;
        event.lr_halved = true;
        if !state.lambda_switched {
            state.lambda_switched = true;
            state.lambda = state.lambda.max(cfg.lambda_final);
            event.lambda_switched = true;
        }
    }
    event
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests_support::tiny_params;
    use proptest::prelude::*;

    #[test]
    fn clip_leaves_small_norms() {
        let mut g = tiny_params(1);
        let n = global_norm(&g);
        g.scale(0.5 / n);
        let before = g.to_flat();
        let norm = clip_gradients(&mut g, 1.0).unwrap();
        assert!((norm - 0.5).abs() < 1e-12);
        assert_eq!(g.to_flat(), before);
    }

    #[test]
    fn clip_scales_large_norms() {
        let mut g = tiny_params(2);
        let n = global_norm(&g);
        g.scale(4.0 / n);
        let before = g.to_flat();
        clip_gradients(&mut g, 1.0).unwrap();
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        for (a, b) in g.to_flat().iter().zip(&before) {
            assert!((a - 0.25 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn clip_zero_is_zero() {
        let mut g = tiny_params(3).zeros_like();
        assert_eq!(clip_gradients(&mut g, 1.0).unwrap(), 0.0);
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clip_rejects_non_finite() {
        let mut g = tiny_params(3).zeros_like();
        g.head.bias[1] = f64::NAN;
        assert!(matches!(clip_gradients(&mut g, 1.0), Err(Error::NonFiniteGradient(name)) if name == "head.bias"));
    }

    #[test]
    fn no_momentum_is_plain_sgd() {
        let mut theta = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        let cfg = StepConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        nesterov_update(&mut theta, &mut v, &[0.5, 1.0], cfg);
        assert_eq!(theta, vec![1.0 - 0.05, -2.0 - 0.1]);
    }

    #[test]
    fn zero_gradient_at_rest_is_fixed_point() {
        let mut theta = vec![3.0];
        let mut v = vec![0.0];
        let cfg = StepConfig { lr: 0.1, momentum: 0.95, weight_decay: 0.0 };
        nesterov_update(&mut theta, &mut v, &[0.0], cfg);
        assert_eq!((theta[0], v[0]), (3.0, 0.0));
    }

    // f(x) = x^2 / 2, so g = x. From x = 1, v = 0 with lr 0.1, mu 0.9:
    //   step 1: v = -0.1,              x = 1 - 0.09 - 0.1 = 0.81
    //   step 2: v = -0.09 - 0.081 = -0.171,
    //           x = 0.81 - 0.1539 - 0.081 = 0.5751
    #[test]
    fn quadratic_two_steps() {
        let mut x = vec![1.0];
        let mut v = vec![0.0];
        let cfg = StepConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        let g = x.clone();
        nesterov_update(&mut x, &mut v, &g, cfg);
        assert!((x[0] - 0.81).abs() < 1e-15 && (v[0] + 0.1).abs() < 1e-15);
        let g = x.clone();
        nesterov_update(&mut x, &mut v, &g, cfg);
        assert!((v[0] + 0.171).abs() < 1e-15);
        assert!((x[0] - 0.5751).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_alone_shrinks_norm() {
        let mut p = tiny_params(4);
        let mut v = p.zeros_like();
        let zero = p.zeros_like();
        let cfg = StepConfig { lr: 0.1, momentum: 0.95, weight_decay: 1e-2 };
        let mut prev = p.squared_norm();
        for _ in 0..50 {
            sgd_nesterov_step(&mut p, &mut v, &zero, cfg);
            let now = p.squared_norm();
            assert!(now < prev);
            prev = now;
        }
    }

    fn fresh(lr: f64, lambda: f64) -> PlateauState {
        PlateauState {
            lr,
            lambda,
            best_val: None,
            stale_epochs: 0,
            lambda_switched: false,
        }
    }

    const CFG: PlateauConfig = PlateauConfig {
        patience: 2,
        epsilon_improve: 0.01,
        lambda_final: 1.0,
    };

    #[test]
    fn improving_losses_change_nothing() {
        let mut s = fresh(0.1, 0.1);
        for loss in [5.0, 4.0, 3.0, 2.0] {
            assert!(plateau_scheduler(&mut s, loss, &CFG).improved);
        }
        assert_eq!((s.lr, s.lambda), (0.1, 0.1));
    }

    #[test]
    fn flat_losses_halve_and_switch() {
        let mut s = fresh(0.1, 0.1);
        let events: Vec<_> = [1.0, 1.0, 1.0].iter().map(|&l| plateau_scheduler(&mut s, l, &CFG)).collect();
        assert!(!events[1].lr_halved);
        assert!(events[2].lr_halved && events[2].lambda_switched);
        assert_eq!((s.lr, s.lambda), (0.05, 1.0));
        // A second plateau halves again but lambda stays.
        plateau_scheduler(&mut s, 1.0, &CFG);
        let e = plateau_scheduler(&mut s, 1.0, &CFG);
        assert!(e.lr_halved && !e.lambda_switched);
        assert_eq!((s.lr, s.lambda), (0.025, 1.0));
    }

    #[test]
    fn tiny_improvement_is_a_plateau() {
        let mut s = fresh(0.1, 0.1);
        plateau_scheduler(&mut s, 1.0, &CFG);
        assert!(!plateau_scheduler(&mut s, 0.995, &CFG).improved);
        assert!(plateau_scheduler(&mut s, 0.98, &CFG).improved);
    }

    proptest! {
        #[test]
        fn lr_never_rises_lambda_never_falls(losses in prop::collection::vec(0.0f64..10.0, 1..40)) {
            let mut s = fresh(0.1, 0.1);
            for l in losses {
                let (lr, lambda) = (s.lr, s.lambda);
                plateau_scheduler(&mut s, l, &CFG);
                prop_assert!(s.lr <= lr);
                prop_assert!(s.lambda >= lambda);
            }
        }

        #[test]
        fn clipped_norm_bounded(scale in 1e-3f64..1e3, clip in 0.1f64..10.0, seed in 0u64..50) {
            let mut g = tiny_params(seed);
            g.scale(scale);
            clip_gradients(&mut g, clip).unwrap();
            prop_assert!(global_norm(&g) <= clip + 1e-9);
        }
    }
}
