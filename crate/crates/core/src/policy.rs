//! Policy-gradient estimators over logits and the mixed CTC + policy objective.
//!
//! Every estimator returns a gradient with respect to the logits only. The
//! estimate for a sampled transcription `y_s` is
//! `(r(y_s) - b) * d(-log P(y_s | x)) / d logits`, where `b` is zero for plain
//! REINFORCE and the reward of the greedy decode for self-critical training.
//! `log P(y_s | x)` is the CTC marginal of the collapsed sample, not the
//! probability of the raw path.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::alphabet::{Alphabet, Transcription};
use crate::ctc::{ctc_grad, ctc_grad_unchecked, LogitSeq, LossGrad};
use crate::error::{invalid, Result};
use crate::metrics::reward;
use crate::rng::derive_seed;
use crate::sampler::{greedy_decode, sample_path, SampleDraw};

/// Which reward offset the policy gradient uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// No baseline.
    Reinforce,
    /// Greedy-decode reward as the baseline.
    SelfCritical,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyEstimate {
    /// `-weight * log P(y_s | x)`. A surrogate whose gradient is the policy
    /// gradient; its value is not the expected reward.
    pub loss_estimate: f64,
    pub grad: Array2<f64>,
    pub reward_sample: f64,
    pub reward_baseline: f64,
    pub sample: SampleDraw,
}

impl PolicyEstimate {
    pub fn weight(&self) -> f64 {
        self.reward_sample - self.reward_baseline
    }
}

/// Weighting of the policy term in the mixed objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedLossConfig {
    pub lambda: f64,
    pub estimator: Estimator,
    /// Independent samples averaged per utterance.
    pub samples: usize,
}

impl Default for MixedLossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            estimator: Estimator::SelfCritical,
            samples: 1,
        }
    }
}

impl MixedLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return invalid(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.samples == 0 {
            return invalid("at least one policy sample is required");
        }
        Ok(())
    }
}

/// Policy estimate for an already drawn sample.
pub fn estimate_for_sample(
    logits: &LogitSeq,
    reference: &Transcription,
    alphabet: &Alphabet,
    estimator: Estimator,
    sample: SampleDraw,
) -> Result<PolicyEstimate> {
    logits.check_alphabet(alphabet)?;
    alphabet.check_transcription(reference)?;
    if sample.path.0.len() != logits.frames() {
        return invalid(format!(
            "sample has {} frames, logits have {}",
            sample.path.0.len(),
            logits.frames()
        ));
    }
    let reward_sample = reward(&sample.transcription, reference);
    let reward_baseline = match estimator {
        Estimator::Reinforce => 0.0,
        Estimator::SelfCritical => reward(&greedy_decode(logits), reference),
    };
    let weight = reward_sample - reward_baseline;
    let (loss_estimate, grad) = if weight == 0.0 {
        (0.0, Array2::zeros(logits.values().dim()))
    } else {
        // A collapsed sample always fits in the frames it was drawn from.
        let LossGrad { loss, grad } =
            ctc_grad_unchecked(logits.values(), sample.transcription.as_slice())?;
        (weight * loss, grad * weight)
    };
    Ok(PolicyEstimate {
        loss_estimate,
        grad,
        reward_sample,
        reward_baseline,
        sample,
    })
}

/// Single-sample REINFORCE estimate of the gradient of `-E[r]`.
pub fn reinforce_grad(
    logits: &LogitSeq,
    reference: &Transcription,
    alphabet: &Alphabet,
    seed: u64,
) -> Result<PolicyEstimate> {
    let sample = sample_path(logits, seed);
    estimate_for_sample(logits, reference, alphabet, Estimator::Reinforce, sample)
}

/// Single-sample self-critical estimate: REINFORCE with the greedy decode's
/// reward subtracted.
pub fn scst_grad(
    logits: &LogitSeq,
    reference: &Transcription,
    alphabet: &Alphabet,
    seed: u64,
) -> Result<PolicyEstimate> {
    let sample = sample_path(logits, seed);
    estimate_for_sample(logits, reference, alphabet, Estimator::SelfCritical, sample)
}

/// Mixed objective with its components kept apart for logging.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedOutcome {
    pub total: LossGrad,
    pub ctc_loss: f64,
    /// Mean policy surrogate over samples (before scaling by lambda).
    pub policy_loss: f64,
    pub mean_sample_reward: f64,
    pub baseline_reward: f64,
}

/// Seeds of the policy samples for one utterance. A single sample uses the
/// seed itself.
pub fn sample_seeds(seed: u64, samples: usize) -> Vec<u64> {
    if samples == 1 {
        vec![seed]
    } else {
        (0..samples as u64).map(|i| derive_seed(seed, &[i])).collect()
    }
}

/// `-log P(y | x) + lambda * L_policy`, sampling `cfg.samples` draws from
/// `seed`.
pub fn mixed_loss(
    logits: &LogitSeq,
    reference: &Transcription,
    alphabet: &Alphabet,
    cfg: &MixedLossConfig,
    seed: u64,
) -> Result<LossGrad> {
    Ok(mixed_objective(logits, reference, alphabet, cfg, seed)?.total)
}

pub fn mixed_objective(
    logits: &LogitSeq,
    reference: &Transcription,
    alphabet: &Alphabet,
    cfg: &MixedLossConfig,
    seed: u64,
) -> Result<MixedOutcome> {
    cfg.validate()?;
    let draws = if cfg.lambda == 0.0 {
        Vec::new()
    } else {
        sample_seeds(seed, cfg.samples)
            .into_iter()
            .map(|s| sample_path(logits, s))
            .collect()
    };
    mixed_objective_with_samples(logits, reference, alphabet, cfg, draws)
}

/// Mixed objective for fixed draws. With `lambda == 0` the draws are ignored
/// and the result is exactly the CTC loss and gradient.
pub fn mixed_objective_with_samples(
    logits: &LogitSeq,
    reference: &Transcription,
    alphabet: &Alphabet,
    cfg: &MixedLossConfig,
    draws: Vec<SampleDraw>,
) -> Result<MixedOutcome> {
    cfg.validate()?;
    let LossGrad { loss: ctc_loss, mut grad } = ctc_grad(logits, reference, alphabet)?;
    let mut outcome = MixedOutcome {
        total: LossGrad { loss: ctc_loss, grad: Array2::zeros((0, 0)) },
        ctc_loss,
        policy_loss: 0.0,
        mean_sample_reward: 0.0,
        baseline_reward: 0.0,
    };
    if cfg.lambda > 0.0 {
        if draws.is_empty() {
            return invalid("policy term needs at least one sample");
        }
        let n = draws.len() as f64;
        let scale = cfg.lambda / n;
        for draw in draws {
            let est = estimate_for_sample(logits, reference, alphabet, cfg.estimator, draw)?;
            outcome.policy_loss += est.loss_estimate / n;
            outcome.mean_sample_reward += est.reward_sample / n;
            outcome.baseline_reward = est.reward_baseline;
            if est.weight() != 0.0 {
                grad.scaled_add(scale, &est.grad);
            }
        }
        outcome.total.loss += cfg.lambda * outcome.policy_loss;
    }
    outcome.total.grad = grad;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alphabet::{collapse_unchecked, for_each_path, Path};
    use crate::ctc::log_softmax;
    use crate::sampler::argmax_path;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_logits(rng: &mut ChaCha8Rng, t: usize, k: usize, scale: f64) -> LogitSeq {
        LogitSeq::new(Array2::from_shape_fn((t, k), |_| rng.random_range(-scale..scale))).unwrap()
    }

    /// Gradient of `-E[r]` by enumerating every path: for a path with
    /// probability P, dP/dz[t,k] = P * (1[path_t = k] - p[t,k]).
    fn exact_expected_reward_grad(logits: &LogitSeq, reference: &Transcription) -> Array2<f64> {
        let (t_len, k) = logits.values().dim();
        let probs = log_softmax(logits).mapv(f64::exp);
        let mut grad = Array2::zeros((t_len, k));
        for_each_path(t_len, k, |path| {
            let p: f64 = path.iter().enumerate().map(|(t, &c)| probs[[t, c]]).product();
            let r = reward(&collapse_unchecked(path), reference);
            for t in 0..t_len {
                for c in 0..k {
                    let onehot = if path[t] == c { 1.0 } else { 0.0 };
                    grad[[t, c]] -= p * r * (onehot - probs[[t, c]]);
                }
            }
        })
        .unwrap();
        grad
    }

    fn expected_estimate(
        logits: &LogitSeq,
        reference: &Transcription,
        alphabet: &Alphabet,
        estimator: Estimator,
    ) -> Array2<f64> {
        let (t_len, k) = logits.values().dim();
        let probs = log_softmax(logits).mapv(f64::exp);
        let mut mean = Array2::zeros((t_len, k));
        for_each_path(t_len, k, |path| {
            let p: f64 = path.iter().enumerate().map(|(t, &c)| probs[[t, c]]).product();
            let draw = SampleDraw::from_path(Path(path.to_vec()));
            let est = estimate_for_sample(logits, reference, alphabet, estimator, draw).unwrap();
            mean.scaled_add(p, &est.grad);
        })
        .unwrap();
        mean
    }

    #[test]
    fn zero_reward_gives_zero_grad() {
        let alpha = Alphabet::letters(2).unwrap();
        // Forces the sample to "bb", which shares nothing with "aaa".
        let mut v = Array2::zeros((3, 3));
        v[[0, 2]] = 1e6;
        v[[1, 0]] = 1e6;
        v[[2, 2]] = 1e6;
        let logits = LogitSeq::new(v).unwrap();
        let est = reinforce_grad(&logits, &Transcription(vec![1, 1, 1]), &alpha, 3).unwrap();
        assert_eq!(est.reward_sample, 0.0);
        assert!(est.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn forced_correct_sample_is_scaled_ctc() {
        let alpha = Alphabet::letters(2).unwrap();
        let mut v = Array2::zeros((3, 3));
        v[[0, 1]] = 1e6;
        v[[1, 0]] = 1e6;
        v[[2, 2]] = 1e6;
        let logits = LogitSeq::new(v).unwrap();
        let reference = Transcription(vec![1, 2]);
        let est = reinforce_grad(&logits, &reference, &alpha, 8).unwrap();
        assert_eq!(est.weight(), 1.0);
        let ctc = ctc_grad(&logits, &reference, &alpha).unwrap();
        assert_eq!(est.grad, ctc.grad);
    }

    #[test]
    fn scst_zero_when_sample_matches_greedy() {
        let alpha = Alphabet::letters(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = random_logits(&mut rng, 5, 3, 1.0);
        let greedy = SampleDraw::from_path(argmax_path(&logits));
        let est = estimate_for_sample(
            &logits,
            &Transcription(vec![1, 2, 1]),
            &alpha,
            Estimator::SelfCritical,
            greedy,
        )
        .unwrap();
        assert_eq!(est.weight(), 0.0);
        assert!(est.grad.iter().all(|&g| g.to_bits() == 0));
    }

    #[test]
    fn scst_sign_pushes_better_sample_up() {
        let alpha = Alphabet::letters(2).unwrap();
        // Greedy decodes "a"; reference "ab" gives greedy reward 0.5.
        let logits = LogitSeq::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.5, 0.0, 0.4]]).unwrap();
        let reference = Transcription(vec![1, 2]);
        assert_eq!(greedy_decode(&logits).0, vec![1]);
        let draw = SampleDraw::from_path(Path(vec![1, 2]));
        let est =
            estimate_for_sample(&logits, &reference, &alpha, Estimator::SelfCritical, draw).unwrap();
        assert_eq!(est.reward_sample, 1.0);
        assert_eq!(est.reward_baseline, 0.5);
        assert_eq!(est.weight(), 0.5);
        // A descent step along -grad raises log P("ab").
        let before = crate::ctc::ctc_forward(&logits, &reference, &alpha).unwrap();
        let stepped = logits.values() - &(&est.grad * 1e-3);
        let after =
            crate::ctc::ctc_forward(&LogitSeq::new(stepped).unwrap(), &reference, &alpha).unwrap();
        assert!(after > before);
    }

    #[test]
    fn estimators_unbiased_exhaustively() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let alpha = Alphabet::letters(1).unwrap();
        for _ in 0..40 {
            let t = rng.random_range(1..=3);
            let logits = random_logits(&mut rng, t, 2, 2.0);
            let len = rng.random_range(0..=t);
            let reference = Transcription(vec![1; len]);
            let exact = exact_expected_reward_grad(&logits, &reference);
            for estimator in [Estimator::Reinforce, Estimator::SelfCritical] {
                let mean = expected_estimate(&logits, &reference, &alpha, estimator);
                let err = (&mean - &exact).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(err < 1e-10, "{estimator:?}: {err}");
            }
        }
    }

    #[test]
    fn uniform_two_by_two_reinforce_expectation() {
        let alpha = Alphabet::letters(1).unwrap();
        let logits = LogitSeq::new(Array2::zeros((2, 2))).unwrap();
        let reference = Transcription(vec![1]);
        let exact = exact_expected_reward_grad(&logits, &reference);
        let mean = expected_estimate(&logits, &reference, &alpha, Estimator::Reinforce);
        for (a, b) in mean.iter().zip(exact.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn mixed_with_zero_lambda_is_ctc() {
        let alpha = Alphabet::letters(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = random_logits(&mut rng, 9, 4, 2.0);
        let reference = Transcription(vec![1, 3, 3]);
        let cfg = MixedLossConfig { lambda: 0.0, ..Default::default() };
        let mixed = mixed_loss(&logits, &reference, &alpha, &cfg, 1).unwrap();
        assert_eq!(mixed, ctc_grad(&logits, &reference, &alpha).unwrap());
    }

    #[test]
    fn mixed_with_greedy_sample_is_ctc() {
        let alpha = Alphabet::letters(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits = random_logits(&mut rng, 9, 4, 2.0);
        let reference = Transcription(vec![2, 1]);
        let cfg = MixedLossConfig { lambda: 1.0, ..Default::default() };
        let draw = SampleDraw::from_path(argmax_path(&logits));
        let mixed =
            mixed_objective_with_samples(&logits, &reference, &alpha, &cfg, vec![draw]).unwrap();
        assert_eq!(mixed.total, ctc_grad(&logits, &reference, &alpha).unwrap());
    }

    #[test]
    fn mixed_is_linear_in_lambda() {
        let alpha = Alphabet::letters(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let reference = Transcription(vec![1, 2, 3]);
        let cfg = MixedLossConfig { lambda: 0.1, ..Default::default() };
        let mut checked = 0;
        for seed in 0..50 {
            let logits = random_logits(&mut rng, 8, 4, 1.0);
            let mixed = mixed_loss(&logits, &reference, &alpha, &cfg, seed).unwrap();
            let ctc = ctc_grad(&logits, &reference, &alpha).unwrap();
            let scst = scst_grad(&logits, &reference, &alpha, seed).unwrap();
            if scst.weight() != 0.0 {
                checked += 1;
            }
            let expected = &ctc.grad + &(&scst.grad * 0.1);
            for (a, b) in mixed.grad.iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((mixed.loss - (ctc.loss + 0.1 * scst.loss_estimate)).abs() < 1e-12);
        }
        assert!(checked > 10);
    }

    #[test]
    fn sampled_transcriptions_always_feasible() {
        let alpha = Alphabet::letters(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for seed in 0..10_000u64 {
            let t = rng.random_range(1..12);
            let logits = random_logits(&mut rng, t, 4, 3.0);
            let draw = sample_path(&logits, seed);
            let ll = crate::ctc::ctc_forward(&logits, &draw.transcription, &alpha).unwrap();
            assert!(ll > f64::NEG_INFINITY);
        }
    }

    /// Second moments under the path distribution of the REINFORCE and
    /// self-critical estimates, plus `E[r |g|^2]` and `E[|g|^2]` where `g` is
    /// the gradient of `-log P(y)` of the sampled transcription.
    fn second_moments(logits: &LogitSeq, reference: &Transcription, alphabet: &Alphabet) -> [f64; 4] {
        let (t_len, k) = logits.values().dim();
        let probs = log_softmax(logits).mapv(f64::exp);
        let mut m = [0.0; 4];
        for_each_path(t_len, k, |path| {
            let p: f64 = path.iter().enumerate().map(|(t, &c)| probs[[t, c]]).product();
            let draw = SampleDraw::from_path(Path(path.to_vec()));
            let g = crate::ctc::ctc_grad(logits, &draw.transcription, alphabet).unwrap().grad;
            let g2 = g.iter().map(|v| v * v).sum::<f64>();
            let r = reward(&draw.transcription, reference);
            for (slot, est) in [Estimator::Reinforce, Estimator::SelfCritical].into_iter().enumerate() {
                let e = estimate_for_sample(logits, reference, alphabet, est, draw.clone()).unwrap();
                m[slot] += p * e.grad.iter().map(|v| v * v).sum::<f64>();
            }
            m[2] += p * r * g2;
            m[3] += p * g2;
        })
        .unwrap();
        m
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(200))]

        // Both estimators share a mean, so comparing second moments compares
        // variances. The greedy baseline b lowers the variance exactly when
        // b <= 2 E[r |g|^2] / E[|g|^2].
        #[test]
        fn baseline_lowers_variance_iff_below_threshold(seed in 0u64..u64::MAX, t in 1usize..=3, k in 2usize..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let alphabet = Alphabet::letters(k - 1).unwrap();
            let logits = random_logits(&mut rng, t, k, 3.0);
            let len = rng.random_range(0..=3);
            let reference = Transcription((0..len).map(|_| rng.random_range(1..k)).collect());
            let [plain, critical, r_g2, g2] = second_moments(&logits, &reference, &alphabet);
            let b = reward(&greedy_decode(&logits), &reference);
            let threshold = 2.0 * r_g2 / g2;
            proptest::prop_assume!((b - threshold).abs() > 1e-9);
            proptest::prop_assert_eq!(critical <= plain, b <= threshold, "b {} threshold {}", b, threshold);
            // The gap is b^2 E[|g|^2] - 2 b E[r |g|^2].
            let gap = b * b * g2 - 2.0 * b * r_g2;
            proptest::prop_assert!((critical - plain - gap).abs() < 1e-9 * (1.0 + plain));
        }
    }

    #[test]
    fn rejects_negative_lambda() {
        let cfg = MixedLossConfig { lambda: -0.5, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
