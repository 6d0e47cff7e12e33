use super::*;
use crate::encoder::{grad, masked_softmax};
use rand::SeedableRng;

fn batch_fixture(masks: &[Vec<bool>]) -> PpoBatch<'_> {
    PpoBatch {
        masks: masks.iter().map(|m| m.as_slice()).collect(),
        actions: vec![0, 2, 1],
        old_log_probs: vec![-1.2, -0.4, -2.5],
        advantages: vec![1.5, -0.7, 0.3],
        returns: vec![2.0, -1.0, 0.5],
    }
}

fn loss_and_grads(logits: &Tensor<f32>, values: &Tensor<f32>, batch: &PpoBatch<'_>, cfg: &PpoConfig) -> (f64, Vec<Tensor<f32>>) {
    let mut total = 0.0;
    let (_, g) = grad(&[logits.clone(), values.clone()], |tape, v| {
        let (out, s) = ppo_loss_on_tape(tape, v[0], v[1], batch, cfg);
        total = s.total;
        Ok(out)
    })
    .unwrap();
    (total, g)
}

#[test]
fn clipped_surrogate_examples() {
    assert!((clipped_surrogate(1.3, 1.0, 0.2) - 1.2).abs() < 1e-12);
    assert!((clipped_surrogate(0.7, -1.0, 0.2) + 0.8).abs() < 1e-12);
    assert!((clipped_surrogate(0.7, 1.0, 0.2) - 0.7).abs() < 1e-12);
    assert!((clipped_surrogate(1.3, -1.0, 0.2) + 1.3).abs() < 1e-12);
    assert_eq!(clipped_surrogate(1.0, 2.5, 0.2), 2.5);
}

#[test]
fn gae_hand_cases() {
    let r = [1.0, 0.0, 2.0, 0.5];
    let v = [0.5, 0.2, 0.1, 0.3];
    let d = [false, false, true, false];
    // lambda = 1, gamma = 1: advantages are Monte Carlo returns minus V, with
    // the open last step bootstrapping from 0.4.
    let (a, ret) = compute_gae(&r, &v, &d, 0.4, 1.0, 1.0);
    let expect_ret = [3.0, 2.0, 2.0, 0.9];
    for i in 0..4 {
        assert!((ret[i] - expect_ret[i]).abs() < 1e-12, "{i}: {}", ret[i]);
        assert!((a[i] - (expect_ret[i] - v[i])).abs() < 1e-12);
    }
    // lambda = 0: one-step TD errors.
    let (a0, _) = compute_gae(&r, &v, &d, 0.4, 0.9, 0.0);
    let expect = [1.0 + 0.9 * 0.2 - 0.5, 0.0 + 0.9 * 0.1 - 0.2, 2.0 - 0.1, 0.5 + 0.9 * 0.4 - 0.3];
    for i in 0..4 {
        assert!((a0[i] - expect[i]).abs() < 1e-12, "{i}");
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let masks = vec![vec![true, true, true, false], vec![true, false, true, true], vec![false, true, true, true]];
    let batch = batch_fixture(&masks);
    let cfg = PpoConfig::default();
    let logits = Tensor::from_vec(3, 4, vec![0.3, -0.2, 0.8, 5.0, -1.0, 0.0, 0.4, 0.9, 7.0, 0.1, -0.5, 0.6]);
    let values = Tensor::from_vec(3, 1, vec![0.4, -0.3, 1.1]);
    let (_, g) = loss_and_grads(&logits, &values, &batch, &cfg);
    let eps = 1e-2f32;
    let check = |which: usize, idx: usize, analytic: f32| {
        let mut plus = [logits.clone(), values.clone()];
        let mut minus = plus.clone();
        plus[which].data[idx] += eps;
        minus[which].data[idx] -= eps;
        let (lp, _) = loss_and_grads(&plus[0], &plus[1], &batch, &cfg);
        let (lm, _) = loss_and_grads(&minus[0], &minus[1], &batch, &cfg);
        let numeric = (lp - lm) / (2.0 * eps as f64);
        assert!(
            (numeric - analytic as f64).abs() < 2e-3,
            "tensor {which} index {idx}: numeric {numeric}, analytic {analytic}"
        );
    };
    for i in 0..12 {
        check(0, i, g[0].data[i]);
    }
    for i in 0..3 {
        check(1, i, g[1].data[i]);
    }
    // Illegal logits receive no gradient.
    assert_eq!(g[0].data[3], 0.0);
    assert_eq!(g[0].data[5], 0.0);
    assert_eq!(g[0].data[8], 0.0);
}

#[test]
fn unit_ratio_gradient_is_vanilla_policy_gradient() {
    let masks = vec![vec![true; 4], vec![true, false, true, true], vec![true; 4]];
    let logits = Tensor::from_vec(3, 4, vec![0.3, -0.2, 0.8, 0.1, -1.0, 0.0, 0.4, 0.9, 0.2, 0.1, -0.5, 0.6]);
    let values = Tensor::zeros(3, 1);
    let mut batch = batch_fixture(&masks);
    let probs: Vec<Vec<f32>> = (0..3).map(|i| masked_softmax(logits.row(i), Some(&masks[i]))).collect();
    batch.old_log_probs = (0..3).map(|i| (probs[i][batch.actions[i]] as f64).ln()).collect();
    let cfg = PpoConfig {
        value_coef: 0.0,
        entropy_coef: 0.0,
        ..PpoConfig::default()
    };
    let (_, g) = loss_and_grads(&logits, &values, &batch, &cfg);
    for i in 0..3 {
        for j in 0..4 {
            let onehot = (j == batch.actions[i]) as u8 as f64;
            let pg = if masks[i][j] { -batch.advantages[i] * (onehot - probs[i][j] as f64) / 3.0 } else { 0.0 };
            assert!((g[0].data[i * 4 + j] as f64 - pg).abs() < 1e-5, "{i},{j}");
        }
    }
}

#[test]
fn clipped_samples_get_no_policy_gradient() {
    let masks = vec![vec![true, true]];
    let logits = Tensor::from_vec(1, 2, vec![2.0, 0.0]);
    let values = Tensor::zeros(1, 1);
    let p0 = masked_softmax(logits.row(0), None)[0] as f64;
    let batch = PpoBatch {
        masks: masks.iter().map(|m| m.as_slice()).collect(),
        actions: vec![0],
        // ratio = 1.5 with a positive advantage: clipped.
        old_log_probs: vec![(p0 / 1.5).ln()],
        advantages: vec![1.0],
        returns: vec![0.0],
    };
    let cfg = PpoConfig {
        entropy_coef: 0.0,
        ..PpoConfig::default()
    };
    let (total, g) = loss_and_grads(&logits, &values, &batch, &cfg);
    assert!((total + 1.2).abs() < 1e-5);
    assert!(g[0].data.iter().all(|&x| x == 0.0));
}

struct Bandit;

impl Environment for Bandit {
    fn num_actions(&self) -> usize {
        3
    }
    fn feature_dim(&self) -> usize {
        2
    }
    fn reset(&mut self, _: &mut ChaCha8Rng) -> Result<Observation, RlError> {
        Ok(Observation {
            features: vec![1.0, 0.0],
            mask: vec![true, true, false],
        })
    }
    fn step(&mut self, a: usize) -> Result<(f64, Option<Observation>), RlError> {
        Ok((if a == 1 { 1.0 } else { 0.0 }, None))
    }
}

#[test]
fn ppo_solves_a_masked_bandit() {
    let mut env = Bandit;
    let mut policy = PolicyParams::init(crate::rl::PolicyConfig { hidden: 8 }, 2, 3, 5);
    let cfg = PpoConfig {
        buffer_steps: 64,
        minibatch_size: 16,
        total_timesteps: 64 * 30,
        lr: 1e-2,
        ..PpoConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let hist = train_ppo(&mut env, &mut policy, &cfg, &mut rng, |_, _| Ok(())).unwrap();
    assert_eq!(hist.len(), 30);
    let p = policy.probs(&[1.0, 0.0], &[true, true, false]);
    assert!(p[1] > 0.95, "{p:?}");
    assert_eq!(p[2], 0.0);
}

#[test]
fn non_finite_update_keeps_previous_policy() {
    let mut policy = PolicyParams::init(crate::rl::PolicyConfig { hidden: 4 }, 2, 3, 1);
    let cfg = PpoConfig::default();
    let mut adam = policy_optimizer(&policy, &cfg);
    let before = (policy.weights.clone(), adam.clone());
    let obs = Observation {
        features: vec![0.5, -0.5],
        mask: vec![true, true, true],
    };
    let mut buffer = RolloutBuffer {
        transitions: (0..4)
            .map(|i| Transition {
                obs: obs.clone(),
                action: i % 3,
                log_prob: -1.0,
                reward: if i == 2 { f64::NAN } else { 1.0 },
                value: 0.0,
                done: true,
            })
            .collect(),
        ..RolloutBuffer::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = ppo_update(&mut policy, &mut adam, &mut buffer, &cfg, &mut rng);
    assert!(matches!(r, Err(RlError::NonFinite(_))));
    assert_eq!(policy.weights, before.0);
    assert_eq!(adam, before.1);
}

#[test]
fn config_validation() {
    assert!(PpoConfig::default().validate().is_ok());
    for bad in [
        PpoConfig { clip_eps: 0.0, ..PpoConfig::default() },
        PpoConfig { gae_lambda: 1.5, ..PpoConfig::default() },
        PpoConfig { minibatch_size: 0, ..PpoConfig::default() },
        PpoConfig { lr: -1.0, ..PpoConfig::default() },
    ] {
        assert!(bad.validate().is_err());
    }
}
