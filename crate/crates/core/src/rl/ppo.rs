use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{clip_grad_norm, grad, AdamConfig, AdamState, EncoderError, Tape, Tensor, Var};

use super::policy::PolicyParams;
use super::RlError;

/// What the policy sees at a decision point.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub features: Vec<f32>,
    pub mask: Vec<bool>,
}

/// An episodic environment with masked discrete actions.
pub trait Environment {
    fn num_actions(&self) -> usize;
    fn feature_dim(&self) -> usize;
    /// Starts a new episode.
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<Observation, RlError>;
    /// Reward and the next observation, `None` once the episode is over.
    fn step(&mut self, action: usize) -> Result<(f64, Option<Observation>), RlError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub epochs_per_update: usize,
    pub minibatch_size: usize,
    pub buffer_steps: usize,
    pub total_timesteps: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_eps: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            gae_lambda: 0.95,
            gamma: 1.0,
            epochs_per_update: 10,
            minibatch_size: 128,
            buffer_steps: 2048,
            total_timesteps: 20_000,
            lr: 3e-4,
            max_grad_norm: 0.5,
            normalize_advantages: true,
        }
    }
}

impl PpoConfig {
    /// Preset for the two-group toy MDP: short buffers and a larger step
    /// size, so 20k steps give ~40 updates instead of ~10.
    pub fn toy() -> Self {
        PpoConfig {
            buffer_steps: 512,
            lr: 1e-2,
            ..PpoConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), RlError> {
        let bad = |m: &str| Err(RlError::Config(m.to_string()));
        if !(self.clip_eps > 0.0) {
            return bad("clip_eps must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if self.minibatch_size == 0 || self.buffer_steps == 0 || self.epochs_per_update == 0 {
            return bad("buffer, minibatch and epoch counts must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: usize,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    /// The episode ended with this transition.
    pub done: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub transitions: Vec<Transition>,
    /// Critic value of the state after the last transition when that
    /// episode was cut off by the buffer boundary.
    pub bootstrap_value: f64,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Returns of the episodes completed while filling the buffer.
    pub episode_returns: Vec<f64>,
}

/// Generalized advantage estimates and the matching value targets.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_value = if dones[t] {
            0.0
        } else if t + 1 == n {
            bootstrap_value
        } else {
            values[t + 1]
        };
        let carry = if dones[t] { 0.0 } else { running };
        let delta = rewards[t] + gamma * next_value - values[t];
        running = delta + gamma * lambda * carry;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// `min(r * A, clip(r, 1 - eps, 1 + eps) * A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// Fills a buffer with `steps` on-policy transitions, continuing the episode
/// left open by the previous call.
pub fn collect_rollouts<E: Environment>(
    env: &mut E,
    policy: &PolicyParams,
    steps: usize,
    pending: &mut Option<(Observation, f64)>,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutBuffer, RlError> {
    let mut buf = RolloutBuffer::default();
    let (mut obs, mut ep_return) = match pending.take() {
        Some(p) => p,
        None => (env.reset(rng)?, 0.0),
    };
    for _ in 0..steps {
        let (action, p) = policy.sample(&obs.features, &obs.mask, rng);
        let value = policy.value(&obs.features) as f64;
        let (r, next) = env.step(action)?;
        ep_return += r;
        let done = next.is_none();
        buf.transitions.push(Transition {
            obs,
            action,
            log_prob: (p as f64).ln(),
            reward: r,
            value,
            done,
        });
        obs = match next {
            Some(o) => o,
            None => {
                buf.episode_returns.push(ep_return);
                ep_return = 0.0;
                env.reset(rng)?
            }
        };
    }
    buf.bootstrap_value = policy.value(&obs.features) as f64;
    *pending = Some((obs, ep_return));
    Ok(buf)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PpoDiagnostics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub explained_variance: f64,
}

/// Per-minibatch inputs of the clipped objective.
pub struct PpoBatch<'a> {
    pub masks: Vec<&'a [bool]>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

struct LossStats {
    policy_loss: f64,
    value_loss: f64,
    entropy: f64,
    ratio_sum: f64,
    clipped: usize,
    kl_sum: f64,
}

/// Records `-L_clip + c1 * L_value - c2 * H` (batch means) as one custom op
/// over the actor logits and critic values, with analytic gradients.
pub fn ppo_loss_on_tape(
    tape: &mut Tape<f32>,
    logits: Var,
    values: Var,
    batch: &PpoBatch<'_>,
    cfg: &PpoConfig,
) -> (Var, LossSummary) {
    let (lv, vv) = (tape.value(logits).clone(), tape.value(values).clone());
    let (b, a) = (lv.rows, lv.cols);
    let inv_b = 1.0 / b as f64;
    let mut dlogits = Tensor::<f32>::zeros(b, a);
    let mut dvalues = Tensor::<f32>::zeros(b, 1);
    let mut st = LossStats {
        policy_loss: 0.0,
        value_loss: 0.0,
        entropy: 0.0,
        ratio_sum: 0.0,
        clipped: 0,
        kl_sum: 0.0,
    };
    for i in 0..b {
        let mask = batch.masks[i];
        let row: Vec<f64> = lv.row(i).iter().map(|&x| x as f64).collect();
        let m = (0..a).filter(|&j| mask[j]).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..a).filter(|&j| mask[j]).map(|j| (row[j] - m).exp()).sum();
        let logp = |j: usize| row[j] - m - z.ln();
        let act = batch.actions[i];
        let lp = logp(act);
        let ratio = (lp - batch.old_log_probs[i]).exp();
        let adv = batch.advantages[i];
        let surr = clipped_surrogate(ratio, adv, cfg.clip_eps);
        let unclipped_active = ratio * adv <= ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv;
        st.policy_loss -= surr * inv_b;
        st.ratio_sum += ratio;
        st.clipped += ((ratio - 1.0).abs() > cfg.clip_eps) as usize;
        st.kl_sum += (ratio - 1.0) - (lp - batch.old_log_probs[i]);
        let mut h = 0.0;
        for j in (0..a).filter(|&j| mask[j]) {
            let p = logp(j).exp();
            if p > 0.0 {
                h -= p * logp(j);
            }
        }
        st.entropy += h * inv_b;
        let g = dlogits.row_mut(i);
        for j in (0..a).filter(|&j| mask[j]) {
            let p = logp(j).exp();
            let mut d = 0.0;
            if unclipped_active {
                // d(-r A)/d logit_j = -A r (1[j = a] - p_j)
                d -= adv * ratio * ((j == act) as u8 as f64 - p) * inv_b;
            }
            // d(-c2 H)/d logit_j = c2 p_j (log p_j + H)
            d += cfg.entropy_coef * p * (logp(j) + h) * inv_b;
            g[j] = d as f32;
        }
        let v = vv.data[i] as f64;
        let err = v - batch.returns[i];
        st.value_loss += err * err * inv_b;
        dvalues.data[i] = (cfg.value_coef * 2.0 * err * inv_b) as f32;
    }
    let total = st.policy_loss + cfg.value_coef * st.value_loss - cfg.entropy_coef * st.entropy;
    let summary = LossSummary {
        total,
        policy_loss: st.policy_loss,
        value_loss: st.value_loss,
        entropy: st.entropy,
        mean_ratio: st.ratio_sum * inv_b,
        clip_fraction: st.clipped as f64 * inv_b,
        approx_kl: st.kl_sum * inv_b,
    };
    let out = tape.custom(
        &[logits, values],
        Tensor::from_vec(1, 1, vec![total as f32]),
        move |up| {
            let s = up.data[0];
            let mut dl = dlogits;
            let mut dv = dvalues;
            dl.data.iter_mut().for_each(|x| *x *= s);
            dv.data.iter_mut().for_each(|x| *x *= s);
            vec![dl, dv]
        },
    );
    (out, summary)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSummary {
    pub total: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

fn explained_variance(values: &[f64], returns: &[f64]) -> f64 {
    let n = returns.len() as f64;
    let mean = |x: &[f64]| x.iter().sum::<f64>() / n;
    let var = |x: &[f64]| {
        let m = mean(x);
        x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
    };
    let resid: Vec<f64> = returns.iter().zip(values).map(|(r, v)| r - v).collect();
    let vr = var(returns);
    if vr == 0.0 {
        0.0
    } else {
        1.0 - var(&resid) / vr
    }
}

/// Optimizer for the actor/critic, created once per training run.
pub fn policy_optimizer(policy: &PolicyParams, cfg: &PpoConfig) -> AdamState<f32> {
    AdamState::new(
        &policy.weights,
        AdamConfig {
            lr: cfg.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
            weight_decay: 0.0,
        },
    )
}

/// Several epochs of minibatch updates on one buffer. A non-finite loss
/// restores the policy and optimizer to their state before the call.
pub fn ppo_update(
    policy: &mut PolicyParams,
    adam: &mut AdamState<f32>,
    buffer: &mut RolloutBuffer,
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PpoDiagnostics, RlError> {
    cfg.validate()?;
    let n = buffer.transitions.len();
    if n == 0 {
        return Err(RlError::Config("empty rollout buffer".into()));
    }
    let rewards: Vec<f64> = buffer.transitions.iter().map(|t| t.reward).collect();
    let values: Vec<f64> = buffer.transitions.iter().map(|t| t.value).collect();
    let dones: Vec<bool> = buffer.transitions.iter().map(|t| t.done).collect();
    let (adv, ret) = compute_gae(&rewards, &values, &dones, buffer.bootstrap_value, cfg.gamma, cfg.gae_lambda);
    buffer.advantages = adv;
    buffer.returns = ret;

    let saved = (policy.weights.clone(), adam.clone());
    let mut order: Vec<usize> = (0..n).collect();
    let mut diag = PpoDiagnostics::default();
    let mut batches = 0usize;
    for _ in 0..cfg.epochs_per_update {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch_size) {
            let mut advs: Vec<f64> = chunk.iter().map(|&i| buffer.advantages[i]).collect();
            if cfg.normalize_advantages && advs.len() > 1 {
                let m = advs.iter().sum::<f64>() / advs.len() as f64;
                let sd = (advs.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (advs.len() - 1) as f64).sqrt();
                advs.iter_mut().for_each(|a| *a = (*a - m) / (sd + 1e-8));
            }
            let batch = PpoBatch {
                masks: chunk.iter().map(|&i| buffer.transitions[i].obs.mask.as_slice()).collect(),
                actions: chunk.iter().map(|&i| buffer.transitions[i].action).collect(),
                old_log_probs: chunk.iter().map(|&i| buffer.transitions[i].log_prob).collect(),
                advantages: advs,
                returns: chunk.iter().map(|&i| buffer.returns[i]).collect(),
            };
            let d = policy.input_dim;
            let mut x = Tensor::zeros(chunk.len(), d);
            for (r, &i) in chunk.iter().enumerate() {
                x.row_mut(r).copy_from_slice(&buffer.transitions[i].obs.features);
            }
            let mut summary = None;
            let result = grad(&policy.weights.tensors, |tape, v| {
                let xv = tape.leaf(x);
                let (logits, values) = policy.on_tape(tape, v, xv);
                let (loss, s) = ppo_loss_on_tape(tape, logits, values, &batch, cfg);
                summary = Some(s);
                Ok(loss)
            });
            let mut grads = match result {
                Ok((_, g)) => g,
                Err(EncoderError::NonFinite(m)) => {
                    (policy.weights, *adam) = saved;
                    return Err(RlError::NonFinite(m));
                }
                Err(e) => return Err(e.into()),
            };
            let s = summary.expect("loss recorded");
            if !s.total.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                (policy.weights, *adam) = saved;
                return Err(RlError::NonFinite(format!("ppo loss {}", s.total)));
            }
            clip_grad_norm(&mut grads, cfg.max_grad_norm);
            adam.update(&mut policy.weights, &grads, 1.0);
            diag.policy_loss += s.policy_loss;
            diag.value_loss += s.value_loss;
            diag.entropy += s.entropy;
            diag.mean_ratio += s.mean_ratio;
            diag.clip_fraction += s.clip_fraction;
            diag.approx_kl += s.approx_kl;
            batches += 1;
        }
    }
    let k = batches as f64;
    diag.policy_loss /= k;
    diag.value_loss /= k;
    diag.entropy /= k;
    diag.mean_ratio /= k;
    diag.clip_fraction /= k;
    diag.approx_kl /= k;
    diag.explained_variance = explained_variance(&values, &buffer.returns);
    Ok(diag)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub update: usize,
    pub timesteps: usize,
    pub mean_episode_return: f64,
    pub episodes: usize,
    pub diagnostics: PpoDiagnostics,
}

/// Alternates rollout collection and updates until `total_timesteps`;
/// `after_update` sees the policy after every update.
pub fn train_ppo<E, C>(
    env: &mut E,
    policy: &mut PolicyParams,
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
    mut after_update: C,
) -> Result<Vec<UpdateRecord>, RlError>
where
    E: Environment,
    C: FnMut(usize, &PolicyParams) -> Result<(), RlError>,
{
    cfg.validate()?;
    let mut adam = policy_optimizer(policy, cfg);
    let mut pending = None;
    let mut steps = 0;
    let mut curve = Vec::new();
    let mut update = 0;
    while steps < cfg.total_timesteps {
        let n = cfg.buffer_steps.min(cfg.total_timesteps - steps);
        let mut buf = collect_rollouts(env, policy, n, &mut pending, rng)?;
        steps += n;
        let diagnostics = ppo_update(policy, &mut adam, &mut buf, cfg, rng)?;
        let episodes = buf.episode_returns.len();
        let mean = if episodes == 0 {
            0.0
        } else {
            buf.episode_returns.iter().sum::<f64>() / episodes as f64
        };
        curve.push(UpdateRecord {
            update,
            timesteps: steps,
            mean_episode_return: mean,
            episodes,
            diagnostics,
        });
        log::debug!(
            "ppo update {update}: {steps} steps, mean return {mean:.4}, entropy {:.3}, kl {:.4}",
            diagnostics.entropy,
            diagnostics.approx_kl
        );
        after_update(update, policy)?;
        update += 1;
    }
    Ok(curve)
}

#[cfg(test)]
mod tests;
