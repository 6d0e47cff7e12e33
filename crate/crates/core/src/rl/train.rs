use serde::{Deserialize, Serialize};

use crate::domain::{LabCatalog, MetricReport, OutcomeTask, PatientRecord};
use crate::encoder::EncoderParams;
use crate::eval::evaluate_policy;
use crate::util::stream_rng;

use super::cohort::{CohortEnv, HiddenStates};
use super::env::{ActionMode, RewardConfig};
use super::policy::{PolicyConfig, PolicyParams};
use super::ppo::{train_ppo, Environment, PpoConfig, PpoDiagnostics};
use super::RlError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    pub task: OutcomeTask,
    pub mode: ActionMode,
    pub reward: RewardConfig,
    pub ppo: PpoConfig,
    pub policy: PolicyConfig,
    pub seed: u64,
    /// Validate after every this many PPO updates (and after the last one).
    pub eval_every: usize,
    /// Validate on the first this many validation patients; `None` uses all.
    pub val_limit: Option<usize>,
    /// Upper bound on memoized hidden states per split.
    pub memo_entries: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            task: OutcomeTask::CriticalOutcome,
            mode: ActionMode::Restricted,
            reward: RewardConfig::default(),
            ppo: PpoConfig::default(),
            policy: PolicyConfig::default(),
            seed: 0,
            eval_every: 1,
            val_limit: None,
            memo_entries: 400_000,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        self.reward.validate()?;
        self.ppo.validate()?;
        if self.eval_every == 0 || self.policy.hidden == 0 {
            return Err(RlError::Config("eval_every and policy.hidden must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningPoint {
    pub update: usize,
    pub timesteps: usize,
    pub mean_episode_return: f64,
    pub diagnostics: PpoDiagnostics,
    pub val_f1: Option<f64>,
    pub val_avg_cost: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RlOutcome {
    /// Policy with the best validation F1 (lower cost breaks ties).
    pub policy: PolicyParams,
    pub best_update: usize,
    pub best_val: MetricReport,
    pub curve: Vec<LearningPoint>,
}

/// PPO over patients sampled with replacement from `train`, reading the
/// frozen `encoder`. Deterministic given `cfg.seed`.
pub fn train_rl(
    encoder: &EncoderParams<f32>,
    catalog: &LabCatalog,
    train: &[PatientRecord],
    val: &[PatientRecord],
    cfg: &RlConfig,
) -> Result<RlOutcome, RlError> {
    cfg.validate()?;
    if val.is_empty() {
        return Err(RlError::Config("validation split is empty".into()));
    }
    let val = &val[..cfg.val_limit.unwrap_or(val.len()).min(val.len())];
    let mut train_h = HiddenStates::new(encoder, catalog, train, cfg.memo_entries)?;
    let mut val_h = HiddenStates::new(encoder, catalog, val, cfg.memo_entries)?;
    let mut env = CohortEnv::new(&mut train_h, cfg.task, cfg.mode, cfg.reward, None);
    let mut policy = PolicyParams::init(cfg.policy, env.feature_dim(), env.num_actions(), cfg.seed);
    policy.meta = serde_json::json!({
        "task": cfg.task.as_str(),
        "alpha": cfg.reward.alpha,
        "beta": cfg.reward.beta,
        "mode": cfg.mode,
        "encoder_catalog_hash": encoder.vocab.catalog_hash,
    });
    let mut rng = stream_rng(cfg.seed, 0x9F0);
    let n_updates = cfg.ppo.total_timesteps.div_ceil(cfg.ppo.buffer_steps);
    let mut best: Option<(f64, f64, usize, PolicyParams, MetricReport)> = None;
    let mut vals: Vec<(usize, f64, f64)> = Vec::new();
    let updates = train_ppo(&mut env, &mut policy, &cfg.ppo, &mut rng, |u, p| {
        if (u + 1) % cfg.eval_every != 0 && u + 1 != n_updates {
            return Ok(());
        }
        let mut snapshot = p.clone();
        let ev = evaluate_policy(&mut snapshot, val, Some(&mut val_h), catalog, cfg.task, cfg.mode, None)
            .map_err(|e| RlError::Config(format!("validation: {e}")))?;
        let (f1, cost) = (ev.report.f1, ev.report.avg_time_cost);
        log::info!("rl update {u}: val f1 {f1:.4}, avg cost {cost:.1} min");
        vals.push((u, f1, cost));
        let better = best
            .as_ref()
            .is_none_or(|(bf, bc, ..)| f1 > *bf || (f1 == *bf && cost < *bc));
        if better {
            best = Some((f1, cost, u, snapshot, ev.report));
        }
        Ok(())
    })?;
    let curve = updates
        .into_iter()
        .map(|r| {
            let v = vals.iter().find(|v| v.0 == r.update);
            LearningPoint {
                update: r.update,
                timesteps: r.timesteps,
                mean_episode_return: r.mean_episode_return,
                diagnostics: r.diagnostics,
                val_f1: v.map(|v| v.1),
                val_avg_cost: v.map(|v| v.2),
            }
        })
        .collect();
    let (_, _, best_update, policy, best_val) = best.ok_or_else(|| RlError::Config("no validation pass ran".into()))?;
    Ok(RlOutcome {
        policy,
        best_update,
        best_val,
        curve,
    })
}
