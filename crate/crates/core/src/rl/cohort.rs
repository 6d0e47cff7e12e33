use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{LabCatalog, LabResult, OutcomeTask, PatientRecord};
use crate::encoder::{EncoderCache, EncoderParams};

use super::env::{env_reset, env_step, legal_actions, reward, Action, ActionMode, EnvState, RewardConfig};
use super::policy::PolicyParams;
use super::ppo::{Environment, Observation};
use super::RlError;

/// Incremental encoder state for one episode; lags behind the episode and
/// catches up only on a memo miss.
pub struct Cursor<'a> {
    kv: EncoderCache<'a, f32>,
    /// Blocks fed so far, the triage block included.
    fed: usize,
}

/// Frozen-encoder hidden states at the last EOS of every visited prefix of
/// one split's patients, memoized by `(patient, acquired groups)`.
pub struct HiddenStates<'a> {
    pub encoder: &'a EncoderParams<f32>,
    pub catalog: &'a LabCatalog,
    pub patients: &'a [PatientRecord],
    memo: HashMap<(u32, Vec<u8>), Arc<[f32]>>,
    max_entries: usize,
}

impl<'a> HiddenStates<'a> {
    pub fn new(
        encoder: &'a EncoderParams<f32>,
        catalog: &'a LabCatalog,
        patients: &'a [PatientRecord],
        max_entries: usize,
    ) -> Result<Self, RlError> {
        encoder.vocab.check(catalog)?;
        Ok(HiddenStates {
            encoder,
            catalog,
            patients,
            memo: HashMap::new(),
            max_entries,
        })
    }

    pub fn cursor(&self) -> Cursor<'a> {
        Cursor {
            kv: EncoderCache::new(self.encoder),
            fed: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.encoder.config.d_model
    }

    pub fn memo_len(&self) -> usize {
        self.memo.len()
    }

    /// Hidden state after `results` have been acquired by patient `idx`.
    pub fn hidden(
        &mut self,
        idx: usize,
        results: &[LabResult],
        cursor: &mut Cursor<'a>,
    ) -> Result<Arc<[f32]>, RlError> {
        let key = (idx as u32, results.iter().map(|r| r.group_id.0).collect::<Vec<_>>());
        if let Some(h) = self.memo.get(&key) {
            return Ok(h.clone());
        }
        let vocab = &self.encoder.vocab;
        if cursor.fed == 0 {
            cursor.kv.extend(&vocab.triage_block(&self.patients[idx].triage)?)?;
            cursor.fed = 1;
        }
        for r in &results[cursor.fed - 1..] {
            cursor.kv.extend(&vocab.group_block(r)?)?;
            cursor.fed += 1;
        }
        let h: Arc<[f32]> = cursor.kv.last_hidden().into();
        if self.memo.len() < self.max_entries {
            self.memo.insert(key, h.clone());
        }
        Ok(h)
    }

    /// Outcome-head probability of the positive class for a hidden state.
    pub fn outcome_prob(&self, hidden: &[f32]) -> f64 {
        self.encoder.outcome_prob(hidden) as f64
    }
}

/// Everything a policy may look at when choosing an action.
pub struct DecisionContext<'c> {
    pub record: &'c PatientRecord,
    pub state: &'c EnvState,
    pub mask: &'c [bool],
    /// Encoder hidden state; empty when the evaluation runs without an encoder.
    pub hidden: &'c [f32],
    pub catalog: &'c LabCatalog,
}

pub trait Policy {
    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<Action, RlError>;
}

impl Policy for PolicyParams {
    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<Action, RlError> {
        if ctx.hidden.is_empty() {
            return Err(RlError::Config("a learned policy needs encoder hidden states".into()));
        }
        let a = self.greedy(ctx.hidden, ctx.mask);
        Action::from_index(a, ctx.catalog.num_groups()).ok_or(RlError::NoEpisode)
    }
}

/// A finished greedy episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub state: EnvState,
    pub actions: Vec<Action>,
    /// Outcome-head probability at the terminal state, or the hard
    /// prediction when no encoder is available.
    pub score: f64,
}

/// Runs patient `idx` of `patients` to termination under `policy`.
pub fn run_episode<'a, P: Policy + ?Sized>(
    policy: &mut P,
    patients: &[PatientRecord],
    idx: usize,
    hidden: Option<&mut HiddenStates<'a>>,
    catalog: &LabCatalog,
    mode: ActionMode,
    budget: Option<u32>,
) -> Result<Trajectory, RlError> {
    let record = &patients[idx];
    let received = record.panel();
    let mut state = env_reset(record, budget);
    let mut actions = Vec::new();
    let mut cursor = hidden.as_ref().map(|h| h.cursor());
    let mut hidden = hidden;
    let mut last_hidden: Arc<[f32]> = Arc::from(Vec::new());
    while !state.terminated {
        if let (Some(h), Some(c)) = (hidden.as_deref_mut(), cursor.as_mut()) {
            last_hidden = h.hidden(idx, &state.results, c)?;
        }
        let mask = legal_actions(&state, &received, mode, catalog);
        let ctx = DecisionContext {
            record,
            state: &state,
            mask: &mask,
            hidden: &last_hidden,
            catalog,
        };
        let a = policy.decide(&ctx)?;
        env_step(&mut state, record, a, mode, catalog)?;
        actions.push(a);
        if actions.len() > catalog.num_groups() + 1 {
            return Err(RlError::Config("episode exceeded K + 1 steps".into()));
        }
    }
    let score = match hidden {
        Some(h) => h.outcome_prob(&last_hidden),
        None => state.prediction.map_or(0.0, |p| p as u8 as f64),
    };
    Ok(Trajectory {
        state,
        actions,
        score,
    })
}

struct Episode<'a> {
    idx: usize,
    state: EnvState,
    cursor: Cursor<'a>,
}

/// Patients sampled with replacement from a split, observed through the
/// frozen encoder.
pub struct CohortEnv<'a, 'h> {
    pub hidden: &'h mut HiddenStates<'a>,
    pub task: OutcomeTask,
    pub mode: ActionMode,
    pub reward: RewardConfig,
    pub budget: Option<u32>,
    episode: Option<Episode<'a>>,
}

impl<'a, 'h> CohortEnv<'a, 'h> {
    pub fn new(
        hidden: &'h mut HiddenStates<'a>,
        task: OutcomeTask,
        mode: ActionMode,
        reward: RewardConfig,
        budget: Option<u32>,
    ) -> Self {
        CohortEnv {
            hidden,
            task,
            mode,
            reward,
            budget,
            episode: None,
        }
    }

    fn observe(&mut self, ep: &mut Episode<'a>) -> Result<Observation, RlError> {
        let h = self.hidden.hidden(ep.idx, &ep.state.results, &mut ep.cursor)?;
        let rec = &self.hidden.patients[ep.idx];
        Ok(Observation {
            features: h.to_vec(),
            mask: legal_actions(&ep.state, &rec.panel(), self.mode, self.hidden.catalog),
        })
    }
}

impl Environment for CohortEnv<'_, '_> {
    fn num_actions(&self) -> usize {
        self.hidden.catalog.num_groups() + 2
    }

    fn feature_dim(&self) -> usize {
        self.hidden.dim()
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<Observation, RlError> {
        let n = self.hidden.patients.len();
        if n == 0 {
            return Err(RlError::Config("empty training split".into()));
        }
        let idx = rng.random_range(0..n);
        let mut ep = Episode {
            idx,
            state: env_reset(&self.hidden.patients[idx], self.budget),
            cursor: self.hidden.cursor(),
        };
        let obs = self.observe(&mut ep)?;
        self.episode = Some(ep);
        Ok(obs)
    }

    fn step(&mut self, action: usize) -> Result<(f64, Option<Observation>), RlError> {
        let mut ep = self.episode.take().ok_or(RlError::NoEpisode)?;
        let catalog = self.hidden.catalog;
        let a = Action::from_index(action, catalog.num_groups()).ok_or(RlError::NoEpisode)?;
        let rec = &self.hidden.patients[ep.idx];
        env_step(&mut ep.state, rec, a, self.mode, catalog)?;
        let r = reward(a, rec.label(self.task), &self.reward, catalog);
        if ep.state.terminated {
            return Ok((r, None));
        }
        let obs = self.observe(&mut ep)?;
        self.episode = Some(ep);
        Ok((r, Some(obs)))
    }
}
