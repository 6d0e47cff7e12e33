//! The acquisition MDP, shaped rewards, actor/critic heads over frozen
//! encoder states, PPO, and the reward trade-off sweep.

mod cohort;
mod env;
mod policy;
mod ppo;
mod sweep;
mod toy;
mod train;

use thiserror::Error;

use crate::domain::DomainError;
use crate::encoder::EncoderError;

pub use cohort::{run_episode, CohortEnv, Cursor, DecisionContext, HiddenStates, Policy, Trajectory};
pub use env::{
    env_reset, env_step, legal_actions, reward, Action, ActionMode, CostUnit, EnvState, RewardConfig,
};
pub use policy::{PolicyConfig, PolicyParams};
pub use ppo::{
    clipped_surrogate, collect_rollouts, compute_gae, policy_optimizer, ppo_loss_on_tape, ppo_update,
    train_ppo, Environment, LossSummary, Observation, PpoBatch, PpoConfig, PpoDiagnostics,
    RolloutBuffer, Transition, UpdateRecord,
};
pub use sweep::{pareto_front, read_sweep_table, sweep, write_sweep_table, SweepGrid, SweepResult, SweepRow};
pub use toy::{
    enumerate_policies, episode_return_objective_equivalence, objective, optimal_actions, optimal_q,
    reachable_under_optimum, shaped_return, toy_agreement, train_toy, EquivalenceReport, ToyAgreement,
    ToyEnv, ToyMdp, ToyObjective, ToyOutcome, ToyPolicy, ToyState,
};
pub use train::{train_rl, LearningPoint, RlConfig, RlOutcome};

#[derive(Debug, Error)]
pub enum RlError {
    #[error("invalid rl config: {0}")]
    Config(String),
    #[error("illegal action {action:?} for patient {patient}")]
    IllegalAction { action: Action, patient: String },
    #[error("no episode in progress")]
    NoEpisode,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
