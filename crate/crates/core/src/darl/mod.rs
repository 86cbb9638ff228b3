//! Cooperating category-level and entity-level walkers trained with
//! REINFORCE.

mod actions;
mod policy;
mod reward;
mod rollout;
mod train;

pub use actions::{valid_actions_category, valid_actions_entity, Action, CategoryState, EntityState};
pub use policy::{entity_distributions, DualPolicy, History, PolicyConfig};
pub use reward::{counterfactual_influence, discounted_returns, finalize_rewards, partner_rewards, Baseline, RewardConfig};
pub(crate) use rollout::{argmax, arrival_var, category_step, entity_rows, next_category, next_entity, start_category};
pub use rollout::{
    rollout, ActionChooser, Agent, Env, Greedy, Sampler, StepRecord, TapeTrace, TapeVectors, Trajectory, UserContext,
};
pub use train::{
    episode_seed, mean_hit_rate, policy_loss, reinforce_update, train, user_contexts, write_training_log, DarlConfig,
    DarlModel, EpochLog, TrainOutcome, TRAINING_LOG_HEADER,
};

use crate::cggnn::CggnnError;
use crate::kg::KgError;
use crate::numcore::NumError;

#[derive(Debug, thiserror::Error)]
pub enum DarlError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Cggnn(#[from] CggnnError),
    #[error("user {0} has no train items")]
    NoTrainItems(String),
    #[error("episode has {steps} of {expected} steps")]
    Incomplete { steps: usize, expected: usize },
    #[error("rewards have not been assigned")]
    RewardsMissing,
    #[error("non-finite loss or gradient at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}
