use serde::{Deserialize, Serialize};

use crate::numcore::tensor::{cosine, kl_divergence, l2_norm, sigmoid};

use super::{DarlError, Trajectory, UserContext};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Baseline {
    None,
    /// Mean return of the batch at the same step.
    BatchMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Weight of the path-consistency reward the category agent receives.
    pub consistency_weight: f64,
    /// Weight of the influence reward the entity agent receives.
    pub influence_weight: f64,
    pub gamma: f64,
    pub entropy_weight: f64,
    pub baseline: Baseline,
    /// Add the terminal indicator at every step rather than only the last.
    pub terminal_every_step: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            consistency_weight: 0.6,
            influence_weight: 0.5,
            gamma: 1.0,
            entropy_weight: 0.01,
            baseline: Baseline::BatchMean,
            terminal_every_step: true,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), DarlError> {
        if !(self.consistency_weight >= 0.0 && self.influence_weight >= 0.0) {
            return Err(DarlError::Config("partner reward weights must be nonnegative".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(DarlError::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !(self.entropy_weight >= 0.0 && self.entropy_weight.is_finite()) {
            return Err(DarlError::Config(format!("entropy weight {} must be nonnegative", self.entropy_weight)));
        }
        Ok(())
    }
}

/// KL divergence of the entity distribution given the chosen category action
/// from its marginal over all category actions, weighted by the category
/// policy. `conditionals[k]` is the entity distribution under action `k`.
pub fn counterfactual_influence(conditionals: &[Vec<f64>], category_probs: &[f64], chosen: usize) -> f64 {
    if conditionals.len() == 1 {
        return 0.0;
    }
    let n = conditionals[chosen].len();
    let mut marginal = vec![0.0; n];
    for (p, w) in conditionals.iter().zip(category_probs) {
        for (m, x) in marginal.iter_mut().zip(p) {
            *m += w * x;
        }
    }
    kl_divergence(&conditionals[chosen], &marginal).max(0.0)
}

/// `(influence reward, consistency reward)` for one step: the sigmoid of the
/// KL value, and the cosine between `[user; category]` and `[user; entity]`
/// (0 when either is the zero vector).
pub fn partner_rewards(influence: f64, user: &[f64], category: &[f64], entity: &[f64]) -> (f64, f64) {
    let a: Vec<f64> = user.iter().chain(category).copied().collect();
    let b: Vec<f64> = user.iter().chain(entity).copied().collect();
    let consistency = if l2_norm(&a) == 0.0 || l2_norm(&b) == 0.0 { 0.0 } else { cosine(&a, &b) };
    (sigmoid(influence), consistency)
}

/// Fills in the terminal indicators and per-step rewards of a completed
/// episode.
pub fn finalize_rewards(traj: &mut Trajectory, user: &UserContext, cfg: &RewardConfig, max_len: usize) -> Result<(), DarlError> {
    if traj.steps.len() != max_len {
        return Err(DarlError::Incomplete { steps: traj.steps.len(), expected: max_len });
    }
    let entity_hit = user.train_items.binary_search(&traj.final_entity).is_ok();
    let category_hit = user.train_categories.binary_search(&traj.final_category).is_ok();
    traj.entity_hit = Some(entity_hit);
    traj.category_hit = Some(category_hit);
    let last = traj.steps.len() - 1;
    for (l, s) in traj.steps.iter_mut().enumerate() {
        let on = cfg.terminal_every_step || l == last;
        let te = if on && entity_hit { 1.0 } else { 0.0 };
        let tc = if on && category_hit { 1.0 } else { 0.0 };
        s.category_reward = Some(tc + cfg.consistency_weight * s.consistency_reward);
        s.entity_reward = Some(te + cfg.influence_weight * s.influence_reward);
    }
    Ok(())
}

/// `G_l = Σ_{l' ≥ l} γ^{l'−l} R_{l'}`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for l in (0..rewards.len()).rev() {
        acc = rewards[l] + gamma * acc;
        out[l] = acc;
    }
    out
}
