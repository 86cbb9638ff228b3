use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cggnn::{Cggnn, EmbedVars, Neighborhood};
use crate::kg::{CategoryAssignment, CategoryGraph, CategoryId, EntityId, InteractionSplit, KnowledgeGraph};
use crate::numcore::{Graph, Var};
use crate::transe::EmbeddingTable;

use super::{
    counterfactual_influence, entity_distributions, partner_rewards, valid_actions_category, valid_actions_entity,
    Action, CategoryState, DarlError, DualPolicy, EntityState, History,
};

/// Immutable inputs shared by every episode.
#[derive(Clone, Copy)]
pub struct Env<'a> {
    /// Graph with train purchases only.
    pub kg: &'a KnowledgeGraph,
    pub assignment: &'a CategoryAssignment,
    pub cgraph: &'a CategoryGraph,
    pub table: &'a EmbeddingTable,
    pub category_cap: usize,
    pub entity_cap: usize,
}

#[derive(Clone, Debug)]
pub struct UserContext {
    pub user: EntityId,
    pub train_items: Vec<EntityId>,
    /// Sorted categories of the train items.
    pub train_categories: Vec<CategoryId>,
    /// Mean table embedding of the train items.
    pub profile: Vec<f64>,
}

impl UserContext {
    pub fn new(user: EntityId, split: &InteractionSplit, env: &Env<'_>) -> Result<Self, DarlError> {
        let train_items = split.train(user).to_vec();
        if train_items.is_empty() {
            return Err(DarlError::NoTrainItems(env.kg.entity(user).name.clone()));
        }
        let mut train_categories: Vec<CategoryId> =
            train_items.iter().flat_map(|&i| env.assignment.categories_of(i).iter().copied()).collect();
        train_categories.sort_unstable();
        train_categories.dedup();
        let mut profile = vec![0.0; env.table.dim];
        for &i in &train_items {
            for (p, x) in profile.iter_mut().zip(env.table.entity(i)) {
                *p += x;
            }
        }
        let n = train_items.len() as f64;
        profile.iter_mut().for_each(|p| *p /= n);
        Ok(Self { user, train_items, train_categories, profile })
    }
}

/// Embedding nodes bound into one graph.
#[derive(Clone, Debug)]
pub struct TapeVectors {
    /// CGGNN output for items, table rows for everything else.
    pub entities: Vec<Var>,
    pub relations: Vec<Var>,
    pub categories: Vec<Var>,
    pub start: Var,
}

impl TapeVectors {
    /// Runs the CGGNN on the tape, so item vectors carry gradients.
    pub fn with_cggnn(
        g: &mut Graph<'_>,
        policy: &DualPolicy,
        cggnn: &Cggnn,
        nbr: &Neighborhood,
        table: &EmbeddingTable,
    ) -> Result<Self, DarlError> {
        let emb = EmbedVars::constants(g, table);
        let out = cggnn.forward(g, nbr, &emb)?;
        let entities = (0..emb.entities.len()).map(|e| out.vector(&emb, EntityId(e))).collect();
        Ok(Self { entities, relations: emb.relations, categories: emb.categories, start: g.param(policy.start)? })
    }

    /// Uses precomputed entity vectors as constants.
    pub fn with_values(
        g: &mut Graph<'_>,
        policy: &DualPolicy,
        entities: &[Vec<f64>],
        table: &EmbeddingTable,
    ) -> Result<Self, DarlError> {
        let emb = EmbedVars::constants(g, table);
        let entities = entities.iter().map(|v| g.vector(v.clone())).collect();
        Ok(Self { entities, relations: emb.relations, categories: emb.categories, start: g.param(policy.start)? })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Agent {
    Category,
    Entity,
}

/// Picks an action index given the policy's probabilities.
pub trait ActionChooser {
    fn choose(&mut self, agent: Agent, step: usize, actions: &[Action], probs: &[f64]) -> usize;
}

/// Draws from the policy.
pub struct Sampler<'r>(pub &'r mut ChaCha8Rng);

impl ActionChooser for Sampler<'_> {
    fn choose(&mut self, _: Agent, _: usize, _: &[Action], probs: &[f64]) -> usize {
        let u: f64 = self.0.gen();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }
}

/// Highest probability, lowest index on ties.
pub struct Greedy;

impl ActionChooser for Greedy {
    fn choose(&mut self, _: Agent, _: usize, _: &[Action], probs: &[f64]) -> usize {
        argmax(probs)
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub category_state: CategoryState,
    pub entity_state: EntityState,
    pub category_actions: Vec<Action>,
    pub entity_actions: Vec<Action>,
    pub category_choice: usize,
    pub entity_choice: usize,
    pub category_log_prob: f64,
    pub entity_log_prob: f64,
    pub y_category: Vec<f64>,
    pub y_entity: Vec<f64>,
    /// KL between the factual and category-marginal entity distributions.
    pub influence: f64,
    pub influence_reward: f64,
    /// Cosine agreement of the two agents after this step.
    pub consistency_reward: f64,
    pub category_reward: Option<f64>,
    pub entity_reward: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trajectory {
    pub user: EntityId,
    pub steps: Vec<StepRecord>,
    pub final_category: CategoryId,
    pub final_entity: EntityId,
    pub entity_hit: Option<bool>,
    pub category_hit: Option<bool>,
}

impl Trajectory {
    pub fn category_rewards(&self) -> Result<Vec<f64>, DarlError> {
        self.steps.iter().map(|s| s.category_reward.ok_or(DarlError::RewardsMissing)).collect()
    }

    pub fn entity_rewards(&self) -> Result<Vec<f64>, DarlError> {
        self.steps.iter().map(|s| s.entity_reward.ok_or(DarlError::RewardsMissing)).collect()
    }

    /// Entities visited, the user first.
    pub fn entities(&self) -> Vec<EntityId> {
        let mut out: Vec<EntityId> = self.steps.iter().map(|s| s.entity_state.entity).collect();
        out.push(self.final_entity);
        out
    }
}

/// Tape handles needed for the policy-gradient loss.
#[derive(Clone, Debug, Default)]
pub struct TapeTrace {
    pub category_log_prob: Vec<Var>,
    pub entity_log_prob: Vec<Var>,
    pub category_entropy: Vec<Var>,
    pub entity_entropy: Vec<Var>,
}

/// Scores and log-probabilities of one step for both agents.
pub(crate) struct StepEval {
    pub history: History,
    pub category_actions: Vec<Action>,
    pub category_log_probs: Var,
    pub category_probs: Vec<f64>,
    pub category_rows: Vec<Var>,
}

pub(crate) fn category_row(vecs: &TapeVectors, state: &CategoryState, a: Action) -> Var {
    match a {
        Action::CategoryMove(c) => vecs.categories[c.0],
        _ => vecs.categories[state.current.0],
    }
}

pub(crate) fn entity_rows(vecs: &TapeVectors, state: &EntityState, actions: &[Action]) -> (Vec<Var>, Vec<Var>) {
    actions
        .iter()
        .map(|&a| match a {
            Action::EntityMove(r, e) => (vecs.relations[r.0], vecs.entities[e.0]),
            _ => (vecs.start, vecs.entities[state.entity.0]),
        })
        .unzip()
}

pub(crate) fn arrival_var(vecs: &TapeVectors, state: &EntityState) -> Var {
    state.arrival.map_or(vecs.start, |r| vecs.relations[r.0])
}

/// Advances the recurrences by one step and scores the category actions.
pub(crate) fn category_step(
    g: &mut Graph<'_>,
    policy: &DualPolicy,
    env: &Env<'_>,
    vecs: &TapeVectors,
    user: &UserContext,
    prev: Option<&History>,
    cs: &CategoryState,
    es: &EntityState,
) -> Result<StepEval, DarlError> {
    let u0 = vecs.entities[user.user.0];
    let c_vec = vecs.categories[cs.current.0];
    let cat_in = g.concat(&[u0, c_vec])?;
    let arrival = arrival_var(vecs, es);
    let ent_in = g.concat(&[u0, arrival, vecs.entities[es.entity.0]])?;
    let history = policy.encode(g, prev, cat_in, ent_in)?;
    let category_actions = valid_actions_category(cs, env.cgraph, env.table, &user.profile, env.category_cap);
    let category_rows: Vec<Var> = category_actions.iter().map(|&a| category_row(vecs, cs, a)).collect();
    let logits = policy.category_logits(g, u0, c_vec, history.y_category, &category_rows)?;
    let category_log_probs = g.log_softmax(logits)?;
    let category_probs = g.value(category_log_probs).data().iter().map(|x| x.exp()).collect();
    Ok(StepEval { history, category_actions, category_log_probs, category_probs, category_rows })
}

/// `−Σ p log p`, taking softmax of the log-probabilities to get `p`.
pub(crate) fn entropy(g: &mut Graph<'_>, log_probs: Var) -> Result<Var, DarlError> {
    let p = g.softmax(log_probs)?;
    let plogp = g.dot(p, log_probs)?;
    Ok(g.scale(plogp, -1.0)?)
}

pub(crate) fn next_category(cs: &CategoryState, a: Action) -> CategoryState {
    let current = match a {
        Action::CategoryMove(c) => c,
        _ => cs.current,
    };
    CategoryState { current, step: cs.step + 1, ..*cs }
}

pub(crate) fn next_entity(es: &EntityState, a: Action) -> EntityState {
    match a {
        Action::EntityMove(r, e) => {
            EntityState { entity: e, arrival: Some(r), previous: Some(es.entity), step: es.step + 1, ..*es }
        }
        _ => EntityState { arrival: None, previous: None, step: es.step + 1, ..*es },
    }
}

/// Start category: uniform over the categories of the user's train items.
pub(crate) fn start_category(user: &UserContext, rng: &mut ChaCha8Rng) -> CategoryId {
    user.train_categories[rng.gen_range(0..user.train_categories.len())]
}

/// One episode of exactly `max_len` steps. At each step the category agent
/// acts first and the entity agent conditions on its choice.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    g: &mut Graph<'_>,
    policy: &DualPolicy,
    env: &Env<'_>,
    vecs: &TapeVectors,
    user: &UserContext,
    chooser: &mut dyn ActionChooser,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Trajectory, TapeTrace), DarlError> {
    let store = g.store().ok_or(crate::numcore::NumError::NoParamStore)?;
    let start = start_category(user, rng);
    let mut cs = CategoryState { user: user.user, start, current: start, step: 0 };
    let mut es = EntityState::start(user.user);
    let mut prev: Option<History> = None;
    let mut steps = Vec::with_capacity(max_len);
    let mut trace = TapeTrace::default();
    let u0_val = env.table.entity(user.user).to_vec();

    for l in 0..max_len {
        let ev = category_step(g, policy, env, vecs, user, prev.as_ref(), &cs, &es)?;
        let c_entropy = entropy(g, ev.category_log_probs)?;
        let ci = chooser.choose(Agent::Category, l, &ev.category_actions, &ev.category_probs);
        let c_action = ev.category_actions[ci];
        let c_lp = g.index(ev.category_log_probs, ci)?;

        let entity_actions = valid_actions_entity(&es, env.kg, env.table, env.entity_cap);
        let (rel_rows, ent_rows) = entity_rows(vecs, &es, &entity_actions);
        let arrival = arrival_var(vecs, &es);
        let h_e = vecs.entities[es.entity.0];
        let logits = policy.entity_logits(g, h_e, arrival, ev.history.y_entity, ev.category_rows[ci], &rel_rows, &ent_rows)?;
        let e_log_probs = g.log_softmax(logits)?;
        let e_probs: Vec<f64> = g.value(e_log_probs).data().iter().map(|x| x.exp()).collect();
        let ei = chooser.choose(Agent::Entity, l, &entity_actions, &e_probs);
        let e_action = entity_actions[ei];
        let e_lp = g.index(e_log_probs, ei)?;
        let e_entropy = entropy(g, e_log_probs)?;

        let influence = {
            let state: Vec<f64> = [h_e, arrival, ev.history.y_entity]
                .iter()
                .flat_map(|&v| g.value(v).data().iter().copied())
                .collect();
            let cats: Vec<&[f64]> = ev.category_rows.iter().map(|&v| g.value(v).data()).collect();
            let rels: Vec<&[f64]> = rel_rows.iter().map(|&v| g.value(v).data()).collect();
            let ents: Vec<&[f64]> = ent_rows.iter().map(|&v| g.value(v).data()).collect();
            let dists = entity_distributions(policy, store, &state, &cats, &rels, &ents);
            counterfactual_influence(&dists, &ev.category_probs, ci)
        };

        let next_cs = next_category(&cs, c_action);
        let next_es = next_entity(&es, e_action);
        let (influence_reward, consistency_reward) = partner_rewards(
            influence,
            &u0_val,
            g.value(vecs.categories[next_cs.current.0]).data(),
            g.value(vecs.entities[next_es.entity.0]).data(),
        );

        steps.push(StepRecord {
            category_state: cs,
            entity_state: es,
            category_choice: ci,
            entity_choice: ei,
            category_log_prob: g.scalar(c_lp),
            entity_log_prob: g.scalar(e_lp),
            y_category: g.value(ev.history.y_category).data().to_vec(),
            y_entity: g.value(ev.history.y_entity).data().to_vec(),
            category_actions: ev.category_actions,
            entity_actions,
            influence,
            influence_reward,
            consistency_reward,
            category_reward: None,
            entity_reward: None,
        });
        trace.category_log_prob.push(c_lp);
        trace.entity_log_prob.push(e_lp);
        trace.category_entropy.push(c_entropy);
        trace.entity_entropy.push(e_entropy);
        prev = Some(ev.history);
        cs = next_cs;
        es = next_es;
    }
    let traj = Trajectory {
        user: user.user,
        steps,
        final_category: cs.current,
        final_entity: es.entity,
        entity_hit: None,
        category_hit: None,
    };
    Ok((traj, trace))
}
