use serde::{Deserialize, Serialize};

use crate::kg::{CategoryGraph, CategoryId, EntityId, KnowledgeGraph, RelationId};
use crate::numcore::tensor::dot;
use crate::transe::EmbeddingTable;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryState {
    pub user: EntityId,
    pub start: CategoryId,
    pub current: CategoryId,
    pub step: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityState {
    pub user: EntityId,
    pub entity: EntityId,
    /// `None` at the start and after a self-loop (the start marker).
    pub arrival: Option<RelationId>,
    /// Entity left by the last move, used to forbid stepping straight back.
    pub previous: Option<EntityId>,
    pub step: usize,
}

impl EntityState {
    pub fn start(user: EntityId) -> Self {
        Self { user, entity: user, arrival: None, previous: None, step: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    CategoryMove(CategoryId),
    CategorySelfLoop,
    EntityMove(RelationId, EntityId),
    EntitySelfLoop,
}

impl Action {
    pub fn is_self_loop(self) -> bool {
        matches!(self, Action::CategorySelfLoop | Action::EntitySelfLoop)
    }
}

fn rank_desc<K: Ord + Copy>(scored: &mut [(f64, K)]) {
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
}

/// Neighbouring categories ranked by `profile · category`, best `cap − 1`
/// kept, self-loop last. Ties go to the lower category id.
pub fn valid_actions_category(
    state: &CategoryState,
    cgraph: &CategoryGraph,
    table: &EmbeddingTable,
    profile: &[f64],
    cap: usize,
) -> Vec<Action> {
    let mut scored: Vec<(f64, CategoryId)> = cgraph
        .neighbors(state.current)
        .iter()
        .filter(|&&c| c != state.current)
        .map(|&c| (dot(profile, table.category(c)), c))
        .collect();
    rank_desc(&mut scored);
    scored.truncate(cap.saturating_sub(1));
    let mut out: Vec<Action> = scored.into_iter().map(|(_, c)| Action::CategoryMove(c)).collect();
    out.push(Action::CategorySelfLoop);
    out
}

/// Out-edges ranked by `user · target`, best `cap − 1` kept, self-loop last.
/// The edge that would undo the last move is dropped. Ties go to the lower
/// (entity, relation) pair.
pub fn valid_actions_entity(state: &EntityState, kg: &KnowledgeGraph, table: &EmbeddingTable, cap: usize) -> Vec<Action> {
    let back = state.arrival.zip(state.previous).map(|(r, p)| (kg.relation(r).inverse, p));
    let h_u = table.entity(state.user);
    let mut scored: Vec<(f64, (EntityId, RelationId))> = kg
        .out_edges(state.entity)
        .iter()
        .filter(|e| Some((e.relation, e.target)) != back)
        .map(|e| (dot(h_u, table.entity(e.target)), (e.target, e.relation)))
        .collect();
    rank_desc(&mut scored);
    scored.truncate(cap.saturating_sub(1));
    let mut out: Vec<Action> = scored.into_iter().map(|(_, (e, r))| Action::EntityMove(r, e)).collect();
    out.push(Action::EntitySelfLoop);
    out
}
