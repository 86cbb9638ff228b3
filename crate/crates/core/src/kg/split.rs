use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EntityId, EntityKind, KgError, KnowledgeGraph};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UserSplit {
    pub train: Vec<EntityId>,
    pub test: Vec<EntityId>,
}

/// Per-user train/test item sets; item lists are sorted.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InteractionSplit {
    users: BTreeMap<EntityId, UserSplit>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitReport {
    /// Users without any purchase; they are left out of the split.
    pub excluded_users: Vec<EntityId>,
}

impl InteractionSplit {
    /// Builds a split from explicit (user, item) train and test pairs.
    pub fn from_pairs(train: &[(EntityId, EntityId)], test: &[(EntityId, EntityId)]) -> Self {
        let mut users: BTreeMap<EntityId, UserSplit> = BTreeMap::new();
        for &(u, i) in train {
            users.entry(u).or_default().train.push(i);
        }
        for &(u, i) in test {
            users.entry(u).or_default().test.push(i);
        }
        for s in users.values_mut() {
            s.train.sort_unstable();
            s.train.dedup();
            s.test.sort_unstable();
            s.test.dedup();
            s.test.retain(|i| s.train.binary_search(i).is_err());
        }
        Self { users }
    }

    pub fn users(&self) -> impl Iterator<Item = EntityId> + '_ {
        self.users.keys().copied()
    }

    pub fn get(&self, user: EntityId) -> Option<&UserSplit> {
        self.users.get(&user)
    }

    pub fn train(&self, user: EntityId) -> &[EntityId] {
        self.users.get(&user).map_or(&[], |s| s.train.as_slice())
    }

    pub fn test(&self, user: EntityId) -> &[EntityId] {
        self.users.get(&user).map_or(&[], |s| s.test.as_slice())
    }

    pub fn is_train(&self, user: EntityId, item: EntityId) -> bool {
        self.train(user).binary_search(&item).is_ok()
    }

    pub fn train_pairs(&self) -> Vec<(EntityId, EntityId)> {
        self.users.iter().flat_map(|(&u, s)| s.train.iter().map(move |&i| (u, i))).collect()
    }

    pub fn test_pairs(&self) -> Vec<(EntityId, EntityId)> {
        self.users.iter().flat_map(|(&u, s)| s.test.iter().map(move |&i| (u, i))).collect()
    }

    /// Users with at least one train item.
    pub fn trainable_users(&self) -> Vec<EntityId> {
        self.users.iter().filter(|(_, s)| !s.train.is_empty()).map(|(&u, _)| u).collect()
    }

    /// The graph restricted to train purchases.
    pub fn training_graph(&self, kg: &KnowledgeGraph) -> KnowledgeGraph {
        kg.filter_purchases(|u, i| self.is_train(u, i))
    }
}

/// Shuffles each user's purchases and keeps `max(1, floor(ratio·n))` for
/// training. Users are visited in id order from one seeded stream.
pub fn split_interactions(kg: &KnowledgeGraph, ratio: f64, seed: u64) -> Result<(InteractionSplit, SplitReport), KgError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(KgError::Config(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut users = BTreeMap::new();
    let mut report = SplitReport::default();
    for u in kg.entities_of_kind(EntityKind::User) {
        let mut items = kg.purchases(u);
        if items.is_empty() {
            report.excluded_users.push(u);
            continue;
        }
        items.shuffle(&mut rng);
        let n_train = ((ratio * items.len() as f64).floor() as usize).max(1);
        let mut train = items[..n_train].to_vec();
        let mut test = items[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        users.insert(u, UserSplit { train, test });
    }
    Ok((InteractionSplit { users }, report))
}
