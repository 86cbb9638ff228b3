//! Desk-scale synthetic graphs.
//!
//! The planted preset gives each user a few item chains linked by a fixed
//! `also_bought`/`bought_together` motif. Both ends of the train chains are
//! purchased; the far end of one extra chain is held out as the user's test
//! target, so it can only be reached by walking the whole motif.

use std::collections::{BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    split_from_heldout, CategoryAssignment, CategoryId, Dataset, Edge, EntityId, EntityKind, KgBuilder, KgError,
    KnowledgeGraph, RelationId, Triple,
};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    pub brands: usize,
    pub features: usize,
    pub categories: usize,
    /// Users (taken from the front) that receive planted chains.
    pub planted_users: usize,
    /// Purchased chains per planted user, besides the held-out one.
    pub train_chains: usize,
    /// Shortest user-to-target distance required for every plant.
    pub min_plant_hops: usize,
    /// Longest path the agents may walk; plants beyond it are infeasible.
    pub max_hops: usize,
    /// Random purchases per user drawn from items outside any chain.
    pub purchases_per_user: usize,
    pub mentions_per_user: usize,
    pub features_per_item: usize,
    pub also_viewed_per_item: usize,
    pub also_bought_per_item: usize,
    pub bought_together_per_item: usize,
    /// Probability that a random edge stays within the source's category
    /// (brands and features have a home category too).
    pub homophily: f64,
}

impl SynthConfig {
    /// About 200 entities and 8 categories with one 4-hop target per user.
    pub fn planted() -> Self {
        Self {
            users: 12,
            items: 156,
            brands: 10,
            features: 20,
            categories: 8,
            planted_users: 12,
            train_chains: 2,
            min_plant_hops: 4,
            max_hops: 6,
            purchases_per_user: 0,
            mentions_per_user: 1,
            features_per_item: 1,
            also_viewed_per_item: 1,
            also_bought_per_item: 0,
            bought_together_per_item: 0,
            homophily: 0.0,
        }
    }

    /// 200 entities, 8 categories, no plants, roughly 25 triples per entity.
    pub fn dense() -> Self {
        Self {
            users: 40,
            items: 120,
            brands: 10,
            features: 30,
            categories: 8,
            planted_users: 0,
            train_chains: 0,
            min_plant_hops: 4,
            max_hops: 6,
            purchases_per_user: 20,
            mentions_per_user: 10,
            features_per_item: 8,
            also_viewed_per_item: 15,
            also_bought_per_item: 8,
            bought_together_per_item: 4,
            homophily: 0.0,
        }
    }

    /// 300 entities with strongly category-clustered edges, used to check
    /// that embedding pretraining picks up structure.
    pub fn clustered() -> Self {
        Self {
            users: 30,
            items: 200,
            brands: 20,
            features: 50,
            categories: 8,
            planted_users: 0,
            train_chains: 0,
            min_plant_hops: 4,
            max_hops: 6,
            purchases_per_user: 8,
            mentions_per_user: 4,
            features_per_item: 4,
            also_viewed_per_item: 4,
            also_bought_per_item: 3,
            bought_together_per_item: 1,
            homophily: 0.9,
        }
    }

    /// Items consumed by one planted user's chains.
    pub fn chain_items_per_user(&self) -> usize {
        (self.train_chains + 1) * self.min_plant_hops
    }

    fn validate(&self) -> Result<(), KgError> {
        if self.users == 0 || self.items == 0 || self.categories == 0 {
            return Err(KgError::Config("users, items and categories must be positive".into()));
        }
        if self.planted_users > self.users {
            return Err(KgError::Config(format!("{} planted users but only {} users", self.planted_users, self.users)));
        }
        if self.planted_users > 0 {
            if self.min_plant_hops < 2 {
                return Err(KgError::Config("min_plant_hops must be at least 2".into()));
            }
            if self.min_plant_hops > self.max_hops {
                return Err(KgError::Infeasible(format!(
                    "plants need {} hops but paths are capped at {}",
                    self.min_plant_hops, self.max_hops
                )));
            }
            let need = self.planted_users * self.chain_items_per_user();
            if need > self.items {
                return Err(KgError::Infeasible(format!("plants need {need} items, config has {}", self.items)));
            }
        }
        if !(0.0..=1.0).contains(&self.homophily) {
            return Err(KgError::Config(format!("homophily {} outside [0, 1]", self.homophily)));
        }
        if (self.mentions_per_user > 0 || self.features_per_item > 0) && self.features == 0 {
            return Err(KgError::Config("feature edges requested without features".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthReport {
    pub entities: usize,
    /// Forward triples including purchases.
    pub triples: usize,
    pub interactions: usize,
    /// Attribute or noise edges removed to keep plants at distance.
    pub removed_edges: usize,
    /// Shortest training-graph distance of each planted pair.
    pub plant_distances: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub dataset: Dataset,
    /// All purchases, test ones included.
    pub interactions: Vec<(EntityId, EntityId)>,
    /// (user, held-out target) pairs.
    pub planted: Vec<(EntityId, EntityId)>,
    pub report: SynthReport,
}

pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<SynthOutput, KgError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = KgBuilder::new();
    let rel = |b: &KgBuilder, n: &str| b.relation_id(n).expect("default vocabulary");
    let (purchase, mention, described_by, produced_by) =
        (rel(&b, "purchase"), rel(&b, "mention"), rel(&b, "described_by"), rel(&b, "produced_by"));
    let (also_bought, also_viewed, bought_together) =
        (rel(&b, "also_bought"), rel(&b, "also_viewed"), rel(&b, "bought_together"));

    let users: Vec<_> = (0..config.users).map(|k| b.add_entity(&format!("user_{k}"), EntityKind::User).unwrap()).collect();
    let items: Vec<_> = (0..config.items).map(|k| b.add_entity(&format!("item_{k}"), EntityKind::Item).unwrap()).collect();
    let brands: Vec<_> = (0..config.brands).map(|k| b.add_entity(&format!("brand_{k}"), EntityKind::Brand).unwrap()).collect();
    let features: Vec<_> =
        (0..config.features).map(|k| b.add_entity(&format!("feature_{k}"), EntityKind::Feature).unwrap()).collect();

    let mut protected: BTreeSet<Triple> = BTreeSet::new();
    let mut interactions = Vec::new();
    let mut planted = Vec::new();
    let mut cats: Vec<Vec<CategoryId>> = vec![Vec::new(); b.num_entities()];
    let mut in_chain = vec![false; b.num_entities()];
    let hops = config.min_plant_hops;
    let motif = |k: usize| if k % 2 == 0 { also_bought } else { bought_together };

    let mut next_item = 0;
    for &u in users.iter().take(config.planted_users) {
        let base = rng.gen_range(0..config.categories);
        for chain in 0..=config.train_chains {
            let xs = &items[next_item..next_item + hops];
            next_item += hops;
            for (k, &x) in xs.iter().enumerate() {
                cats[x.0].push(CategoryId((base + k) % config.categories));
                in_chain[x.0] = true;
            }
            for k in 0..hops - 1 {
                let t = Triple { head: xs[k], relation: motif(k), tail: xs[k + 1] };
                b.add_triple_ids(t.head, t.relation, t.tail)?;
                protected.insert(t);
            }
            // Chain ends are items, reached in hops - 1 steps from the start.
            let (start, end) = (xs[0], xs[hops - 1]);
            for x in [start, end] {
                let t = Triple { head: u, relation: purchase, tail: x };
                b.add_triple_ids(u, purchase, x)?;
                protected.insert(t);
                interactions.push((u, x));
            }
            if chain == config.train_chains {
                planted.push((u, end));
            }
        }
    }

    let filler: Vec<EntityId> = items.iter().copied().filter(|i| !in_chain[i.0]).collect();
    // Round-robin first so that every category has a member.
    for (k, &i) in filler.iter().enumerate() {
        let c = if k < config.categories { k } else { rng.gen_range(0..config.categories) };
        cats[i.0].push(CategoryId(c));
    }

    let pool: Vec<EntityId> = if config.planted_users > 0 && !filler.is_empty() { filler.clone() } else { items.clone() };
    let home = |k: usize| k % config.categories;
    let mut pool_by_cat = vec![Vec::new(); config.categories];
    for &i in &pool {
        pool_by_cat[cats[i.0][0].0].push(i);
    }
    let brands_by_cat: Vec<Vec<EntityId>> =
        (0..config.categories).map(|c| brands.iter().enumerate().filter(|(k, _)| home(*k) == c).map(|(_, &e)| e).collect()).collect();
    let features_by_cat: Vec<Vec<EntityId>> = (0..config.categories)
        .map(|c| features.iter().enumerate().filter(|(k, _)| home(*k) == c).map(|(_, &e)| e).collect())
        .collect();
    // With probability `homophily` draw from the category's own bucket.
    let pick = |rng: &mut ChaCha8Rng, all: &[EntityId], by_cat: &[Vec<EntityId>], cat: usize| -> Option<EntityId> {
        if config.homophily > 0.0 && !by_cat[cat].is_empty() && rng.gen_bool(config.homophily) {
            by_cat[cat].choose(rng).copied()
        } else {
            all.choose(rng).copied()
        }
    };

    for &u in &users {
        let taste = rng.gen_range(0..config.categories);
        for _ in 0..config.purchases_per_user {
            if let Some(i) = pick(&mut rng, &filler, &pool_by_cat, taste) {
                if b.add_triple_ids(u, purchase, i)? {
                    interactions.push((u, i));
                }
            }
        }
        for _ in 0..config.mentions_per_user {
            let f = pick(&mut rng, &features, &features_by_cat, taste).expect("features checked in validate");
            b.add_triple_ids(u, mention, f)?;
        }
    }
    for &i in &items {
        let cat = cats[i.0][0].0;
        if let Some(br) = pick(&mut rng, &brands, &brands_by_cat, cat) {
            b.add_triple_ids(i, produced_by, br)?;
        }
        for _ in 0..config.features_per_item {
            let f = pick(&mut rng, &features, &features_by_cat, cat).expect("features checked in validate");
            b.add_triple_ids(i, described_by, f)?;
        }
        for (count, r) in [
            (config.also_viewed_per_item, also_viewed),
            (config.also_bought_per_item, also_bought),
            (config.bought_together_per_item, bought_together),
        ] {
            for _ in 0..count {
                let j = pick(&mut rng, &pool, &pool_by_cat, cat).expect("pool is nonempty");
                if j != i {
                    b.add_triple_ids(i, r, j)?;
                }
            }
        }
    }

    let names: Vec<String> = (0..config.categories).map(|c| format!("category_{c}")).collect();
    let mut test = planted.clone();
    test.sort_unstable();
    let removed_edges = repair_plants(&mut b, &protected, &test, hops)?;
    let kg = b.build();
    let assignment = CategoryAssignment::from_parts(&kg, names, cats)?;
    let split = split_from_heldout(&kg, &test);
    let train_kg = split.training_graph(&kg);
    let mut plant_distances = Vec::with_capacity(planted.len());
    for &(u, target) in &planted {
        let d = bfs_path(&train_kg, u, target).map(|p| p.len()).ok_or_else(|| {
            KgError::Infeasible(format!("target {} unreachable from {}", kg.entity(target).name, kg.entity(u).name))
        })?;
        if d < hops || d > config.max_hops {
            return Err(KgError::Infeasible(format!("plant at distance {d}, need {hops}..={}", config.max_hops)));
        }
        plant_distances.push(d);
    }
    let report = SynthReport {
        entities: kg.num_entities(),
        triples: kg.forward_triples().count(),
        interactions: interactions.len(),
        removed_edges,
        plant_distances,
    };
    interactions.sort_unstable();
    Ok(SynthOutput { dataset: Dataset { kg, assignment, split }, interactions, planted, report })
}

/// Removes unprotected edges from shortest paths until every planted target
/// sits at least `hops` away from its user in the training graph.
fn repair_plants(
    b: &mut KgBuilder,
    protected: &BTreeSet<Triple>,
    test: &[(EntityId, EntityId)],
    hops: usize,
) -> Result<usize, KgError> {
    let mut removed = 0;
    loop {
        let kg = b.build();
        let split = split_from_heldout(&kg, test);
        let train = split.training_graph(&kg);
        let mut changed = false;
        for &(u, target) in test {
            let Some(path) = bfs_path(&train, u, target) else { continue };
            if path.len() >= hops {
                continue;
            }
            let victim = path
                .iter()
                .map(|&(from, e)| forward_triple(&train, from, e))
                .find(|t| !protected.contains(t) && t.relation != train.purchase())
                .ok_or_else(|| {
                    KgError::Infeasible(format!(
                        "{} reaches {} in {} hops through planted edges only",
                        kg.entity(u).name,
                        kg.entity(target).name,
                        path.len()
                    ))
                })?;
            b.remove_triple(&victim);
            removed += 1;
            changed = true;
            break;
        }
        if !changed {
            return Ok(removed);
        }
    }
}

fn forward_triple(kg: &KnowledgeGraph, from: EntityId, e: Edge) -> Triple {
    let r = kg.relation(e.relation);
    if r.is_inverse {
        Triple { head: e.target, relation: r.inverse, tail: from }
    } else {
        Triple { head: from, relation: e.relation, tail: e.target }
    }
}

/// Shortest path as (source entity, edge taken) hops, `None` when unreachable.
pub fn bfs_path(kg: &KnowledgeGraph, from: EntityId, to: EntityId) -> Option<Vec<(EntityId, Edge)>> {
    let mut parent: Vec<Option<(EntityId, Edge)>> = vec![None; kg.num_entities()];
    let mut seen = vec![false; kg.num_entities()];
    let mut queue = VecDeque::from([from]);
    seen[from.0] = true;
    while let Some(x) = queue.pop_front() {
        if x == to {
            let mut path = Vec::new();
            let mut cur = to;
            while let Some((p, e)) = parent[cur.0] {
                path.push((p, e));
                cur = p;
            }
            path.reverse();
            return Some(path);
        }
        for &e in kg.out_edges(x) {
            if !seen[e.target.0] {
                seen[e.target.0] = true;
                parent[e.target.0] = Some((x, e));
                queue.push_back(e.target);
            }
        }
    }
    None
}

/// Hop distances from `from` to every entity (`usize::MAX` if unreachable).
pub fn bfs_distances(kg: &KnowledgeGraph, from: EntityId) -> Vec<usize> {
    let mut dist = vec![usize::MAX; kg.num_entities()];
    dist[from.0] = 0;
    let mut queue = VecDeque::from([from]);
    while let Some(x) = queue.pop_front() {
        for e in kg.out_edges(x) {
            if dist[e.target.0] == usize::MAX {
                dist[e.target.0] = dist[x.0] + 1;
                queue.push_back(e.target);
            }
        }
    }
    dist
}

/// Relation sequence of the planted motif for `hops` total hops, starting
/// with the purchase edge.
pub fn planted_motif(kg: &KnowledgeGraph, hops: usize) -> Vec<RelationId> {
    let ab = kg.relation_id("also_bought").expect("default vocabulary");
    let bt = kg.relation_id("bought_together").expect("default vocabulary");
    std::iter::once(kg.purchase()).chain((0..hops.saturating_sub(1)).map(|k| if k % 2 == 0 { ab } else { bt })).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_targets_are_at_least_four_hops_away() {
        let out = generate_synthetic(&SynthConfig::planted(), 42).unwrap();
        let train = out.dataset.training_graph();
        assert_eq!(out.planted.len(), 12);
        for &(u, t) in &out.planted {
            let d = bfs_distances(&train, u)[t.0];
            assert!((4..=6).contains(&d), "distance {d}");
        }
    }

    #[test]
    fn planted_preset_is_about_two_hundred_entities() {
        let out = generate_synthetic(&SynthConfig::planted(), 42).unwrap();
        assert!((180..=220).contains(&out.report.entities), "{}", out.report.entities);
        assert_eq!(out.dataset.assignment.num_categories(), 8);
    }

    #[test]
    fn dense_preset_ratio() {
        let out = generate_synthetic(&SynthConfig::dense(), 42).unwrap();
        let ratio = out.report.triples as f64 / out.report.entities as f64;
        assert_eq!(out.report.entities, 200);
        assert!((20.0..=30.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn no_plants_gives_inverse_closed_graph() {
        let cfg = SynthConfig { planted_users: 0, train_chains: 0, purchases_per_user: 3, ..SynthConfig::planted() };
        let out = generate_synthetic(&cfg, 1).unwrap();
        let kg = &out.dataset.kg;
        for t in kg.triples() {
            assert!(kg.has_edge(t.tail, kg.relation(t.relation).inverse, t.head));
        }
        assert!(out.planted.is_empty());
    }

    #[test]
    fn clustered_preset_has_three_hundred_entities() {
        let out = generate_synthetic(&SynthConfig::clustered(), 3).unwrap();
        assert_eq!(out.report.entities, 300);
    }

    #[test]
    fn hop_budget_too_small_is_infeasible() {
        let cfg = SynthConfig { max_hops: 3, ..SynthConfig::planted() };
        assert!(matches!(generate_synthetic(&cfg, 0), Err(KgError::Infeasible(_))));
        let cfg = SynthConfig { items: 20, ..SynthConfig::planted() };
        assert!(matches!(generate_synthetic(&cfg, 0), Err(KgError::Infeasible(_))));
    }

    #[test]
    fn same_seed_same_graph() {
        let a = generate_synthetic(&SynthConfig::planted(), 5).unwrap();
        let b = generate_synthetic(&SynthConfig::planted(), 5).unwrap();
        assert_eq!(a.dataset.kg.triples(), b.dataset.kg.triples());
        assert_eq!(a.planted, b.planted);
    }
}
