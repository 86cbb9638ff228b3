//! Typed knowledge graph with materialised inverse relations.

mod category;
mod dataset;
mod io;
mod split;
pub mod synth;

use std::collections::{BTreeSet, HashMap};
use std::fmt;

pub use category::{build_category_graph, item_category_neighbors, CategoryAssignment, CategoryGraph, CategoryId};
pub use dataset::{split_from_heldout, Dataset, DatasetStats, CATEGORIES_FILE, ENTITIES_FILE, HELDOUT_FILE, INTERACTIONS_FILE, TRIPLES_FILE};
pub use io::{load_kg, load_kg_with_vocabulary, read_categories, read_interactions, write_categories, write_entities, write_interactions, write_triples, LoadReport};
pub use split::{split_interactions, InteractionSplit, SplitReport, UserSplit};

/// Forward relation vocabulary used when none is declared.
pub const DEFAULT_RELATIONS: [&str; 7] = [
    "purchase",
    "mention",
    "described_by",
    "produced_by",
    "also_bought",
    "also_viewed",
    "bought_together",
];

pub const PURCHASE: &str = "purchase";

/// Suffix appended to a forward relation name to name its inverse.
pub const INVERSE_SUFFIX: &str = "_inv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EntityKind {
    User,
    Item,
    Brand,
    Feature,
}

impl EntityKind {
    pub const ALL: [EntityKind; 4] = [EntityKind::User, EntityKind::Item, EntityKind::Brand, EntityKind::Feature];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::User => "user",
            EntityKind::Item => "item",
            EntityKind::Brand => "brand",
            EntityKind::Feature => "feature",
        }
    }
}

impl std::str::FromStr for EntityKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "user" => Ok(EntityKind::User),
            "item" => Ok(EntityKind::Item),
            "brand" => Ok(EntityKind::Brand),
            "feature" => Ok(EntityKind::Feature),
            other => Err(format!("unknown entity kind `{other}`")),
        }
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entity {
    pub id: EntityId,
    pub name: String,
    pub kind: EntityKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Relation {
    pub id: RelationId,
    pub name: String,
    pub is_inverse: bool,
    pub inverse: RelationId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

/// Adjacency entry; lists are sorted by `(relation, target)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub relation: RelationId,
    pub target: EntityId,
}

#[derive(Debug, thiserror::Error)]
pub enum KgError {
    #[error("{file}:{line}: {msg}")]
    Malformed { file: String, line: usize, msg: String },
    #[error("{file}:{line}: unknown entity `{name}`")]
    UnknownEntity { file: String, line: usize, name: String },
    #[error("{file}:{line}: unknown relation `{name}`")]
    UnknownRelation { file: String, line: usize, name: String },
    #[error("duplicate entity `{0}`")]
    DuplicateEntity(String),
    #[error("self-referential purchase edge on `{0}`")]
    SelfPurchase(String),
    #[error("purchase must connect a user to an item: `{head}` ({head_kind}) -> `{tail}` ({tail_kind})")]
    PurchaseKinds { head: String, head_kind: EntityKind, tail: String, tail_kind: EntityKind },
    #[error("item `{0}` has no category")]
    MissingCategory(String),
    #[error("category `{0}` has no member items")]
    EmptyCategory(String),
    #[error("entity `{0}` is not an item")]
    NotAnItem(String),
    #[error("relation name `{0}` collides with a synthesised inverse")]
    RelationNameClash(String),
    #[error("infeasible synthetic plant: {0}")]
    Infeasible(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Immutable knowledge graph. Every forward triple `(h, r, t)` is paired with
/// `(t, r⁻¹, h)`; relation `2k` is forward and `2k + 1` its inverse.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    entities: Vec<Entity>,
    relations: Vec<Relation>,
    entity_index: HashMap<String, EntityId>,
    relation_index: HashMap<String, RelationId>,
    triples: Vec<Triple>,
    out_edges: Vec<Vec<Edge>>,
    in_edges: Vec<Vec<Edge>>,
    purchase: RelationId,
}

impl KnowledgeGraph {
    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn entity(&self, id: EntityId) -> &Entity {
        &self.entities[id.0]
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn relation(&self, id: RelationId) -> &Relation {
        &self.relations[id.0]
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entity_index.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relation_index.get(name).copied()
    }

    pub fn kind(&self, id: EntityId) -> EntityKind {
        self.entities[id.0].kind
    }

    pub fn is_item(&self, id: EntityId) -> bool {
        self.kind(id) == EntityKind::Item
    }

    pub fn purchase(&self) -> RelationId {
        self.purchase
    }

    /// Every triple including synthesised inverses, sorted.
    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn forward_triples(&self) -> impl Iterator<Item = &Triple> {
        self.triples.iter().filter(|t| !self.relations[t.relation.0].is_inverse)
    }

    pub fn out_edges(&self, id: EntityId) -> &[Edge] {
        &self.out_edges[id.0]
    }

    pub fn in_edges(&self, id: EntityId) -> &[Edge] {
        &self.in_edges[id.0]
    }

    pub fn has_edge(&self, head: EntityId, relation: RelationId, tail: EntityId) -> bool {
        self.out_edges[head.0].binary_search(&Edge { relation, target: tail }).is_ok()
    }

    pub fn entities_of_kind(&self, kind: EntityKind) -> impl Iterator<Item = EntityId> + '_ {
        self.entities.iter().filter(move |e| e.kind == kind).map(|e| e.id)
    }

    /// Items a user purchased according to the graph's purchase edges.
    pub fn purchases(&self, user: EntityId) -> Vec<EntityId> {
        self.out_edges[user.0].iter().filter(|e| e.relation == self.purchase).map(|e| e.target).collect()
    }

    pub fn count_kind(&self, kind: EntityKind) -> usize {
        self.entities.iter().filter(|e| e.kind == kind).count()
    }

    /// Copy of the graph keeping only the purchase edges accepted by `keep`.
    pub fn filter_purchases(&self, keep: impl Fn(EntityId, EntityId) -> bool) -> KnowledgeGraph {
        self.retain_forward(|t| t.relation != self.purchase || keep(t.head, t.tail))
    }

    /// Copy of the graph keeping the forward triples accepted by `keep`
    /// (inverses follow their forward triple).
    pub fn retain_forward(&self, keep: impl Fn(&Triple) -> bool) -> KnowledgeGraph {
        let mut b = KgBuilder::from_vocabulary(self.forward_relation_names()).expect("vocabulary already validated");
        b.purchase_name = self.relations[self.purchase.0].name.clone();
        for e in &self.entities {
            b.add_entity(&e.name, e.kind).expect("names are unique");
        }
        for t in self.forward_triples().filter(|t| keep(t)) {
            b.add_triple_ids(t.head, t.relation, t.tail).expect("graph already valid");
        }
        b.build()
    }

    pub fn forward_relation_names(&self) -> Vec<String> {
        self.relations.iter().filter(|r| !r.is_inverse).map(|r| r.name.clone()).collect()
    }
}

/// Accumulates entities and forward triples, then materialises the inverse
/// closure and sorted adjacency.
#[derive(Debug)]
pub struct KgBuilder {
    entities: Vec<Entity>,
    entity_index: HashMap<String, EntityId>,
    relations: Vec<Relation>,
    relation_index: HashMap<String, RelationId>,
    forward: BTreeSet<Triple>,
    duplicates: usize,
    purchase_name: String,
}

impl Default for KgBuilder {
    fn default() -> Self {
        Self::from_vocabulary(DEFAULT_RELATIONS).expect("default vocabulary is valid")
    }
}

impl KgBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares the forward relation vocabulary; each gets an inverse. The
    /// purchase relation is always part of the vocabulary.
    pub fn from_vocabulary<I, S>(names: I) -> Result<Self, KgError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut b = Self {
            entities: Vec::new(),
            entity_index: HashMap::new(),
            relations: Vec::new(),
            relation_index: HashMap::new(),
            forward: BTreeSet::new(),
            duplicates: 0,
            purchase_name: PURCHASE.to_string(),
        };
        let mut names: Vec<String> = names.into_iter().map(Into::into).collect();
        if !names.iter().any(|n| n == PURCHASE) {
            names.insert(0, PURCHASE.to_string());
        }
        for name in names {
            b.declare_relation(&name)?;
        }
        Ok(b)
    }

    pub fn with_purchase_relation(mut self, name: &str) -> Result<Self, KgError> {
        if !self.relation_index.contains_key(name) {
            self.declare_relation(name)?;
        }
        self.purchase_name = name.to_string();
        Ok(self)
    }

    fn declare_relation(&mut self, name: &str) -> Result<RelationId, KgError> {
        if let Some(&id) = self.relation_index.get(name) {
            if self.relations[id.0].is_inverse {
                return Err(KgError::RelationNameClash(name.to_string()));
            }
            return Ok(id);
        }
        if name.ends_with(INVERSE_SUFFIX) || name.is_empty() {
            return Err(KgError::RelationNameClash(name.to_string()));
        }
        let inv_name = format!("{name}{INVERSE_SUFFIX}");
        let fwd = RelationId(self.relations.len());
        let inv = RelationId(fwd.0 + 1);
        self.relations.push(Relation { id: fwd, name: name.to_string(), is_inverse: false, inverse: inv });
        self.relations.push(Relation { id: inv, name: inv_name.clone(), is_inverse: true, inverse: fwd });
        self.relation_index.insert(name.to_string(), fwd);
        self.relation_index.insert(inv_name, inv);
        Ok(fwd)
    }

    pub fn add_entity(&mut self, name: &str, kind: EntityKind) -> Result<EntityId, KgError> {
        if self.entity_index.contains_key(name) {
            return Err(KgError::DuplicateEntity(name.to_string()));
        }
        let id = EntityId(self.entities.len());
        self.entities.push(Entity { id, name: name.to_string(), kind });
        self.entity_index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entity_index.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relation_index.get(name).copied().filter(|r| !self.relations[r.0].is_inverse)
    }

    pub fn kind(&self, id: EntityId) -> EntityKind {
        self.entities[id.0].kind
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// Adds a forward triple. Returns `Ok(false)` for a duplicate, which is
    /// counted and otherwise ignored.
    pub fn add_triple_ids(&mut self, head: EntityId, relation: RelationId, tail: EntityId) -> Result<bool, KgError> {
        let purchase = self.relation_index[&self.purchase_name];
        if relation == purchase {
            let (h, t) = (&self.entities[head.0], &self.entities[tail.0]);
            if head == tail {
                return Err(KgError::SelfPurchase(h.name.clone()));
            }
            if h.kind != EntityKind::User || t.kind != EntityKind::Item {
                return Err(KgError::PurchaseKinds {
                    head: h.name.clone(),
                    head_kind: h.kind,
                    tail: t.name.clone(),
                    tail_kind: t.kind,
                });
            }
        }
        let inserted = self.forward.insert(Triple { head, relation, tail });
        if !inserted {
            self.duplicates += 1;
        }
        Ok(inserted)
    }

    pub fn remove_triple(&mut self, triple: &Triple) -> bool {
        self.forward.remove(triple)
    }

    pub fn forward_triples(&self) -> impl Iterator<Item = &Triple> {
        self.forward.iter()
    }

    pub fn duplicates(&self) -> usize {
        self.duplicates
    }

    pub fn build(&self) -> KnowledgeGraph {
        let n = self.entities.len();
        let mut all: Vec<Triple> = Vec::with_capacity(2 * self.forward.len());
        for t in &self.forward {
            all.push(*t);
            let inv = self.relations[t.relation.0].inverse;
            all.push(Triple { head: t.tail, relation: inv, tail: t.head });
        }
        all.sort_unstable();
        all.dedup();
        let mut out_edges = vec![Vec::new(); n];
        let mut in_edges = vec![Vec::new(); n];
        for t in &all {
            out_edges[t.head.0].push(Edge { relation: t.relation, target: t.tail });
            in_edges[t.tail.0].push(Edge { relation: t.relation, target: t.head });
        }
        for list in out_edges.iter_mut().chain(in_edges.iter_mut()) {
            list.sort_unstable();
        }
        KnowledgeGraph {
            entities: self.entities.clone(),
            relations: self.relations.clone(),
            entity_index: self.entity_index.clone(),
            relation_index: self.relation_index.clone(),
            triples: all,
            out_edges,
            in_edges,
            purchase: self.relation_index[&self.purchase_name],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> KnowledgeGraph {
        let mut b = KgBuilder::new();
        let u = b.add_entity("u1", EntityKind::User).unwrap();
        let i1 = b.add_entity("i1", EntityKind::Item).unwrap();
        let i2 = b.add_entity("i2", EntityKind::Item).unwrap();
        let p = b.relation_id("purchase").unwrap();
        let ab = b.relation_id("also_bought").unwrap();
        b.add_triple_ids(u, p, i1).unwrap();
        b.add_triple_ids(i1, ab, i2).unwrap();
        b.build()
    }

    #[test]
    fn inverse_triples_are_materialised() {
        let kg = toy();
        let u = kg.entity_id("u1").unwrap();
        let i1 = kg.entity_id("i1").unwrap();
        let p = kg.purchase();
        let p_inv = kg.relation(p).inverse;
        assert!(kg.has_edge(u, p, i1));
        assert!(kg.has_edge(i1, p_inv, u));
        assert_eq!(kg.relation(p_inv).name, "purchase_inv");
        assert_eq!(kg.relation(p_inv).inverse, p);
        assert_eq!(kg.triples().len(), 4);
    }

    #[test]
    fn purchase_must_be_user_to_item() {
        let mut b = KgBuilder::new();
        let i1 = b.add_entity("i1", EntityKind::Item).unwrap();
        let i2 = b.add_entity("i2", EntityKind::Item).unwrap();
        let u = b.add_entity("u", EntityKind::User).unwrap();
        let p = b.relation_id("purchase").unwrap();
        assert!(matches!(b.add_triple_ids(i1, p, i2), Err(KgError::PurchaseKinds { .. })));
        assert!(matches!(b.add_triple_ids(u, p, u), Err(KgError::SelfPurchase(_))));
    }

    #[test]
    fn duplicates_are_counted_and_ignored() {
        let mut b = KgBuilder::new();
        let i1 = b.add_entity("i1", EntityKind::Item).unwrap();
        let i2 = b.add_entity("i2", EntityKind::Item).unwrap();
        let ab = b.relation_id("also_bought").unwrap();
        assert!(b.add_triple_ids(i1, ab, i2).unwrap());
        assert!(!b.add_triple_ids(i1, ab, i2).unwrap());
        assert_eq!(b.duplicates(), 1);
        assert_eq!(b.build().triples().len(), 2);
    }

    #[test]
    fn adjacency_is_sorted_and_duplicate_free() {
        let kg = toy();
        for e in kg.entities() {
            let out = kg.out_edges(e.id);
            assert!(out.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn filter_purchases_drops_only_rejected_edges() {
        let kg = toy();
        let filtered = kg.filter_purchases(|_, _| false);
        assert_eq!(filtered.triples().len(), 2);
        assert_eq!(filtered.num_entities(), kg.num_entities());
    }
}
