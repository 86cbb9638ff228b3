use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{EntityId, EntityKind, KgError, KnowledgeGraph, RelationId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct CategoryId(pub usize);

/// Item → categories mapping. Categories are not graph entities; they only
/// exist here and in [`CategoryGraph`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryAssignment {
    names: Vec<String>,
    by_item: Vec<Vec<CategoryId>>,
    members: Vec<Vec<EntityId>>,
}

impl CategoryAssignment {
    /// Builds from (item, category name) pairs; category ids are dense in
    /// order of first appearance. Every item of `kg` must be covered.
    pub fn from_pairs(kg: &KnowledgeGraph, pairs: impl IntoIterator<Item = (EntityId, String)>) -> Result<Self, KgError> {
        let mut index: HashMap<String, CategoryId> = HashMap::new();
        let mut names = Vec::new();
        let mut by_item = vec![Vec::new(); kg.num_entities()];
        for (item, name) in pairs {
            if !kg.is_item(item) {
                return Err(KgError::NotAnItem(kg.entity(item).name.clone()));
            }
            let id = *index.entry(name.clone()).or_insert_with(|| {
                names.push(name);
                CategoryId(names.len() - 1)
            });
            by_item[item.0].push(id);
        }
        Self::from_parts(kg, names, by_item)
    }

    pub fn from_parts(kg: &KnowledgeGraph, names: Vec<String>, mut by_item: Vec<Vec<CategoryId>>) -> Result<Self, KgError> {
        by_item.resize(kg.num_entities(), Vec::new());
        let mut members = vec![Vec::new(); names.len()];
        for e in kg.entities() {
            let cats = &mut by_item[e.id.0];
            cats.sort_unstable();
            cats.dedup();
            if e.kind == EntityKind::Item && cats.is_empty() {
                return Err(KgError::MissingCategory(e.name.clone()));
            }
            for c in cats.iter() {
                members[c.0].push(e.id);
            }
        }
        if let Some(c) = members.iter().position(Vec::is_empty) {
            return Err(KgError::EmptyCategory(names[c].clone()));
        }
        Ok(Self { names, by_item, members })
    }

    pub fn num_categories(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, c: CategoryId) -> &str {
        &self.names[c.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn category_id(&self, name: &str) -> Option<CategoryId> {
        self.names.iter().position(|n| n == name).map(CategoryId)
    }

    /// Categories of an entity; empty for non-items.
    pub fn categories_of(&self, e: EntityId) -> &[CategoryId] {
        self.by_item.get(e.0).map_or(&[], Vec::as_slice)
    }

    pub fn members(&self, c: CategoryId) -> &[EntityId] {
        &self.members[c.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = CategoryId> {
        (0..self.names.len()).map(CategoryId)
    }
}

/// Abstract graph over item categories: `C1 → C2` whenever some triple links
/// an item of `C1` to an item of `C2`. Purchase edges never contribute since
/// users carry no category.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryGraph {
    num_categories: usize,
    witnesses: BTreeMap<(CategoryId, CategoryId), BTreeSet<RelationId>>,
    neighbors: Vec<Vec<CategoryId>>,
}

impl CategoryGraph {
    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn has_edge(&self, from: CategoryId, to: CategoryId) -> bool {
        self.witnesses.contains_key(&(from, to))
    }

    /// Relations witnessing the edge, if it exists.
    pub fn witnesses(&self, from: CategoryId, to: CategoryId) -> Option<&BTreeSet<RelationId>> {
        self.witnesses.get(&(from, to))
    }

    pub fn edges(&self) -> impl Iterator<Item = (CategoryId, CategoryId)> + '_ {
        self.witnesses.keys().copied()
    }

    pub fn num_edges(&self) -> usize {
        self.witnesses.len()
    }

    /// Outgoing neighbours in ascending id order, self-edges included.
    pub fn neighbors(&self, c: CategoryId) -> &[CategoryId] {
        &self.neighbors[c.0]
    }
}

pub fn build_category_graph(kg: &KnowledgeGraph, assignment: &CategoryAssignment) -> Result<CategoryGraph, KgError> {
    for item in kg.entities_of_kind(EntityKind::Item) {
        if assignment.categories_of(item).is_empty() {
            return Err(KgError::MissingCategory(kg.entity(item).name.clone()));
        }
    }
    let mut witnesses: BTreeMap<(CategoryId, CategoryId), BTreeSet<RelationId>> = BTreeMap::new();
    for t in kg.triples() {
        let from = assignment.categories_of(t.head);
        let to = assignment.categories_of(t.tail);
        for &a in from {
            for &b in to {
                witnesses.entry((a, b)).or_default().insert(t.relation);
            }
        }
    }
    let n = assignment.num_categories();
    let mut neighbors = vec![Vec::new(); n];
    for &(a, b) in witnesses.keys() {
        neighbors[a.0].push(b);
    }
    Ok(CategoryGraph { num_categories: n, witnesses, neighbors })
}

/// Categories of the item's one-hop item neighbours (any item–item relation,
/// either direction) together with the item's own categories.
pub fn item_category_neighbors(
    kg: &KnowledgeGraph,
    assignment: &CategoryAssignment,
    item: EntityId,
) -> Result<BTreeSet<CategoryId>, KgError> {
    if !kg.is_item(item) {
        return Err(KgError::NotAnItem(kg.entity(item).name.clone()));
    }
    let mut out: BTreeSet<CategoryId> = assignment.categories_of(item).iter().copied().collect();
    for e in kg.out_edges(item) {
        if kg.is_item(e.target) {
            out.extend(assignment.categories_of(e.target).iter().copied());
        }
    }
    Ok(out)
}
