use std::fs;
use std::path::Path;

use super::io::{io_err, read_entities_into, read_rows, read_triples_into};
use super::{
    read_categories, read_interactions, split_interactions, write_categories, write_entities, write_interactions,
    write_triples, CategoryAssignment, EntityId, EntityKind, InteractionSplit, KgBuilder, KgError, KnowledgeGraph,
    DEFAULT_RELATIONS, PURCHASE,
};

pub const ENTITIES_FILE: &str = "entities.tsv";
pub const TRIPLES_FILE: &str = "triples.tsv";
pub const CATEGORIES_FILE: &str = "categories.tsv";
pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const HELDOUT_FILE: &str = "heldout.tsv";

/// A graph with every purchase, its category assignment, and the
/// train/test split of those purchases.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub kg: KnowledgeGraph,
    pub assignment: CategoryAssignment,
    pub split: InteractionSplit,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetStats {
    pub kinds: Vec<(EntityKind, usize)>,
    pub relations: usize,
    /// Forward triples, purchases included.
    pub triples: usize,
    pub interactions: usize,
    pub train_interactions: usize,
    pub test_interactions: usize,
    pub categories: usize,
    pub duplicate_triples: usize,
}

impl Dataset {
    /// Graph with train purchases only, the one agents and embeddings see.
    pub fn training_graph(&self) -> KnowledgeGraph {
        self.split.training_graph(&self.kg)
    }

    /// Reads a raw directory: `entities.tsv`, `triples.tsv` (purchases may
    /// appear here), `categories.tsv`, and optional `interactions.tsv` and
    /// `heldout.tsv`. Without a held-out file the purchases are split with
    /// `ratio` and `seed`.
    pub fn ingest(dir: &Path, ratio: f64, seed: u64) -> Result<(Self, DatasetStats), KgError> {
        Self::ingest_with(dir, ratio, seed, DEFAULT_RELATIONS, PURCHASE)
    }

    pub fn ingest_with<I, S>(dir: &Path, ratio: f64, seed: u64, vocabulary: I, purchase: &str) -> Result<(Self, DatasetStats), KgError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut b = KgBuilder::from_vocabulary(vocabulary)?.with_purchase_relation(purchase)?;
        read_entities_into(&mut b, &dir.join(ENTITIES_FILE))?;
        read_triples_into(&mut b, &dir.join(TRIPLES_FILE))?;
        let interactions = dir.join(INTERACTIONS_FILE);
        if interactions.exists() {
            add_interactions(&mut b, &interactions)?;
        }
        let duplicate_triples = b.duplicates();
        let kg = b.build();
        let assignment = read_categories(&dir.join(CATEGORIES_FILE), &kg)?;
        let heldout = dir.join(HELDOUT_FILE);
        let split = if heldout.exists() {
            split_from_heldout(&kg, &read_interactions(&heldout, &kg)?)
        } else {
            split_interactions(&kg, ratio, seed)?.0
        };
        let ds = Dataset { kg, assignment, split };
        let mut stats = ds.stats();
        stats.duplicate_triples = duplicate_triples;
        Ok((ds, stats))
    }

    /// Reads a normalised directory written by [`Dataset::save`].
    pub fn load(dir: &Path) -> Result<Self, KgError> {
        let heldout = dir.join(HELDOUT_FILE);
        if !heldout.exists() {
            return Err(KgError::Config(format!("{} is missing; not a prepared dataset", heldout.display())));
        }
        Ok(Self::ingest(dir, 0.7, 0)?.0)
    }

    pub fn save(&self, dir: &Path) -> Result<(), KgError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        write_entities(&dir.join(ENTITIES_FILE), &self.kg)?;
        write_triples(&dir.join(TRIPLES_FILE), &self.kg, false)?;
        write_categories(&dir.join(CATEGORIES_FILE), &self.kg, &self.assignment)?;
        let purchases: Vec<_> = self
            .kg
            .forward_triples()
            .filter(|t| t.relation == self.kg.purchase())
            .map(|t| (t.head, t.tail))
            .collect();
        write_interactions(&dir.join(INTERACTIONS_FILE), &self.kg, &purchases)?;
        write_interactions(&dir.join(HELDOUT_FILE), &self.kg, &self.split.test_pairs())
    }

    pub fn stats(&self) -> DatasetStats {
        let purchases = self.kg.forward_triples().filter(|t| t.relation == self.kg.purchase()).count();
        DatasetStats {
            kinds: EntityKind::ALL.iter().map(|&k| (k, self.kg.count_kind(k))).collect(),
            relations: self.kg.num_relations() / 2,
            triples: self.kg.forward_triples().count(),
            interactions: purchases,
            train_interactions: self.split.train_pairs().len(),
            test_interactions: self.split.test_pairs().len(),
            categories: self.assignment.num_categories(),
            duplicate_triples: 0,
        }
    }
}

fn add_interactions(b: &mut KgBuilder, path: &Path) -> Result<(), KgError> {
    let file = path.display().to_string();
    let purchase = b.relation_id(&b.purchase_name).expect("purchase relation declared");
    for (line, f) in read_rows(path, 2)? {
        let lookup = |name: &str| {
            b.entity_id(name)
                .ok_or_else(|| KgError::UnknownEntity { file: file.clone(), line, name: name.to_string() })
        };
        let (u, i) = (lookup(&f[0])?, lookup(&f[1])?);
        b.add_triple_ids(u, purchase, i)?;
    }
    Ok(())
}

/// Every purchase not listed in `heldout` is a train interaction.
pub fn split_from_heldout(kg: &KnowledgeGraph, heldout: &[(EntityId, EntityId)]) -> InteractionSplit {
    let mut test = heldout.to_vec();
    test.sort_unstable();
    let train: Vec<_> = kg
        .forward_triples()
        .filter(|t| t.relation == kg.purchase())
        .map(|t| (t.head, t.tail))
        .filter(|p| test.binary_search(p).is_err())
        .collect();
    InteractionSplit::from_pairs(&train, &test)
}
