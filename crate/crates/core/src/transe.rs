//! Translational embedding pretraining (`h + r ≈ t`) and category means.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kg::{CategoryAssignment, CategoryId, EntityId, EntityKind, KnowledgeGraph, RelationId, Triple};
use crate::numcore::tensor::l2_norm;

#[derive(Debug, thiserror::Error)]
pub enum TranseError {
    #[error("embedding dimension must be at least 1")]
    ZeroDimension,
    #[error("margin must be positive, got {0}")]
    Margin(f64),
    #[error("category `{0}` has no member items")]
    EmptyCategory(String),
    #[error("loss became non-finite in epoch {epoch}; returning the last finite table")]
    Diverged { epoch: usize, table: Box<EmbeddingTable>, history: Vec<f64> },
    #[error("table has {table} {what} rows, graph has {graph}")]
    Mismatch { what: &'static str, table: usize, graph: usize },
}

/// Row-major `rows × dim` block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self { rows, dim, data: vec![0.0; rows * dim] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.dim..(r + 1) * self.dim]
    }
}

/// Entity, relation and category vectors of one dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub entities: Matrix,
    pub relations: Matrix,
    pub categories: Matrix,
}

impl EmbeddingTable {
    pub fn entity(&self, e: EntityId) -> &[f64] {
        self.entities.row(e.0)
    }

    pub fn relation(&self, r: RelationId) -> &[f64] {
        self.relations.row(r.0)
    }

    pub fn category(&self, c: CategoryId) -> &[f64] {
        self.categories.row(c.0)
    }

    pub fn check_against(&self, kg: &KnowledgeGraph, assignment: &CategoryAssignment) -> Result<(), TranseError> {
        for (what, table, graph) in [
            ("entity", self.entities.rows, kg.num_entities()),
            ("relation", self.relations.rows, kg.num_relations()),
            ("category", self.categories.rows, assignment.num_categories()),
        ] {
            if table != graph {
                return Err(TranseError::Mismatch { what, table, graph });
            }
        }
        Ok(())
    }

    fn normalize_entities(&mut self) {
        for r in 0..self.entities.rows {
            normalize(self.entities.row_mut(r));
        }
    }
}

fn normalize(v: &mut [f64]) {
    let n = l2_norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Uniform in `[-6/√d, 6/√d]`; category rows are member means.
pub fn init_embeddings(
    kg: &KnowledgeGraph,
    assignment: &CategoryAssignment,
    dim: usize,
    seed: u64,
) -> Result<EmbeddingTable, TranseError> {
    if dim == 0 {
        return Err(TranseError::ZeroDimension);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 6.0 / (dim as f64).sqrt();
    let mut fill = |rows: usize| Matrix {
        rows,
        dim,
        data: (0..rows * dim).map(|_| rng.gen_range(-bound..=bound)).collect(),
    };
    let entities = fill(kg.num_entities());
    let relations = fill(kg.num_relations());
    let table = EmbeddingTable { dim, entities, relations, categories: Matrix::zeros(assignment.num_categories(), dim) };
    category_embedding(table, assignment)
}

/// Fills row `c` with the mean of its member items' rows.
pub fn category_embedding(mut table: EmbeddingTable, assignment: &CategoryAssignment) -> Result<EmbeddingTable, TranseError> {
    let dim = table.dim;
    let mut cats = Matrix::zeros(assignment.num_categories(), dim);
    for c in assignment.ids() {
        let members = assignment.members(c);
        if members.is_empty() {
            return Err(TranseError::EmptyCategory(assignment.name(c).to_string()));
        }
        let row = cats.row_mut(c.0);
        for m in members {
            for (acc, x) in row.iter_mut().zip(table.entities.row(m.0)) {
                *acc += x;
            }
        }
        let n = members.len() as f64;
        row.iter_mut().for_each(|x| *x /= n);
    }
    table.categories = cats;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranseConfig {
    pub epochs: usize,
    pub margin: f64,
    pub lr: f64,
    /// Corrupted heads and corrupted tails drawn per positive, each.
    pub negatives_per_positive: usize,
    pub seed: u64,
}

impl Default for TranseConfig {
    fn default() -> Self {
        Self { epochs: 50, margin: 1.0, lr: 0.01, negatives_per_positive: 1, seed: 0 }
    }
}

/// `‖h + r − t‖₂`.
pub fn distance(h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    h.iter().zip(r).zip(t).map(|((h, r), t)| (h + r - t).powi(2)).sum::<f64>().sqrt()
}

/// Margin-ranking SGD over every triple (inverses included) with negatives
/// drawn from entities of the corrupted slot's kind and filtered against
/// true triples. Entity rows are unit-normalised before the first epoch and
/// after each one. Returns the table and the per-epoch mean loss.
pub fn transe_train(
    kg: &KnowledgeGraph,
    mut table: EmbeddingTable,
    cfg: &TranseConfig,
) -> Result<(EmbeddingTable, Vec<f64>), TranseError> {
    if !(cfg.margin > 0.0) {
        return Err(TranseError::Margin(cfg.margin));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let by_kind: Vec<Vec<EntityId>> = EntityKind::ALL.iter().map(|&k| kg.entities_of_kind(k).collect()).collect();
    let kind_index = |e: EntityId| EntityKind::ALL.iter().position(|&k| k == kg.kind(e)).unwrap();
    let mut order: Vec<Triple> = kg.triples().to_vec();
    let mut history = Vec::with_capacity(cfg.epochs);
    table.normalize_entities();
    let mut last_good = table.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for pos in &order {
            for _ in 0..cfg.negatives_per_positive {
                for corrupt_tail in [true, false] {
                    let slot = if corrupt_tail { pos.tail } else { pos.head };
                    let pool = &by_kind[kind_index(slot)];
                    let Some(neg) = sample_negative(kg, pos, corrupt_tail, pool, &mut rng) else { continue };
                    total += sgd_pair(&mut table, pos, &neg, cfg.margin, cfg.lr);
                    count += 1;
                }
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        if !loss.is_finite() || !table.entities.data.iter().chain(&table.relations.data).all(|x| x.is_finite()) {
            return Err(TranseError::Diverged { epoch, table: Box::new(last_good), history });
        }
        table.normalize_entities();
        history.push(loss);
        last_good = table.clone();
    }
    Ok((table, history))
}

fn sample_negative(
    kg: &KnowledgeGraph,
    pos: &Triple,
    corrupt_tail: bool,
    pool: &[EntityId],
    rng: &mut ChaCha8Rng,
) -> Option<Triple> {
    const TRIES: usize = 10;
    for _ in 0..TRIES {
        let e = *pool.choose(rng)?;
        let neg = if corrupt_tail { Triple { tail: e, ..*pos } } else { Triple { head: e, ..*pos } };
        if !kg.has_edge(neg.head, neg.relation, neg.tail) {
            return Some(neg);
        }
    }
    None
}

/// One hinge step; returns the loss before the update.
fn sgd_pair(table: &mut EmbeddingTable, pos: &Triple, neg: &Triple, margin: f64, lr: f64) -> f64 {
    let dim = table.dim;
    let residual = |t: &EmbeddingTable, x: &Triple| -> Vec<f64> {
        let (h, r, tl) = (t.entity(x.head), t.relation(x.relation), t.entity(x.tail));
        (0..dim).map(|k| h[k] + r[k] - tl[k]).collect()
    };
    let rp = residual(table, pos);
    let rn = residual(table, neg);
    let (dp, dn) = (l2_norm(&rp), l2_norm(&rn));
    let loss = margin + dp - dn;
    if loss <= 0.0 {
        return 0.0;
    }
    // ∂‖x‖/∂x = x/‖x‖; zero residuals contribute no direction.
    let unit = |v: &[f64], n: f64| -> Vec<f64> { if n > 0.0 { v.iter().map(|x| x / n).collect() } else { vec![0.0; v.len()] } };
    let (gp, gn) = (unit(&rp, dp), unit(&rn, dn));
    let mut step = |x: &Triple, g: &[f64], sign: f64| {
        let s = sign * lr;
        for k in 0..dim {
            table.entities.row_mut(x.head.0)[k] -= s * g[k];
            table.relations.row_mut(x.relation.0)[k] -= s * g[k];
            table.entities.row_mut(x.tail.0)[k] += s * g[k];
        }
    };
    step(pos, &gp, 1.0);
    step(neg, &gn, -1.0);
    loss
}

/// 1-based rank of the true tail among entities of its kind by ascending
/// distance; ties go to the lower id.
pub fn triple_rank(table: &EmbeddingTable, kg: &KnowledgeGraph, triple: &Triple) -> usize {
    let (h, r) = (table.entity(triple.head), table.relation(triple.relation));
    let target = distance(h, r, table.entity(triple.tail));
    1 + kg
        .entities_of_kind(kg.kind(triple.tail))
        .filter(|&e| e != triple.tail)
        .filter(|&e| {
            let d = distance(h, r, table.entity(e));
            d < target || (d == target && e < triple.tail)
        })
        .count()
}

pub fn mean_rank(table: &EmbeddingTable, kg: &KnowledgeGraph, triples: &[Triple]) -> f64 {
    if triples.is_empty() {
        return 0.0;
    }
    triples.iter().map(|t| triple_rank(table, kg, t) as f64).sum::<f64>() / triples.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::synth::{generate_synthetic, SynthConfig};
    use crate::kg::KgBuilder;

    fn toy() -> (KnowledgeGraph, CategoryAssignment) {
        let mut b = KgBuilder::new();
        let u = b.add_entity("u", EntityKind::User).unwrap();
        let items: Vec<_> = (0..3).map(|k| b.add_entity(&format!("i{k}"), EntityKind::Item).unwrap()).collect();
        let br = b.add_entity("b", EntityKind::Brand).unwrap();
        let p = b.relation_id("purchase").unwrap();
        let pb = b.relation_id("produced_by").unwrap();
        b.add_triple_ids(u, p, items[0]).unwrap();
        for &i in &items {
            b.add_triple_ids(i, pb, br).unwrap();
        }
        let kg = b.build();
        let a = CategoryAssignment::from_pairs(
            &kg,
            vec![(items[0], "A".into()), (items[1], "A".into()), (items[2], "A".into()), (items[2], "B".into())],
        )
        .unwrap();
        (kg, a)
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let (kg, a) = toy();
        let t = init_embeddings(&kg, &a, 100, 7).unwrap();
        let bound = 6.0 / 10.0;
        assert_eq!(t.entities.dim, 100);
        assert!(t.entities.data.iter().chain(&t.relations.data).all(|x| x.abs() <= bound));
        assert_eq!(t, init_embeddings(&kg, &a, 100, 7).unwrap());
        assert_ne!(t.entities, init_embeddings(&kg, &a, 100, 8).unwrap().entities);
    }

    #[test]
    fn zero_dimension_is_rejected() {
        let (kg, a) = toy();
        assert!(matches!(init_embeddings(&kg, &a, 0, 0), Err(TranseError::ZeroDimension)));
    }

    #[test]
    fn identical_head_and_tail_with_zero_relation_is_distance_zero() {
        assert_eq!(distance(&[0.3, -0.2], &[0.0, 0.0], &[0.3, -0.2]), 0.0);
    }

    #[test]
    fn zero_epochs_only_normalises() {
        let (kg, a) = toy();
        let t = init_embeddings(&kg, &a, 8, 1).unwrap();
        let cfg = TranseConfig { epochs: 0, ..TranseConfig::default() };
        let (trained, history) = transe_train(&kg, t.clone(), &cfg).unwrap();
        assert!(history.is_empty());
        assert_eq!(trained.relations, t.relations);
        for e in 0..kg.num_entities() {
            let n = l2_norm(t.entities.row(e));
            for (x, y) in trained.entities.row(e).iter().zip(t.entities.row(e)) {
                assert!((x - y / n).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn non_positive_margin_is_rejected() {
        let (kg, a) = toy();
        let t = init_embeddings(&kg, &a, 4, 1).unwrap();
        let cfg = TranseConfig { margin: 0.0, ..TranseConfig::default() };
        assert!(matches!(transe_train(&kg, t, &cfg), Err(TranseError::Margin(_))));
    }

    #[test]
    fn category_rows_are_member_means() {
        let (kg, a) = toy();
        let t = init_embeddings(&kg, &a, 5, 3).unwrap();
        let ca = a.category_id("A").unwrap();
        let cb = a.category_id("B").unwrap();
        for k in 0..5 {
            let sum: f64 = a.members(ca).iter().map(|m| t.entity(*m)[k]).sum();
            assert!((t.category(ca)[k] - sum / 3.0).abs() < 1e-15);
        }
        assert_eq!(t.category(cb), t.entity(kg.entity_id("i2").unwrap()));
    }

    #[test]
    fn opposite_members_average_to_zero() {
        let (kg, _) = toy();
        let (i0, i1) = (kg.entity_id("i0").unwrap(), kg.entity_id("i1").unwrap());
        let i2 = kg.entity_id("i2").unwrap();
        let a = CategoryAssignment::from_pairs(&kg, vec![(i0, "A".into()), (i1, "A".into()), (i2, "B".into())]).unwrap();
        let mut t = init_embeddings(&kg, &a, 3, 0).unwrap();
        t.entities.row_mut(i0.0).copy_from_slice(&[1.0, -2.0, 0.5]);
        t.entities.row_mut(i1.0).copy_from_slice(&[-1.0, 2.0, -0.5]);
        let t = category_embedding(t, &a).unwrap();
        assert_eq!(t.category(a.category_id("A").unwrap()), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn all_zero_table_ranks_by_id() {
        let (kg, a) = toy();
        let mut t = init_embeddings(&kg, &a, 4, 0).unwrap();
        t.entities.data.iter_mut().chain(t.relations.data.iter_mut()).for_each(|x| *x = 0.0);
        let u = kg.entity_id("u").unwrap();
        let p = kg.purchase();
        for (k, name) in ["i0", "i1", "i2"].iter().enumerate() {
            let tail = kg.entity_id(name).unwrap();
            assert_eq!(triple_rank(&t, &kg, &Triple { head: u, relation: p, tail }), k + 1);
        }
    }

    #[test]
    fn unique_minimiser_ranks_first() {
        let (kg, a) = toy();
        let mut t = init_embeddings(&kg, &a, 2, 0).unwrap();
        let u = kg.entity_id("u").unwrap();
        let i1 = kg.entity_id("i1").unwrap();
        t.entities.row_mut(u.0).copy_from_slice(&[0.0, 0.0]);
        t.relations.row_mut(kg.purchase().0).copy_from_slice(&[0.0, 0.0]);
        t.entities.row_mut(i1.0).copy_from_slice(&[0.0, 0.0]);
        assert_eq!(triple_rank(&t, &kg, &Triple { head: u, relation: kg.purchase(), tail: i1 }), 1);
    }

    #[test]
    fn training_loss_trends_down() {
        let out = generate_synthetic(&SynthConfig::clustered(), 2).unwrap();
        let kg = out.dataset.training_graph();
        let t = init_embeddings(&kg, &out.dataset.assignment, 16, 2).unwrap();
        let cfg = TranseConfig { epochs: 20, ..TranseConfig::default() };
        let (_, h) = transe_train(&kg, t, &cfg).unwrap();
        assert!(h.last().unwrap() < &h[0], "{h:?}");
    }
}
