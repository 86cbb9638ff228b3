//! Item representations: gated propagation over typed neighbours followed by
//! attention over neighbouring categories.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kg::{item_category_neighbors, CategoryAssignment, CategoryId, Edge, EntityId, EntityKind, KgError, KnowledgeGraph, RelationId};
use crate::numcore::{Graph, NumError, ParamId, ParamStore, Tensor, Var};
use crate::transe::EmbeddingTable;

#[derive(Debug, thiserror::Error)]
pub enum CggnnError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error("category attention needs at least one category")]
    NoCategories,
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CggnnConfig {
    pub ggnn_layers: usize,
    pub cgan_layers: usize,
    /// Weight of the category context in the final representation.
    pub delta: f64,
    pub leaky_slope: f64,
    pub neighbor_cap: usize,
    pub seed: u64,
}

impl Default for CggnnConfig {
    fn default() -> Self {
        Self { ggnn_layers: 3, cgan_layers: 2, delta: 0.4, leaky_slope: 0.2, neighbor_cap: 25, seed: 0 }
    }
}

impl CggnnConfig {
    pub fn validate(&self) -> Result<(), CggnnError> {
        if self.ggnn_layers == 0 || self.cgan_layers == 0 {
            return Err(CggnnError::Config("layer counts must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(CggnnError::Config(format!("delta {} outside [0, 1]", self.delta)));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(CggnnError::Config(format!("leaky slope {} outside (0, 1)", self.leaky_slope)));
        }
        if self.neighbor_cap == 0 {
            return Err(CggnnError::Config("neighbor cap must be positive".into()));
        }
        Ok(())
    }
}

/// Parameters of one propagation + gating layer.
#[derive(Clone, Copy, Debug)]
pub struct GgnnLayer {
    /// `d × 4d`, scores `[item ⊕ neighbour ⊕ relation ⊕ purchase]`.
    pub w1: ParamId,
    /// `1 × d`.
    pub w2: ParamId,
    pub b: ParamId,
    pub w_in: ParamId,
    pub w_out: ParamId,
    pub wz1: ParamId,
    pub wself: ParamId,
    pub wv1: ParamId,
    pub wv2: ParamId,
    pub wvh1: ParamId,
    pub wvh2: ParamId,
}

const LAYER_MATRICES: [&str; 11] = ["w1", "w2", "b", "w_in", "w_out", "wz1", "wself", "wv1", "wv2", "wvh1", "wvh2"];

#[derive(Clone, Debug)]
pub struct Cggnn {
    pub dim: usize,
    pub layers: Vec<GgnnLayer>,
    /// `1 × 2d` attention vector per category layer.
    pub cgan: Vec<ParamId>,
    pub delta: f64,
    pub leaky_slope: f64,
}

impl Cggnn {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, cfg: &CggnnConfig, rng: &mut R) -> Result<Self, CggnnError> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(cfg.ggnn_layers);
        for k in 0..cfg.ggnn_layers {
            let p = |n: &str| format!("cggnn.layer{k}.{n}");
            let w1 = store.add_xavier(p("w1"), dim, 4 * dim, rng)?;
            let w2 = store.add_xavier(p("w2"), 1, dim, rng)?;
            let b = store.add(p("b"), Tensor::scalar(0.0))?;
            let mut sq = |n: &str| store.add_xavier(p(n), dim, dim, rng);
            layers.push(GgnnLayer {
                w1,
                w2,
                b,
                w_in: sq("w_in")?,
                w_out: sq("w_out")?,
                wz1: sq("wz1")?,
                wself: sq("wself")?,
                wv1: sq("wv1")?,
                wv2: sq("wv2")?,
                wvh1: sq("wvh1")?,
                wvh2: sq("wvh2")?,
            });
        }
        let mut cgan = Vec::with_capacity(cfg.cgan_layers);
        for m in 0..cfg.cgan_layers {
            cgan.push(store.add_xavier(format!("cggnn.cgan{m}.w_ic"), 1, 2 * dim, rng)?);
        }
        Ok(Self { dim, layers, cgan, delta: cfg.delta, leaky_slope: cfg.leaky_slope })
    }

    /// Binds to parameters already in `store`, e.g. after loading a checkpoint.
    pub fn bind(store: &ParamStore, cfg: &CggnnConfig) -> Result<Self, CggnnError> {
        cfg.validate()?;
        let get = |name: String| store.id(&name).ok_or(NumError::MissingParam(name));
        let mut layers = Vec::new();
        for k in 0..cfg.ggnn_layers {
            let ids: Vec<ParamId> =
                LAYER_MATRICES.iter().map(|n| get(format!("cggnn.layer{k}.{n}"))).collect::<Result<_, _>>()?;
            layers.push(GgnnLayer {
                w1: ids[0],
                w2: ids[1],
                b: ids[2],
                w_in: ids[3],
                w_out: ids[4],
                wz1: ids[5],
                wself: ids[6],
                wv1: ids[7],
                wv2: ids[8],
                wvh1: ids[9],
                wvh2: ids[10],
            });
        }
        let cgan = (0..cfg.cgan_layers).map(|m| get(format!("cggnn.cgan{m}.w_ic"))).collect::<Result<Vec<_>, _>>()?;
        let dim = store.get(layers[0].w1).rows();
        Ok(Self { dim, layers, cgan, delta: cfg.delta, leaky_slope: cfg.leaky_slope })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend([l.w1, l.w2, l.b, l.w_in, l.w_out, l.wz1, l.wself, l.wv1, l.wv2, l.wvh1, l.wvh2]);
        }
        out.extend(&self.cgan);
        out
    }
}

/// `t = σ(W1 [h_vi ⊕ h_ej ⊕ h_r ⊕ h_rp])`.
pub fn triplet_repr(g: &mut Graph<'_>, layer: &GgnnLayer, h_vi: Var, h_ej: Var, h_r: Var, h_rp: Var) -> Result<Var, NumError> {
    let x = g.concat(&[h_vi, h_ej, h_r, h_rp])?;
    let w1 = g.param(layer.w1)?;
    let pre = g.matvec(w1, x)?;
    g.sigmoid(pre)
}

/// `α = σ(W2 t + b)`, a one-element tensor.
pub fn relation_attention(g: &mut Graph<'_>, layer: &GgnnLayer, t: Var) -> Result<Var, NumError> {
    let w2 = g.param(layer.w2)?;
    let b = g.param(layer.b)?;
    let s = g.matvec(w2, t)?;
    let s = g.add(s, b)?;
    g.sigmoid(s)
}

/// Whether a neighbour was reached by an inverse (incoming) or forward
/// (outgoing) relation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    In,
    Out,
}

/// One neighbour as seen from the item: its current vector and the vector of
/// the relation connecting them.
#[derive(Clone, Copy, Debug)]
pub struct NeighborInput {
    pub direction: Direction,
    pub entity: Var,
    pub relation: Var,
}

/// `n = Σ_in α W_in (h_e ∘ h_r) + Σ_out α W_out (h_e ∘ h_r)`; incoming terms
/// are summed first, each side in the given order. An item without
/// neighbours gets the zero vector.
pub fn propagate(
    g: &mut Graph<'_>,
    layer: &GgnnLayer,
    h_item: Var,
    neighbors: &[NeighborInput],
    h_rp: Var,
) -> Result<Var, NumError> {
    let dim = g.value(h_item).len();
    let mut terms = Vec::with_capacity(neighbors.len());
    for dir in [Direction::In, Direction::Out] {
        for nb in neighbors.iter().filter(|n| n.direction == dir) {
            let t = triplet_repr(g, layer, h_item, nb.entity, nb.relation, h_rp)?;
            let alpha = relation_attention(g, layer, t)?;
            let w = g.param(if dir == Direction::In { layer.w_in } else { layer.w_out })?;
            let er = g.mul(nb.entity, nb.relation)?;
            let msg = g.matvec(w, er)?;
            terms.push(g.scale_by(msg, alpha)?);
        }
    }
    if terms.is_empty() {
        return Ok(g.constant(Tensor::zeros(&[dim])));
    }
    g.add_n(&terms)
}

/// Gated update of the previous vector with the aggregated message.
pub fn gated_update(g: &mut Graph<'_>, layer: &GgnnLayer, n: Var, h_prev: Var) -> Result<Var, NumError> {
    let lin = |g: &mut Graph<'_>, w: ParamId, x: Var| -> Result<Var, NumError> {
        let w = g.param(w)?;
        g.matvec(w, x)
    };
    let a = lin(g, layer.wz1, n)?;
    let b = lin(g, layer.wself, h_prev)?;
    let z = g.add(a, b)?;
    let z = g.sigmoid(z)?;

    let a = lin(g, layer.wv1, n)?;
    let b = lin(g, layer.wv2, h_prev)?;
    let r = g.add(a, b)?;
    let r = g.sigmoid(r)?;

    let a = lin(g, layer.wvh1, n)?;
    let rh = g.mul(r, h_prev)?;
    let b = lin(g, layer.wvh2, rh)?;
    let v = g.add(a, b)?;
    let v = g.tanh(v)?;

    // (1 − z)∘h + z∘v, written as h − z∘h + z∘v
    let zh = g.mul(z, h_prev)?;
    let h = g.sub(h_prev, zh)?;
    let zv = g.mul(z, v)?;
    g.add(h, zv)
}

/// Softmax over `leaky(W_ic [h̃ ⊕ h_c])` for each category vector.
pub fn category_attention(
    g: &mut Graph<'_>,
    w_ic: ParamId,
    slope: f64,
    h_tilde: Var,
    categories: &[Var],
) -> Result<Var, CggnnError> {
    if categories.is_empty() {
        return Err(CggnnError::NoCategories);
    }
    let w = g.param(w_ic)?;
    let mut scores = Vec::with_capacity(categories.len());
    for &c in categories {
        let x = g.concat(&[h_tilde, c])?;
        let s = g.matvec(w, x)?;
        scores.push(g.leaky_relu(s, slope)?);
    }
    let beta = g.concat(&scores)?;
    Ok(g.softmax(beta)?)
}

/// `Σ_x α_x h_{c_x}`.
pub fn category_context(g: &mut Graph<'_>, weights: Var, categories: &[Var]) -> Result<Var, NumError> {
    let mut terms = Vec::with_capacity(categories.len());
    for (x, &c) in categories.iter().enumerate() {
        let a = g.index(weights, x)?;
        terms.push(g.scale_by(c, a)?);
    }
    g.add_n(&terms)
}

/// Sampled neighbourhoods and category neighbours of every item.
#[derive(Clone, Debug)]
pub struct Neighborhood {
    pub items: Vec<EntityId>,
    /// Per entity, the capped (incoming, outgoing) edges; empty for non-items.
    pub edges: Vec<(Vec<Edge>, Vec<Edge>)>,
    pub categories: Vec<Vec<CategoryId>>,
    pub members: Vec<Vec<EntityId>>,
    pub purchase: RelationId,
}

impl Neighborhood {
    /// Users are never neighbours. Up to `cap` edges per direction are kept;
    /// when a side is larger it is sampled with a per-item seeded stream and
    /// the kept edges stay in adjacency order.
    pub fn build(kg: &KnowledgeGraph, assignment: &CategoryAssignment, cap: usize, seed: u64) -> Result<Self, KgError> {
        let n = kg.num_entities();
        let items: Vec<EntityId> = kg.entities_of_kind(EntityKind::Item).collect();
        let mut edges = vec![(Vec::new(), Vec::new()); n];
        let mut categories = vec![Vec::new(); n];
        for &item in &items {
            let (mut inc, mut out) = (Vec::new(), Vec::new());
            for &e in kg.out_edges(item) {
                if kg.kind(e.target) == EntityKind::User {
                    continue;
                }
                if kg.relation(e.relation).is_inverse {
                    inc.push(e);
                } else {
                    out.push(e);
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (item.0 as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            edges[item.0] = (cap_edges(inc, cap, &mut rng), cap_edges(out, cap, &mut rng));
            categories[item.0] = item_category_neighbors(kg, assignment, item)?.into_iter().collect();
        }
        let members = assignment.ids().map(|c| assignment.members(c).to_vec()).collect();
        Ok(Self { items, edges, categories, members, purchase: kg.purchase() })
    }
}

fn cap_edges(edges: Vec<Edge>, cap: usize, rng: &mut ChaCha8Rng) -> Vec<Edge> {
    if edges.len() <= cap {
        return edges;
    }
    let mut keep = sample(rng, edges.len(), cap).into_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| edges[i]).collect()
}

/// Input embeddings bound into a graph, one node per row.
#[derive(Clone, Debug)]
pub struct EmbedVars {
    pub entities: Vec<Var>,
    pub relations: Vec<Var>,
    pub categories: Vec<Var>,
}

impl EmbedVars {
    pub fn constants(g: &mut Graph<'_>, table: &EmbeddingTable) -> Self {
        let mut rows = |m: &crate::transe::Matrix| (0..m.rows).map(|r| g.vector(m.row(r).to_vec())).collect();
        Self { entities: rows(&table.entities), relations: rows(&table.relations), categories: rows(&table.categories) }
    }

    /// Binds rows previously registered with [`EmbedParams::register`].
    pub fn params(g: &mut Graph<'_>, ids: &EmbedParams) -> Result<Self, NumError> {
        let mut bind = |v: &[ParamId]| v.iter().map(|&id| g.param(id)).collect::<Result<Vec<_>, _>>();
        Ok(Self { entities: bind(&ids.entities)?, relations: bind(&ids.relations)?, categories: bind(&ids.categories)? })
    }
}

/// Embedding rows registered as trainable parameters (used to check
/// gradients with respect to the inputs).
#[derive(Clone, Debug)]
pub struct EmbedParams {
    pub entities: Vec<ParamId>,
    pub relations: Vec<ParamId>,
    pub categories: Vec<ParamId>,
}

impl EmbedParams {
    pub fn register(store: &mut ParamStore, table: &EmbeddingTable) -> Result<Self, NumError> {
        let mut add = |prefix: &str, m: &crate::transe::Matrix| {
            (0..m.rows).map(|r| store.add(format!("{prefix}{r}"), Tensor::vector(m.row(r).to_vec()))).collect::<Result<Vec<_>, _>>()
        };
        Ok(Self {
            entities: add("embed.entity", &table.entities)?,
            relations: add("embed.relation", &table.relations)?,
            categories: add("embed.category", &table.categories)?,
        })
    }
}

/// Per-entity nodes of one forward pass. Only items have entries.
#[derive(Clone, Debug)]
pub struct CggnnOutput {
    /// Gated-propagation output after the last layer.
    pub ggnn: Vec<Option<Var>>,
    /// Final representation `h̃ + δ·h_vc`.
    pub output: Vec<Option<Var>>,
}

impl CggnnOutput {
    /// Item output, or the entity's raw embedding node for any other kind.
    pub fn vector(&self, emb: &EmbedVars, e: EntityId) -> Var {
        self.output[e.0].unwrap_or(emb.entities[e.0])
    }
}

impl Cggnn {
    /// Full-graph pass, layer by layer. Layer `k` of an item reads layer
    /// `k − 1` of its neighbours, so the result equals a per-item pass with
    /// the receptive field truncated at `K` hops. Relation vectors are the
    /// input embeddings at every layer.
    pub fn forward(&self, g: &mut Graph<'_>, nbr: &Neighborhood, emb: &EmbedVars) -> Result<CggnnOutput, CggnnError> {
        let n = emb.entities.len();
        let h_rp = emb.relations[nbr.purchase.0];
        let mut prev = emb.entities.clone();
        for layer in &self.layers {
            let mut next = prev.clone();
            for &item in &nbr.items {
                let (inc, out) = &nbr.edges[item.0];
                let inputs: Vec<NeighborInput> = inc
                    .iter()
                    .map(|e| (Direction::In, e))
                    .chain(out.iter().map(|e| (Direction::Out, e)))
                    .map(|(direction, e)| NeighborInput {
                        direction,
                        entity: prev[e.target.0],
                        relation: emb.relations[e.relation.0],
                    })
                    .collect();
                let msg = propagate(g, layer, prev[item.0], &inputs, h_rp)?;
                next[item.0] = gated_update(g, layer, msg, prev[item.0])?;
            }
            prev = next;
        }
        let h_tilde = prev;

        let mut cat_vecs = emb.categories.clone();
        let mut context: Vec<Option<Var>> = vec![None; n];
        for (m, &w_ic) in self.cgan.iter().enumerate() {
            for &item in &nbr.items {
                let cats: Vec<Var> = nbr.categories[item.0].iter().map(|c| cat_vecs[c.0]).collect();
                let weights = category_attention(g, w_ic, self.leaky_slope, h_tilde[item.0], &cats)?;
                context[item.0] = Some(category_context(g, weights, &cats)?);
            }
            if m + 1 < self.cgan.len() {
                // Next layer's category vectors: member means of h̃ + h_vc.
                let mut layer_out = vec![None; n];
                for &item in &nbr.items {
                    layer_out[item.0] = Some(g.add(h_tilde[item.0], context[item.0].unwrap())?);
                }
                for (c, members) in nbr.members.iter().enumerate() {
                    let xs: Vec<Var> = members.iter().map(|e| layer_out[e.0].unwrap()).collect();
                    cat_vecs[c] = g.mean(&xs)?;
                }
            }
        }

        let mut ggnn = vec![None; n];
        let mut output = vec![None; n];
        for &item in &nbr.items {
            let h = h_tilde[item.0];
            ggnn[item.0] = Some(h);
            output[item.0] = Some(if self.delta == 0.0 {
                h
            } else {
                let scaled = g.scale(context[item.0].unwrap(), self.delta)?;
                g.add(h, scaled)?
            });
        }
        Ok(CggnnOutput { ggnn, output })
    }

    /// Values of every entity's representation: CGGNN output for items, the
    /// table row otherwise. No gradients are recorded beyond the pass itself.
    pub fn representations(&self, store: &ParamStore, nbr: &Neighborhood, table: &EmbeddingTable) -> Result<Vec<Vec<f64>>, CggnnError> {
        let mut g = Graph::with_params(store);
        let emb = EmbedVars::constants(&mut g, table);
        let out = self.forward(&mut g, nbr, &emb)?;
        Ok((0..table.entities.rows).map(|e| g.value(out.vector(&emb, EntityId(e))).data().to_vec()).collect())
    }

    /// Representation of a single entity (computed with the full-graph pass).
    pub fn item_representation(
        &self,
        store: &ParamStore,
        nbr: &Neighborhood,
        table: &EmbeddingTable,
        item: EntityId,
    ) -> Result<Vec<f64>, CggnnError> {
        Ok(self.representations(store, nbr, table)?.swap_remove(item.0))
    }
}

/// Item vectors stamped with the optimiser step they were computed at.
#[derive(Clone, Debug, Default)]
pub struct ItemReprCache {
    stamp: Option<u64>,
    vectors: HashMap<EntityId, Vec<f64>>,
}

impl ItemReprCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_stale(&self, step: u64) -> bool {
        self.stamp != Some(step)
    }

    pub fn get(&self, item: EntityId, step: u64) -> Option<&[f64]> {
        if self.is_stale(step) {
            return None;
        }
        self.vectors.get(&item).map(Vec::as_slice)
    }

    pub fn fill(&mut self, step: u64, vectors: impl IntoIterator<Item = (EntityId, Vec<f64>)>) {
        self.vectors = vectors.into_iter().collect();
        self.stamp = Some(step);
    }

    /// Returns the cached vectors, recomputing them if parameters moved.
    pub fn refresh(
        &mut self,
        model: &Cggnn,
        store: &ParamStore,
        nbr: &Neighborhood,
        table: &EmbeddingTable,
    ) -> Result<&HashMap<EntityId, Vec<f64>>, CggnnError> {
        if self.is_stale(store.step()) {
            let reps = model.representations(store, nbr, table)?;
            let items = nbr.items.iter().map(|&i| (i, reps[i.0].clone()));
            self.fill(store.step(), items.collect::<Vec<_>>());
        }
        Ok(&self.vectors)
    }
}
