//! Beam-search inference over a trained policy, ranking, path export and
//! top-K metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cggnn::Neighborhood;
use crate::darl::{
    arrival_var, argmax, category_step, entity_rows, episode_seed, next_category, next_entity, start_category,
    user_contexts, valid_actions_entity, Action, CategoryState, DarlError, DarlModel, EntityState, Env, History,
    TapeVectors, Trajectory, UserContext,
};
use crate::kg::{CategoryAssignment, CategoryId, EntityId, EntityKind, InteractionSplit, KgError, KnowledgeGraph, RelationId};
use crate::numcore::{Graph, ParamStore};
use crate::transe::distance;

/// One hop; `relation` is `None` for a self-loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hop {
    pub relation: Option<RelationId>,
    pub entity: EntityId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationPath {
    pub user: EntityId,
    /// Exactly `L` hops, self-loops included.
    pub hops: Vec<Hop>,
    /// `L + 1` categories, start first.
    pub categories: Vec<CategoryId>,
    /// Sum of the entity policy's log-probabilities along the path.
    pub score: f64,
}

impl ExplanationPath {
    pub fn terminal(&self) -> EntityId {
        self.hops.last().map_or(self.user, |h| h.entity)
    }

    /// Hops with self-loops removed.
    pub fn moves(&self) -> Vec<(RelationId, EntityId)> {
        self.hops.iter().filter_map(|h| h.relation.map(|r| (r, h.entity))).collect()
    }

    /// Every displayed hop is a triple of `kg`.
    pub fn is_valid(&self, kg: &KnowledgeGraph) -> bool {
        let mut at = self.user;
        for (r, e) in self.moves() {
            if !kg.has_edge(at, r, e) {
                return false;
            }
            at = e;
        }
        true
    }

    pub fn from_trajectory(t: &Trajectory) -> Self {
        let hops = t
            .steps
            .iter()
            .map(|s| match s.entity_actions[s.entity_choice] {
                Action::EntityMove(r, e) => Hop { relation: Some(r), entity: e },
                _ => Hop { relation: None, entity: s.entity_state.entity },
            })
            .collect();
        let mut categories: Vec<CategoryId> = t.steps.iter().map(|s| s.category_state.current).collect();
        categories.push(t.final_category);
        Self { user: t.user, hops, categories, score: t.steps.iter().map(|s| s.entity_log_prob).sum() }
    }
}

/// Default per-step beam widths, truncated or padded with 1 to `max_len`.
pub fn default_widths(max_len: usize) -> Vec<usize> {
    let base = [10, 5, 5, 1, 1, 1, 1];
    (0..max_len).map(|l| base.get(l).copied().unwrap_or(1)).collect()
}

#[derive(Clone)]
struct Beam {
    cs: CategoryState,
    es: EntityState,
    history: Option<History>,
    hops: Vec<Hop>,
    categories: Vec<CategoryId>,
    score: f64,
}

/// Expands the `widths[l]` most likely entity actions of every beam at step
/// `l`; the category agent takes its most likely action on each beam.
/// Returns every full-length path.
pub fn beam_search(
    g: &mut Graph<'_>,
    model: &DarlModel,
    env: &Env<'_>,
    vecs: &TapeVectors,
    user: &UserContext,
    widths: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ExplanationPath>, DarlError> {
    if widths.iter().any(|&w| w == 0) {
        return Err(DarlError::Config("beam widths must be positive".into()));
    }
    let policy = &model.policy;
    let start = start_category(user, rng);
    let mut beams = vec![Beam {
        cs: CategoryState { user: user.user, start, current: start, step: 0 },
        es: EntityState::start(user.user),
        history: None,
        hops: Vec::new(),
        categories: vec![start],
        score: 0.0,
    }];
    for &width in widths {
        let mut next = Vec::with_capacity(beams.len() * width);
        for b in &beams {
            let ev = category_step(g, policy, env, vecs, user, b.history.as_ref(), &b.cs, &b.es)?;
            let ci = argmax(&ev.category_probs);
            let cs = next_category(&b.cs, ev.category_actions[ci]);
            let actions = valid_actions_entity(&b.es, env.kg, env.table, env.entity_cap);
            let (rels, ents) = entity_rows(vecs, &b.es, &actions);
            let arrival = arrival_var(vecs, &b.es);
            let logits = policy.entity_logits(
                g,
                vecs.entities[b.es.entity.0],
                arrival,
                ev.history.y_entity,
                ev.category_rows[ci],
                &rels,
                &ents,
            )?;
            let lp = g.log_softmax(logits)?;
            let lp = g.value(lp).data().to_vec();
            let mut order: Vec<usize> = (0..actions.len()).collect();
            order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            for &k in order.iter().take(width) {
                let es = next_entity(&b.es, actions[k]);
                let mut hops = b.hops.clone();
                hops.push(match actions[k] {
                    Action::EntityMove(r, e) => Hop { relation: Some(r), entity: e },
                    _ => Hop { relation: None, entity: b.es.entity },
                });
                let mut categories = b.categories.clone();
                categories.push(cs.current);
                next.push(Beam { cs, es, history: Some(ev.history), hops, categories, score: b.score + lp[k] });
            }
        }
        beams = next;
    }
    Ok(beams
        .into_iter()
        .map(|b| ExplanationPath { user: user.user, hops: b.hops, categories: b.categories, score: b.score })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub item: EntityId,
    pub score: f64,
    pub path: ExplanationPath,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecommendationList {
    pub user: EntityId,
    pub items: Vec<Recommendation>,
}

/// Item-terminal paths, train items removed, best path per item, sorted by
/// score (ties to the lower item id) and cut to `k`.
pub fn rank(candidates: &[ExplanationPath], user: EntityId, kg: &KnowledgeGraph, train: &[EntityId], k: usize) -> RecommendationList {
    let mut best: BTreeMap<EntityId, &ExplanationPath> = BTreeMap::new();
    for p in candidates {
        let item = p.terminal();
        if kg.kind(item) != EntityKind::Item || train.contains(&item) {
            continue;
        }
        match best.get(&item) {
            Some(q) if q.score >= p.score => {}
            _ => {
                best.insert(item, p);
            }
        }
    }
    let mut items: Vec<Recommendation> =
        best.into_iter().map(|(item, p)| Recommendation { item, score: p.score, path: p.clone() }).collect();
    items.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item.cmp(&b.item)));
    items.truncate(k);
    RecommendationList { user, items }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub widths: Vec<usize>,
    pub top_k: usize,
    /// Weight of the embedding plausibility `−‖u + r_purchase − item‖` added
    /// to each path's log-probability before ranking. 0 ranks on the policy
    /// alone.
    pub blend: f64,
}

impl InferenceConfig {
    pub fn new(max_len: usize) -> Self {
        Self { widths: default_widths(max_len), top_k: 10, blend: 0.0 }
    }

    pub fn validate(&self, max_len: usize) -> Result<(), DarlError> {
        if self.widths.len() != max_len || self.widths.contains(&0) {
            return Err(DarlError::Config(format!("need {max_len} positive beam widths, got {:?}", self.widths)));
        }
        if self.top_k == 0 {
            return Err(DarlError::Config("top-k must be at least 1".into()));
        }
        if !self.blend.is_finite() {
            return Err(DarlError::Config("blend weight must be finite".into()));
        }
        Ok(())
    }
}

/// Adds `weight · −‖u + r_purchase − item‖` to every path ending on an item.
pub fn blend_embedding_scores(paths: &mut [ExplanationPath], env: &Env<'_>, weight: f64) {
    if weight == 0.0 {
        return;
    }
    let purchase = env.table.relation(env.kg.purchase());
    for p in paths.iter_mut() {
        let item = p.terminal();
        if env.kg.kind(item) == EntityKind::Item {
            p.score -= weight * distance(env.table.entity(p.user), purchase, env.table.entity(item));
        }
    }
}

/// Runs inference for every trainable user. The CGGNN is evaluated once and
/// its outputs reused; users are independent, so `workers > 1` gives the
/// same lists.
#[allow(clippy::too_many_arguments)]
pub fn recommend_all(
    store: &ParamStore,
    model: &DarlModel,
    env: &Env<'_>,
    nbr: &Neighborhood,
    split: &InteractionSplit,
    cfg: &InferenceConfig,
    seed: u64,
    workers: usize,
) -> Result<BTreeMap<EntityId, RecommendationList>, DarlError> {
    cfg.validate(cfg.widths.len())?;
    let reps = model.cggnn.representations(store, nbr, env.table)?;
    let users = user_contexts(split, env)?;
    let one = |u: &UserContext| -> Result<RecommendationList, DarlError> {
        let mut g = Graph::with_params(store);
        let vecs = TapeVectors::with_values(&mut g, &model.policy, &reps, env.table)?;
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, 0, u.user.0));
        let mut paths = beam_search(&mut g, model, env, &vecs, u, &cfg.widths, &mut rng)?;
        blend_embedding_scores(&mut paths, env, cfg.blend);
        Ok(rank(&paths, u.user, env.kg, &u.train_items, cfg.top_k))
    };
    let lists: Vec<RecommendationList> = if workers <= 1 {
        users.iter().map(one).collect::<Result<_, _>>()?
    } else {
        let per = users.len().div_ceil(workers).max(1);
        std::thread::scope(|s| {
            let handles: Vec<_> = users
                .chunks(per)
                .map(|part| s.spawn(move || part.iter().map(one).collect::<Result<Vec<_>, _>>()))
                .collect();
            let mut out = Vec::new();
            for h in handles {
                out.extend(h.join().expect("inference worker panicked")?);
            }
            Ok::<_, DarlError>(out)
        })?
    };
    Ok(lists.into_iter().map(|l| (l.user, l)).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ndcg: f64,
    pub recall: f64,
    pub hit_ratio: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub mean: Metrics,
    pub users: Vec<(EntityId, Metrics)>,
}

/// Binary-relevance metrics of one ranked list against a test set.
pub fn user_metrics(ranked: &[EntityId], test: &[EntityId], k: usize) -> Metrics {
    let hits: Vec<bool> = ranked.iter().take(k).map(|i| test.contains(i)).collect();
    let n_hits = hits.iter().filter(|&&h| h).count() as f64;
    let dcg: f64 = hits.iter().enumerate().filter(|(_, &h)| h).map(|(i, _)| 1.0 / ((i + 2) as f64).log2()).sum();
    let idcg: f64 = (0..k.min(test.len())).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
    Metrics {
        ndcg: if idcg > 0.0 { dcg / idcg } else { 0.0 },
        recall: if test.is_empty() { 0.0 } else { n_hits / test.len() as f64 },
        hit_ratio: if n_hits > 0.0 { 1.0 } else { 0.0 },
        precision: n_hits / k as f64,
    }
}

/// Macro-averages over users with a nonempty test set; a user without a
/// list scores zero.
pub fn evaluate(lists: &BTreeMap<EntityId, RecommendationList>, split: &InteractionSplit, k: usize) -> MetricsReport {
    let ranked = lists.iter().map(|(&u, l)| (u, l.items.iter().map(|r| r.item).collect())).collect();
    evaluate_ranked(&ranked, split, k)
}

/// [`evaluate`] over bare ranked item lists, e.g. read back from an export.
pub fn evaluate_ranked(lists: &BTreeMap<EntityId, Vec<EntityId>>, split: &InteractionSplit, k: usize) -> MetricsReport {
    let mut users = Vec::new();
    let mut sum = Metrics::default();
    for u in split.users() {
        let test = split.test(u);
        if test.is_empty() {
            continue;
        }
        let m = user_metrics(lists.get(&u).map_or(&[][..], Vec::as_slice), test, k);
        sum.ndcg += m.ndcg;
        sum.recall += m.recall;
        sum.hit_ratio += m.hit_ratio;
        sum.precision += m.precision;
        users.push((u, m));
    }
    let n = users.len().max(1) as f64;
    let mean = Metrics { ndcg: sum.ndcg / n, recall: sum.recall / n, hit_ratio: sum.hit_ratio / n, precision: sum.precision / n };
    MetricsReport { k, mean, users }
}

/// `entity -[relation]-> entity ...`, self-loops left out.
pub fn format_path(path: &ExplanationPath, kg: &KnowledgeGraph) -> String {
    let mut s = kg.entity(path.user).name.clone();
    for (r, e) in path.moves() {
        let _ = write!(s, " -[{}]-> {}", kg.relation(r).name, kg.entity(e).name);
    }
    s
}

pub fn format_recommendations(
    lists: &BTreeMap<EntityId, RecommendationList>,
    kg: &KnowledgeGraph,
    assignment: &CategoryAssignment,
) -> String {
    let mut out = String::new();
    for list in lists.values() {
        for r in &list.items {
            let cats: Vec<&str> = r.path.categories.iter().map(|&c| assignment.name(c)).collect();
            let _ = writeln!(
                out,
                "{}\t{}\t{:.6}\t{}\t{}",
                kg.entity(list.user).name,
                kg.entity(r.item).name,
                r.score,
                format_path(&r.path, kg),
                cats.join(" -> ")
            );
        }
    }
    out
}

pub fn export_paths(
    lists: &BTreeMap<EntityId, RecommendationList>,
    kg: &KnowledgeGraph,
    assignment: &CategoryAssignment,
    path: &Path,
) -> Result<(), KgError> {
    std::fs::write(path, format_recommendations(lists, kg, assignment))
        .map_err(|source| KgError::Io { path: path.display().to_string(), source })
}

/// One parsed line of a path export.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedRecommendation {
    pub user: EntityId,
    pub item: EntityId,
    pub score: f64,
    pub moves: Vec<(RelationId, EntityId)>,
    pub categories: Vec<CategoryId>,
}

pub fn parse_recommendations(
    text: &str,
    kg: &KnowledgeGraph,
    assignment: &CategoryAssignment,
) -> Result<Vec<ParsedRecommendation>, KgError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let bad = |msg: String| KgError::Malformed { file: "paths".into(), line: n + 1, msg };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad(format!("expected 5 fields, found {}", f.len())));
        }
        let entity = |name: &str| kg.entity_id(name).ok_or_else(|| bad(format!("unknown entity {name}")));
        let user = entity(f[0])?;
        let item = entity(f[1])?;
        let score: f64 = f[2].parse().map_err(|_| bad(format!("bad score {}", f[2])))?;
        let mut parts = f[3].split(" -[");
        let head = entity(parts.next().unwrap_or_default())?;
        if head != user {
            return Err(bad("path does not start at the user".into()));
        }
        let mut moves = Vec::new();
        for p in parts {
            let (r, e) = p.split_once("]-> ").ok_or_else(|| bad(format!("bad hop {p}")))?;
            let r = kg.relation_id(r).ok_or_else(|| bad(format!("unknown relation {r}")))?;
            moves.push((r, entity(e)?));
        }
        let categories = f[4]
            .split(" -> ")
            .map(|c| assignment.category_id(c).ok_or_else(|| bad(format!("unknown category {c}"))))
            .collect::<Result<_, _>>()?;
        out.push(ParsedRecommendation { user, item, score, moves, categories });
    }
    Ok(out)
}

pub fn metrics_table(report: &MetricsReport) -> String {
    let k = report.k;
    let m = &report.mean;
    let mut s = String::new();
    let _ = writeln!(s, "{:<14}{:>10}", "metric", "value");
    for (name, v) in [("NDCG", m.ndcg), ("Recall", m.recall), ("HR", m.hit_ratio), ("Precision", m.precision)] {
        let _ = writeln!(s, "{:<14}{:>10.4}", format!("{name}@{k}"), v);
    }
    let _ = writeln!(s, "{:<14}{:>10}", "users", report.users.len());
    s
}

pub fn metrics_tsv(report: &MetricsReport, kg: &KnowledgeGraph) -> String {
    let k = report.k;
    let mut s = format!("scope\tndcg@{k}\trecall@{k}\thr@{k}\tprecision@{k}\n");
    let row = |s: &mut String, scope: &str, m: &Metrics| {
        let _ = writeln!(s, "{scope}\t{:.6}\t{:.6}\t{:.6}\t{:.6}", m.ndcg, m.recall, m.hit_ratio, m.precision);
    };
    row(&mut s, "mean", &report.mean);
    for (u, m) in &report.users {
        row(&mut s, &format!("user:{}", kg.entity(*u).name), m);
    }
    s
}
