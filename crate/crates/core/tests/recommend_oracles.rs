mod support;

use std::collections::BTreeMap;

use cadrl::cggnn::{CggnnConfig, Neighborhood};
use cadrl::darl::*;
use cadrl::kg::synth::{generate_synthetic, SynthConfig};
use cadrl::kg::{build_category_graph, CategoryAssignment, CategoryGraph, CategoryId, EntityId, InteractionSplit, KnowledgeGraph, RelationId};
use cadrl::numcore::{Graph, ParamStore};
use cadrl::recommend::*;
use cadrl::transe::{category_embedding, init_embeddings, EmbeddingTable};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::random_fixture;

struct World {
    kg: KnowledgeGraph,
    assignment: CategoryAssignment,
    cgraph: CategoryGraph,
    table: EmbeddingTable,
    split: InteractionSplit,
}

impl World {
    fn new(kg: KnowledgeGraph, assignment: CategoryAssignment, split: InteractionSplit, dim: usize) -> Self {
        let cgraph = build_category_graph(&kg, &assignment).unwrap();
        let table = category_embedding(init_embeddings(&kg, &assignment, dim, 1).unwrap(), &assignment).unwrap();
        Self { kg, assignment, cgraph, table, split }
    }

    fn tiny(seed: u64) -> Self {
        let (kg, a) = random_fixture(seed, 6, 3);
        let u = kg.entity_id("u0").unwrap();
        let split = InteractionSplit::from_pairs(&[(u, kg.entity_id("i0").unwrap())], &[]);
        Self::new(kg, a, split, 3)
    }

    fn planted(seed: u64) -> Self {
        let out = generate_synthetic(&SynthConfig::planted(), seed).unwrap();
        let kg = out.dataset.training_graph();
        Self::new(kg, out.dataset.assignment, out.dataset.split, 6)
    }

    fn env(&self) -> Env<'_> {
        Env { kg: &self.kg, assignment: &self.assignment, cgraph: &self.cgraph, table: &self.table, category_cap: 10, entity_cap: 50 }
    }
}

fn model(dim: usize, seed: u64) -> (ParamStore, DarlModel, CggnnConfig) {
    let mut store = ParamStore::new();
    let ccfg = CggnnConfig { seed, ..CggnnConfig::default() };
    let m = DarlModel::new(&mut store, &PolicyConfig { dim, hidden: 0 }, &ccfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (store, m, ccfg)
}

#[test]
fn width_one_beam_is_the_greedy_rollout() {
    let w = World::planted(3);
    let env = w.env();
    let (store, m, ccfg) = model(6, 3);
    let nbr = Neighborhood::build(&w.kg, &w.assignment, ccfg.neighbor_cap, 0).unwrap();
    for u in user_contexts(&w.split, &env).unwrap().iter().take(5) {
        let mut g = Graph::with_params(&store);
        let vecs = m.tape_vectors(&mut g, &env, &nbr, None).unwrap();
        let paths = beam_search(&mut g, &m, &env, &vecs, u, &[1; 6], &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (t, _) = rollout(&mut g, &m.policy, &env, &vecs, u, &mut Greedy, 6, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(paths.len(), 1);
        let greedy = ExplanationPath::from_trajectory(&t);
        assert_eq!(paths[0].hops, greedy.hops);
        assert_eq!(paths[0].categories, greedy.categories);
        assert!((paths[0].score - greedy.score).abs() < 1e-12);
        assert!(paths[0].is_valid(&w.kg));
    }
}

/// Every hop sequence of length `len`, using out-edges minus the edge that
/// undoes the previous move, plus a self-loop that forgets the arrival.
fn enumerate(kg: &KnowledgeGraph, at: EntityId, back: Option<(RelationId, EntityId)>, len: usize) -> Vec<Vec<Hop>> {
    if len == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for e in kg.out_edges(at) {
        if Some((e.relation, e.target)) == back {
            continue;
        }
        for mut rest in enumerate(kg, e.target, Some((kg.relation(e.relation).inverse, at)), len - 1) {
            rest.insert(0, Hop { relation: Some(e.relation), entity: e.target });
            out.push(rest);
        }
    }
    for mut rest in enumerate(kg, at, None, len - 1) {
        rest.insert(0, Hop { relation: None, entity: at });
        out.push(rest);
    }
    out
}

#[test]
fn wide_beam_equals_exhaustive_enumeration() {
    for seed in 0..6u64 {
        let w = World::tiny(seed);
        assert!(w.kg.num_entities() <= 50);
        let env = w.env();
        let (store, m, ccfg) = model(3, seed);
        let nbr = Neighborhood::build(&w.kg, &w.assignment, ccfg.neighbor_cap, 0).unwrap();
        let u = &user_contexts(&w.split, &env).unwrap()[0];
        let mut g = Graph::with_params(&store);
        let vecs = m.tape_vectors(&mut g, &env, &nbr, None).unwrap();
        let paths = beam_search(&mut g, &m, &env, &vecs, u, &[50; 3], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut got: Vec<Vec<Hop>> = paths.iter().map(|p| p.hops.clone()).collect();
        let mut want = enumerate(&w.kg, u.user, None, 3);
        let key = |h: &Vec<Hop>| format!("{h:?}");
        got.sort_by_key(key);
        want.sort_by_key(key);
        assert_eq!(got, want, "seed {seed}");
        // Scores are log-probabilities of full paths, so they sum to one.
        let total: f64 = paths.iter().map(|p| p.score.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
}

#[test]
fn same_seed_gives_same_recommendations() {
    let w = World::planted(8);
    let env = w.env();
    let (store, m, ccfg) = model(6, 8);
    let nbr = Neighborhood::build(&w.kg, &w.assignment, ccfg.neighbor_cap, 0).unwrap();
    let cfg = InferenceConfig::new(6);
    let a = recommend_all(&store, &m, &env, &nbr, &w.split, &cfg, 5, 1).unwrap();
    let b = recommend_all(&store, &m, &env, &nbr, &w.split, &cfg, 5, 1).unwrap();
    let c = recommend_all(&store, &m, &env, &nbr, &w.split, &cfg, 5, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
    for list in a.values() {
        let train = w.split.train(list.user);
        assert!(list.items.len() <= 10);
        for pair in list.items.windows(2) {
            assert!(pair[0].score > pair[1].score || (pair[0].score == pair[1].score && pair[0].item < pair[1].item));
        }
        for r in &list.items {
            assert!(!train.contains(&r.item));
            assert!(w.kg.is_item(r.item));
            assert!(r.path.is_valid(&w.kg));
            assert_eq!(r.path.terminal(), r.item);
        }
    }
}

fn path_to(user: EntityId, item: EntityId, score: f64) -> ExplanationPath {
    ExplanationPath {
        user,
        hops: vec![Hop { relation: Some(RelationId(0)), entity: item }],
        categories: vec![CategoryId(0), CategoryId(0)],
        score,
    }
}

#[test]
fn rank_keeps_best_path_per_item() {
    let w = World::tiny(0);
    let u = w.kg.entity_id("u0").unwrap();
    let i2 = w.kg.entity_id("i2").unwrap();
    let list = rank(&[path_to(u, i2, -1.2), path_to(u, i2, -0.7)], u, &w.kg, &[], 10);
    assert_eq!(list.items.len(), 1);
    assert_eq!(list.items[0].score, -0.7);

    let brand = w.kg.entity_id("b0").unwrap();
    assert!(rank(&[path_to(u, brand, 0.0)], u, &w.kg, &[], 10).items.is_empty());
}

#[test]
fn rank_matches_brute_force_dedupe_and_sort() {
    let w = World::tiny(1);
    let u = w.kg.entity_id("u0").unwrap();
    let entities: Vec<EntityId> = (0..w.kg.num_entities()).map(EntityId).collect();
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cands: Vec<ExplanationPath> = (0..rng.gen_range(0..30))
            .map(|_| path_to(u, *entities.choose(&mut rng).unwrap(), (rng.gen_range(-40..0) as f64) / 8.0))
            .collect();
        let train: Vec<EntityId> = entities.iter().copied().filter(|_| rng.gen_bool(0.2)).collect();
        let k = rng.gen_range(1..8);
        let got: Vec<(EntityId, f64)> = rank(&cands, u, &w.kg, &train, k).items.iter().map(|r| (r.item, r.score)).collect();

        let mut best: Vec<(EntityId, f64)> = Vec::new();
        for item in &entities {
            if !w.kg.is_item(*item) || train.contains(item) {
                continue;
            }
            let scores: Vec<f64> = cands.iter().filter(|p| p.terminal() == *item).map(|p| p.score).collect();
            if let Some(m) = scores.iter().copied().reduce(f64::max) {
                best.push((*item, m));
            }
        }
        best.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        best.truncate(k);
        assert_eq!(got, best, "seed {seed}");
    }
}

// ---- metrics ----

fn brute_metrics(ranked: &[usize], test: &[usize], k: usize) -> [f64; 4] {
    let top = &ranked[..ranked.len().min(k)];
    let mut dcg = 0.0;
    let mut hits = 0.0;
    for (pos, item) in top.iter().enumerate() {
        if test.iter().any(|t| t == item) {
            dcg += 1.0 / ((pos + 2) as f64).ln() * 2f64.ln();
            hits += 1.0;
        }
    }
    let mut idcg = 0.0;
    for pos in 0..k.min(test.len()) {
        idcg += 2f64.ln() / ((pos + 2) as f64).ln();
    }
    [dcg / idcg, hits / test.len() as f64, if hits > 0.0 { 1.0 } else { 0.0 }, hits / k as f64]
}

fn as_ids(xs: &[usize]) -> Vec<EntityId> {
    xs.iter().map(|&x| EntityId(x)).collect()
}

fn metric_array(m: &Metrics) -> [f64; 4] {
    [m.ndcg, m.recall, m.hit_ratio, m.precision]
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut pool: Vec<usize> = (0..40).collect();
    pool.shuffle(rng);
    let ranked = pool[..rng.gen_range(0..15)].to_vec();
    pool.shuffle(rng);
    let test = pool[..rng.gen_range(1..8)].to_vec();
    (ranked, test)
}

#[test]
fn metrics_match_brute_force() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ranked, test) = random_instance(&mut rng);
        let got = metric_array(&user_metrics(&as_ids(&ranked), &as_ids(&test), 10));
        let want = brute_metrics(&ranked, &test, 10);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-9, "seed {seed}: {got:?} vs {want:?}");
        }
    }
}

#[test]
fn perfect_and_empty_rankings() {
    let test = as_ids(&[3, 7, 9]);
    let mut ranked = test.clone();
    ranked.extend(as_ids(&[20, 21, 22, 23, 24, 25, 26]));
    let m = user_metrics(&ranked, &test, 10);
    assert_eq!([m.ndcg, m.recall, m.hit_ratio], [1.0, 1.0, 1.0]);
    assert!((m.precision - 0.3).abs() < 1e-12);
    let ten = as_ids(&(0..10).collect::<Vec<_>>());
    assert_eq!(metric_array(&user_metrics(&ten, &ten, 10)), [1.0; 4]);
    assert_eq!(metric_array(&user_metrics(&as_ids(&[1, 2]), &test, 10)), [0.0; 4]);
}

#[test]
fn evaluate_skips_users_without_test_items() {
    let (a, b, c) = (EntityId(0), EntityId(1), EntityId(2));
    let split = InteractionSplit::from_pairs(
        &[(a, EntityId(10)), (b, EntityId(11)), (c, EntityId(12))],
        &[(a, EntityId(20)), (b, EntityId(21))],
    );
    let mut lists = BTreeMap::new();
    lists.insert(a, RecommendationList { user: a, items: vec![Recommendation { item: EntityId(20), score: 0.0, path: path_to(a, EntityId(20), 0.0) }] });
    let report = evaluate(&lists, &split, 10);
    assert_eq!(report.users.len(), 2);
    assert!((report.mean.hit_ratio - 0.5).abs() < 1e-12);
}

proptest! {
    #[test]
    fn adding_a_hit_never_lowers_any_metric(seed in 0u64..10_000, pos in 0usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut ranked, test) = random_instance(&mut rng);
        ranked.retain(|x| !test.contains(x) || rng.gen_bool(0.5));
        let before = metric_array(&user_metrics(&as_ids(&ranked), &as_ids(&test), 10));
        let unused: Vec<usize> = test.iter().copied().filter(|t| !ranked.contains(t)).collect();
        prop_assume!(!unused.is_empty() && pos <= ranked.len().min(9));
        let mut better = ranked.clone();
        if pos < better.len() && !test.contains(&better[pos]) {
            better[pos] = unused[0];
        } else {
            better.insert(pos, unused[0]);
        }
        let after = metric_array(&user_metrics(&as_ids(&better), &as_ids(&test), 10));
        // Inserting can push a hit out of the top 10; replacing a miss cannot.
        if better.len() == ranked.len() || ranked.len() < 10 {
            for (a, b) in after.iter().zip(&before) {
                prop_assert!(a + 1e-12 >= *b);
            }
        }
    }

    #[test]
    fn ndcg_ignores_order_of_misses_below_last_hit(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ranked, test) = random_instance(&mut rng);
        let top: Vec<usize> = ranked.iter().copied().take(10).collect();
        let last_hit = top.iter().rposition(|x| test.contains(x)).map_or(0, |p| p + 1);
        let mut shuffled = top.clone();
        shuffled[last_hit..].shuffle(&mut rng);
        let a = user_metrics(&as_ids(&top), &as_ids(&test), 10).ndcg;
        let b = user_metrics(&as_ids(&shuffled), &as_ids(&test), 10).ndcg;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn metrics_stay_in_unit_interval(seed in 0u64..10_000, k in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ranked, test) = random_instance(&mut rng);
        for v in metric_array(&user_metrics(&as_ids(&ranked), &as_ids(&test), k)) {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

// ---- export ----

fn one_recommendation(w: &World) -> BTreeMap<EntityId, RecommendationList> {
    let u = w.kg.entity_id("u0").unwrap();
    let f0 = w.kg.entity_id("f0").unwrap();
    let mention = w.kg.relation_id("mention").unwrap();
    let described_inv = w.kg.relation_id("described_by_inv").unwrap();
    let edge = w.kg.out_edges(f0).iter().find(|e| e.relation == described_inv).copied().unwrap();
    let path = ExplanationPath {
        user: u,
        hops: vec![
            Hop { relation: Some(mention), entity: f0 },
            Hop { relation: None, entity: f0 },
            Hop { relation: Some(described_inv), entity: edge.target },
        ],
        categories: vec![CategoryId(0), CategoryId(1), CategoryId(1), CategoryId(2)],
        score: -1.25,
    };
    let mut m = BTreeMap::new();
    m.insert(u, RecommendationList { user: u, items: vec![Recommendation { item: edge.target, score: -1.25, path }] });
    m
}

#[test]
fn export_line_is_golden_and_parses_back() {
    let w = World::tiny(0);
    let lists = one_recommendation(&w);
    let r = &lists.values().next().unwrap().items[0];
    let item = w.kg.entity(r.item).name.clone();
    let text = format_recommendations(&lists, &w.kg, &w.assignment);
    let want = format!("u0\t{item}\t-1.250000\tu0 -[mention]-> f0 -[described_by_inv]-> {item}\tC0 -> C1 -> C1 -> C2\n");
    assert_eq!(text, want);
    assert!(r.path.is_valid(&w.kg));

    let parsed = parse_recommendations(&text, &w.kg, &w.assignment).unwrap();
    assert_eq!(parsed.len(), 1);
    assert_eq!(parsed[0].user, r.path.user);
    assert_eq!(parsed[0].item, r.item);
    assert_eq!(parsed[0].moves, r.path.moves());
    assert_eq!(parsed[0].categories, r.path.categories);
    assert!((parsed[0].score - r.score).abs() < 1e-6);

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("paths.tsv");
    export_paths(&lists, &w.kg, &w.assignment, &file).unwrap();
    assert_eq!(std::fs::read_to_string(&file).unwrap(), want);
    export_paths(&BTreeMap::new(), &w.kg, &w.assignment, &file).unwrap();
    assert_eq!(std::fs::read_to_string(&file).unwrap(), "");
    assert!(export_paths(&lists, &w.kg, &w.assignment, &dir.path().join("missing/x.tsv")).is_err());
}

#[test]
fn malformed_export_lines_are_rejected() {
    let w = World::tiny(0);
    for bad in ["u0\ti1\t0.1\tu0", "u0\ti1\tx\tu0\tC0", "u0\ti1\t0.1\tu0 -[nope]-> i1\tC0", "u0\ti1\t0.1\ti1\tC0", "u0\ti1\t0.1\tu0\tC99"] {
        assert!(parse_recommendations(bad, &w.kg, &w.assignment).is_err(), "{bad}");
    }
}

#[test]
fn blending_shifts_scores_by_embedding_distance() {
    let w = World::tiny(2);
    let env = w.env();
    let u = w.kg.entity_id("u0").unwrap();
    let i3 = w.kg.entity_id("i3").unwrap();
    let mut paths = vec![path_to(u, i3, -2.0)];
    blend_embedding_scores(&mut paths, &env, 0.0);
    assert_eq!(paths[0].score, -2.0);
    blend_embedding_scores(&mut paths, &env, 0.5);
    let d: f64 = w
        .table
        .entity(u)
        .iter()
        .zip(w.table.relation(w.kg.purchase()))
        .zip(w.table.entity(i3))
        .map(|((a, b), c)| (a + b - c).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!((paths[0].score - (-2.0 - 0.5 * d)).abs() < 1e-12);
}

#[test]
fn metric_reports_render() {
    let w = World::tiny(0);
    let u = w.kg.entity_id("u0").unwrap();
    let report = MetricsReport {
        k: 10,
        mean: Metrics { ndcg: 0.5, recall: 0.25, hit_ratio: 1.0, precision: 0.1 },
        users: vec![(u, Metrics { ndcg: 0.5, recall: 0.25, hit_ratio: 1.0, precision: 0.1 })],
    };
    let tsv = metrics_tsv(&report, &w.kg);
    assert_eq!(
        tsv,
        "scope\tndcg@10\trecall@10\thr@10\tprecision@10\nmean\t0.500000\t0.250000\t1.000000\t0.100000\nuser:u0\t0.500000\t0.250000\t1.000000\t0.100000\n"
    );
    assert!(metrics_table(&report).contains("HR@10"));
}
