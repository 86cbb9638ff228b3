//! Finite-difference checks of every differentiable piece on small seeded
//! fixtures. Backs the `gradcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cggnn::{
    category_attention, category_context, gated_update, propagate, relation_attention, triplet_repr, Cggnn,
    CggnnConfig, CggnnError, Direction, EmbedParams, EmbedVars, NeighborInput, Neighborhood,
};
use crate::darl::{
    finalize_rewards, policy_loss, rollout, user_contexts, Action, ActionChooser, Agent, DarlError, DarlModel, Env,
    PolicyConfig, RewardConfig, Sampler, TapeTrace, Trajectory,
};
use crate::kg::{build_category_graph, CategoryAssignment, EntityKind, InteractionSplit, KgBuilder, KgError, KnowledgeGraph};
use crate::numcore::{gradient_check, GradCheckConfig, GradCheckReport, Graph, NumError, ParamId, ParamStore, Tensor, Var};
use crate::transe::{category_embedding, init_embeddings};

#[derive(Debug, thiserror::Error)]
pub enum SelfCheckError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Cggnn(#[from] CggnnError),
    #[error(transparent)]
    Darl(#[from] DarlError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Transe(#[from] crate::transe::TranseError),
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub report: GradCheckReport,
}

const DIM: usize = 3;

/// Runs every check; each result carries the worst relative error seen.
pub fn run_all(seed: u64) -> Result<Vec<CheckResult>, SelfCheckError> {
    let mut out = Vec::new();
    let mut push = |name, report| out.push(CheckResult { name, report });
    push("cggnn.triplet", layer_op(seed, LayerOp::Triplet)?);
    push("cggnn.relation_attention", layer_op(seed, LayerOp::Attention)?);
    push("cggnn.propagate", layer_op(seed, LayerOp::Propagate)?);
    push("cggnn.gated_update", layer_op(seed, LayerOp::Gated)?);
    push("cggnn.category_attention", layer_op(seed, LayerOp::Category)?);
    push("cggnn.pipeline", pipeline(seed)?);
    let (category, entity) = heads(seed)?;
    push("policy.category_head", category);
    push("policy.entity_head", entity);
    push("darl.two_agent_loss", two_agent_loss(seed)?);
    Ok(out)
}

/// Eight entities: one user, five items, a brand and a feature, with random
/// item links and one or two of three categories per item.
pub fn tiny_fixture(seed: u64) -> Result<(KnowledgeGraph, CategoryAssignment), KgError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = KgBuilder::new();
    let u = b.add_entity("u0", EntityKind::User)?;
    let items = (0..5).map(|k| b.add_entity(&format!("i{k}"), EntityKind::Item)).collect::<Result<Vec<_>, _>>()?;
    let brand = b.add_entity("b0", EntityKind::Brand)?;
    let feature = b.add_entity("f0", EntityKind::Feature)?;
    let rel = |b: &KgBuilder, n: &str| b.relation_id(n).ok_or_else(|| KgError::Config(format!("no relation {n}")));
    let links = [rel(&b, "also_bought")?, rel(&b, "also_viewed")?, rel(&b, "bought_together")?];
    let (purchase, mention) = (rel(&b, "purchase")?, rel(&b, "mention")?);
    let (produced_by, described_by) = (rel(&b, "produced_by")?, rel(&b, "described_by")?);
    b.add_triple_ids(u, purchase, items[0])?;
    b.add_triple_ids(u, mention, feature)?;
    for &i in &items {
        if rng.gen_bool(0.5) {
            b.add_triple_ids(i, produced_by, brand)?;
        }
        if rng.gen_bool(0.5) {
            b.add_triple_ids(i, described_by, feature)?;
        }
        for _ in 0..2 {
            let j = items[rng.gen_range(0..items.len())];
            if j != i {
                b.add_triple_ids(i, links[rng.gen_range(0..links.len())], j)?;
            }
        }
    }
    let kg = b.build();
    let mut pairs = Vec::new();
    for (k, &i) in items.iter().enumerate() {
        pairs.push((i, format!("C{}", k % 3)));
        if rng.gen_bool(0.3) {
            pairs.push((i, format!("C{}", rng.gen_range(0..3))));
        }
    }
    let assignment = CategoryAssignment::from_pairs(&kg, pairs)?;
    Ok((kg, assignment))
}

fn random_input(store: &mut ParamStore, name: &str, len: usize, rng: &mut ChaCha8Rng) -> Result<ParamId, NumError> {
    store.add_uniform(name, &[len], 1.0, rng)
}

fn probe(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[derive(Clone, Copy)]
enum LayerOp {
    Triplet,
    Attention,
    Propagate,
    Gated,
    Category,
}

/// One layer op with its weights and inputs all treated as parameters,
/// reduced to a scalar by a fixed random projection.
fn layer_op(seed: u64, op: LayerOp) -> Result<GradCheckReport, SelfCheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = CggnnConfig { ggnn_layers: 1, cgan_layers: 1, ..CggnnConfig::default() };
    let model = Cggnn::new(&mut store, DIM, &cfg, &mut rng)?;
    // The bias starts at zero; move it so the check is not at a special point.
    store.get_mut(model.layers[0].b).data_mut()[0] = 0.3;
    let inputs: Vec<ParamId> =
        (0..8).map(|k| random_input(&mut store, &format!("input{k}"), DIM, &mut rng)).collect::<Result<_, _>>()?;
    let w = probe(&mut rng, DIM);
    let layer = model.layers[0];
    let w_ic = model.cgan[0];
    let slope = model.leaky_slope;
    let report = gradient_check(&store, &GradCheckConfig { seed, ..GradCheckConfig::default() }, |g: &mut Graph<'_>| {
        let x: Vec<Var> = inputs.iter().map(|&id| g.param(id)).collect::<Result<_, _>>()?;
        let wv = g.vector(w.clone());
        let out = match op {
            LayerOp::Triplet => triplet_repr(g, &layer, x[0], x[1], x[2], x[3])?,
            LayerOp::Attention => {
                let t = g.sigmoid(x[0])?;
                let a = relation_attention(g, &layer, t)?;
                return Ok::<Var, CggnnError>(g.sum(a)?);
            }
            LayerOp::Propagate => {
                let nbrs = [
                    NeighborInput { direction: Direction::Out, entity: x[1], relation: x[2] },
                    NeighborInput { direction: Direction::In, entity: x[3], relation: x[4] },
                    NeighborInput { direction: Direction::Out, entity: x[5], relation: x[6] },
                ];
                propagate(g, &layer, x[0], &nbrs, x[7])?
            }
            LayerOp::Gated => gated_update(g, &layer, x[0], x[1])?,
            LayerOp::Category => {
                let cats = [x[1], x[2], x[3]];
                let a = category_attention(g, w_ic, slope, x[0], &cats)?;
                category_context(g, a, &cats)?
            }
        };
        Ok(g.dot(out, wv)?)
    })?;
    Ok(report)
}

/// Every item representation on the tiny fixture, gradients taken with
/// respect to the encoder weights and the input embeddings.
fn pipeline(seed: u64) -> Result<GradCheckReport, SelfCheckError> {
    let (kg, assignment) = tiny_fixture(seed)?;
    let table = init_embeddings(&kg, &assignment, DIM, seed)?;
    let mut store = ParamStore::new();
    let model = Cggnn::new(&mut store, DIM, &CggnnConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed + 1))?;
    let inputs = EmbedParams::register(&mut store, &table)?;
    let nbr = Neighborhood::build(&kg, &assignment, 25, seed)?;
    let w = probe(&mut ChaCha8Rng::seed_from_u64(seed + 2), DIM);
    let report = gradient_check(&store, &GradCheckConfig { seed, ..GradCheckConfig::default() }, |g: &mut Graph<'_>| {
        let emb = EmbedVars::params(g, &inputs)?;
        let out = model.forward(g, &nbr, &emb)?;
        let wv = g.vector(w.clone());
        let mut terms = Vec::new();
        for &i in &nbr.items {
            let v = out.vector(&emb, i);
            let sq = g.mul(v, v)?;
            terms.push(g.dot(sq, wv)?);
        }
        let total = g.add_n(&terms)?;
        Ok::<Var, CggnnError>(g.sum(total)?)
    })?;
    Ok(report)
}

/// Weighted log-probabilities of each head over random states and actions.
fn heads(seed: u64) -> Result<(GradCheckReport, GradCheckReport), SelfCheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = DarlModel::new(
        &mut store,
        &PolicyConfig { dim: DIM, hidden: 4 },
        &CggnnConfig::default(),
        &mut rng,
    )?;
    let p = model.policy;
    let h = p.hidden;
    let state: Vec<Tensor> = [DIM, DIM, h, DIM, DIM, h]
        .iter()
        .map(|&n| Tensor::new(vec![n], probe(&mut rng, n)))
        .collect::<Result<_, _>>()?;
    let actions: Vec<Tensor> = (0..11).map(|_| Tensor::new(vec![DIM], probe(&mut rng, DIM))).collect::<Result<_, _>>()?;
    let weights = probe(&mut rng, 4);
    let bind = |g: &mut Graph<'_>| {
        let s: Vec<Var> = state.iter().map(|t| g.constant(t.clone())).collect();
        let a: Vec<Var> = actions.iter().map(|t| g.constant(t.clone())).collect();
        (s, a)
    };
    let cfg = |ids| GradCheckConfig { seed, params: Some(ids), ..GradCheckConfig::default() };
    let category = gradient_check(&store, &cfg(vec![p.category_w1, p.category_w2]), |g: &mut Graph<'_>| {
        let (s, a) = bind(g);
        let l = p.category_logits(g, s[0], s[1], s[2], &a[..3])?;
        let lp = g.log_softmax(l)?;
        let w = g.vector(weights[..3].to_vec());
        g.dot(lp, w)
    })?;
    let entity = gradient_check(&store, &cfg(vec![p.entity_w1, p.entity_w2]), |g: &mut Graph<'_>| {
        let (s, a) = bind(g);
        let l = p.entity_logits(g, s[3], s[4], s[5], a[0], &a[3..7], &a[7..11])?;
        let lp = g.log_softmax(l)?;
        let w = g.vector(weights.clone());
        g.dot(lp, w)
    })?;
    Ok((category, entity))
}

/// Replays fixed action indices so perturbed parameters cannot change the path.
struct Replay(Vec<(usize, usize)>);

impl ActionChooser for Replay {
    fn choose(&mut self, agent: Agent, step: usize, _: &[Action], _: &[f64]) -> usize {
        match agent {
            Agent::Category => self.0[step].0,
            Agent::Entity => self.0[step].1,
        }
    }
}

/// Batch of two one-step episodes from the tiny fixture. Choices and rewards
/// come from a sampled base run and are then held fixed.
fn two_agent_loss(seed: u64) -> Result<GradCheckReport, SelfCheckError> {
    let (kg, assignment) = tiny_fixture(seed)?;
    let cgraph = build_category_graph(&kg, &assignment)?;
    let table = category_embedding(init_embeddings(&kg, &assignment, DIM, seed)?, &assignment)?;
    let user = kg.entity_id("u0").expect("fixture user");
    let item = kg.entity_id("i0").expect("fixture item");
    let split = InteractionSplit::from_pairs(&[(user, item)], &[]);
    let env = Env { kg: &kg, assignment: &assignment, cgraph: &cgraph, table: &table, category_cap: 10, entity_cap: 50 };
    let ccfg = CggnnConfig { seed, ..CggnnConfig::default() };
    let mut store = ParamStore::new();
    let m = DarlModel::new(&mut store, &PolicyConfig { dim: DIM, hidden: 0 }, &ccfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let nbr = Neighborhood::build(&kg, &assignment, ccfg.neighbor_cap, seed)?;
    let users = user_contexts(&split, &env)?;
    let rewards = RewardConfig::default();

    let mut base: Vec<Trajectory> = Vec::new();
    for k in 0..2u64 {
        let mut g = Graph::with_params(&store);
        let vecs = m.tape_vectors(&mut g, &env, &nbr, None)?;
        let mut crng = ChaCha8Rng::seed_from_u64(seed + 10 + k);
        let (mut t, _) =
            rollout(&mut g, &m.policy, &env, &vecs, &users[0], &mut Sampler(&mut crng), 1, &mut ChaCha8Rng::seed_from_u64(k))?;
        finalize_rewards(&mut t, &users[0], &rewards, 1)?;
        base.push(t);
    }
    let mean = |f: fn(&Trajectory) -> Result<Vec<f64>, DarlError>| -> Result<f64, DarlError> {
        Ok(base.iter().map(|t| f(t).map(|r| r[0])).sum::<Result<f64, _>>()? / base.len() as f64)
    };
    let bc = vec![mean(Trajectory::category_rewards)?];
    let be = vec![mean(Trajectory::entity_rewards)?];

    let report = gradient_check(&store, &GradCheckConfig { seed, ..GradCheckConfig::default() }, |g: &mut Graph<'_>| {
        let vecs = m.tape_vectors(g, &env, &nbr, None)?;
        let mut eps: Vec<(Trajectory, TapeTrace)> = Vec::new();
        for (k, b) in base.iter().enumerate() {
            let mut replay = Replay(vec![(b.steps[0].category_choice, b.steps[0].entity_choice)]);
            let (mut t, trace) =
                rollout(g, &m.policy, &env, &vecs, &users[0], &mut replay, 1, &mut ChaCha8Rng::seed_from_u64(k as u64))?;
            t.steps[0].category_reward = b.steps[0].category_reward;
            t.steps[0].entity_reward = b.steps[0].entity_reward;
            eps.push((t, trace));
        }
        let refs: Vec<(&Trajectory, &TapeTrace)> = eps.iter().map(|(t, tr)| (t, tr)).collect();
        policy_loss(g, &refs, (&bc, &be), &rewards, 2)
    })?;
    Ok(report)
}
