use std::io::Write;
use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cggnn::{Cggnn, CggnnConfig, Neighborhood};
use crate::kg::InteractionSplit;
use crate::numcore::{AdamConfig, Graph, ParamGrads, ParamStore, Var};

use super::{
    discounted_returns, finalize_rewards, rollout, Baseline, DarlError, DualPolicy, Env, PolicyConfig, RewardConfig,
    Sampler, TapeTrace, TapeVectors, Trajectory, UserContext,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DarlConfig {
    /// Steps per episode.
    pub max_len: usize,
    pub category_cap: usize,
    pub entity_cap: usize,
    pub rewards: RewardConfig,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub episodes_per_user: usize,
    /// Keep CGGNN weights fixed during policy training.
    pub freeze_cggnn: bool,
    pub workers: usize,
}

impl Default for DarlConfig {
    fn default() -> Self {
        Self {
            max_len: 6,
            category_cap: 10,
            entity_cap: 50,
            rewards: RewardConfig::default(),
            lr: 1e-4,
            epochs: 50,
            batch_size: 32,
            episodes_per_user: 1,
            freeze_cggnn: false,
            workers: 1,
        }
    }
}

impl DarlConfig {
    pub fn validate(&self) -> Result<(), DarlError> {
        self.rewards.validate()?;
        let positive = [
            ("max_len", self.max_len),
            ("category_cap", self.category_cap),
            ("entity_cap", self.entity_cap),
            ("batch_size", self.batch_size),
            ("episodes_per_user", self.episodes_per_user),
            ("workers", self.workers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(DarlError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(DarlError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Policy networks plus the item encoder, all living in one store.
#[derive(Clone, Debug)]
pub struct DarlModel {
    pub policy: DualPolicy,
    pub cggnn: Cggnn,
}

impl DarlModel {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        policy: &PolicyConfig,
        cggnn: &CggnnConfig,
        rng: &mut R,
    ) -> Result<Self, DarlError> {
        let cg = Cggnn::new(store, policy.dim, cggnn, rng)?;
        let pol = DualPolicy::new(store, policy, rng)?;
        Ok(Self { policy: pol, cggnn: cg })
    }

    pub fn bind(store: &ParamStore, cggnn: &CggnnConfig) -> Result<Self, DarlError> {
        Ok(Self { policy: DualPolicy::bind(store)?, cggnn: Cggnn::bind(store, cggnn)? })
    }

    /// Embedding nodes for one tape; frozen item vectors skip the encoder.
    pub fn tape_vectors(
        &self,
        g: &mut Graph<'_>,
        env: &Env<'_>,
        nbr: &Neighborhood,
        frozen: Option<&[Vec<f64>]>,
    ) -> Result<TapeVectors, DarlError> {
        match frozen {
            Some(v) => TapeVectors::with_values(g, &self.policy, v, env.table),
            None => TapeVectors::with_cggnn(g, &self.policy, &self.cggnn, nbr, env.table),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_return_entity: f64,
    pub mean_return_category: f64,
    pub hit_rate: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub episodes: usize,
}

/// Seed of the `index`-th episode of `epoch`, independent of batching.
pub fn episode_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut x = seed ^ 0x243F_6A88_85A3_08D3;
    for v in [epoch as u64, index as u64] {
        x = (x ^ v).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        x ^= x >> 29;
    }
    x
}

/// Per-step batch means of the category and entity returns.
fn batch_baselines(trajs: &[&Trajectory], cfg: &RewardConfig) -> Result<(Vec<f64>, Vec<f64>), DarlError> {
    let len = trajs.first().map_or(0, |t| t.steps.len());
    let (mut bc, mut be) = (vec![0.0; len], vec![0.0; len]);
    if cfg.baseline == Baseline::None || trajs.is_empty() {
        return Ok((bc, be));
    }
    for t in trajs {
        let gc = discounted_returns(&t.category_rewards()?, cfg.gamma);
        let ge = discounted_returns(&t.entity_rewards()?, cfg.gamma);
        for l in 0..len {
            bc[l] += gc[l];
            be[l] += ge[l];
        }
    }
    let n = trajs.len() as f64;
    bc.iter_mut().chain(be.iter_mut()).for_each(|b| *b /= n);
    Ok((bc, be))
}

/// `(1/B) Σ_episodes Σ_l [−(G^c_l − b^c_l) log π^c − (G^e_l − b^e_l) log π^e
/// − w (H^c_l + H^e_l)]` with returns taken from the finalized rewards.
pub fn policy_loss(
    g: &mut Graph<'_>,
    episodes: &[(&Trajectory, &TapeTrace)],
    baselines: (&[f64], &[f64]),
    cfg: &RewardConfig,
    batch_size: usize,
) -> Result<Var, DarlError> {
    let mut terms = Vec::new();
    for (traj, trace) in episodes {
        let gc = discounted_returns(&traj.category_rewards()?, cfg.gamma);
        let ge = discounted_returns(&traj.entity_rewards()?, cfg.gamma);
        for l in 0..traj.steps.len() {
            let ac = gc[l] - baselines.0.get(l).copied().unwrap_or(0.0);
            let ae = ge[l] - baselines.1.get(l).copied().unwrap_or(0.0);
            terms.push(g.scale(trace.category_log_prob[l], -ac)?);
            terms.push(g.scale(trace.entity_log_prob[l], -ae)?);
            if cfg.entropy_weight > 0.0 {
                terms.push(g.scale(trace.category_entropy[l], -cfg.entropy_weight)?);
                terms.push(g.scale(trace.entity_entropy[l], -cfg.entropy_weight)?);
            }
        }
    }
    if terms.is_empty() {
        return Ok(g.vector(vec![0.0]));
    }
    let total = g.add_n(&terms)?;
    Ok(g.scale(total, 1.0 / batch_size.max(1) as f64)?)
}

struct Chunk {
    trajectories: Vec<Trajectory>,
    grads: ParamGrads,
    loss: f64,
}

fn sample_chunk<'s>(
    g: &mut Graph<'s>,
    model: &DarlModel,
    env: &Env<'_>,
    nbr: &Neighborhood,
    frozen: Option<&[Vec<f64>]>,
    users: &[(&UserContext, u64)],
    cfg: &DarlConfig,
) -> Result<(Vec<Trajectory>, Vec<TapeTrace>), DarlError> {
    let vecs = model.tape_vectors(g, env, nbr, frozen)?;
    let mut trajs = Vec::with_capacity(users.len());
    let mut traces = Vec::with_capacity(users.len());
    for &(user, seed) in users {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chooser_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let (mut traj, trace) =
            rollout(g, &model.policy, env, &vecs, user, &mut Sampler(&mut chooser_rng), cfg.max_len, &mut rng)?;
        finalize_rewards(&mut traj, user, &cfg.rewards, cfg.max_len)?;
        trajs.push(traj);
        traces.push(trace);
    }
    Ok((trajs, traces))
}

fn chunk_gradients(
    mut g: Graph<'_>,
    trajs: Vec<Trajectory>,
    traces: Vec<TapeTrace>,
    baselines: &(Vec<f64>, Vec<f64>),
    cfg: &DarlConfig,
    batch_size: usize,
    n_params: usize,
) -> Result<Chunk, DarlError> {
    let pairs: Vec<(&Trajectory, &TapeTrace)> = trajs.iter().zip(&traces).collect();
    let loss = policy_loss(&mut g, &pairs, (&baselines.0, &baselines.1), &cfg.rewards, batch_size)?;
    let value = g.scalar(loss);
    let grads = g.backward(loss)?.into_param_grads(n_params);
    drop(pairs);
    Ok(Chunk { trajectories: trajs, grads, loss: value })
}

/// Samples one batch of episodes, applies one Adam step, and returns the
/// finalized trajectories with the batch loss. With `workers > 1` the batch
/// is split into contiguous chunks evaluated on separate threads; sums then
/// happen in a different order, so results are not bit-identical to the
/// single-worker path.
#[allow(clippy::too_many_arguments)]
pub fn reinforce_update(
    store: &mut ParamStore,
    model: &DarlModel,
    env: &Env<'_>,
    nbr: &Neighborhood,
    frozen: Option<&[Vec<f64>]>,
    batch: &[(&UserContext, u64)],
    cfg: &DarlConfig,
    epoch: usize,
) -> Result<(Vec<Trajectory>, f64), DarlError> {
    if batch.is_empty() {
        return Err(DarlError::Config("empty batch".into()));
    }
    let n_params = store.len();
    let workers = cfg.workers.min(batch.len()).max(1);
    let chunks: Vec<Chunk> = {
        let snapshot: &ParamStore = store;
        if workers == 1 {
            let mut g = Graph::with_params(snapshot);
            let (trajs, traces) = sample_chunk(&mut g, model, env, nbr, frozen, batch, cfg)?;
            let refs: Vec<&Trajectory> = trajs.iter().collect();
            let baselines = batch_baselines(&refs, &cfg.rewards)?;
            vec![chunk_gradients(g, trajs, traces, &baselines, cfg, batch.len(), n_params)?]
        } else {
            parallel_chunks(snapshot, model, env, nbr, frozen, batch, cfg, workers, n_params)?
        }
    };

    let mut grads = ParamGrads::zeros(n_params);
    let mut loss = 0.0;
    let mut trajectories = Vec::with_capacity(batch.len());
    for c in chunks {
        grads.accumulate(&c.grads);
        loss += c.loss;
        trajectories.extend(c.trajectories);
    }
    if cfg.freeze_cggnn {
        for id in model.cggnn.param_ids() {
            grads.clear(id);
        }
    }
    if !loss.is_finite() || !grads.all_finite() {
        return Err(DarlError::Diverged { epoch });
    }
    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    store.adam_step(&grads, &adam).map_err(|_| DarlError::Diverged { epoch })?;
    Ok((trajectories, loss))
}

#[allow(clippy::too_many_arguments)]
fn parallel_chunks(
    store: &ParamStore,
    model: &DarlModel,
    env: &Env<'_>,
    nbr: &Neighborhood,
    frozen: Option<&[Vec<f64>]>,
    batch: &[(&UserContext, u64)],
    cfg: &DarlConfig,
    workers: usize,
    n_params: usize,
) -> Result<Vec<Chunk>, DarlError> {
    let per = batch.len().div_ceil(workers);
    let parts: Vec<&[(&UserContext, u64)]> = batch.chunks(per).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        let mut senders = Vec::new();
        let (traj_tx, traj_rx) = mpsc::channel::<(usize, Result<Vec<Trajectory>, String>)>();
        for (k, part) in parts.iter().enumerate() {
            let (base_tx, base_rx) = mpsc::channel::<Option<(Vec<f64>, Vec<f64>)>>();
            senders.push(base_tx);
            let traj_tx = traj_tx.clone();
            handles.push(scope.spawn(move || -> Result<Option<Chunk>, DarlError> {
                let mut g = Graph::with_params(store);
                let sampled = sample_chunk(&mut g, model, env, nbr, frozen, part, cfg);
                let (trajs, traces) = match sampled {
                    Ok(v) => v,
                    Err(e) => {
                        let _ = traj_tx.send((k, Err(e.to_string())));
                        return Err(e);
                    }
                };
                let _ = traj_tx.send((k, Ok(trajs.clone())));
                match base_rx.recv() {
                    Ok(Some(b)) => chunk_gradients(g, trajs, traces, &b, cfg, batch.len(), n_params).map(Some),
                    _ => Ok(None),
                }
            }));
        }
        drop(traj_tx);
        let mut all: Vec<Option<Vec<Trajectory>>> = vec![None; parts.len()];
        let mut failed = false;
        for (k, r) in traj_rx.iter().take(parts.len()) {
            match r {
                Ok(t) => all[k] = Some(t),
                Err(_) => failed = true,
            }
        }
        let baselines = if failed {
            None
        } else {
            let refs: Vec<&Trajectory> = all.iter().flatten().flatten().collect();
            Some(batch_baselines(&refs, &cfg.rewards)?)
        };
        for tx in &senders {
            let _ = tx.send(baselines.clone());
        }
        let mut out = Vec::new();
        for h in handles {
            match h.join().expect("rollout worker panicked")? {
                Some(c) => out.push(c),
                None => return Err(DarlError::Config("rollout worker stopped early".into())),
            }
        }
        Ok(out)
    })
}

/// Trains both agents for `cfg.epochs` epochs. Each epoch visits every
/// trainable user `episodes_per_user` times in a seeded order, one Adam step
/// per batch. `on_epoch` sees each log row as it is produced.
#[allow(clippy::too_many_arguments)]
pub fn train(
    store: &mut ParamStore,
    model: &DarlModel,
    env: &Env<'_>,
    nbr: &Neighborhood,
    split: &InteractionSplit,
    cfg: &DarlConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, DarlError> {
    cfg.validate()?;
    let users = user_contexts(split, env)?;
    let frozen = if cfg.freeze_cggnn {
        Some(model.cggnn.representations(store, nbr, env.table)?)
    } else {
        None
    };
    let mut outcome = TrainOutcome::default();
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    for epoch in 1..=cfg.epochs {
        let mut episodes: Vec<&UserContext> =
            users.iter().flat_map(|u| std::iter::repeat(u).take(cfg.episodes_per_user)).collect();
        episodes.shuffle(&mut order_rng);
        let seeded: Vec<(&UserContext, u64)> =
            episodes.iter().enumerate().map(|(k, &u)| (u, episode_seed(seed, epoch, k))).collect();
        let (mut ret_e, mut ret_c, mut hits, mut loss, mut batches) = (0.0, 0.0, 0usize, 0.0, 0usize);
        for batch in seeded.chunks(cfg.batch_size) {
            let (trajs, l) = reinforce_update(store, model, env, nbr, frozen.as_deref(), batch, cfg, epoch)?;
            for t in &trajs {
                ret_e += discounted_returns(&t.entity_rewards()?, cfg.rewards.gamma)[0];
                ret_c += discounted_returns(&t.category_rewards()?, cfg.rewards.gamma)[0];
                hits += usize::from(t.entity_hit == Some(true));
            }
            loss += l;
            batches += 1;
        }
        let n = seeded.len().max(1) as f64;
        let row = EpochLog {
            epoch,
            mean_return_entity: ret_e / n,
            mean_return_category: ret_c / n,
            hit_rate: hits as f64 / n,
            loss: loss / batches.max(1) as f64,
        };
        on_epoch(&row);
        outcome.log.push(row);
        outcome.episodes += seeded.len();
    }
    Ok(outcome)
}

/// Contexts for every user with train items that appear in the graph.
pub fn user_contexts(split: &InteractionSplit, env: &Env<'_>) -> Result<Vec<UserContext>, DarlError> {
    split
        .trainable_users()
        .into_iter()
        .filter(|u| u.0 < env.kg.num_entities())
        .map(|u| UserContext::new(u, split, env))
        .collect()
}

/// Fraction of sampled episodes that end on a train item, without updating
/// anything. `episodes` episodes are drawn per user.
#[allow(clippy::too_many_arguments)]
pub fn mean_hit_rate(
    store: &ParamStore,
    model: &DarlModel,
    env: &Env<'_>,
    nbr: &Neighborhood,
    split: &InteractionSplit,
    cfg: &DarlConfig,
    episodes: usize,
    seed: u64,
) -> Result<f64, DarlError> {
    let users = user_contexts(split, env)?;
    let mut g = Graph::with_params(store);
    let vecs = model.tape_vectors(&mut g, env, nbr, None)?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for (k, u) in users.iter().enumerate() {
        for j in 0..episodes {
            let s = episode_seed(seed, k, j);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut chooser_rng = ChaCha8Rng::seed_from_u64(s.wrapping_add(1));
            let (mut t, _) = rollout(&mut g, &model.policy, env, &vecs, u, &mut Sampler(&mut chooser_rng), cfg.max_len, &mut rng)?;
            finalize_rewards(&mut t, u, &cfg.rewards, cfg.max_len)?;
            hits += usize::from(t.entity_hit == Some(true));
            total += 1;
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

pub const TRAINING_LOG_HEADER: &str = "epoch\tmean_return_e\tmean_return_c\thit_rate\tloss";

pub fn write_training_log(mut out: impl Write, log: &[EpochLog]) -> std::io::Result<()> {
    writeln!(out, "{TRAINING_LOG_HEADER}")?;
    for r in log {
        writeln!(
            out,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            r.epoch, r.mean_return_entity, r.mean_return_category, r.hit_rate, r.loss
        )?;
    }
    Ok(())
}
