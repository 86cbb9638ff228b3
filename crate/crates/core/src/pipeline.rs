//! Stage functions shared by the command line and the benchmarks. Every
//! random draw comes from a stage seed derived from the run's root seed.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cggnn::{CggnnError, Neighborhood};
use crate::checkpoint::{dataset_fingerprint, CheckpointError, ModelCheckpoint};
use crate::config::RunConfig;
use crate::darl::{train, DarlError, DarlModel, Env, EpochLog, TrainOutcome};
use crate::kg::synth::{generate_synthetic, SynthOutput};
use crate::kg::{build_category_graph, CategoryGraph, Dataset, EntityId, KgError, KnowledgeGraph};
use crate::numcore::{NumError, ParamStore};
use crate::recommend::{evaluate_ranked, parse_recommendations, recommend_all, MetricsReport, RecommendationList};
use crate::transe::{category_embedding, init_embeddings, transe_train, EmbeddingTable, TranseError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Transe(#[from] TranseError),
    #[error(transparent)]
    Cggnn(#[from] CggnnError),
    #[error(transparent)]
    Darl(#[from] DarlError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Num(#[from] NumError),
}

impl PipelineError {
    /// Non-finite losses or gradients.
    pub fn is_divergence(&self) -> bool {
        matches!(self, PipelineError::Transe(TranseError::Diverged { .. }) | PipelineError::Darl(DarlError::Diverged { .. }))
    }
}

/// A loaded dataset plus what every later stage derives from it.
pub struct Prepared {
    pub dataset: Dataset,
    /// Train purchases only; the graph embeddings and agents see.
    pub graph: KnowledgeGraph,
    pub cgraph: CategoryGraph,
    pub fingerprint: String,
}

impl Prepared {
    pub fn new(dataset: Dataset) -> Result<Self, PipelineError> {
        let graph = dataset.training_graph();
        let cgraph = build_category_graph(&graph, &dataset.assignment)?;
        let fingerprint = dataset_fingerprint(&dataset.kg, &dataset.assignment, &dataset.split);
        Ok(Self { dataset, graph, cgraph, fingerprint })
    }

    pub fn env<'a>(&'a self, table: &'a EmbeddingTable, cfg: &RunConfig) -> Env<'a> {
        Env {
            kg: &self.graph,
            assignment: &self.dataset.assignment,
            cgraph: &self.cgraph,
            table,
            category_cap: cfg.category_cap,
            entity_cap: cfg.entity_cap,
        }
    }

    pub fn neighborhood(&self, cfg: &RunConfig) -> Result<Neighborhood, PipelineError> {
        let c = cfg.cggnn();
        Ok(Neighborhood::build(&self.graph, &self.dataset.assignment, c.neighbor_cap, c.seed)?)
    }
}

pub fn synthesize(cfg: &RunConfig) -> Result<SynthOutput, PipelineError> {
    Ok(generate_synthetic(&cfg.synth.config(), cfg.stage_seed("synth"))?)
}

/// Random initialisation, TransE, then category means.
pub fn pretrain(p: &Prepared, cfg: &RunConfig) -> Result<(EmbeddingTable, Vec<f64>), PipelineError> {
    let table = init_embeddings(&p.graph, &p.dataset.assignment, cfg.dim, cfg.stage_seed("embedding_init"))?;
    let (table, history) = transe_train(&p.graph, table, &cfg.transe())?;
    Ok((category_embedding(table, &p.dataset.assignment)?, history))
}

/// Fresh encoder and policies, trained for `cfg.epochs` epochs. With zero
/// epochs the returned store is the seeded initialisation.
pub fn train_model(
    p: &Prepared,
    table: &EmbeddingTable,
    cfg: &RunConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(ParamStore, TrainOutcome), PipelineError> {
    let env = p.env(table, cfg);
    let nbr = p.neighborhood(cfg)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed("model_init"));
    let model = DarlModel::new(&mut store, &cfg.policy(), &cfg.cggnn(), &mut rng)?;
    let outcome = train(&mut store, &model, &env, &nbr, &p.dataset.split, &cfg.darl(), cfg.stage_seed("train"), on_epoch)?;
    Ok((store, outcome))
}

/// Top-k lists for every trainable user from a trained checkpoint.
pub fn recommend(p: &Prepared, ck: &ModelCheckpoint, cfg: &RunConfig) -> Result<BTreeMap<EntityId, RecommendationList>, PipelineError> {
    let store = ck.store()?;
    let model = DarlModel::bind(&store, &cfg.cggnn())?;
    let env = p.env(&ck.table, cfg);
    let nbr = p.neighborhood(cfg)?;
    Ok(recommend_all(&store, &model, &env, &nbr, &p.dataset.split, &cfg.inference(), cfg.stage_seed("recommend"), cfg.workers)?)
}

/// Metrics of an exported path file against the held-out purchases. Lines
/// keep their file order within each user.
pub fn evaluate_export(p: &Prepared, text: &str, k: usize) -> Result<MetricsReport, PipelineError> {
    let parsed = parse_recommendations(text, &p.dataset.kg, &p.dataset.assignment)?;
    let mut ranked: BTreeMap<EntityId, Vec<EntityId>> = BTreeMap::new();
    for r in parsed {
        ranked.entry(r.user).or_default().push(r.item);
    }
    Ok(evaluate_ranked(&ranked, &p.dataset.split, k))
}
