//! JSON checkpoints for pretrained embeddings and trained models. Each one
//! records a format version, the configuration that produced it and a
//! fingerprint of the dataset, and loading refuses any mismatch.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Stage};
use crate::kg::{CategoryAssignment, InteractionSplit, KnowledgeGraph};
use crate::numcore::{NumError, ParamStore, Tensor};
use crate::transe::EmbeddingTable;

pub const FORMAT_VERSION: u32 = 1;
const EMBEDDINGS_FORMAT: &str = "cadrl-embeddings";
const MODEL_FORMAT: &str = "cadrl-model";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: not a readable checkpoint: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error("{path}: expected a {expected} checkpoint, found {found}")]
    WrongKind { path: String, expected: &'static str, found: String },
    #[error("{path}: format version {found}, this build reads version {FORMAT_VERSION}")]
    Version { path: String, found: u32 },
    #[error("{path} was produced with a different configuration ({}); rerun `{rerun}` or pass matching settings", .diffs.join(", "))]
    ConfigMismatch { path: String, diffs: Vec<String>, rerun: &'static str },
    #[error("{path} was produced from a different dataset; rerun `{rerun}`")]
    DatasetMismatch { path: String, rerun: &'static str },
    #[error("{path}: {what}")]
    Corrupt { path: String, what: String },
}

/// Stable hash of everything the models see: entity names and kinds,
/// triples, category membership and the held-out pairs.
pub fn dataset_fingerprint(kg: &KnowledgeGraph, assignment: &CategoryAssignment, split: &InteractionSplit) -> String {
    let mut h = Fnv::new();
    for e in kg.entities() {
        h.write(e.name.as_bytes());
        h.write(kg.kind(e.id).as_str().as_bytes());
    }
    for r in kg.relations() {
        h.write(r.name.as_bytes());
    }
    for t in kg.forward_triples() {
        h.write_u64(t.head.0 as u64);
        h.write_u64(t.relation.0 as u64);
        h.write_u64(t.tail.0 as u64);
    }
    for c in assignment.ids() {
        h.write(assignment.name(c).as_bytes());
        for m in assignment.members(c) {
            h.write_u64(m.0 as u64);
        }
    }
    for (u, i) in split.test_pairs() {
        h.write_u64(u.0 as u64);
        h.write_u64(i.0 as u64);
    }
    format!("{:016x}", h.0)
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 = (self.0 ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
        }
        // Separator so ("ab","c") and ("a","bc") differ.
        self.0 = (self.0 ^ 0xff).wrapping_mul(0x0000_0100_0000_01b3);
    }

    fn write_u64(&mut self, v: u64) {
        self.write(&v.to_le_bytes());
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: BTreeMap<String, String>,
    dataset: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingCheckpoint {
    header: Header,
    pub dim: usize,
    pub entities: usize,
    pub relations: usize,
    pub categories: usize,
    pub table: EmbeddingTable,
    /// Mean margin loss per epoch.
    pub loss_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    header: Header,
    pub table: EmbeddingTable,
    params: Vec<NamedTensor>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
    let text = serde_json::to_string(value).map_err(|source| CheckpointError::Parse { path: path.display().to_string(), source })?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::write(path, text + "\n").map_err(io)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, expected: &'static str) -> Result<T, CheckpointError> {
    let p = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| CheckpointError::Io { path: p.clone(), source })?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|source| CheckpointError::Parse { path: p.clone(), source })?;
    let header = raw.get("header");
    let found = header.and_then(|h| h.get("format")).and_then(|f| f.as_str()).unwrap_or("unknown");
    if found != expected {
        return Err(CheckpointError::WrongKind { path: p, expected, found: found.to_string() });
    }
    let version = header.and_then(|h| h.get("version")).and_then(|v| v.as_u64()).unwrap_or(0);
    if version != u64::from(FORMAT_VERSION) {
        return Err(CheckpointError::Version { path: p, found: version as u32 });
    }
    serde_json::from_value(raw).map_err(|source| CheckpointError::Parse { path: p, source })
}

fn check_header(
    path: &Path,
    header: &Header,
    cfg: &RunConfig,
    through: Stage,
    dataset: &str,
    rerun: &'static str,
) -> Result<(), CheckpointError> {
    let want = cfg.snapshot(through);
    let mut diffs = Vec::new();
    for (k, v) in &want {
        match header.config.get(k) {
            Some(found) if found == v => {}
            Some(found) => diffs.push(format!("{k}: checkpoint {found}, now {v}")),
            None => diffs.push(format!("{k}: missing from checkpoint")),
        }
    }
    for k in header.config.keys().filter(|k| !want.contains_key(*k)) {
        diffs.push(format!("{k}: unknown key in checkpoint"));
    }
    if !diffs.is_empty() {
        return Err(CheckpointError::ConfigMismatch { path: path.display().to_string(), diffs, rerun });
    }
    if header.dataset != dataset {
        return Err(CheckpointError::DatasetMismatch { path: path.display().to_string(), rerun });
    }
    Ok(())
}

fn check_table(path: &Path, t: &EmbeddingTable) -> Result<(), CheckpointError> {
    let ok = |m: &crate::transe::Matrix| m.dim == t.dim && m.data.len() == m.rows * m.dim && m.data.iter().all(|x| x.is_finite());
    if t.dim == 0 || !ok(&t.entities) || !ok(&t.relations) || !ok(&t.categories) {
        return Err(CheckpointError::Corrupt { path: path.display().to_string(), what: "embedding matrices are inconsistent".into() });
    }
    Ok(())
}

impl EmbeddingCheckpoint {
    pub fn new(cfg: &RunConfig, dataset: String, table: EmbeddingTable, loss_history: Vec<f64>) -> Self {
        Self {
            header: Header {
                format: EMBEDDINGS_FORMAT.into(),
                version: FORMAT_VERSION,
                config: cfg.snapshot(Stage::Pretrain),
                dataset,
            },
            dim: table.dim,
            entities: table.entities.rows,
            relations: table.relations.rows,
            categories: table.categories.rows,
            table,
            loss_history,
        }
    }

    pub fn config(&self) -> &BTreeMap<String, String> {
        &self.header.config
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_json(path, self)
    }

    /// Reads without checking it against any configuration.
    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let ck: Self = read_json(path, EMBEDDINGS_FORMAT)?;
        check_table(path, &ck.table)?;
        let t = &ck.table;
        if (ck.dim, ck.entities, ck.relations, ck.categories) != (t.dim, t.entities.rows, t.relations.rows, t.categories.rows) {
            return Err(CheckpointError::Corrupt { path: path.display().to_string(), what: "header counts disagree with matrices".into() });
        }
        Ok(ck)
    }

    /// Reads and requires the data and pretraining settings of `cfg`, and the
    /// dataset fingerprint, to match.
    pub fn load(path: &Path, cfg: &RunConfig, dataset: &str) -> Result<Self, CheckpointError> {
        let ck = Self::read(path)?;
        check_header(path, &ck.header, cfg, Stage::Pretrain, dataset, "pretrain")?;
        Ok(ck)
    }
}

impl ModelCheckpoint {
    pub fn new(cfg: &RunConfig, dataset: String, table: EmbeddingTable, store: &ParamStore) -> Self {
        let params = store
            .iter()
            .map(|(_, name, t)| NamedTensor { name: name.to_string(), shape: t.shape().to_vec(), data: t.data().to_vec() })
            .collect();
        Self {
            header: Header { format: MODEL_FORMAT.into(), version: FORMAT_VERSION, config: cfg.snapshot(Stage::Train), dataset },
            table,
            params,
        }
    }

    pub fn config(&self) -> &BTreeMap<String, String> {
        &self.header.config
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let ck: Self = read_json(path, MODEL_FORMAT)?;
        check_table(path, &ck.table)?;
        Ok(ck)
    }

    /// Reads and requires every setting up to training, and the dataset
    /// fingerprint, to match.
    pub fn load(path: &Path, cfg: &RunConfig, dataset: &str) -> Result<Self, CheckpointError> {
        let ck = Self::read(path)?;
        check_header(path, &ck.header, cfg, Stage::Train, dataset, "train")?;
        Ok(ck)
    }

    /// Parameters in their saved order. Optimiser moments are not kept.
    pub fn store(&self) -> Result<ParamStore, NumError> {
        let mut store = ParamStore::new();
        for p in &self.params {
            store.add(p.name.clone(), Tensor::new(p.shape.clone(), p.data.clone())?)?;
        }
        Ok(store)
    }
}
