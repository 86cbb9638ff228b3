//! Shared fixtures for the stage benchmarks.

use cadrl::config::{RunConfig, SynthPreset};
use cadrl::pipeline::{pretrain, synthesize, Prepared};
use cadrl::transe::EmbeddingTable;

/// Desk-scale settings on the planted fixture, matching `configs/planted.conf`.
pub fn desk_config() -> RunConfig {
    RunConfig {
        synth: SynthPreset::Planted,
        dim: 32,
        lr: 1e-3,
        epochs: 1,
        episodes_per_user: 4,
        entropy_weight: 0.05,
        terminal_every_step: false,
        ..RunConfig::default()
    }
}

/// Synthesised dataset and its pretrained embeddings.
pub fn fixture(cfg: &RunConfig) -> (Prepared, EmbeddingTable) {
    let out = synthesize(cfg).expect("synthetic fixture");
    let prepared = Prepared::new(out.dataset).expect("prepared dataset");
    let (table, _) = pretrain(&prepared, cfg).expect("pretraining");
    (prepared, table)
}
