//! Run configuration: flat `key = value` text, overridable per key.

use std::collections::BTreeMap;
use std::fmt;

use crate::cggnn::CggnnConfig;
use crate::darl::{Baseline, DarlConfig, PolicyConfig, RewardConfig};
use crate::kg::synth::SynthConfig;
use crate::recommend::{default_widths, InferenceConfig};
use crate::transe::TranseConfig;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("`{key}` given twice (lines {first} and {second})")]
    Duplicate { key: String, first: usize, second: usize },
}

/// Which pipeline stage first consumes a key. Checkpoints compare the keys of
/// every stage up to their own.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Data,
    Pretrain,
    Model,
    Train,
    Infer,
    Runtime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthPreset {
    Planted,
    Dense,
    Clustered,
}

impl SynthPreset {
    pub fn config(self) -> SynthConfig {
        match self {
            SynthPreset::Planted => SynthConfig::planted(),
            SynthPreset::Dense => SynthConfig::dense(),
            SynthPreset::Clustered => SynthConfig::clustered(),
        }
    }
}

impl fmt::Display for SynthPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthPreset::Planted => "planted",
            SynthPreset::Dense => "dense",
            SynthPreset::Clustered => "clustered",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthPreset,
    /// Train share of each user's purchases when no held-out file exists.
    pub split_ratio: f64,
    pub dim: usize,
    pub transe_epochs: usize,
    pub transe_margin: f64,
    pub transe_lr: f64,
    pub transe_negatives: usize,
    pub ggnn_layers: usize,
    pub cgan_layers: usize,
    pub delta: f64,
    pub leaky_slope: f64,
    pub neighbor_cap: usize,
    /// Recurrent width; 0 means twice `dim`.
    pub hidden: usize,
    pub max_len: usize,
    pub category_cap: usize,
    pub entity_cap: usize,
    pub consistency_weight: f64,
    pub influence_weight: f64,
    pub gamma: f64,
    pub entropy_weight: f64,
    pub baseline: Baseline,
    pub terminal_every_step: bool,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub episodes_per_user: usize,
    pub freeze_cggnn: bool,
    /// Empty means the default schedule for `max_len`.
    pub beam_widths: Vec<usize>,
    pub top_k: usize,
    pub blend: f64,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let transe = TranseConfig::default();
        let cggnn = CggnnConfig::default();
        let darl = DarlConfig::default();
        let r = RewardConfig::default();
        Self {
            seed: 0,
            synth: SynthPreset::Planted,
            split_ratio: 0.7,
            dim: 100,
            transe_epochs: transe.epochs,
            transe_margin: transe.margin,
            transe_lr: transe.lr,
            transe_negatives: transe.negatives_per_positive,
            ggnn_layers: cggnn.ggnn_layers,
            cgan_layers: cggnn.cgan_layers,
            delta: cggnn.delta,
            leaky_slope: cggnn.leaky_slope,
            neighbor_cap: cggnn.neighbor_cap,
            hidden: 0,
            max_len: darl.max_len,
            category_cap: darl.category_cap,
            entity_cap: darl.entity_cap,
            consistency_weight: r.consistency_weight,
            influence_weight: r.influence_weight,
            gamma: r.gamma,
            entropy_weight: r.entropy_weight,
            baseline: r.baseline,
            terminal_every_step: r.terminal_every_step,
            epochs: darl.epochs,
            lr: darl.lr,
            batch_size: darl.batch_size,
            episodes_per_user: darl.episodes_per_user,
            freeze_cggnn: darl.freeze_cggnn,
            beam_widths: Vec::new(),
            top_k: 10,
            blend: 0.0,
            workers: 1,
        }
    }
}

/// Every key in rendering order, with its stage.
pub const KEYS: &[(&str, Stage)] = &[
    ("seed", Stage::Data),
    ("synth", Stage::Data),
    ("split_ratio", Stage::Data),
    ("dim", Stage::Pretrain),
    ("transe_epochs", Stage::Pretrain),
    ("transe_margin", Stage::Pretrain),
    ("transe_lr", Stage::Pretrain),
    ("transe_negatives", Stage::Pretrain),
    ("ggnn_layers", Stage::Model),
    ("cgan_layers", Stage::Model),
    ("delta", Stage::Model),
    ("leaky_slope", Stage::Model),
    ("neighbor_cap", Stage::Model),
    ("hidden", Stage::Model),
    ("max_len", Stage::Model),
    ("category_cap", Stage::Model),
    ("entity_cap", Stage::Model),
    ("consistency_weight", Stage::Train),
    ("influence_weight", Stage::Train),
    ("gamma", Stage::Train),
    ("entropy_weight", Stage::Train),
    ("baseline", Stage::Train),
    ("terminal_every_step", Stage::Train),
    ("epochs", Stage::Train),
    ("lr", Stage::Train),
    ("batch_size", Stage::Train),
    ("episodes_per_user", Stage::Train),
    ("freeze_cggnn", Stage::Train),
    ("beam_widths", Stage::Infer),
    ("top_k", Stage::Infer),
    ("blend", Stage::Infer),
    ("workers", Stage::Runtime),
];

fn bad(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::BadValue { key: key.into(), value: value.into(), reason: reason.into() }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| bad(key, value, e.to_string()))
}

impl RunConfig {
    /// Defaults, then the file's entries, then `overrides` in order.
    pub fn resolve(file: Option<&str>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        if let Some(text) = file {
            for (key, value) in parse_file(text)? {
                cfg.set(&key, &value)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "synth" => {
                self.synth = match v {
                    "planted" => SynthPreset::Planted,
                    "dense" => SynthPreset::Dense,
                    "clustered" => SynthPreset::Clustered,
                    _ => return Err(bad(key, v, "expected planted, dense or clustered")),
                }
            }
            "split_ratio" => self.split_ratio = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "transe_epochs" => self.transe_epochs = parse(key, v)?,
            "transe_margin" => self.transe_margin = parse(key, v)?,
            "transe_lr" => self.transe_lr = parse(key, v)?,
            "transe_negatives" => self.transe_negatives = parse(key, v)?,
            "ggnn_layers" => self.ggnn_layers = parse(key, v)?,
            "cgan_layers" => self.cgan_layers = parse(key, v)?,
            "delta" => self.delta = parse(key, v)?,
            "leaky_slope" => self.leaky_slope = parse(key, v)?,
            "neighbor_cap" => self.neighbor_cap = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "category_cap" => self.category_cap = parse(key, v)?,
            "entity_cap" => self.entity_cap = parse(key, v)?,
            "consistency_weight" => self.consistency_weight = parse(key, v)?,
            "influence_weight" => self.influence_weight = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "entropy_weight" => self.entropy_weight = parse(key, v)?,
            "baseline" => {
                self.baseline = match v {
                    "batch_mean" => Baseline::BatchMean,
                    "none" => Baseline::None,
                    _ => return Err(bad(key, v, "expected batch_mean or none")),
                }
            }
            "terminal_every_step" => self.terminal_every_step = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "episodes_per_user" => self.episodes_per_user = parse(key, v)?,
            "freeze_cggnn" => self.freeze_cggnn = parse(key, v)?,
            "beam_widths" => {
                self.beam_widths = if v.is_empty() || v == "default" {
                    Vec::new()
                } else {
                    v.split(',').map(|w| parse(key, w.trim())).collect::<Result<_, _>>()?
                }
            }
            "top_k" => self.top_k = parse(key, v)?,
            "blend" => self.blend = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = match key {
            "seed" => self.seed.to_string(),
            "synth" => self.synth.to_string(),
            "split_ratio" => self.split_ratio.to_string(),
            "dim" => self.dim.to_string(),
            "transe_epochs" => self.transe_epochs.to_string(),
            "transe_margin" => self.transe_margin.to_string(),
            "transe_lr" => self.transe_lr.to_string(),
            "transe_negatives" => self.transe_negatives.to_string(),
            "ggnn_layers" => self.ggnn_layers.to_string(),
            "cgan_layers" => self.cgan_layers.to_string(),
            "delta" => self.delta.to_string(),
            "leaky_slope" => self.leaky_slope.to_string(),
            "neighbor_cap" => self.neighbor_cap.to_string(),
            "hidden" => self.hidden.to_string(),
            "max_len" => self.max_len.to_string(),
            "category_cap" => self.category_cap.to_string(),
            "entity_cap" => self.entity_cap.to_string(),
            "consistency_weight" => self.consistency_weight.to_string(),
            "influence_weight" => self.influence_weight.to_string(),
            "gamma" => self.gamma.to_string(),
            "entropy_weight" => self.entropy_weight.to_string(),
            "baseline" => match self.baseline {
                Baseline::BatchMean => "batch_mean".into(),
                Baseline::None => "none".into(),
            },
            "terminal_every_step" => self.terminal_every_step.to_string(),
            "epochs" => self.epochs.to_string(),
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "episodes_per_user" => self.episodes_per_user.to_string(),
            "freeze_cggnn" => self.freeze_cggnn.to_string(),
            "beam_widths" => self.widths().iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
            "top_k" => self.top_k.to_string(),
            "blend" => self.blend.to_string(),
            "workers" => self.workers.to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Every key as `key = value`, one per line, in [`KEYS`] order. Parses
    /// back to the same configuration.
    pub fn render(&self) -> String {
        KEYS.iter().map(|(k, _)| format!("{k} = {}\n", self.get(k).unwrap_or_default())).collect()
    }

    /// Keys of stages up to and including `through`, with their values.
    pub fn snapshot(&self, through: Stage) -> BTreeMap<String, String> {
        KEYS.iter()
            .filter(|(_, s)| *s <= through)
            .map(|(k, _)| (k.to_string(), self.get(k).unwrap_or_default()))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("dim", self.dim),
            ("transe_negatives", self.transe_negatives),
            ("ggnn_layers", self.ggnn_layers),
            ("cgan_layers", self.cgan_layers),
            ("neighbor_cap", self.neighbor_cap),
            ("max_len", self.max_len),
            ("category_cap", self.category_cap),
            ("entity_cap", self.entity_cap),
            ("batch_size", self.batch_size),
            ("episodes_per_user", self.episodes_per_user),
            ("top_k", self.top_k),
            ("workers", self.workers),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(bad(k, "0", "must be at least 1"));
            }
        }
        let check = |k: &str, v: f64, ok: bool, why: &str| if ok { Ok(()) } else { Err(bad(k, &v.to_string(), why)) };
        check("split_ratio", self.split_ratio, self.split_ratio > 0.0 && self.split_ratio < 1.0, "must lie in (0, 1)")?;
        check("transe_margin", self.transe_margin, self.transe_margin > 0.0 && self.transe_margin.is_finite(), "must be positive")?;
        check("transe_lr", self.transe_lr, self.transe_lr > 0.0 && self.transe_lr.is_finite(), "must be positive")?;
        check("delta", self.delta, (0.0..=1.0).contains(&self.delta), "must lie in [0, 1]")?;
        check("leaky_slope", self.leaky_slope, self.leaky_slope > 0.0 && self.leaky_slope < 1.0, "must lie in (0, 1)")?;
        for (k, v) in [("consistency_weight", self.consistency_weight), ("influence_weight", self.influence_weight), ("entropy_weight", self.entropy_weight)] {
            check(k, v, v >= 0.0 && v.is_finite(), "must be nonnegative")?;
        }
        check("gamma", self.gamma, self.gamma > 0.0 && self.gamma <= 1.0, "must lie in (0, 1]")?;
        check("lr", self.lr, self.lr > 0.0 && self.lr.is_finite(), "must be positive")?;
        check("blend", self.blend, self.blend.is_finite(), "must be finite")?;
        if self.max_len > 16 {
            return Err(bad("max_len", &self.max_len.to_string(), "at most 16"));
        }
        if !self.beam_widths.is_empty() && (self.beam_widths.len() != self.max_len || self.beam_widths.contains(&0)) {
            return Err(bad("beam_widths", &self.get("beam_widths").unwrap_or_default(), format!("need {} positive widths", self.max_len)));
        }
        Ok(())
    }

    /// Independent seed for one named stage, derived from the root seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in stage.bytes() {
            h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
        }
        splitmix(self.seed ^ h)
    }

    pub fn widths(&self) -> Vec<usize> {
        if self.beam_widths.is_empty() {
            default_widths(self.max_len)
        } else {
            self.beam_widths.clone()
        }
    }

    pub fn transe(&self) -> TranseConfig {
        TranseConfig {
            epochs: self.transe_epochs,
            margin: self.transe_margin,
            lr: self.transe_lr,
            negatives_per_positive: self.transe_negatives,
            seed: self.stage_seed("transe"),
        }
    }

    pub fn cggnn(&self) -> CggnnConfig {
        CggnnConfig {
            ggnn_layers: self.ggnn_layers,
            cgan_layers: self.cgan_layers,
            delta: self.delta,
            leaky_slope: self.leaky_slope,
            neighbor_cap: self.neighbor_cap,
            seed: self.stage_seed("neighborhood"),
        }
    }

    pub fn policy(&self) -> PolicyConfig {
        PolicyConfig { dim: self.dim, hidden: self.hidden }
    }

    pub fn darl(&self) -> DarlConfig {
        DarlConfig {
            max_len: self.max_len,
            category_cap: self.category_cap,
            entity_cap: self.entity_cap,
            rewards: RewardConfig {
                consistency_weight: self.consistency_weight,
                influence_weight: self.influence_weight,
                gamma: self.gamma,
                entropy_weight: self.entropy_weight,
                baseline: self.baseline,
                terminal_every_step: self.terminal_every_step,
            },
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            episodes_per_user: self.episodes_per_user,
            freeze_cggnn: self.freeze_cggnn,
            workers: self.workers,
        }
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig { widths: self.widths(), top_k: self.top_k, blend: self.blend }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_file(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
        }
        if let Some(&first) = seen.get(k) {
            return Err(ConfigError::Duplicate { key: k.into(), first, second: i + 1 });
        }
        seen.insert(k.to_string(), i + 1);
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_render_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::resolve(Some(&cfg.render()), &[]).unwrap();
        assert_eq!(back.render(), cfg.render());
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let file = "dim = 16\nlr = 0.5 # comment\n\n# whole-line comment\n";
        let cfg = RunConfig::resolve(Some(file), &[("dim".into(), "8".into())]).unwrap();
        assert_eq!(cfg.dim, 8);
        assert_eq!(cfg.lr, 0.5);
        assert_eq!(cfg.top_k, 10);
    }

    #[test]
    fn every_key_is_settable_and_readable() {
        let mut cfg = RunConfig::default();
        for (k, _) in KEYS {
            let v = cfg.get(k).unwrap();
            cfg.set(k, &v).unwrap();
        }
        assert_eq!(cfg.render(), RunConfig::default().render());
    }

    #[test]
    fn bad_inputs_are_rejected() {
        assert_eq!(RunConfig::resolve(None, &[("nope".into(), "1".into())]), Err(ConfigError::UnknownKey("nope".into())));
        assert!(matches!(RunConfig::resolve(None, &[("dim".into(), "0".into())]), Err(ConfigError::BadValue { .. })));
        assert!(matches!(RunConfig::resolve(None, &[("delta".into(), "1.5".into())]), Err(ConfigError::BadValue { .. })));
        assert!(matches!(RunConfig::resolve(None, &[("gamma".into(), "0".into())]), Err(ConfigError::BadValue { .. })));
        assert!(matches!(RunConfig::resolve(None, &[("lr".into(), "abc".into())]), Err(ConfigError::BadValue { .. })));
        assert!(matches!(RunConfig::resolve(None, &[("beam_widths".into(), "1,2".into())]), Err(ConfigError::BadValue { .. })));
        assert!(matches!(RunConfig::resolve(Some("dim 3"), &[]), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(RunConfig::resolve(Some("dim=3\ndim=4"), &[]), Err(ConfigError::Duplicate { first: 1, second: 2, .. })));
    }

    #[test]
    fn stage_seeds_differ_and_follow_the_root() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..RunConfig::default() };
        assert_ne!(a.stage_seed("transe"), a.stage_seed("train"));
        assert_ne!(a.stage_seed("transe"), b.stage_seed("transe"));
        assert_eq!(a.stage_seed("transe"), RunConfig::default().stage_seed("transe"));
    }

    #[test]
    fn snapshot_is_cumulative() {
        let cfg = RunConfig::default();
        let pre = cfg.snapshot(Stage::Pretrain);
        assert!(pre.contains_key("seed") && pre.contains_key("dim"));
        assert!(!pre.contains_key("lr"));
        assert!(cfg.snapshot(Stage::Train).contains_key("lr"));
    }
}
