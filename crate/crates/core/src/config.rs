//! Run configuration: defaults, a dotted-key TOML file, and `key=value`
//! overrides applied in that order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedder::EmbedderConfig;
use crate::encoder::TransformerConfig;
use crate::error::{Error, Result};
use crate::geo::Bounds;
use crate::mapmatch::HmmParams;
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Node CSV for `prepare`; the synthetic network when unset.
    pub nodes: Option<PathBuf>,
    pub edges: Option<PathBuf>,
    /// Raw trajectory JSONL for `prepare`; the synthetic trajectories when unset.
    pub trajectories: Option<PathBuf>,
    /// Workspace directory holding every stage's outputs.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dense target interval, seconds.
    pub epsilon: i64,
    /// Sparse intervals produced by `sparsify`.
    pub intervals: Vec<i64>,
    /// Intervals mixed for joint training; all of `intervals` when unset.
    pub train_intervals: Option<Vec<i64>>,
    pub min_duration: i64,
    pub max_duration: i64,
    /// Train/validation/test weights of the id-hash split.
    pub split: [u32; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            epsilon: 15,
            intervals: vec![60, 120, 240],
            train_intervals: None,
            min_duration: 300,
            max_duration: 3600,
            split: [7, 2, 1],
        }
    }
}

impl DataConfig {
    pub fn joint_intervals(&self) -> &[i64] {
        self.train_intervals.as_deref().unwrap_or(&self.intervals)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub features: usize,
    pub reference_tokens: usize,
    /// Heads of both the reference attention and the encoder.
    pub heads: usize,
    pub layers: usize,
    /// Feed-forward width; four times `features` when unset.
    pub ffn_dim: Option<usize>,
    pub lora_rank: usize,
    pub kappa: f64,
    pub phi_dist: f64,
    pub shared_lff: bool,
    pub unfreeze_attention: bool,
    pub positional: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            features: 512,
            reference_tokens: 512,
            heads: 8,
            layers: 4,
            ffn_dim: None,
            lora_rank: 8,
            kappa: 15.0,
            phi_dist: 50.0,
            shared_lff: true,
            unfreeze_attention: false,
            positional: true,
        }
    }
}

impl ModelSection {
    pub fn embedder(&self) -> EmbedderConfig {
        EmbedderConfig {
            features: self.features,
            reference_tokens: self.reference_tokens,
            heads: self.heads,
            kappa: self.kappa,
            phi_dist: self.phi_dist,
            shared_lff: self.shared_lff,
        }
    }

    pub fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            layers: self.layers,
            hidden: self.features,
            heads: self.heads,
            ffn_dim: self.ffn_dim.unwrap_or(4 * self.features),
            lora_rank: self.lora_rank,
            unfreeze_attention: self.unfreeze_attention,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub rows: usize,
    pub cols: usize,
    /// Hour-of-day buckets.
    pub slices: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { rows: 64, cols: 64, slices: 24 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub grid: GridSection,
    pub hmm: HmmParams,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            paths: PathsConfig::default(),
            data: DataConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            grid: GridSection::default(),
            hmm: HmmParams::default(),
            synth: SynthConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parses a single override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').map(str::trim).collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key `{key}`")));
    }
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in path {
        let next = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next.as_table_mut().ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Resolves defaults, then the optional file, then each `key=value` override.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match file {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_parts(&text, overrides)
    }

    pub fn from_parts(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(config_err)?;
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_dotted(&mut table, k, parse_value(v))?;
        }
        let cfg: RunConfig = table.try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.embedder().validate()?;
        self.model.transformer().validate()?;
        self.train.validate()?;
        self.hmm.validate()?;
        self.synth.validate()?;
        let d = &self.data;
        if d.epsilon <= 0 {
            return Err(Error::Config(format!("data.epsilon must be positive, got {}", d.epsilon)));
        }
        if d.intervals.is_empty() || d.joint_intervals().is_empty() {
            return Err(Error::Config("at least one sparse interval is required".into()));
        }
        for &mu in d.intervals.iter().chain(d.joint_intervals()) {
            if mu <= d.epsilon || mu % d.epsilon != 0 {
                return Err(Error::Config(format!("interval {mu}s must be a multiple of epsilon {}s above it", d.epsilon)));
            }
        }
        if d.min_duration > d.max_duration {
            return Err(Error::Config("data.min_duration exceeds data.max_duration".into()));
        }
        if d.split[0] == 0 {
            return Err(Error::Config("the training split weight must be positive".into()));
        }
        if self.grid.rows == 0 || self.grid.cols == 0 || self.grid.slices == 0 {
            return Err(Error::Config("grid dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Fully resolved configuration in the file format.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration always serializes")
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig { epsilon: self.data.epsilon, seed: self.seed, ..self.synth.clone() }
    }

    pub fn model_config(&self, segments: usize, bounds: Bounds) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            embedder: self.model.embedder(),
            transformer: self.model.transformer(),
            epsilon: self.data.epsilon,
            segments,
            bounds,
            positional: self.model.positional,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::OptimizerKind;

    #[test]
    fn defaults_match_the_documented_values() {
        let c = RunConfig::from_parts("", &[]).unwrap();
        assert_eq!((c.model.features, c.model.reference_tokens, c.model.lora_rank, c.model.layers, c.model.heads), (512, 512, 8, 4, 8));
        assert_eq!((c.train.lambda, c.train.lr, c.train.batch_size, c.train.max_epochs, c.train.patience), (10.0, 1e-4, 64, 50, 10));
        assert_eq!((c.grid.rows, c.grid.cols, c.grid.slices), (64, 64, 24));
        assert_eq!((c.model.kappa, c.model.phi_dist, c.data.epsilon), (15.0, 50.0, 15));
        assert_eq!(c.data.intervals, vec![60, 120, 240]);
        assert_eq!(c.model.transformer().ffn_dim, 2048);
    }

    #[test]
    fn file_then_overrides() {
        let text = "seed = 3\ntrain.lr = 0.01\ntrain.optimizer = \"sgd\"\n[model]\nfeatures = 64\nheads = 4\n";
        let sets = vec!["model.features=32".to_string(), "paths.out = runs/a".to_string(), "data.train_intervals=[60,240]".into()];
        let c = RunConfig::from_parts(text, &sets).unwrap();
        assert_eq!((c.seed, c.train.lr, c.train.optimizer), (3, 0.01, OptimizerKind::Sgd));
        assert_eq!((c.model.features, c.model.heads), (32, 4));
        assert_eq!(c.paths.out, Some(PathBuf::from("runs/a")));
        assert_eq!(c.data.joint_intervals(), &[60, 240]);
    }

    #[test]
    fn echo_round_trips() {
        let sets = vec!["model.ffn_dim=100".to_string(), "synth.noise=2.5".into(), "seed=9".into()];
        let c = RunConfig::from_parts("", &sets).unwrap();
        let back = RunConfig::from_parts(&c.to_toml(), &[]).unwrap();
        assert_eq!(c, back);
        assert_eq!(back.synth_config().seed, 9);
    }

    #[test]
    fn rejects_bad_input() {
        let bad = |sets: &[&str]| {
            let sets: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
            matches!(RunConfig::from_parts("", &sets), Err(Error::Config(_)))
        };
        assert!(bad(&["model.featurez=8"]));
        assert!(bad(&["model.features=30"]));
        assert!(bad(&["data.intervals=[20]"]));
        assert!(bad(&["data.train_intervals=[45]", "data.epsilon=30"]));
        assert!(bad(&["train.lr=-1"]));
        assert!(bad(&["grid.rows=0"]));
        assert!(bad(&["hmm.sigma_z=0"]));
        assert!(bad(&["synth.seed=1"]));
        assert!(bad(&["nonsense"]));
        assert!(bad(&["train.lr.x=1"]));
        assert!(matches!(RunConfig::from_parts("model = [", &[]), Err(Error::Config(_))));
    }
}
