//! Experiment configuration: TOML / JSON files plus `key.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cd_branch::{CdConfig, MaskMode};
use crate::error::{ensure, Error, Result};
use crate::forge::procedural::ProceduralConfig;
use crate::forge::ForgeConfig;
use crate::nn::{AdamWConfig, Reduction};
use crate::objectives::LossWeights;
use crate::of_branch::OfConfig;
use crate::par::Execution;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Toy,
    Full,
}

/// Which branches are trained and evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchSelector {
    OfOnly,
    CdOnly,
    #[default]
    Both,
}

impl BranchSelector {
    pub const ALL: [BranchSelector; 3] = [BranchSelector::OfOnly, BranchSelector::CdOnly, BranchSelector::Both];

    pub fn uses_flow(self) -> bool {
        self != BranchSelector::CdOnly
    }

    pub fn uses_change(self) -> bool {
        self != BranchSelector::OfOnly
    }

    pub fn name(self) -> &'static str {
        match self {
            BranchSelector::OfOnly => "of_only",
            BranchSelector::CdOnly => "cd_only",
            BranchSelector::Both => "both",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub preset: Preset,
    pub iterations: Option<usize>,
    pub radius: Option<usize>,
    pub mask_threshold: Option<f64>,
    pub mask_mode: Option<MaskMode>,
}

impl ModelConfig {
    pub fn of_config(&self) -> OfConfig {
        let mut c = match self.preset {
            Preset::Toy => OfConfig::toy(),
            Preset::Full => OfConfig::full(),
        };
        if let Some(n) = self.iterations {
            c.iterations = n;
        }
        if let Some(r) = self.radius {
            c.radius = r;
        }
        c
    }

    pub fn cd_config(&self) -> CdConfig {
        let mut c = match self.preset {
            Preset::Toy => CdConfig::toy(),
            Preset::Full => CdConfig::full(),
        };
        if let Some(t) = self.mask_threshold {
            c.mask_threshold = t;
        }
        if let Some(m) = self.mask_mode {
            c.mask_mode = m;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub of_lr: f64,
    pub cd_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub branch: BranchSelector,
    pub optimizer: AdamWConfig,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub reduction: Reduction,
    /// Supervise every upsampled iterate, weighted by `gamma^(N−k)`.
    pub iteration_supervision: bool,
    pub iteration_gamma: f64,
    pub shuffle: bool,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            of_lr: 1e-5,
            cd_lr: 1e-4,
            batch_size: 4,
            epochs: 1000,
            seed: 0,
            branch: BranchSelector::Both,
            optimizer: AdamWConfig::default(),
            clip_norm: 1.0,
            reduction: Reduction::Mean,
            iteration_supervision: false,
            iteration_gamma: 0.8,
            shuffle: true,
            execution: Execution::Parallel,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Offset threshold `δ` defining moving pixels, in pixels.
    pub delta: f64,
    pub epsilon: f64,
    /// Probability threshold for binary change maps.
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            delta: 0.5,
            epsilon: 1e-6,
            threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Training manifest; defaults to `<out>/dataset/manifest.json`.
    pub train: Option<PathBuf>,
    /// Evaluation manifest; defaults to the training manifest.
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForgeSection {
    /// Background manifest; procedural sources are generated when unset.
    pub backgrounds: Option<PathBuf>,
    /// Cutout manifest; procedural sources are generated when unset.
    pub cutouts: Option<PathBuf>,
    pub procedural: ProceduralConfig,
    #[serde(flatten)]
    pub config: ForgeConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub pairs: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { pairs: 20, warmup: 3 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

/// Full experiment description. Defaults are the full-scale recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub eval: EvalConfig,
    pub data: DataConfig,
    pub forge: ForgeSection,
    pub bench: BenchConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig {
                preset: Preset::Full,
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            eval: EvalConfig::default(),
            data: DataConfig::default(),
            forge: ForgeSection::default(),
            bench: BenchConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale preset: toy model, 64×64 images, 200 epochs.
    pub fn toy() -> Self {
        let mut c = RunConfig::default();
        c.model.preset = Preset::Toy;
        c.train.epochs = 200;
        // The full-scale rates assume thousands of pairs and 1000 epochs; a
        // four-sample overfit needs larger steps and per-sample updates.
        c.train.of_lr = 3e-4;
        c.train.cd_lr = 2e-3;
        c.train.batch_size = 1;
        c.forge.config.output_size = (64, 64);
        c.forge.config.scale_range = (0.8, 1.1);
        c
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        ensure!(t.of_lr > 0.0 && t.cd_lr > 0.0, "learning rates must be positive");
        ensure!(t.batch_size >= 1, "batch_size must be at least 1");
        ensure!(t.clip_norm >= 0.0, "clip_norm must be >= 0");
        ensure!(
            t.iteration_gamma > 0.0 && t.iteration_gamma <= 1.0,
            "iteration_gamma must lie in (0,1]"
        );
        self.loss.validate()?;
        let e = &self.eval;
        ensure!(e.delta >= 0.0, "eval.delta must be >= 0");
        ensure!(e.epsilon > 0.0, "eval.epsilon must be positive");
        ensure!(
            e.threshold > 0.0 && e.threshold < 1.0,
            "eval.threshold must lie in (0,1)"
        );
        self.model.of_config().validate()?;
        self.model.cd_config().validate()?;
        Ok(())
    }

    /// Parses TOML text and applies `key.path=value` overrides.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::validation(format!("config: {e}")))?;
        Self::from_value(value, overrides)
    }

    /// Reads a `.toml` or `.json` file and applies overrides.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        ensure!(path.exists(), "config file not found: {}", path.display());
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value = if path.extension().is_some_and(|e| e == "json") {
            let mut json: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
            strip_nulls(&mut json);
            toml::Value::try_from(json).map_err(|e| Error::format(path, e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?
        };
        Self::from_value(value, overrides)
    }

    fn from_value(mut value: toml::Value, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::validation(format!("config: {}", e.message())))?;
        // serde drops unknown keys, so a mistyped override would pass silently
        let known = toml::Value::try_from(&cfg).expect("config serializes");
        for o in overrides {
            let key = o.split_once('=').map_or(o.as_str(), |(k, _)| k).trim();
            let mut cur = Some(&known);
            for part in key.split('.') {
                cur = cur.and_then(|v| v.get(part));
            }
            ensure!(cur.is_some(), "unknown config key {key:?}");
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

// TOML has no null; absent keys mean the same to serde.
fn strip_nulls(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            map.retain(|_, x| !x.is_null());
            map.values_mut().for_each(strip_nulls);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_nulls),
        _ => {}
    }
}

/// Sets `a.b.c = value`; the value is parsed as TOML, falling back to a string.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::validation(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    ensure!(!key.is_empty(), "override {assignment:?} has an empty key");
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::validation(format!("override {key}: {part} is not a table")))?;
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| Error::validation(format!("override {key}: parent is not a table")))?;
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}
