//! Run configuration: TOML file, named presets, and `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{RecapError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub vit_layers: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub rgcn_layers: usize,
    pub dropout: f64,
    /// PrR scale factor.
    pub gamma: f64,
    /// Longest report (in tokens) fed to the prior-report encoder.
    pub max_prior_tokens: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 32,
            heads: 4,
            ffn: 64,
            image_size: 32,
            patch_size: 8,
            vit_layers: 2,
            encoder_layers: 1,
            decoder_layers: 2,
            rgcn_layers: 3,
            dropout: 0.1,
            gamma: 2.0,
            max_prior_tokens: 104,
        }
    }
}

impl ModelConfig {
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub k: usize,
    pub min_count: usize,
    pub temporal_lexicon: Option<PathBuf>,
    pub spatial_lexicon: Option<PathBuf>,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            k: 30,
            min_count: 1,
            temporal_lexicon: None,
            spatial_lexicon: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointMetric {
    MacroF1Abnormal,
    Bleu4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub alpha_d: f64,
    pub augment: bool,
    pub resize_to: usize,
    pub flip_prob: f64,
    pub threshold: f64,
    pub context_rule: ContextRule,
    pub checkpoint_metric: CheckpointMetric,
}

/// How Stage-1 probabilities become the observation context of Stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextRule {
    /// Keep detected observations (`p_d ≥ t`), status from `p_c`.
    #[default]
    Detection,
    /// Keep observations with `p_d·p_c ≥ t`, status from `p_c`.
    Joint,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            epochs: 5,
            batch_size: 128,
            lr: 1e-4,
            weight_decay: 0.01,
            alpha_d: 3.0,
            augment: true,
            resize_to: 36,
            flip_prob: 0.5,
            threshold: 0.5,
            context_rule: ContextRule::Detection,
            checkpoint_metric: CheckpointMetric::MacroF1Abnormal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    NoOp,
    NoObs,
    NoPro,
    NoPrr,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::None,
        Ablation::NoOp,
        Ablation::NoObs,
        Ablation::NoPro,
        Ablation::NoPrr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoOp => "no-op",
            Ablation::NoObs => "no-obs",
            Ablation::NoPro => "no-pro",
            Ablation::NoPrr => "no-prr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|a| a.as_str() == s)
    }

    pub fn uses_observations(self) -> bool {
        !matches!(self, Ablation::NoOp | Ablation::NoObs)
    }

    pub fn uses_prior(self) -> bool {
        !matches!(self, Ablation::NoOp | Ablation::NoPro)
    }

    pub fn uses_graph(self) -> bool {
        !matches!(self, Ablation::NoOp | Ablation::NoObs | Ablation::NoPrr)
    }

    /// Variants that skip the observation stage get the longer schedule.
    pub fn long_schedule(self) -> bool {
        matches!(self, Ablation::NoOp | Ablation::NoObs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub epochs: usize,
    pub ablation_epochs: usize,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_rest: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub ablation: Ablation,
    pub checkpoint_metric: CheckpointMetric,
    /// Score validation BLEU-4 with gold observation context instead of Stage-1 predictions.
    pub gold_context_eval: bool,
    pub mixed_precision: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            epochs: 5,
            ablation_epochs: 10,
            batch_size: 32,
            lr_encoder: 5e-5,
            lr_rest: 1e-4,
            weight_decay: 0.01,
            lambda: 0.5,
            ablation: Ablation::None,
            checkpoint_metric: CheckpointMetric::Bleu4,
            gold_context_eval: false,
            mixed_precision: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub max_steps: usize,
    pub mode: DecodeMode,
    pub beam_size: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_steps: 104,
            mode: DecodeMode::Greedy,
            beam_size: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub size: usize,
    pub follow_up_ratio: f64,
    pub split_fractions: [f64; 3],
    pub persistence: f64,
    pub noise_sd: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 200,
            follow_up_ratio: 0.24,
            split_fractions: [0.8, 0.1, 0.1],
            persistence: 0.6,
            noise_sd: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub graph: GraphConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub decode: DecodeConfig,
    pub synth: SynthConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config::toy()
    }
}

impl Config {
    /// Desk-scale settings used by tests and the default CLI run.
    pub fn toy() -> Self {
        Config {
            seed: 0,
            model: ModelConfig::default(),
            graph: GraphConfig::default(),
            // synthetic findings are tied to patch positions, which crops and flips scramble
            stage1: Stage1Config {
                batch_size: 16,
                lr: 1e-3,
                augment: false,
                ..Stage1Config::default()
            },
            stage2: Stage2Config {
                batch_size: 8,
                lr_encoder: 5e-4,
                lr_rest: 1e-3,
                ..Stage2Config::default()
            },
            decode: DecodeConfig {
                max_steps: 64,
                ..DecodeConfig::default()
            },
            synth: SynthConfig::default(),
        }
    }

    /// Full-size chest X-ray settings.
    pub fn cxr() -> Self {
        Config {
            seed: 0,
            model: ModelConfig {
                hidden: 768,
                heads: 12,
                ffn: 3072,
                image_size: 224,
                patch_size: 16,
                vit_layers: 12,
                encoder_layers: 3,
                decoder_layers: 3,
                ..ModelConfig::default()
            },
            graph: GraphConfig {
                min_count: 10,
                ..GraphConfig::default()
            },
            stage1: Stage1Config {
                resize_to: 256,
                ..Stage1Config::default()
            },
            stage2: Stage2Config::default(),
            decode: DecodeConfig::default(),
            synth: SynthConfig::default(),
        }
    }

    /// Full-size abnormal-findings settings.
    pub fn abn() -> Self {
        let mut c = Config::cxr();
        c.graph.min_count = 3;
        c.stage1.epochs = 10;
        c.decode.max_steps = 64;
        c.synth.follow_up_ratio = 0.09;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Config::toy()),
            "cxr" => Ok(Config::cxr()),
            "abn" => Ok(Config::abn()),
            other => Err(RecapError::Config(format!(
                "unknown preset {other:?}; expected toy, cxr or abn"
            ))),
        }
    }

    /// A file may start from a preset with a top-level `preset = "..."` key.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut value: toml::Table =
            toml::from_str(text).map_err(|e| RecapError::Config(e.to_string()))?;
        let base = match value.remove("preset") {
            Some(toml::Value::String(name)) => Config::preset(&name)?,
            Some(_) => return Err(RecapError::Config("preset must be a string".into())),
            None => Config::toy(),
        };
        let mut merged = base.to_table()?;
        merge(&mut merged, value);
        let cfg: Config = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| RecapError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| RecapError::io(path, e))?;
        Config::from_toml(&text)
    }

    fn to_table(&self) -> Result<toml::Table> {
        toml::Table::try_from(self).map_err(|e| RecapError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| RecapError::Config(e.to_string()))
    }

    /// Applies `section.key=value`; the value is read as TOML, falling back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| RecapError::Config(format!("override {assignment:?} lacks '='")))?;
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut table = self.to_table()?;
        let path: Vec<&str> = key.trim().split('.').collect();
        let mut cur = &mut table;
        for part in &path[..path.len() - 1] {
            cur = cur
                .get_mut(*part)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| RecapError::Config(format!("unknown config section {part:?}")))?;
        }
        let leaf = path[path.len() - 1];
        if !cur.contains_key(leaf) && !is_optional_key(leaf) {
            return Err(RecapError::Config(format!("unknown config key {key:?}")));
        }
        cur.insert(leaf.to_string(), parsed);
        let next: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| RecapError::Config(format!("{key}: {e}")))?;
        next.validate()?;
        *self = next;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |msg: String| Err(RecapError::Config(msg));
        if m.hidden == 0 || m.heads == 0 || !m.hidden.is_multiple_of(m.heads) {
            return bad(format!("hidden {} must be a positive multiple of heads {}", m.hidden, m.heads));
        }
        if m.patch_size == 0 || !m.image_size.is_multiple_of(m.patch_size) {
            return bad("image_size must be a multiple of patch_size".into());
        }
        if m.rgcn_layers == 0 || m.decoder_layers == 0 || m.vit_layers == 0 {
            return bad("layer counts must be at least 1".into());
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return bad(format!("dropout {} outside [0, 1)", m.dropout));
        }
        if self.graph.k == 0 {
            return bad("graph.k must be at least 1".into());
        }
        if self.graph.min_count == 0 {
            return bad("graph.min_count must be at least 1".into());
        }
        let s1 = &self.stage1;
        if s1.lr <= 0.0 || s1.alpha_d <= 0.0 || s1.batch_size == 0 {
            return bad("stage1 lr, alpha_d and batch_size must be positive".into());
        }
        if !(s1.threshold > 0.0 && s1.threshold < 1.0) {
            return bad("stage1.threshold must lie in (0, 1)".into());
        }
        if s1.resize_to < m.image_size {
            return bad("stage1.resize_to must be at least image_size".into());
        }
        let s2 = &self.stage2;
        if s2.lr_encoder <= 0.0 || s2.lr_rest <= 0.0 || s2.batch_size == 0 {
            return bad("stage2 learning rates and batch_size must be positive".into());
        }
        if s2.lambda < 0.0 {
            return bad("stage2.lambda must be non-negative".into());
        }
        if s2.mixed_precision {
            return bad("mixed precision is not supported; arithmetic is f64 throughout".into());
        }
        if self.decode.max_steps == 0 || self.decode.beam_size == 0 {
            return bad("decode.max_steps and decode.beam_size must be positive".into());
        }
        Ok(())
    }

    /// Hex sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

fn is_optional_key(key: &str) -> bool {
    matches!(key, "temporal_lexicon" | "spatial_lexicon")
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
