use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::policy::Architecture;
use crate::sampler::{BenchConfig, LatencyModel, SamplingPlan};
use crate::tasks::{TaskKind, TaskSpec, Verbosity};
use crate::updates::UpdateConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub difficulty: usize,
    /// Difficulty of the held-out evaluation split.
    pub heldout_difficulty: usize,
    /// Training prompts; an epoch is one pass over them.
    pub train_pool: usize,
    /// Instances per evaluation split.
    pub eval_size: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { kind: TaskKind::Add, difficulty: 1, heldout_difficulty: 2, train_pool: 4096, eval_size: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub n_layers: usize,
    /// 0 sizes the context to fit both evaluation difficulties.
    pub context: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { embed_dim: 32, n_heads: 4, ff_dim: 64, n_layers: 1, context: 64, init_std: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: f64,
    /// Upper bound on rounds; 0 means no bound.
    pub max_rounds: usize,
    /// Rounds between checkpoints; 0 saves only the final one.
    pub checkpoint_every: usize,
    /// A second serve of a group in the same round is an error.
    pub strict_serve: bool,
    /// Fraction of each round's trajectories replayed against the snapshot.
    pub verify_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 3.0, max_rounds: 0, checkpoint_every: 0, strict_serve: true, verify_fraction: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Rounds (or SFT epochs) between evaluations; 0 evaluates only at the end.
    pub every: usize,
    /// Samples per instance for pass@k.
    pub n_samples: usize,
    pub k_list: Vec<usize>,
    pub temperature: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { every: 10, n_samples: 8, k_list: vec![1, 2, 4, 8], temperature: 0.7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub verbosity: Verbosity,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self { verbosity: Verbosity::Stepwise, epochs: 20, batch_size: 32 }
    }
}

/// Everything a run needs. The defaults are the `dash` preset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub sampling: SamplingPlan,
    pub update: UpdateConfig,
    pub latency: LatencyModel,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sft: SftConfig,
    pub bench: BenchConfig,
}

pub const PRESETS: [&str; 4] = ["dash", "grpo-baseline", "multi", "mini"];

fn preset_overrides(name: &str) -> Result<&'static [(&'static str, &'static str)]> {
    Ok(match name {
        "dash" => &[],
        "grpo-baseline" => &[
            ("sampling.mode", "\"interleaved\""),
            ("update.schedule", "\"multi\""),
            ("update.k_steps", "1"),
            ("update.filter", "false"),
        ],
        "multi" => &[("update.schedule", "\"multi\""), ("update.k_steps", "4")],
        "mini" => &[("update.schedule", "\"mini\""), ("update.k_steps", "4")],
        _ => {
            return Err(Error::Config {
                key: "preset".into(),
                msg: format!("unknown preset {name:?}; known: {PRESETS:?}"),
            })
        }
    })
}

fn cfg_err(key: &str, msg: impl Into<String>) -> Error {
    Error::Config { key: key.to_string(), msg: msg.into() }
}

fn parse_value(key: &str, raw: &str) -> Result<Value> {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => Ok(t.remove("v").expect("parsed table has the key")),
        // Bare words are taken as strings.
        Err(_) if !raw.is_empty() && raw.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') => {
            Ok(Value::String(raw.to_string()))
        }
        Err(e) => Err(cfg_err(key, format!("cannot parse value {raw:?}: {e}"))),
    }
}

/// Replaces `key` in `tree`, which must already hold a value of a
/// compatible type there.
fn set_key(tree: &mut Table, key: &str, value: Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut table = tree;
    let mut path = String::new();
    while let Some(part) = parts.next() {
        if !path.is_empty() {
            path.push('.');
        }
        path.push_str(part);
        let slot = table.get_mut(part).ok_or_else(|| cfg_err(&path, "unknown key"))?;
        if parts.peek().is_none() {
            *slot = coerce(&path, slot, value)?;
            return Ok(());
        }
        table = slot.as_table_mut().ok_or_else(|| cfg_err(&path, "is not a table"))?;
    }
    Err(cfg_err(key, "empty key"))
}

fn coerce(key: &str, current: &Value, value: Value) -> Result<Value> {
    match (current, value) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Table(_), _) => Err(cfg_err(key, "is a table; set its keys individually")),
        (cur, v) if cur.same_type(&v) => Ok(v),
        (cur, v) => Err(cfg_err(key, format!("expected {}, got {}", cur.type_str(), v.type_str()))),
    }
}

fn merge(tree: &mut Table, prefix: &str, file: Table) -> Result<()> {
    for (k, v) in file {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(sub) if tree.get(&k).is_some_and(Value::is_table) => {
                let inner = tree.get_mut(&k).and_then(Value::as_table_mut).expect("checked above");
                merge(inner, &key, sub)?;
            }
            v => set_key(tree, &k, v).map_err(|e| match e {
                Error::Config { msg, .. } => cfg_err(&key, msg),
                other => other,
            })?,
        }
    }
    Ok(())
}

fn split_override(raw: &str) -> Result<(&str, &str)> {
    raw.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| cfg_err(raw, "override must look like key=value"))
}

impl RunConfig {
    /// Builds a config from defaults, then the preset, then the file, then
    /// the overrides, in that order. A `preset` key may appear in the file
    /// or in the overrides (the override wins).
    pub fn resolve(file_text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut file = match file_text {
            Some(text) => toml::from_str::<Table>(text).map_err(|e| cfg_err("<config>", e.to_string()))?,
            None => Table::new(),
        };
        let mut preset = match file.remove("preset") {
            Some(Value::String(s)) => Some(s),
            Some(other) => return Err(cfg_err("preset", format!("expected string, got {}", other.type_str()))),
            None => None,
        };
        let mut rest = Vec::new();
        for raw in overrides {
            let (k, v) = split_override(raw)?;
            if k == "preset" {
                preset = Some(v.trim_matches('"').to_string());
            } else {
                rest.push((k, v));
            }
        }

        let mut tree = Table::try_from(RunConfig::default()).map_err(|e| cfg_err("<defaults>", e.to_string()))?;
        for (k, v) in preset_overrides(preset.as_deref().unwrap_or("dash"))? {
            set_key(&mut tree, k, parse_value(k, v)?)?;
        }
        merge(&mut tree, "", file)?;
        for (k, v) in rest {
            set_key(&mut tree, k, parse_value(k, v)?)?;
        }
        let cfg: RunConfig =
            Value::Table(tree).try_into().map_err(|e: toml::de::Error| cfg_err("<config>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = path.map(std::fs::read_to_string).transpose()?;
        Self::resolve(text.as_deref(), overrides)
    }

    /// The exact values of this config as TOML; loading it back yields the
    /// same config.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| cfg_err("<config>", e.to_string()))
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        TaskSpec::new(self.task.kind, self.task.difficulty)
    }

    pub fn heldout_spec(&self) -> Result<TaskSpec> {
        TaskSpec::new(self.task.kind, self.task.heldout_difficulty)
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let task = self.task_spec()?;
        let heldout = self.heldout_spec()?;
        let need = |t: &TaskSpec, cap: usize| t.max_prompt_len() + cap.max(t.max_completion_len());
        let fit = need(&task, self.sampling.max_len).max(need(&heldout, self.sampling.max_len));
        let arch = Architecture {
            vocab_size: task.vocab().len(),
            embed_dim: self.model.embed_dim,
            n_heads: self.model.n_heads,
            ff_dim: self.model.ff_dim,
            context: if self.model.context == 0 { fit } else { self.model.context },
            n_layers: self.model.n_layers,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        self.task_spec()?;
        self.heldout_spec()?;
        if self.task.train_pool == 0 {
            return Err(cfg_err("task.train_pool", "must be >= 1"));
        }
        self.architecture()?;
        if !(self.model.init_std >= 0.0 && self.model.init_std.is_finite()) {
            return Err(cfg_err("model.init_std", "must be a finite value >= 0"));
        }
        self.sampling.validate()?;
        self.update.validate()?;
        self.update.validate_for_batch(self.sampling.samples())?;
        self.latency.validate()?;
        if !(self.train.epochs > 0.0 && self.train.epochs.is_finite()) {
            return Err(cfg_err("train.epochs", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.train.verify_fraction) {
            return Err(cfg_err("train.verify_fraction", "must lie in [0, 1]"));
        }
        if self.eval.k_list.is_empty() || self.eval.k_list.contains(&0) {
            return Err(cfg_err("eval.k_list", "must be nonempty with every k >= 1"));
        }
        if self.eval.k_list.iter().any(|&k| k > self.eval.n_samples) {
            return Err(cfg_err("eval.k_list", format!("every k must be <= eval.n_samples ({})", self.eval.n_samples)));
        }
        if !(self.eval.temperature > 0.0 && self.eval.temperature.is_finite()) {
            return Err(cfg_err("eval.temperature", "must be > 0"));
        }
        if self.sft.batch_size == 0 {
            return Err(cfg_err("sft.batch_size", "must be >= 1"));
        }
        Ok(())
    }

    /// Rounds for the configured epochs, capped by `train.max_rounds`.
    pub fn rounds(&self) -> usize {
        let per_round = self.sampling.prompts as f64;
        let rounds = (self.train.epochs * self.task.train_pool as f64 / per_round).ceil() as usize;
        match self.train.max_rounds {
            0 => rounds.max(1),
            cap => rounds.clamp(1, cap),
        }
    }
}
