//! Run configuration: validation, flat key=value config files mirroring the
//! CLI flags, and a stable hash serialized into every output record.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::cells::Architecture;
use crate::engines::EngineKind;
use crate::error::{Error, Result};
use crate::optim::{OptimizerKind, PruneCurve, PruneSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskId {
    #[serde(rename = "copy")]
    Copy,
    #[serde(rename = "copy-fixed")]
    CopyFixed,
    #[serde(rename = "bytelm")]
    ByteLm,
}

impl TaskId {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskId::Copy),
            "copy-fixed" => Ok(TaskId::CopyFixed),
            "bytelm" => Ok(TaskId::ByteLm),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Copy => "copy",
            TaskId::CopyFixed => "copy-fixed",
            TaskId::ByteLm => "bytelm",
        }
    }
}

/// Experiment description. Serialized verbatim into the output header.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskId,
    pub arch: Architecture,
    pub units: usize,
    pub sparsity: f64,
    /// Engine id: bptt | rtrl | rtrl_sparse | snap1 | snap<n> | rflo | uoro.
    pub engine: String,
    /// Update period U in timesteps; 0 updates once at each sequence end.
    pub update_period: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Training budget in tokens (every processed timestep is one token).
    pub budget_tokens: u64,
    /// Optional cap on optimizer steps (0 = no cap).
    pub budget_steps: u64,
    pub seed: u64,
    /// Output directory; in-memory only when absent.
    pub out: Option<PathBuf>,

    /// Payload length for the fixed-length copy variant.
    pub copy_fixed_len: usize,
    /// Byte corpus path; a deterministic synthetic corpus is used if absent.
    pub corpus: Option<PathBuf>,
    pub corpus_bytes: usize,
    pub crop_len: usize,
    /// Hidden width of the readout MLP; 0 selects a linear readout.
    pub readout_hidden: usize,
    pub val_fraction: f64,
    /// Validation cadence in optimizer steps (bytelm; 0 = only at the end).
    pub eval_interval: u64,
    /// Metrics cadence in tokens.
    pub log_interval: u64,

    /// Progressive pruning endpoint (0 disables pruning).
    pub prune_final_sparsity: f64,
    pub prune_interval: u64,
    pub prune_final_step: u64,
    pub prune_curve: PruneCurve,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskId::Copy,
            arch: Architecture::Gru,
            units: 64,
            sparsity: 0.0,
            engine: "snap1".into(),
            update_period: 1,
            batch: 16,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            budget_tokens: 2_000_000,
            budget_steps: 0,
            seed: 0,
            out: None,
            copy_fixed_len: 16,
            corpus: None,
            corpus_bytes: 2_000_000,
            crop_len: 128,
            readout_hidden: 0,
            val_fraction: 0.05,
            eval_interval: 0,
            log_interval: 50_000,
            prune_final_sparsity: 0.0,
            prune_interval: 1000,
            prune_final_step: 0,
            prune_curve: PruneCurve::Cubic,
        }
    }
}

impl RunConfig {
    pub fn engine_kind(&self) -> Result<EngineKind> {
        EngineKind::parse(&self.engine)
    }

    pub fn input_dim(&self) -> usize {
        match self.task {
            TaskId::Copy | TaskId::CopyFixed => crate::tasks::COPY_CHANNELS,
            TaskId::ByteLm => crate::tasks::BYTE_CLASSES,
        }
    }

    pub fn classes(&self) -> usize {
        match self.task {
            TaskId::Copy | TaskId::CopyFixed => crate::tasks::COPY_CLASSES,
            TaskId::ByteLm => crate::tasks::BYTE_CLASSES,
        }
    }

    pub fn prune_schedule(&self) -> Option<PruneSchedule> {
        if self.prune_final_sparsity > 0.0 {
            Some(PruneSchedule {
                interval: self.prune_interval,
                final_sparsity: self.prune_final_sparsity,
                final_step: self.prune_final_step.max(1),
                curve: self.prune_curve,
            })
        } else {
            None
        }
    }

    /// Rejects inconsistent configurations before the run starts.
    pub fn validate(&self) -> Result<()> {
        let kind = self.engine_kind()?;
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::Config(format!("sparsity {} outside [0, 1)", self.sparsity)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be ≥ 1".into()));
        }
        if self.budget_tokens == 0 && self.budget_steps == 0 {
            return Err(Error::Config("one of budget_tokens / budget_steps must be set".into()));
        }
        if self.units == 0 {
            return Err(Error::Config("units must be ≥ 1".into()));
        }
        if self.task == TaskId::CopyFixed && self.copy_fixed_len == 0 {
            return Err(Error::Config("copy_fixed_len must be ≥ 1".into()));
        }
        if self.task == TaskId::ByteLm && self.crop_len == 0 {
            return Err(Error::Config("crop_len must be ≥ 1".into()));
        }
        if self.prune_schedule().is_some() {
            if kind.compressed_influence() {
                return Err(Error::Config(format!(
                    "a growing sparsity schedule needs dense gradients: engine '{}' \
                     stores compressed influence and cannot prune (use bptt)",
                    self.engine
                )));
            }
            if self.prune_interval == 0 || self.prune_final_step == 0 {
                return Err(Error::Config("prune_interval and prune_final_step must be ≥ 1".into()));
            }
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }

    /// Canonical `key = value` text, one pair per line, sorted by key.
    pub fn to_kv(&self) -> String {
        let json = serde_json::to_value(self).expect("config serializes");
        let mut map = BTreeMap::new();
        if let serde_json::Value::Object(obj) = json {
            for (k, v) in obj {
                let s = match v {
                    serde_json::Value::Null => continue,
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                };
                map.insert(k, s);
            }
        }
        let mut out = String::new();
        for (k, v) in map {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value '{value}' for {what}"));
        match key {
            "task" => self.task = TaskId::parse(value)?,
            "arch" => self.arch = Architecture::parse(value)?,
            "units" => self.units = value.parse().map_err(|_| bad("units"))?,
            "sparsity" => self.sparsity = value.parse().map_err(|_| bad("sparsity"))?,
            "engine" => self.engine = value.to_string(),
            "update_period" => self.update_period = value.parse().map_err(|_| bad("update_period"))?,
            "batch" => self.batch = value.parse().map_err(|_| bad("batch"))?,
            "lr" => self.lr = value.parse().map_err(|_| bad("lr"))?,
            "optimizer" => self.optimizer = OptimizerKind::parse(value)?,
            "budget_tokens" => self.budget_tokens = value.parse().map_err(|_| bad("budget_tokens"))?,
            "budget_steps" => self.budget_steps = value.parse().map_err(|_| bad("budget_steps"))?,
            "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
            "out" => self.out = Some(PathBuf::from(value)),
            "copy_fixed_len" => self.copy_fixed_len = value.parse().map_err(|_| bad("copy_fixed_len"))?,
            "corpus" => self.corpus = Some(PathBuf::from(value)),
            "corpus_bytes" => self.corpus_bytes = value.parse().map_err(|_| bad("corpus_bytes"))?,
            "crop_len" => self.crop_len = value.parse().map_err(|_| bad("crop_len"))?,
            "readout_hidden" => self.readout_hidden = value.parse().map_err(|_| bad("readout_hidden"))?,
            "val_fraction" => self.val_fraction = value.parse().map_err(|_| bad("val_fraction"))?,
            "eval_interval" => self.eval_interval = value.parse().map_err(|_| bad("eval_interval"))?,
            "log_interval" => self.log_interval = value.parse().map_err(|_| bad("log_interval"))?,
            "prune_final_sparsity" => {
                self.prune_final_sparsity = value.parse().map_err(|_| bad("prune_final_sparsity"))?
            }
            "prune_interval" => self.prune_interval = value.parse().map_err(|_| bad("prune_interval"))?,
            "prune_final_step" => self.prune_final_step = value.parse().map_err(|_| bad("prune_final_step"))?,
            "prune_curve" => self.prune_curve = PruneCurve::parse(value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parses a flat config file (`key = value` per line, `#` comments).
    pub fn apply_file(&mut self, path: &std::path::Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected 'key = value'",
                    path.display(),
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// FNV-1a hash of the canonical config text, excluding the output path,
    /// which has no effect on the trajectory.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for line in self.to_kv().lines() {
            if line.starts_with("out =") {
                continue;
            }
            for b in line.bytes().chain(std::iter::once(b'\n')) {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        format!("{h:016x}")
    }
}
