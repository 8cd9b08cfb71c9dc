//! Experiment configuration: a flat `key = value` document mapping onto one
//! typed struct, with strict parsing (unknown or duplicate keys are errors)
//! and a deterministic echo for run-directory provenance.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::attention::{CleanContext, LayoutKind};
use crate::corpus::TaskKind;
use crate::decoder::{ConfidenceMeasure, DecodeConfig};
use crate::error::{Error, Result};
use crate::masking::{MaskMode, MaskSchedule};
use crate::model::{ModelConfig, OptimConfig};

/// Environment variable consulted for the output root when the config does
/// not set `output_root`.
pub const OUTPUT_ROOT_ENV: &str = "BLOCKDLM_OUT";

/// Which objective a run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Ar,
    Dlm,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ar => "ar",
            LossKind::Dlm => "dlm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ar" => Ok(LossKind::Ar),
            "dlm" => Ok(LossKind::Dlm),
            other => Err(Error::Config(format!("unknown loss '{other}'"))),
        }
    }
}

/// What the training stream contains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskSpec {
    /// One or more synthetic tasks mixed in equal shares.
    Synthetic(Vec<TaskKind>),
    /// Byte-level text windows.
    Text,
}

impl TaskSpec {
    pub fn name(&self) -> String {
        match self {
            TaskSpec::Synthetic(kinds) => kinds
                .iter()
                .map(|k| k.name())
                .collect::<Vec<_>>()
                .join("+"),
            TaskSpec::Text => "text".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "text" {
            return Ok(TaskSpec::Text);
        }
        let kinds: Vec<TaskKind> = s
            .split('+')
            .map(|part| {
                TaskKind::parse(part).ok_or_else(|| {
                    Error::Config(format!(
                        "unknown task '{part}' (expected text or a +-joined list of copy, reverse, modular_add, sorted_digits)"
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if kinds.is_empty() {
            return Err(Error::Config("task list is empty".into()));
        }
        Ok(TaskSpec::Synthetic(kinds))
    }

    /// Task kinds to evaluate generation on (empty for text).
    pub fn kinds(&self) -> &[TaskKind] {
        match self {
            TaskSpec::Synthetic(kinds) => kinds,
            TaskSpec::Text => &[],
        }
    }
}

/// When checkpoints are written during a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointSchedule {
    /// Final checkpoint only.
    Final,
    /// Log-spaced saves at steps/16, steps/8, steps/4, steps/2, steps.
    Geometric,
}

impl CheckpointSchedule {
    pub fn name(self) -> &'static str {
        match self {
            CheckpointSchedule::Final => "final",
            CheckpointSchedule::Geometric => "geometric",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(CheckpointSchedule::Final),
            "geometric" => Ok(CheckpointSchedule::Geometric),
            other => Err(Error::Config(format!(
                "unknown checkpoint schedule '{other}' (expected final or geometric)"
            ))),
        }
    }
}

/// Everything one run needs, resolvable from a flat key-value file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub seed: u64,
    /// Run directories live under this root; falls back to the
    /// `BLOCKDLM_OUT` environment variable, then `./runs`.
    pub output_root: Option<PathBuf>,

    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub max_positions: usize,
    pub token_shift: bool,

    pub task: TaskSpec,
    /// Text corpus file; when unset and `task = text`, a deterministic
    /// synthetic corpus of `text_bytes` bytes is generated into the run dir.
    pub text_path: Option<PathBuf>,
    pub text_bytes: usize,
    pub seq_len: usize,
    pub batch_size: usize,

    pub loss: LossKind,
    pub attention: LayoutKind,
    pub clean_context: CleanContext,
    pub train_block_size: usize,
    pub mask_mode: MaskMode,
    /// Half-life ratio λ; `inf` is the uniform limit.
    pub half_life: f64,
    pub per_block_t: bool,

    pub lr: f64,
    pub lr_final: f64,
    pub steps: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `inf` disables.
    pub grad_clip: f64,
    /// Stop early once the trailing-window mean train loss reaches this.
    pub target_loss: Option<f64>,
    pub checkpoint_schedule: CheckpointSchedule,

    pub eval_block_sizes: Vec<usize>,
    /// Thresholds to sweep; `None` is the off sentinel.
    pub tau_grid: Vec<Option<f64>>,
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub confidence: ConfidenceMeasure,
    pub mc_samples: usize,
    pub eval_instances: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        ExperimentConfig {
            run_id: "run".into(),
            seed: 0,
            output_root: None,
            d_model: model.d_model,
            n_heads: model.n_heads,
            n_layers: model.n_layers,
            d_ffn: model.d_ffn,
            max_positions: model.max_positions,
            token_shift: false,
            task: TaskSpec::Synthetic(vec![TaskKind::ModularAdd, TaskKind::Copy]),
            text_path: None,
            text_bytes: 1 << 18,
            seq_len: 256,
            batch_size: 8,
            loss: LossKind::Dlm,
            attention: LayoutKind::BlockClean,
            clean_context: CleanContext::BlockCausal,
            train_block_size: 8,
            mask_mode: MaskMode::Uniform,
            half_life: f64::INFINITY,
            per_block_t: false,
            lr: 1e-3,
            lr_final: 1e-4,
            steps: 600,
            weight_decay: 0.0,
            grad_clip: 1.0,
            target_loss: None,
            checkpoint_schedule: CheckpointSchedule::Final,
            eval_block_sizes: vec![8],
            tau_grid: vec![None, Some(0.9), Some(0.7), Some(0.5), Some(0.3), Some(0.1), Some(0.0)],
            max_new_tokens: 16,
            temperature: 0.0,
            confidence: ConfidenceMeasure::TopProb,
            mc_samples: 32,
            eval_instances: 64,
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("bad boolean '{other}' for {key}"))),
    }
}

fn parse_half_life(value: &str) -> Result<f64> {
    if value == "inf" || value == "infinity" {
        return Ok(f64::INFINITY);
    }
    let v: f64 = parse_as("half_life", value)?;
    if !(v > 0.0) {
        return Err(Error::Config(format!("half_life must be positive, got {v}")));
    }
    Ok(v)
}

fn parse_tau(value: &str) -> Result<Option<f64>> {
    if value == "off" {
        return Ok(None);
    }
    let v: f64 = parse_as("tau", value)?;
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("tau {v} outside [0, 1]")));
    }
    Ok(Some(v))
}

fn fmt_tau(tau: Option<f64>) -> String {
    match tau {
        None => "off".into(),
        Some(v) => format!("{v}"),
    }
}

/// Formats a threshold for file names: `off` or the digits with the dot
/// dropped (`0.5` → `0p5`).
pub fn tau_slug(tau: Option<f64>) -> String {
    fmt_tau(tau).replace('.', "p")
}

impl ExperimentConfig {
    /// Sets one field from its key-value form. Shared by the file parser
    /// and CLI overrides so both accept exactly the same keys.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "run_id" => self.run_id = value.to_string(),
            "seed" => self.seed = parse_as(key, value)?,
            "output_root" => self.output_root = Some(PathBuf::from(value)),
            "d_model" => self.d_model = parse_as(key, value)?,
            "n_heads" => self.n_heads = parse_as(key, value)?,
            "n_layers" => self.n_layers = parse_as(key, value)?,
            "d_ffn" => self.d_ffn = parse_as(key, value)?,
            "max_positions" => self.max_positions = parse_as(key, value)?,
            "token_shift" => self.token_shift = parse_bool(key, value)?,
            "task" => self.task = TaskSpec::parse(value)?,
            "text_path" => self.text_path = Some(PathBuf::from(value)),
            "text_bytes" => self.text_bytes = parse_as(key, value)?,
            "seq_len" => self.seq_len = parse_as(key, value)?,
            "batch_size" => self.batch_size = parse_as(key, value)?,
            "loss" => self.loss = LossKind::parse(value)?,
            "attention" => {
                self.attention = LayoutKind::parse(value).ok_or_else(|| {
                    Error::Config(format!(
                        "unknown attention '{value}' (expected causal, bidirectional, block_noisy, or block_clean)"
                    ))
                })?
            }
            "clean_context" => {
                self.clean_context = match value {
                    "block_causal" => CleanContext::BlockCausal,
                    "token_causal" => CleanContext::TokenCausal,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown clean_context '{other}' (expected block_causal or token_causal)"
                        )))
                    }
                }
            }
            "train_block_size" => self.train_block_size = parse_as(key, value)?,
            "mask_mode" => {
                self.mask_mode = MaskMode::parse(value).ok_or_else(|| {
                    Error::Config(format!(
                        "unknown mask_mode '{value}' (expected uniform, position_dependent, or right_to_left)"
                    ))
                })?
            }
            "half_life" => self.half_life = parse_half_life(value)?,
            "per_block_t" => self.per_block_t = parse_bool(key, value)?,
            "lr" => self.lr = parse_as(key, value)?,
            "lr_final" => self.lr_final = parse_as(key, value)?,
            "steps" => self.steps = parse_as(key, value)?,
            "weight_decay" => self.weight_decay = parse_as(key, value)?,
            "grad_clip" => {
                self.grad_clip = if value == "inf" || value == "infinity" {
                    f64::INFINITY
                } else {
                    parse_as(key, value)?
                }
            }
            "target_loss" => {
                self.target_loss = match value {
                    "none" => None,
                    v => Some(parse_as(key, v)?),
                }
            }
            "checkpoint_schedule" => self.checkpoint_schedule = CheckpointSchedule::parse(value)?,
            "eval_block_sizes" => {
                self.eval_block_sizes = value
                    .split(',')
                    .map(|v| parse_as::<usize>(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            "tau_grid" => {
                self.tau_grid = value
                    .split(',')
                    .map(|v| parse_tau(v.trim()))
                    .collect::<Result<_>>()?
            }
            "max_new_tokens" => self.max_new_tokens = parse_as(key, value)?,
            "temperature" => self.temperature = parse_as(key, value)?,
            "confidence" => self.confidence = ConfidenceMeasure::parse(value)?,
            "mc_samples" => self.mc_samples = parse_as(key, value)?,
            "eval_instances" => self.eval_instances = parse_as(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parses a flat key-value document; `#` starts a comment, blank lines
    /// are skipped, and every key may appear at most once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen: HashSet<String> = HashSet::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value', got {raw:?}", ln + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", ln + 1)));
            }
            cfg.set_key(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", ln + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        ExperimentConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.run_id.is_empty()
            || !self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            return Err(Error::Config(format!(
                "run_id '{}' must be nonempty and use only [A-Za-z0-9._-]",
                self.run_id
            )));
        }
        if self.seq_len == 0 || self.seq_len % self.train_block_size != 0 {
            return Err(Error::Config(format!(
                "seq_len {} is not a positive multiple of train_block_size {}",
                self.seq_len, self.train_block_size
            )));
        }
        if self.seq_len > self.max_positions {
            return Err(Error::Config(format!(
                "seq_len {} exceeds max_positions {}",
                self.seq_len, self.max_positions
            )));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("batch_size and steps must be positive".into()));
        }
        if self.eval_block_sizes.is_empty() || self.eval_block_sizes.contains(&0) {
            return Err(Error::Config("eval_block_sizes must be positive".into()));
        }
        if self.tau_grid.is_empty() {
            return Err(Error::Config("tau_grid must be nonempty".into()));
        }
        if !(self.half_life > 0.0) {
            return Err(Error::Config("half_life must be positive".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be positive".into()));
        }
        if !self.lr.is_finite() || !self.lr_final.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config("learning rates must be finite and positive".into()));
        }
        if self.mc_samples == 0 || self.eval_instances == 0 {
            return Err(Error::Config(
                "mc_samples and eval_instances must be positive".into(),
            ));
        }
        Ok(())
    }

    /// All fields as `(key, value)` pairs in declaration order; parsing the
    /// echo reproduces the config exactly.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut pairs: Vec<(&'static str, String)> = vec![
            ("run_id", self.run_id.clone()),
            ("seed", self.seed.to_string()),
        ];
        if let Some(root) = &self.output_root {
            pairs.push(("output_root", root.display().to_string()));
        }
        pairs.extend([
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("d_ffn", self.d_ffn.to_string()),
            ("max_positions", self.max_positions.to_string()),
            ("token_shift", self.token_shift.to_string()),
            ("task", self.task.name()),
        ]);
        if let Some(path) = &self.text_path {
            pairs.push(("text_path", path.display().to_string()));
        }
        pairs.extend([
            ("text_bytes", self.text_bytes.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("loss", self.loss.name().to_string()),
            ("attention", self.attention.name().to_string()),
            (
                "clean_context",
                match self.clean_context {
                    CleanContext::BlockCausal => "block_causal".to_string(),
                    CleanContext::TokenCausal => "token_causal".to_string(),
                },
            ),
            ("train_block_size", self.train_block_size.to_string()),
            ("mask_mode", self.mask_mode.name().to_string()),
            (
                "half_life",
                if self.half_life.is_infinite() {
                    "inf".to_string()
                } else {
                    format!("{}", self.half_life)
                },
            ),
            ("per_block_t", self.per_block_t.to_string()),
            ("lr", format!("{}", self.lr)),
            ("lr_final", format!("{}", self.lr_final)),
            ("steps", self.steps.to_string()),
            ("weight_decay", format!("{}", self.weight_decay)),
            (
                "grad_clip",
                if self.grad_clip.is_finite() {
                    format!("{}", self.grad_clip)
                } else {
                    "inf".into()
                },
            ),
            (
                "target_loss",
                match self.target_loss {
                    None => "none".to_string(),
                    Some(v) => format!("{v}"),
                },
            ),
            ("checkpoint_schedule", self.checkpoint_schedule.name().to_string()),
            (
                "eval_block_sizes",
                self.eval_block_sizes
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            (
                "tau_grid",
                self.tau_grid
                    .iter()
                    .map(|&t| fmt_tau(t))
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("max_new_tokens", self.max_new_tokens.to_string()),
            ("temperature", format!("{}", self.temperature)),
            ("confidence", self.confidence.name().to_string()),
            ("mc_samples", self.mc_samples.to_string()),
            ("eval_instances", self.eval_instances.to_string()),
        ]);
        pairs
    }

    /// The config as a reparseable document.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_pairs() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab: crate::corpus::Vocabulary::new().size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ffn: self.d_ffn,
            max_positions: self.max_positions,
            token_shift: self.token_shift,
        }
    }

    pub fn optim_config(&self) -> OptimConfig {
        OptimConfig {
            lr_init: self.lr,
            lr_final: self.lr_final,
            total_steps: self.steps,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip.is_finite().then_some(self.grad_clip),
            ..OptimConfig::default()
        }
    }

    pub fn mask_schedule(&self) -> Result<MaskSchedule> {
        let mut schedule = MaskSchedule::new(self.mask_mode, self.half_life, self.train_block_size)?;
        schedule.per_block_t = self.per_block_t;
        Ok(schedule)
    }

    /// Decode settings for one (eval block size, threshold) grid point.
    pub fn decode_config(&self, eval_block_size: usize, tau: Option<f64>) -> DecodeConfig {
        DecodeConfig {
            eval_block_size,
            confidence_threshold: tau,
            max_new_tokens: self.max_new_tokens,
            temperature: self.temperature,
            confidence: self.confidence,
            ..DecodeConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let echoed = ExperimentConfig::parse(&cfg.echo()).unwrap();
        assert_eq!(cfg, echoed);
    }

    #[test]
    fn parses_a_representative_file() {
        let text = "\
# conversion run
run_id = conv-a
seed = 7
task = copy+modular_add
attention = block_clean
mask_mode = position_dependent
half_life = 0.1
tau_grid = off, 0.9, 0.5, 0
eval_block_sizes = 4, 8
steps = 50
target_loss = 0.5
";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.run_id, "conv-a");
        assert_eq!(cfg.seed, 7);
        assert_eq!(
            cfg.task,
            TaskSpec::Synthetic(vec![TaskKind::Copy, TaskKind::ModularAdd])
        );
        assert_eq!(cfg.mask_mode, MaskMode::PositionDependent);
        assert_eq!(cfg.half_life, 0.1);
        assert_eq!(cfg.tau_grid, vec![None, Some(0.9), Some(0.5), Some(0.0)]);
        assert_eq!(cfg.eval_block_sizes, vec![4, 8]);
        assert_eq!(cfg.target_loss, Some(0.5));
        let echoed = ExperimentConfig::parse(&cfg.echo()).unwrap();
        assert_eq!(cfg, echoed);
    }

    #[test]
    fn rejects_bad_documents() {
        assert!(ExperimentConfig::parse("nonsense_key = 3").is_err());
        assert!(ExperimentConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(ExperimentConfig::parse("seed").is_err());
        assert!(ExperimentConfig::parse("tau_grid = 1.5").is_err());
        assert!(ExperimentConfig::parse("task = juggling").is_err());
        assert!(ExperimentConfig::parse("seq_len = 250").is_err(), "must divide block");
        assert!(ExperimentConfig::parse("run_id = a b").is_err());
        assert!(ExperimentConfig::parse("half_life = -1").is_err());
    }

    #[test]
    fn uniform_limit_spells_inf() {
        let cfg = ExperimentConfig::parse("half_life = inf").unwrap();
        assert!(cfg.half_life.is_infinite());
        assert!(cfg.echo().contains("half_life = inf"));
    }

    #[test]
    fn tau_slugs_are_filename_safe() {
        assert_eq!(tau_slug(None), "off");
        assert_eq!(tau_slug(Some(0.5)), "0p5");
        assert_eq!(tau_slug(Some(0.0)), "0");
    }
}
