//! Experiment configuration and the end-to-end training run it describes.
//!
//! Seeds: `backbone.seed` fixes the frozen weights, `task.seed` the data,
//! `seed` the vocabulary order, prompt initialization and `W_sa`, and
//! `train.seed` the batch order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{prompt_cost_report, CostReport};
use crate::backbone::{BackboneConfig, FrozenBackbone};
use crate::checkpoint;
use crate::error::{LampError, Result};
use crate::optim::TrainConfig;
use crate::prompt::{
    init_source_prompt, Method, PoolConfig, PoolMode, ReconstructionMode, SoftPrompt, VocabTable,
    DEFAULT_PROMPT_LEN, DEFAULT_RANK,
};
use crate::task::{Dataset, SyntheticTask};
use crate::trainer::{train_loop, LoopOptions, MetricsLog};

pub const METRICS_FILE: &str = "metrics.ndjson";
pub const CHECKPOINT_FILE: &str = "prompt.lamp";
pub const COST_FILE: &str = "cost.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    pub method: Method,
    pub l: usize,
    pub r: usize,
    pub top_k: usize,
    pub mode: ReconstructionMode,
    pub pooling: PoolConfig,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            method: Method::Lamp,
            l: DEFAULT_PROMPT_LEN,
            r: DEFAULT_RANK,
            // The desk vocabulary has 64 tokens, so every token is eligible.
            top_k: 64,
            mode: ReconstructionMode::Verbatim,
            pooling: PoolConfig::none(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    pub prompt: PromptConfig,
    pub train: TrainConfig,
    pub task: SyntheticTask,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            prompt: PromptConfig::default(),
            train: TrainConfig::default(),
            task: SyntheticTask::default(),
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a JSON config. Unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.train.validate()?;
        self.task.validate()?;

        let p = &self.prompt;
        let bb = &self.backbone;
        if p.l == 0 {
            return Err(LampError::config("prompt.l", "must be at least 1"));
        }
        if p.top_k == 0 || p.top_k > bb.vocab_size {
            return Err(LampError::config(
                "prompt.top_k",
                format!("prompt.top_k ({}) must lie in 1..=backbone.vocab_size ({})", p.top_k, bb.vocab_size),
            ));
        }
        if p.method == Method::Lamp {
            let cap = p.l.min(bb.d);
            if p.r == 0 || p.r > cap {
                return Err(LampError::config(
                    "prompt.r",
                    format!("prompt.r ({}) must lie in 1..=min(prompt.l, backbone.d) ({cap})", p.r),
                ));
            }
        }
        let pool = &p.pooling;
        if pool.p == 0 {
            return Err(LampError::config("prompt.pooling.p", "must be at least 1"));
        }
        if pool.mode == PoolMode::None && pool.p != 1 {
            return Err(LampError::config(
                "prompt.pooling.p",
                format!("prompt.pooling.p ({}) must be 1 when prompt.pooling.mode is none", pool.p),
            ));
        }
        if !p.l.is_multiple_of(pool.p) {
            return Err(LampError::config(
                "prompt.pooling.p",
                format!("prompt.pooling.p ({}) must divide prompt.l ({})", pool.p, p.l),
            ));
        }

        let t = &self.task;
        if t.vocab_size > bb.vocab_size {
            return Err(LampError::config(
                "task.vocab_size",
                format!("task.vocab_size ({}) exceeds backbone.vocab_size ({})", t.vocab_size, bb.vocab_size),
            ));
        }
        if t.seq_len > bb.m {
            return Err(LampError::config(
                "task.seq_len",
                format!("task.seq_len ({}) exceeds backbone.m ({})", t.seq_len, bb.m),
            ));
        }
        if t.n_classes != bb.n_classes {
            return Err(LampError::config(
                "task.n_classes",
                format!("task.n_classes ({}) must equal backbone.n_classes ({})", t.n_classes, bb.n_classes),
            ));
        }
        Ok(())
    }

    /// The initial prompt: `l` vocabulary rows drawn from the `top_k` most
    /// frequent tokens of the backbone's embedding table, decomposed for LAMP.
    pub fn initial_prompt(&self, bb: &FrozenBackbone) -> Result<SoftPrompt> {
        let vocab = VocabTable::synthetic_zipf(bb.embeddings().clone(), self.seed);
        let source = init_source_prompt(&vocab, self.prompt.l, self.prompt.top_k, self.seed)?;
        match self.prompt.method {
            Method::VanillaPt => SoftPrompt::vanilla(&source, self.prompt.pooling, self.seed),
            Method::Lamp => SoftPrompt::lamp(&source, self.prompt.r, self.prompt.mode, self.prompt.pooling, self.seed),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub log: MetricsLog,
    pub prompt: SoftPrompt,
    pub cost: CostReport,
    pub optimizer_state_floats: usize,
    pub digest_before: String,
    pub digest_after: String,
}

impl ExperimentOutcome {
    /// Writes metrics, the final checkpoint and the cost report into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.log.write(dir.join(METRICS_FILE))?;
        checkpoint::save(&self.prompt, dir.join(CHECKPOINT_FILE))?;
        let mut cost = serde_json::to_string_pretty(&self.cost)?;
        cost.push('\n');
        std::fs::write(dir.join(COST_FILE), cost)?;
        Ok(())
    }
}

pub fn run_experiment(cfg: &ExperimentConfig, opts: LoopOptions) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let bb = FrozenBackbone::new(cfg.backbone.clone())?;
    let data: Dataset = cfg.task.generate()?;
    let prompt = cfg.initial_prompt(&bb)?;
    let digest_before = bb.digest();
    let outcome = train_loop(&bb, &data, prompt, &cfg.train, opts)?;
    let cost = prompt_cost_report(&outcome.prompt, cfg.backbone.m);
    Ok(ExperimentOutcome {
        log: outcome.log,
        cost,
        optimizer_state_floats: outcome.optimizer.float_count(),
        prompt: outcome.prompt,
        digest_before,
        digest_after: bb.digest(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err_text(cfg: &ExperimentConfig) -> String {
        cfg.validate().unwrap_err().to_string()
    }

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn indivisible_pool_block_names_both_fields() {
        let mut cfg = ExperimentConfig::default();
        cfg.prompt.pooling = PoolConfig::average(3);
        let msg = err_text(&cfg);
        assert!(msg.contains("prompt.pooling.p") && msg.contains("prompt.l"), "{msg}");
    }

    #[test]
    fn rank_bound_and_heads() {
        let mut cfg = ExperimentConfig::default();
        cfg.prompt.r = 65;
        assert!(err_text(&cfg).contains("prompt.r"));
        cfg.prompt.r = 0;
        assert!(err_text(&cfg).contains("prompt.r"));
        let mut cfg = ExperimentConfig::default();
        cfg.backbone.n_heads = 5;
        assert!(err_text(&cfg).contains("backbone.d"));
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::default().to_json()).unwrap();
        v["prompt"]["rank"] = 8.into();
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::default().to_json()).unwrap();
        v["learning_rate"] = 0.1.into();
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn task_must_fit_backbone() {
        let mut cfg = ExperimentConfig::default();
        cfg.task.seq_len = 9;
        assert!(err_text(&cfg).contains("task.seq_len"));
    }
}
