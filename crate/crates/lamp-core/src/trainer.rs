//! Training loop that updates only the soft prompt.
//!
//! One step: rebuild the prompt from its trainable groups, run every example
//! of the batch through the frozen backbone, average the cross-entropy and
//! apply AdamW to the prompt groups. Examples are evaluated independently
//! (in parallel when threads are available) and their prompt gradients are
//! summed in batch order, so results do not depend on the thread count.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{EncodedInput, FrozenBackbone};
use crate::error::{LampError, Result};
use crate::matrix::Matrix;
use crate::optim::{adamw_update, OptimizerState, TrainConfig};
use crate::prompt::SoftPrompt;
use crate::tape::Tape;
use crate::task::{Dataset, Example};

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub input: EncodedInput,
    pub label: usize,
}

pub fn encode_examples(bb: &FrozenBackbone, examples: &[Example]) -> Result<Vec<EncodedExample>> {
    examples
        .iter()
        .map(|e| {
            if e.label >= bb.config().n_classes {
                return Err(LampError::contract(format!(
                    "label {} out of range for {} classes",
                    e.label,
                    bb.config().n_classes
                )));
            }
            Ok(EncodedExample {
                input: bb.encode_input(&e.tokens)?,
                label: e.label,
            })
        })
        .collect()
}

/// Softmax cross-entropy of one logit vector.
pub fn loss(logits: &[f64], label: usize) -> Result<f64> {
    batch_loss(&[logits.to_vec()], &[label])
}

/// Mean softmax cross-entropy over a batch of logit vectors.
pub fn batch_loss(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let k = logits.first().map_or(0, Vec::len);
    let flat: Vec<f64> = logits.concat();
    let z = Matrix::new(logits.len(), k, flat)?;
    let mut t = Tape::new();
    let zv = t.constant(z);
    let l = t.cross_entropy(zv, labels)?;
    Ok(t.value(l).get(0, 0))
}

/// Mean batch loss and its gradient for each prompt group, in the order of
/// [`SoftPrompt::groups`].
pub fn batch_gradients(prompt: &SoftPrompt, bb: &FrozenBackbone, batch: &[EncodedExample]) -> Result<(f64, Vec<Matrix>)> {
    if batch.is_empty() {
        return Err(LampError::contract("empty batch"));
    }
    let mut tape = Tape::new();
    let built = prompt.build(&mut tape)?;
    let fed = tape.value(built.output);

    let per_example: Vec<Result<(f64, Matrix)>> = batch
        .par_iter()
        .map(|ex| {
            let (l, g, _) = bb.loss_and_prompt_grad(fed, &ex.input, ex.label)?;
            Ok((l, g))
        })
        .collect();

    let inv = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut seed = Matrix::zeros(fed.rows(), fed.cols());
    for item in per_example {
        let (l, g) = item?;
        total += l;
        seed.add_assign(&g);
    }
    let seed = seed.scale(inv);
    let mut grads = tape.backward_from(built.output, seed)?;
    let group_grads = built
        .leaves
        .iter()
        .map(|&v| grads.take(v).expect("prompt leaves are trainable"))
        .collect();
    Ok((total * inv, group_grads))
}

/// Mean loss and accuracy of the prompt on `examples`.
pub fn evaluate(prompt: &SoftPrompt, bb: &FrozenBackbone, examples: &[EncodedExample]) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let fed = prompt.materialize()?;
    let scored: Vec<Result<(f64, bool)>> = examples
        .par_iter()
        .map(|ex| {
            let logits = bb.forward(&fed, &ex.input)?;
            let l = loss(&logits, ex.label)?;
            Ok((l, argmax(&logits) == ex.label))
        })
        .collect();
    let mut total = 0.0;
    let mut correct = 0usize;
    for item in scored {
        let (l, ok) = item?;
        total += l;
        correct += usize::from(ok);
    }
    let n = examples.len() as f64;
    Ok((total / n, correct as f64 / n))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// One optimizer step on `batch`; returns the pre-update batch loss.
pub fn train_step(prompt: &mut SoftPrompt, bb: &FrozenBackbone, batch: &[EncodedExample], state: &mut OptimizerState, cfg: &TrainConfig) -> Result<f64> {
    let (l, grads) = batch_gradients(prompt, bb, batch)?;
    let mut groups = prompt.groups_mut();
    adamw_update(&mut groups, &grads, state, cfg)?;
    Ok(l)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub trainable_params: usize,
    pub wall_ms: u64,
}

/// Per-epoch metrics; epoch 0 is the evaluation before any update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<MetricsRecord>,
}

pub const TRAIN_SPLIT: &str = "train";
pub const HELD_OUT_SPLIT: &str = "held-out";

impl MetricsLog {
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("metrics serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_ndjson(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_ndjson().as_bytes())?;
        Ok(())
    }

    pub fn split(&self, split: &str) -> impl Iterator<Item = &MetricsRecord> {
        let split = split.to_string();
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn first(&self, split: &str) -> Option<&MetricsRecord> {
        self.split(split).next()
    }

    pub fn last(&self, split: &str) -> Option<&MetricsRecord> {
        self.split(split).last()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoopOptions {
    /// Record measured epoch wall time; when false `wall_ms` is 0 so the log
    /// is a pure function of its inputs.
    pub record_wall_time: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: MetricsLog,
    pub prompt: SoftPrompt,
    pub optimizer: OptimizerState,
}

/// Trains `prompt` on `data.train` for `cfg.epochs` epochs, evaluating both
/// splits before training and after every epoch.
pub fn train_loop(bb: &FrozenBackbone, data: &Dataset, mut prompt: SoftPrompt, cfg: &TrainConfig, opts: LoopOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = encode_examples(bb, &data.train)?;
    let held_out = encode_examples(bb, &data.eval)?;
    if train.is_empty() {
        return Err(LampError::contract("training split is empty"));
    }
    let params = prompt.trainable_params();
    let mut state = OptimizerState::for_params(prompt.groups().into_iter().map(|(_, m)| m));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = MetricsLog::default();

    let record = |log: &mut MetricsLog, prompt: &SoftPrompt, epoch: usize, wall_ms: u64| -> Result<()> {
        for (split, set) in [(TRAIN_SPLIT, &train), (HELD_OUT_SPLIT, &held_out)] {
            let (l, acc) = evaluate(prompt, bb, set)?;
            log.records.push(MetricsRecord {
                epoch,
                split: split.to_string(),
                loss: l,
                accuracy: acc,
                trainable_params: params,
                wall_ms,
            });
        }
        Ok(())
    };
    record(&mut log, &prompt, 0, 0)?;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<EncodedExample> = chunk.iter().map(|&i| train[i].clone()).collect();
            train_step(&mut prompt, bb, &batch, &mut state, cfg)?;
        }
        let wall = if opts.record_wall_time {
            start.elapsed().as_millis() as u64
        } else {
            0
        };
        record(&mut log, &prompt, epoch, wall)?;
    }
    Ok(TrainOutcome {
        log,
        prompt,
        optimizer: state,
    })
}
