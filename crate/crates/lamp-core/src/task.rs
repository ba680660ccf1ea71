//! Synthetic labelled sequence tasks and few-shot subsampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LampError, Result};

/// Token whose presence decides the label of the token-presence rule.
pub const PRESENCE_TOKEN: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelRule {
    /// 1 if [`PRESENCE_TOKEN`] occurs anywhere in the sequence, else 0.
    TokenPresence,
    /// Most frequent value of `token mod n_classes`; ties go to the smaller class.
    MajorityClass,
    /// Parity of the sum of the first `⌈len/2⌉` token ids.
    PrefixParity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub rule: LabelRule,
    pub seed: u64,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_eval: usize,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            rule: LabelRule::TokenPresence,
            seed: 0,
            vocab_size: 64,
            seq_len: 8,
            n_classes: 2,
            n_train: 200,
            n_eval: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(LampError::config("task.seq_len", "must be at least 1"));
        }
        if self.n_classes < 2 {
            return Err(LampError::config("task.n_classes", "must be at least 2"));
        }
        match self.rule {
            LabelRule::TokenPresence | LabelRule::PrefixParity if self.n_classes != 2 => {
                return Err(LampError::config("task.n_classes", "this rule is binary; use 2"));
            }
            _ => {}
        }
        if self.vocab_size < 2 {
            return Err(LampError::config("task.vocab_size", "must be at least 2"));
        }
        if self.n_train == 0 {
            return Err(LampError::config("task.n_train", "must be at least 1"));
        }
        Ok(())
    }

    /// The label of `tokens` under this task's rule.
    pub fn label(&self, tokens: &[usize]) -> usize {
        match self.rule {
            LabelRule::TokenPresence => usize::from(tokens.contains(&PRESENCE_TOKEN)),
            LabelRule::MajorityClass => {
                let mut counts = vec![0usize; self.n_classes];
                for t in tokens {
                    counts[t % self.n_classes] += 1;
                }
                let best = counts.iter().copied().max().unwrap_or(0);
                counts.iter().position(|&c| c == best).unwrap_or(0)
            }
            LabelRule::PrefixParity => {
                let prefix = tokens.len().div_ceil(2);
                tokens[..prefix].iter().sum::<usize>() % 2
            }
        }
    }

    fn sample_tokens(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        match self.rule {
            LabelRule::TokenPresence => {
                // Half the sequences carry the marker token once, the rest avoid it.
                let mut tokens: Vec<usize> = (0..self.seq_len)
                    .map(|_| rng.gen_range(1..self.vocab_size))
                    .collect();
                if rng.gen_bool(0.5) {
                    let pos = rng.gen_range(0..self.seq_len);
                    tokens[pos] = PRESENCE_TOKEN;
                }
                tokens
            }
            _ => (0..self.seq_len).map(|_| rng.gen_range(0..self.vocab_size)).collect(),
        }
    }

    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut make = |n: usize| -> Vec<Example> {
            (0..n)
                .map(|_| {
                    let tokens = self.sample_tokens(&mut rng);
                    let label = self.label(&tokens);
                    Example { tokens, label }
                })
                .collect()
        };
        let train = make(self.n_train);
        let eval = make(self.n_eval);
        Ok(Dataset { train, eval })
    }
}

/// Draws `k` examples spread over the labels as evenly as the class sizes
/// allow, then shuffles them. Deterministic for a given seed.
pub fn few_shot_subsample(data: &[Example], k: usize, seed: u64) -> Result<Vec<Example>> {
    if k > data.len() {
        return Err(LampError::contract(format!(
            "cannot draw {k} examples from a set of {}",
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_labels = data.iter().map(|e| e.label + 1).max().unwrap_or(0);
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); n_labels];
    for (i, e) in data.iter().enumerate() {
        by_label[e.label].push(i);
    }
    for pool in &mut by_label {
        pool.shuffle(&mut rng);
    }

    // Round-robin allocation over labels that still have examples left.
    let mut quota = vec![0usize; n_labels];
    let mut remaining = k;
    while remaining > 0 {
        let mut progressed = false;
        for (label, pool) in by_label.iter().enumerate() {
            if remaining == 0 {
                break;
            }
            if quota[label] < pool.len() {
                quota[label] += 1;
                remaining -= 1;
                progressed = true;
            }
        }
        debug_assert!(progressed);
    }

    let mut picked: Vec<usize> = by_label
        .iter()
        .zip(&quota)
        .flat_map(|(pool, &q)| pool[..q].iter().copied())
        .collect();
    picked.shuffle(&mut rng);
    Ok(picked.into_iter().map(|i| data[i].clone()).collect())
}
