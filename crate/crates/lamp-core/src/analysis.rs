//! Parameter/cost accounting and dispersion statistics of prompt tokens.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LampError, Result};
use crate::matrix::Matrix;
use crate::prompt::{lamp_param_count, vanilla_pt_param_count, PoolConfig, SoftPrompt};
use crate::svd::numerical_rank;

/// Relative tolerance (times σ₁) used for numerical rank.
pub const RANK_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub method: String,
    pub trainable_params: usize,
    pub pt_params: usize,
    /// `pt_params / trainable_params`, rounded to two decimals.
    pub ratio: f64,
    pub optimizer_state_floats: usize,
    pub prompt_rows_fed_to_model: usize,
    /// `(prompt_rows_fed_to_model + m)² · d`.
    pub attention_cost_units: u128,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn build_report(method: &str, trainable: usize, l: usize, d: usize, rows: usize, m: usize) -> CostReport {
    let pt = vanilla_pt_param_count(l, d);
    let seq = (rows + m) as u128;
    CostReport {
        method: method.to_string(),
        trainable_params: trainable,
        pt_params: pt,
        ratio: round2(pt as f64 / trainable as f64),
        optimizer_state_floats: 2 * trainable,
        prompt_rows_fed_to_model: rows,
        attention_cost_units: seq * seq * d as u128,
    }
}

/// Cost of LAMP with average pooling of block `p` (p = 1 means no pooling).
pub fn cost_report(l: usize, d: usize, r: usize, p: usize, m: usize) -> Result<CostReport> {
    if l == 0 || d == 0 || r == 0 {
        return Err(LampError::contract("l, d and r must all be positive"));
    }
    PoolConfig::average(p).validate(l)?;
    Ok(build_report("lamp", lamp_param_count(l, d, r), l, d, l / p, m))
}

/// Cost of vanilla prompt tuning with the full `l×d` prompt.
pub fn vanilla_cost_report(l: usize, d: usize, m: usize) -> Result<CostReport> {
    if l == 0 || d == 0 {
        return Err(LampError::contract("l and d must be positive"));
    }
    Ok(build_report("vanilla-pt", vanilla_pt_param_count(l, d), l, d, l, m))
}

/// Cost of an actual prompt, counting every trainable group it holds.
pub fn prompt_cost_report(prompt: &SoftPrompt, m: usize) -> CostReport {
    build_report(
        prompt.method().name(),
        prompt.trainable_params(),
        prompt.prompt_len(),
        prompt.width(),
        prompt.rows_fed(),
        m,
    )
}

/// Rounds a count the way parameter tables print thousands ("51K").
pub fn format_thousands(n: usize) -> String {
    format!("{}K", (n as f64 / 1e3).round() as u64)
}

/// Rounds a count to `decimals` places in millions ("0.113M").
pub fn format_millions(n: usize, decimals: usize) -> String {
    format!("{:.*}M", decimals, n as f64 / 1e6)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionStats {
    pub mean_pairwise_distance: f64,
    pub min_extent: Vec<f64>,
    pub max_extent: Vec<f64>,
    pub numerical_rank: usize,
}

/// Exact spread statistics of the rows of `tokens`.
pub fn dispersion_stats(tokens: &Matrix) -> Result<DispersionStats> {
    let (n, d) = tokens.shape();
    if n < 2 {
        return Err(LampError::contract("dispersion needs at least two tokens"));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dist: f64 = tokens
                .row(i)
                .iter()
                .zip(tokens.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            total += dist;
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let mut min_extent = vec![f64::INFINITY; d];
    let mut max_extent = vec![f64::NEG_INFINITY; d];
    for i in 0..n {
        for (j, v) in tokens.row(i).iter().enumerate() {
            min_extent[j] = min_extent[j].min(*v);
            max_extent[j] = max_extent[j].max(*v);
        }
    }
    Ok(DispersionStats {
        mean_pairwise_distance: total / pairs,
        min_extent,
        max_extent,
        numerical_rank: numerical_rank(tokens, RANK_TOLERANCE)?,
    })
}

fn csv_line(out: &mut String, lead: Option<usize>, row: &[f64]) {
    if let Some(k) = lead {
        let _ = write!(out, "{k}");
    }
    for (j, v) in row.iter().enumerate() {
        if j > 0 || lead.is_some() {
            out.push(',');
        }
        let _ = write!(out, "{v:.16e}");
    }
    out.push('\n');
}

/// One token per line, `d` comma-separated values at 17 significant digits.
pub fn embeddings_csv(tokens: &Matrix) -> String {
    let mut out = String::new();
    for r in 0..tokens.rows() {
        csv_line(&mut out, None, tokens.row(r));
    }
    out
}

pub fn export_embeddings(tokens: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, embeddings_csv(tokens))?;
    Ok(())
}

/// Vocabulary CSV: a leading frequency-rank column followed by the embedding.
pub fn vocab_csv(vocab: &crate::prompt::VocabTable) -> String {
    let mut out = String::new();
    let emb = vocab.embeddings();
    for (row, &rank) in vocab.frequency_rank().iter().enumerate() {
        csv_line(&mut out, Some(rank), emb.row(row));
    }
    out
}

pub fn parse_vocab_csv(text: &str) -> Result<crate::prompt::VocabTable> {
    let mut ranks = Vec::new();
    let mut data = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut fields = line.split(',');
        let rank = fields
            .next()
            .and_then(|f| f.trim().parse::<usize>().ok())
            .ok_or_else(|| LampError::Format(format!("line {}: bad frequency rank", lineno + 1)))?;
        let values = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| LampError::Format(format!("line {}: {e}", lineno + 1)))?;
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(LampError::Format(format!("line {}: expected {w} values", lineno + 1)))
            }
            _ => {}
        }
        ranks.push(rank);
        data.extend(values);
    }
    let d = width.unwrap_or(0);
    let emb = Matrix::new(ranks.len(), d, data)?;
    crate::prompt::VocabTable::new(emb, ranks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::VocabTable;

    #[test]
    fn large_model_table_cells() {
        let r = cost_report(100, 1024, 8, 1, 0).unwrap();
        assert_eq!((r.pt_params, r.trainable_params, r.ratio), (102_400, 9_000, 11.38));
        let r = cost_report(10_000, 4096, 8, 1, 0).unwrap();
        assert_eq!((r.trainable_params, r.ratio), (112_776, 363.20));
        assert_eq!(format_millions(r.trainable_params, 3), "0.113M");
    }

    #[test]
    fn pooling_changes_rows_not_params() {
        let a = cost_report(100, 64, 8, 1, 16).unwrap();
        let b = cost_report(100, 64, 8, 4, 16).unwrap();
        assert_eq!(a.trainable_params, b.trainable_params);
        assert_eq!((a.prompt_rows_fed_to_model, b.prompt_rows_fed_to_model), (100, 25));
        assert_eq!(b.attention_cost_units, 41u128 * 41 * 64);
        assert_eq!(a.optimizer_state_floats, 2 * a.trainable_params);
        assert!(cost_report(100, 64, 8, 3, 16).is_err());
        assert!(cost_report(100, 64, 0, 1, 16).is_err());
    }

    #[test]
    fn json_field_names() {
        let v: serde_json::Value = serde_json::to_value(cost_report(100, 1024, 8, 1, 0).unwrap()).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        for k in [
            "method",
            "trainable_params",
            "pt_params",
            "ratio",
            "optimizer_state_floats",
            "prompt_rows_fed_to_model",
            "attention_cost_units",
        ] {
            assert!(keys.contains(&k.to_string()), "{k}");
        }
    }

    #[test]
    fn thousands_rounding() {
        assert_eq!(format_thousands(51_200), "51K");
        assert_eq!(format_thousands(6_952), "7K");
        assert_eq!(format_thousands(4_904), "5K");
    }

    #[test]
    fn identical_rows_have_no_spread() {
        let m = Matrix::from_fn(5, 3, |_, j| j as f64 - 1.0);
        let s = dispersion_stats(&m).unwrap();
        assert_eq!(s.mean_pairwise_distance, 0.0);
        assert!(s.numerical_rank <= 1);
        assert_eq!(s.min_extent, s.max_extent);
    }

    #[test]
    fn two_rows_at_unit_distance() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.6, 0.8]]).unwrap();
        let s = dispersion_stats(&m).unwrap();
        assert!((s.mean_pairwise_distance - 1.0).abs() < 1e-15);
        assert_eq!(s.min_extent, vec![0.0, 0.0]);
        assert_eq!(s.max_extent, vec![0.6, 0.8]);
        assert!(dispersion_stats(&Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn csv_round_trips_exactly() {
        let m = Matrix::from_rows(&[vec![0.1, -1.0 / 3.0], vec![1e-300, 12345.678901234567]]).unwrap();
        let text = embeddings_csv(&m);
        assert_eq!(text.lines().count(), 2);
        let parsed: Vec<f64> = text
            .lines()
            .flat_map(|l| l.split(',').map(|f| f.parse::<f64>().unwrap()).collect::<Vec<_>>())
            .collect();
        assert_eq!(parsed, m.as_slice());

        let vocab = VocabTable::new(m, vec![1, 0]).unwrap();
        assert_eq!(parse_vocab_csv(&vocab_csv(&vocab)).unwrap(), vocab);
    }
}
