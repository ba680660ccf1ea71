//! A small frozen transformer encoder with a classification head.
//!
//! The prompt is stacked above the input token embeddings, sinusoidal
//! positions are added and the sum is layer-normalized, then the sequence
//! runs through pre-norm multi-head
//! self-attention and GELU feed-forward blocks. A final layer norm is
//! followed by a mean over all non-padding positions (prompt rows included)
//! and a linear head. Attention is bidirectional over the prompt and the
//! real input tokens; padding rows never enter the computation, which is
//! exactly equivalent to masking them out of attention and pooling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LampError, Result};
use crate::matrix::Matrix;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_width: usize,
    /// Maximum input sequence length.
    pub m: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_width: 128,
            m: 8,
            n_classes: 2,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d", self.d),
            ("n_heads", self.n_heads),
            ("ffn_width", self.ffn_width),
            ("m", self.m),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(LampError::config(format!("backbone.{name}"), "must be at least 1"));
            }
        }
        if !self.d.is_multiple_of(self.n_heads) {
            return Err(LampError::config(
                "backbone.d",
                format!("d = {} must be divisible by n_heads = {}", self.d, self.n_heads),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }
}

/// Weights of one transformer block; `wq/wk/wv` are `d×d_h` and `wo` is
/// `d_h×d`, one entry per head.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub wq: Vec<Matrix>,
    pub wk: Vec<Matrix>,
    pub wv: Vec<Matrix>,
    pub wo: Vec<Matrix>,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub w_in: Matrix,
    pub w_out: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBackbone {
    config: BackboneConfig,
    embeddings: Matrix,
    input_gain: Matrix,
    input_bias: Matrix,
    layers: Vec<LayerWeights>,
    final_gain: Matrix,
    final_bias: Matrix,
    head: Matrix,
}

/// Token embeddings right-padded with zero rows to `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInput {
    pub embeddings: Matrix,
    /// Number of real (non-padding) rows.
    pub len: usize,
}

impl FrozenBackbone {
    /// Weights are a deterministic function of `config` (including its seed):
    /// unit-variance token embeddings and projections scaled by `1/√fan_in`.
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, dh, f) = (config.d, config.head_dim(), config.ffn_width);
        let inv_d = 1.0 / (d as f64).sqrt();
        let embeddings = Matrix::random_normal(config.vocab_size, d, 1.0, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| {
                let mut per_head = |rows, cols| -> Vec<Matrix> {
                    (0..config.n_heads)
                        .map(|_| Matrix::random_normal(rows, cols, inv_d, &mut rng))
                        .collect()
                };
                let wq = per_head(d, dh);
                let wk = per_head(d, dh);
                let wv = per_head(d, dh);
                let wo = per_head(dh, d);
                LayerWeights {
                    ln1_gain: Matrix::filled(1, d, 1.0),
                    ln1_bias: Matrix::zeros(1, d),
                    wq,
                    wk,
                    wv,
                    wo,
                    ln2_gain: Matrix::filled(1, d, 1.0),
                    ln2_bias: Matrix::zeros(1, d),
                    w_in: Matrix::random_normal(d, f, inv_d, &mut rng),
                    w_out: Matrix::random_normal(f, d, 1.0 / (f as f64).sqrt(), &mut rng),
                }
            })
            .collect();
        let head = Matrix::random_normal(d, config.n_classes, inv_d, &mut rng);
        Ok(Self {
            config,
            embeddings,
            input_gain: Matrix::filled(1, d, 1.0),
            input_bias: Matrix::zeros(1, d),
            layers,
            final_gain: Matrix::filled(1, d, 1.0),
            final_bias: Matrix::zeros(1, d),
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    /// Gain and bias of the normalization applied to embeddings plus positions.
    pub fn input_norm(&self) -> (&Matrix, &Matrix) {
        (&self.input_gain, &self.input_bias)
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn final_norm(&self) -> (&Matrix, &Matrix) {
        (&self.final_gain, &self.final_bias)
    }

    pub fn head(&self) -> &Matrix {
        &self.head
    }

    fn all_weights(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.embeddings, &self.input_gain, &self.input_bias];
        for l in &self.layers {
            out.extend([&l.ln1_gain, &l.ln1_bias]);
            out.extend(l.wq.iter().chain(&l.wk).chain(&l.wv).chain(&l.wo));
            out.extend([&l.ln2_gain, &l.ln2_bias, &l.w_in, &l.w_out]);
        }
        out.extend([&self.final_gain, &self.final_bias, &self.head]);
        out
    }

    pub fn weight_count(&self) -> usize {
        self.all_weights().iter().map(|m| m.len()).sum()
    }

    /// SHA-256 over every weight, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for m in self.all_weights() {
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            h.update(m.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Gathers embedding rows for `token_ids` and zero-pads to `m` rows.
    pub fn encode_input(&self, token_ids: &[usize]) -> Result<EncodedInput> {
        let (m, d) = (self.config.m, self.config.d);
        if token_ids.len() > m {
            return Err(LampError::contract(format!(
                "input of {} tokens exceeds maximum length m = {m}",
                token_ids.len()
            )));
        }
        let mut e = Matrix::zeros(m, d);
        for (pos, &id) in token_ids.iter().enumerate() {
            if id >= self.config.vocab_size {
                return Err(LampError::contract(format!(
                    "token id {id} out of range for vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            e.row_mut(pos).copy_from_slice(self.embeddings.row(id));
        }
        Ok(EncodedInput {
            embeddings: e,
            len: token_ids.len(),
        })
    }

    /// Records the forward pass on `tape` and returns the `1×n_classes` logits.
    pub fn forward_var<'t>(&'t self, tape: &mut Tape<'t>, prompt: Var, input: &EncodedInput) -> Result<Var> {
        let d = self.config.d;
        let (k, width) = tape.value(prompt).shape();
        if width != d {
            return Err(LampError::dim("backbone.forward", (k, width), (input.len, d)));
        }
        if input.embeddings.cols() != d || input.len > input.embeddings.rows() {
            return Err(LampError::dim("backbone.forward", (k, d), input.embeddings.shape()));
        }
        let e = tape.constant(input.embeddings.row_range(0, input.len));
        let mut x = tape.concat_rows(prompt, e)?;
        let pos = tape.constant(sinusoidal_positions(k + input.len, d));
        x = tape.add(x, pos)?;
        let gi = tape.constant_ref(&self.input_gain);
        let bi = tape.constant_ref(&self.input_bias);
        x = tape.layer_norm(x, gi, bi)?;

        let att_scale = 1.0 / (self.config.head_dim() as f64).sqrt();
        for layer in &self.layers {
            let g1 = tape.constant_ref(&layer.ln1_gain);
            let b1 = tape.constant_ref(&layer.ln1_bias);
            let h = tape.layer_norm(x, g1, b1)?;
            let mut attn: Option<Var> = None;
            for head in 0..self.config.n_heads {
                let wq = tape.constant_ref(&layer.wq[head]);
                let wk = tape.constant_ref(&layer.wk[head]);
                let wv = tape.constant_ref(&layer.wv[head]);
                let wo = tape.constant_ref(&layer.wo[head]);
                let q = tape.matmul(h, wq)?;
                let kk = tape.matmul(h, wk)?;
                let v = tape.matmul(h, wv)?;
                let kt = tape.transpose(kk);
                let scores = tape.matmul(q, kt)?;
                let scores = tape.scale(scores, att_scale);
                let weights = tape.softmax_rows(scores);
                let ctx = tape.matmul(weights, v)?;
                let out = tape.matmul(ctx, wo)?;
                attn = Some(match attn {
                    None => out,
                    Some(acc) => tape.add(acc, out)?,
                });
            }
            if let Some(a) = attn {
                x = tape.add(x, a)?;
            }
            let g2 = tape.constant_ref(&layer.ln2_gain);
            let b2 = tape.constant_ref(&layer.ln2_bias);
            let h2 = tape.layer_norm(x, g2, b2)?;
            let w_in = tape.constant_ref(&layer.w_in);
            let w_out = tape.constant_ref(&layer.w_out);
            let f = tape.matmul(h2, w_in)?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, w_out)?;
            x = tape.add(x, f)?;
        }
        let gf = tape.constant_ref(&self.final_gain);
        let bf = tape.constant_ref(&self.final_bias);
        let x = tape.layer_norm(x, gf, bf)?;
        let pooled = tape.mean_rows(x)?;
        let head = tape.constant_ref(&self.head);
        tape.matmul(pooled, head)
    }

    /// Class logits for a prompt (`k×d`) and an encoded input.
    pub fn forward(&self, prompt: &Matrix, input: &EncodedInput) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = tape.constant_ref(prompt);
        let logits = self.forward_var(&mut tape, p, input)?;
        Ok(tape.value(logits).as_slice().to_vec())
    }

    /// Cross-entropy loss for one labelled input and its gradient with
    /// respect to the prompt rows.
    pub fn loss_and_prompt_grad(&self, prompt: &Matrix, input: &EncodedInput, label: usize) -> Result<(f64, Matrix, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = tape.param(prompt.clone());
        let logits = self.forward_var(&mut tape, p, input)?;
        let loss = tape.cross_entropy(logits, &[label])?;
        let mut grads = tape.backward(loss)?;
        let g = grads.take(p).expect("prompt is a trainable leaf");
        Ok((
            tape.value(loss).get(0, 0),
            g,
            tape.value(logits).as_slice().to_vec(),
        ))
    }
}

/// Standard sinusoidal position table (`rows×d`).
pub fn sinusoidal_positions(rows: usize, d: usize) -> Matrix {
    Matrix::from_fn(rows, d, |pos, j| {
        let pair = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
