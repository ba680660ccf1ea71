//! Low-parameter soft prompts.
//!
//! A source prompt `P` (l×d) sampled from frequent vocabulary embeddings is
//! factored once by truncated SVD into `U` (l×r), `Q` (r) and `V` (d×r).
//! Those three factors are the only trainable state. On every forward pass
//! the prompt is rebuilt as
//!
//! ```text
//! M = U · diag(Q)            (l×r)
//! I = diag(Q) · Vᵀ           (r×d)
//! C = Σ_k M[:,k] ⊗ I[k,:]    (l×d)
//! ```
//!
//! and optionally shortened to `l/p` rows by average or attention pooling
//! before it is prepended to the input embeddings.
//!
//! Composed literally the three steps give `C = U·diag(Q²)·Vᵀ`
//! ([`ReconstructionMode::Verbatim`]). [`ReconstructionMode::Balanced`]
//! splits `Q` as `√Q` across `M` and `I`, so `C = U·diag(Q)·Vᵀ` and the
//! initial reconstruction equals the rank-r truncation of `P`.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{LampError, Result};
use crate::matrix::Matrix;
use crate::svd::{svd, truncate};
use crate::tape::{average_rows, outer_product_sum, rowwise_softmax, Tape, Var};

/// Prompt length used throughout the experiments.
pub const DEFAULT_PROMPT_LEN: usize = 100;
/// Intrinsic rank kept by the truncated SVD.
pub const DEFAULT_RANK: usize = 8;
/// Size of the frequent-vocabulary pool the source prompt is drawn from.
pub const DEFAULT_TOP_K: usize = 5000;

const ATTN_POOL_INIT_STD: f64 = 0.02;

/// Embedding table plus a frequency ranking of its rows.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabTable {
    embeddings: Matrix,
    /// `frequency_rank[row]` is the rank of `row`; rank 0 is the most frequent.
    frequency_rank: Vec<usize>,
}

impl VocabTable {
    pub fn new(embeddings: Matrix, frequency_rank: Vec<usize>) -> Result<Self> {
        let n = embeddings.rows();
        if frequency_rank.len() != n {
            return Err(LampError::contract(format!(
                "{} frequency ranks for {n} vocabulary rows",
                frequency_rank.len()
            )));
        }
        let mut seen = vec![false; n];
        for &r in &frequency_rank {
            if r >= n || seen[r] {
                return Err(LampError::contract(
                    "frequency_rank must be a permutation of the row indices",
                ));
            }
            seen[r] = true;
        }
        Ok(Self {
            embeddings,
            frequency_rank,
        })
    }

    /// Ranks rows by token counts drawn from a Zipf law over a seeded
    /// shuffle of the vocabulary. Ties go to the lower row index.
    pub fn synthetic_zipf(embeddings: Matrix, seed: u64) -> Self {
        let n = embeddings.rows();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut popularity: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            popularity.swap(i, rng.gen_range(0..=i));
        }
        let mut counts = vec![0u64; n];
        if n > 0 {
            let zipf = Zipf::new(n as u64, 1.0).expect("valid Zipf parameters");
            for _ in 0..(50 * n).max(1000) {
                let k = zipf.sample(&mut rng) as usize - 1;
                counts[popularity[k.min(n - 1)]] += 1;
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        let mut frequency_rank = vec![0; n];
        for (rank, &row) in order.iter().enumerate() {
            frequency_rank[row] = rank;
        }
        Self {
            embeddings,
            frequency_rank,
        }
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn frequency_rank(&self) -> &[usize] {
        &self.frequency_rank
    }

    pub fn vocab_size(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn width(&self) -> usize {
        self.embeddings.cols()
    }

    /// Row indices ordered from most to least frequent.
    pub fn rows_by_frequency(&self) -> Vec<usize> {
        let mut order = vec![0; self.frequency_rank.len()];
        for (row, &rank) in self.frequency_rank.iter().enumerate() {
            order[rank] = row;
        }
        order
    }
}

/// Dense `l×d` soft prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct SourcePrompt {
    pub tokens: Matrix,
}

impl SourcePrompt {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }
}

/// Copies `l` embedding rows drawn from the `top_k` most frequent tokens:
/// without replacement when `l ≤ top_k`, with replacement otherwise.
pub fn init_source_prompt(vocab: &VocabTable, l: usize, top_k: usize, seed: u64) -> Result<SourcePrompt> {
    if l == 0 || top_k == 0 {
        return Err(LampError::contract(format!(
            "prompt length ({l}) and top_k ({top_k}) must be positive"
        )));
    }
    if top_k > vocab.vocab_size() {
        return Err(LampError::contract(format!(
            "top_k = {top_k} exceeds vocabulary size {}",
            vocab.vocab_size()
        )));
    }
    let pool = &vocab.rows_by_frequency()[..top_k];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if l <= top_k {
        index::sample(&mut rng, top_k, l).into_iter().collect()
    } else {
        (0..l).map(|_| rng.gen_range(0..top_k)).collect()
    };
    let d = vocab.width();
    let mut data = Vec::with_capacity(l * d);
    for k in picks {
        data.extend_from_slice(vocab.embeddings.row(pool[k]));
    }
    Ok(SourcePrompt {
        tokens: Matrix::from_vec_unchecked(l, d, data),
    })
}

/// The trainable factors `U` (l×r), `Q` (stored 1×r) and `V` (d×r).
#[derive(Debug, Clone, PartialEq)]
pub struct DecomposedPrompt {
    pub u: Matrix,
    pub q: Matrix,
    pub v: Matrix,
}

impl DecomposedPrompt {
    pub fn new(u: Matrix, q: Vec<f64>, v: Matrix) -> Result<Self> {
        let r = q.len();
        if u.cols() != r || v.cols() != r {
            return Err(LampError::dim("decomposed_prompt", u.shape(), v.shape()));
        }
        Ok(Self {
            u,
            q: Matrix::new(1, r, q)?,
            v,
        })
    }

    pub fn rank(&self) -> usize {
        self.q.cols()
    }

    pub fn prompt_len(&self) -> usize {
        self.u.rows()
    }

    pub fn width(&self) -> usize {
        self.v.rows()
    }

    pub fn q_values(&self) -> &[f64] {
        self.q.as_slice()
    }

    pub fn param_count(&self) -> usize {
        self.u.len() + self.q.len() + self.v.len()
    }

    fn check(&self) -> Result<()> {
        let r = self.rank();
        if self.u.cols() != r || self.v.cols() != r || self.q.rows() != 1 {
            return Err(LampError::contract(format!(
                "inconsistent factor shapes U {:?}, Q {:?}, V {:?}",
                self.u.shape(),
                self.q.shape(),
                self.v.shape()
            )));
        }
        Ok(())
    }
}

/// Truncated SVD of the source prompt, keeping rank `r`.
pub fn decompose(p: &SourcePrompt, r: usize) -> Result<DecomposedPrompt> {
    let t = truncate(&svd(&p.tokens)?, r)?;
    DecomposedPrompt::new(t.u, t.q, t.v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconstructionMode {
    /// `C = U·diag(Q²)·Vᵀ`.
    #[default]
    Verbatim,
    /// `C = U·diag(Q)·Vᵀ`; requires `Q ≥ 0`.
    Balanced,
}

impl ReconstructionMode {
    pub fn code(self) -> u8 {
        match self {
            ReconstructionMode::Verbatim => 0,
            ReconstructionMode::Balanced => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolMode {
    #[default]
    None,
    Average,
    SelfAttention,
}

impl PoolMode {
    pub fn code(self) -> u8 {
        match self {
            PoolMode::None => 0,
            PoolMode::Average => 1,
            PoolMode::SelfAttention => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(PoolMode::None),
            1 => Some(PoolMode::Average),
            2 => Some(PoolMode::SelfAttention),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    pub mode: PoolMode,
    pub p: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            mode: PoolMode::None,
            p: 1,
        }
    }
}

impl PoolConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn average(p: usize) -> Self {
        Self {
            mode: PoolMode::Average,
            p,
        }
    }

    pub fn self_attention(p: usize) -> Self {
        Self {
            mode: PoolMode::SelfAttention,
            p,
        }
    }

    pub fn validate(&self, l: usize) -> Result<()> {
        if self.p == 0 {
            return Err(LampError::contract("pooling block p must be at least 1"));
        }
        if self.mode != PoolMode::None && !l.is_multiple_of(self.p) {
            return Err(LampError::contract(format!(
                "pooling block p = {} must divide the prompt length l = {l}",
                self.p
            )));
        }
        Ok(())
    }

    /// Number of prompt rows fed to the backbone.
    pub fn output_rows(&self, l: usize) -> usize {
        match self.mode {
            PoolMode::None => l,
            _ => l / self.p,
        }
    }
}

/// `W_sa` (d × l/p) for attention pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttnPoolParams {
    pub w: Matrix,
}

impl SelfAttnPoolParams {
    pub fn init(d: usize, l: usize, p: usize, seed: u64) -> Result<Self> {
        PoolConfig::self_attention(p).validate(l)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            w: Matrix::random_normal(d, l / p, ATTN_POOL_INIT_STD, &mut rng),
        })
    }
}

pub fn aggregate_m_var(tape: &mut Tape<'_>, u: Var, q: Var) -> Result<Var> {
    tape.scale_cols(u, q)
}

pub fn aggregate_i_var(tape: &mut Tape<'_>, q: Var, v: Var) -> Result<Var> {
    let vq = tape.scale_cols(v, q)?;
    Ok(tape.transpose(vq))
}

/// Differentiable reconstruction of `C` from the three factor leaves.
pub fn reconstruct_var(tape: &mut Tape<'_>, u: Var, q: Var, v: Var, mode: ReconstructionMode) -> Result<Var> {
    let weights = match mode {
        ReconstructionMode::Verbatim => q,
        ReconstructionMode::Balanced => tape.sqrt(q).map_err(|_| {
            LampError::contract("balanced reconstruction requires non-negative Q")
        })?,
    };
    let m = aggregate_m_var(tape, u, weights)?;
    let i = aggregate_i_var(tape, weights, v)?;
    tape.outer_sum(m, i)
}

/// `Aᵀ·C` with `A = softmax(C·W)` normalized over the token axis.
pub fn self_attention_pool_var(tape: &mut Tape<'_>, c: Var, w: Var) -> Result<Var> {
    let scores = tape.matmul(c, w)?;
    let per_output = tape.transpose(scores);
    let weights_t = tape.softmax_rows(per_output);
    tape.matmul(weights_t, c)
}

pub fn pool_var(tape: &mut Tape<'_>, c: Var, pool: &PoolConfig, w_sa: Option<Var>) -> Result<Var> {
    pool.validate(tape.value(c).rows())?;
    match pool.mode {
        PoolMode::None => Ok(c),
        PoolMode::Average => tape.avg_pool(c, pool.p),
        PoolMode::SelfAttention => {
            let w = w_sa.ok_or_else(|| LampError::contract("self-attention pooling needs W_sa"))?;
            let expected = (tape.value(c).cols(), tape.value(c).rows() / pool.p);
            if tape.value(w).shape() != expected {
                return Err(LampError::dim("self_attention_pool", expected, tape.value(w).shape()));
            }
            self_attention_pool_var(tape, c, w)
        }
    }
}

/// `M = U · diag(Q)`.
pub fn aggregate_m(dp: &DecomposedPrompt) -> Result<Matrix> {
    dp.check()?;
    let mut t = Tape::new();
    let (u, q) = (t.constant_ref(&dp.u), t.constant_ref(&dp.q));
    let m = aggregate_m_var(&mut t, u, q)?;
    Ok(t.value(m).clone())
}

/// `I = diag(Q) · Vᵀ`.
pub fn aggregate_i(dp: &DecomposedPrompt) -> Result<Matrix> {
    dp.check()?;
    let mut t = Tape::new();
    let (q, v) = (t.constant_ref(&dp.q), t.constant_ref(&dp.v));
    let i = aggregate_i_var(&mut t, q, v)?;
    Ok(t.value(i).clone())
}

/// `C = Σ_k m[:,k] ⊗ i[k,:]`.
pub fn compressed_outer_product(m: &Matrix, i: &Matrix) -> Result<Matrix> {
    outer_product_sum(m, i)
}

pub fn reconstruct(dp: &DecomposedPrompt, mode: ReconstructionMode) -> Result<Matrix> {
    dp.check()?;
    let mut t = Tape::new();
    let (u, q, v) = (t.constant_ref(&dp.u), t.constant_ref(&dp.q), t.constant_ref(&dp.v));
    let c = reconstruct_var(&mut t, u, q, v, mode)?;
    Ok(t.value(c).clone())
}

pub fn average_pool(c: &Matrix, p: usize) -> Result<Matrix> {
    average_rows(c, p)
}

pub fn self_attention_pool(c: &Matrix, params: &SelfAttnPoolParams) -> Result<Matrix> {
    let (l, d) = c.shape();
    let out_rows = params.w.cols();
    if params.w.rows() != d || out_rows == 0 || l % out_rows != 0 {
        return Err(LampError::dim("self_attention_pool", c.shape(), params.w.shape()));
    }
    let scores = c.matmul(&params.w)?;
    let weights_t = rowwise_softmax(&scores.transpose());
    weights_t.matmul(c)
}

/// `l·r + r + r·d`.
pub fn lamp_param_count(l: usize, d: usize, r: usize) -> usize {
    l * r + r + r * d
}

/// `l·d`.
pub fn vanilla_pt_param_count(l: usize, d: usize) -> usize {
    l * d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "vanilla-pt")]
    VanillaPt,
    #[default]
    #[serde(rename = "lamp")]
    Lamp,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::VanillaPt => "vanilla-pt",
            Method::Lamp => "lamp",
        }
    }
}

/// Trainable prompt representation.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptParams {
    /// Raw `l×d` prompt trained directly.
    Dense(Matrix),
    Factored {
        factors: DecomposedPrompt,
        mode: ReconstructionMode,
    },
}

/// All trainable prompt state together with its pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPrompt {
    pub params: PromptParams,
    pub pool: PoolConfig,
    pub attn: Option<SelfAttnPoolParams>,
}

/// Leaves and output of a prompt built on a tape.
pub struct BuiltPrompt {
    pub leaves: Vec<Var>,
    pub output: Var,
}

impl SoftPrompt {
    pub fn vanilla(source: &SourcePrompt, pool: PoolConfig, seed: u64) -> Result<Self> {
        Self::assemble(PromptParams::Dense(source.tokens.clone()), source, pool, seed)
    }

    pub fn lamp(source: &SourcePrompt, r: usize, mode: ReconstructionMode, pool: PoolConfig, seed: u64) -> Result<Self> {
        let factors = decompose(source, r)?;
        Self::assemble(PromptParams::Factored { factors, mode }, source, pool, seed)
    }

    fn assemble(params: PromptParams, source: &SourcePrompt, pool: PoolConfig, seed: u64) -> Result<Self> {
        pool.validate(source.len())?;
        let attn = match pool.mode {
            PoolMode::SelfAttention => Some(SelfAttnPoolParams::init(source.width(), source.len(), pool.p, seed)?),
            _ => None,
        };
        Ok(Self { params, pool, attn })
    }

    pub fn method(&self) -> Method {
        match self.params {
            PromptParams::Dense(_) => Method::VanillaPt,
            PromptParams::Factored { .. } => Method::Lamp,
        }
    }

    pub fn prompt_len(&self) -> usize {
        match &self.params {
            PromptParams::Dense(p) => p.rows(),
            PromptParams::Factored { factors, .. } => factors.prompt_len(),
        }
    }

    pub fn width(&self) -> usize {
        match &self.params {
            PromptParams::Dense(p) => p.cols(),
            PromptParams::Factored { factors, .. } => factors.width(),
        }
    }

    /// Rank `r` for factored prompts, 0 for dense ones.
    pub fn rank(&self) -> usize {
        match &self.params {
            PromptParams::Dense(_) => 0,
            PromptParams::Factored { factors, .. } => factors.rank(),
        }
    }

    pub fn rows_fed(&self) -> usize {
        self.pool.output_rows(self.prompt_len())
    }

    /// Named parameter groups in a fixed order.
    pub fn groups(&self) -> Vec<(&'static str, &Matrix)> {
        let mut out = match &self.params {
            PromptParams::Dense(p) => vec![("P", p)],
            PromptParams::Factored { factors, .. } => {
                vec![("U", &factors.u), ("Q", &factors.q), ("V", &factors.v)]
            }
        };
        if let Some(a) = &self.attn {
            out.push(("W_sa", &a.w));
        }
        out
    }

    /// Mutable parameter groups in the order of [`SoftPrompt::groups`].
    pub fn groups_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = match &mut self.params {
            PromptParams::Dense(p) => vec![p],
            PromptParams::Factored { factors, .. } => {
                vec![&mut factors.u, &mut factors.q, &mut factors.v]
            }
        };
        if let Some(a) = &mut self.attn {
            out.push(&mut a.w);
        }
        out
    }

    pub fn trainable_params(&self) -> usize {
        self.groups().iter().map(|(_, m)| m.len()).sum()
    }

    /// Records the prompt on `tape` with every group as a trainable leaf.
    pub fn build(&self, tape: &mut Tape<'_>) -> Result<BuiltPrompt> {
        let mut leaves = Vec::new();
        let c = match &self.params {
            PromptParams::Dense(p) => {
                let v = tape.param(p.clone());
                leaves.push(v);
                v
            }
            PromptParams::Factored { factors, mode } => {
                factors.check()?;
                let u = tape.param(factors.u.clone());
                let q = tape.param(factors.q.clone());
                let v = tape.param(factors.v.clone());
                leaves.extend([u, q, v]);
                reconstruct_var(tape, u, q, v, *mode)?
            }
        };
        let w = self.attn.as_ref().map(|a| {
            let w = tape.param(a.w.clone());
            leaves.push(w);
            w
        });
        let output = pool_var(tape, c, &self.pool, w)?;
        Ok(BuiltPrompt { leaves, output })
    }

    /// Reconstructed prompt before pooling.
    pub fn reconstructed(&self) -> Result<Matrix> {
        match &self.params {
            PromptParams::Dense(p) => Ok(p.clone()),
            PromptParams::Factored { factors, mode } => reconstruct(factors, *mode),
        }
    }

    /// Prompt rows actually fed to the backbone.
    pub fn materialize(&self) -> Result<Matrix> {
        let mut t = Tape::new();
        let built = self.build(&mut t)?;
        Ok(t.value(built.output).clone())
    }
}
