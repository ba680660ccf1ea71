use lamp_core::backbone::{BackboneConfig, FrozenBackbone};
use lamp_core::matrix::Matrix;
use lamp_core::optim::{OptimizerState, TrainConfig};
use lamp_core::prompt::{PoolConfig, ReconstructionMode, SoftPrompt, SourcePrompt};
use lamp_core::task::{LabelRule, SyntheticTask};
use lamp_core::trainer::{encode_examples, train_loop, train_step, LoopOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Rows = Vec<Vec<f64>>;

fn mat(m: &Matrix) -> Rows {
    m.to_rows()
}

fn mm(a: &Rows, b: &Rows) -> Rows {
    let (n, k, p) = (a.len(), b.len(), b[0].len());
    (0..n).map(|i| (0..p).map(|j| (0..k).map(|t| a[i][t] * b[t][j]).sum()).collect()).collect()
}

fn layer_norm(x: &Rows, g: &[f64], b: &[f64]) -> Rows {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

/// Step-by-step forward of the backbone equations for one head and any layer count.
fn manual_forward(bb: &FrozenBackbone, prompt: &Matrix, tokens: &[usize]) -> Vec<f64> {
    let cfg = bb.config();
    let d = cfg.d;
    let mut x = mat(prompt);
    for &t in tokens {
        x.push(bb.embeddings().row(t).to_vec());
    }
    let n = x.len();
    for (pos, row) in x.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let angle = pos as f64 / 10000f64.powf(2.0 * (j / 2) as f64 / d as f64);
            *v += if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    let (ig, ib) = bb.input_norm();
    x = layer_norm(&x, ig.as_slice(), ib.as_slice());
    for layer in bb.layers() {
        let h = layer_norm(&x, layer.ln1_gain.as_slice(), layer.ln1_bias.as_slice());
        let mut attn = vec![vec![0.0; d]; n];
        for head in 0..cfg.n_heads {
            let q = mm(&h, &mat(&layer.wq[head]));
            let k = mm(&h, &mat(&layer.wk[head]));
            let v = mm(&h, &mat(&layer.wv[head]));
            let dh = q[0].len() as f64;
            let mut ctx = vec![vec![0.0; q[0].len()]; n];
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / dh.sqrt())
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..n {
                    for c in 0..ctx[i].len() {
                        ctx[i][c] += e[j] / z * v[j][c];
                    }
                }
            }
            attn = add(&attn, &mm(&ctx, &mat(&layer.wo[head])));
        }
        x = add(&x, &attn);
        let h2 = layer_norm(&x, layer.ln2_gain.as_slice(), layer.ln2_bias.as_slice());
        let f: Rows = mm(&h2, &mat(&layer.w_in)).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
        x = add(&x, &mm(&f, &mat(&layer.w_out)));
    }
    let (fg, fb) = bb.final_norm();
    let x = layer_norm(&x, fg.as_slice(), fb.as_slice());
    let pooled: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    mm(&vec![pooled], &mat(bb.head())).remove(0)
}

fn tiny() -> FrozenBackbone {
    FrozenBackbone::new(BackboneConfig {
        vocab_size: 5,
        d: 4,
        n_layers: 1,
        n_heads: 1,
        ffn_width: 6,
        m: 2,
        n_classes: 1,
        seed: 11,
    })
    .unwrap()
}

#[test]
fn tiny_forward_matches_manual_oracle() {
    let bb = tiny();
    let prompt = Matrix::from_rows(&[vec![0.3, -1.2, 0.8, 0.05]]).unwrap();
    for tokens in [vec![1, 3], vec![4], vec![]] {
        let input = bb.encode_input(&tokens).unwrap();
        let got = bb.forward(&prompt, &input).unwrap();
        let want = manual_forward(&bb, &prompt, &tokens);
        assert_eq!(got.len(), 1);
        assert!((got[0] - want[0]).abs() <= 1e-10, "{tokens:?}: {} vs {}", got[0], want[0]);
    }
}

#[test]
fn multi_head_forward_matches_manual_oracle() {
    let bb = FrozenBackbone::new(BackboneConfig {
        vocab_size: 9,
        d: 8,
        n_layers: 2,
        n_heads: 2,
        ffn_width: 5,
        m: 4,
        n_classes: 3,
        seed: 2,
    })
    .unwrap();
    let prompt = Matrix::random_normal(3, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
    let tokens = [0, 8, 3];
    let got = bb.forward(&prompt, &bb.encode_input(&tokens).unwrap()).unwrap();
    let want = manual_forward(&bb, &prompt, &tokens);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() <= 1e-10);
    }
}

fn tiny_task() -> SyntheticTask {
    SyntheticTask {
        rule: LabelRule::TokenPresence,
        seed: 3,
        vocab_size: 16,
        seq_len: 4,
        n_classes: 2,
        n_train: 12,
        n_eval: 6,
    }
}

fn small_backbone() -> FrozenBackbone {
    FrozenBackbone::new(BackboneConfig {
        vocab_size: 16,
        d: 8,
        n_layers: 1,
        n_heads: 2,
        ffn_width: 8,
        m: 4,
        n_classes: 2,
        seed: 7,
    })
    .unwrap()
}

fn lamp_prompt(l: usize, d: usize) -> SoftPrompt {
    let src = SourcePrompt {
        tokens: Matrix::random_normal(l, d, 1.0, &mut ChaCha8Rng::seed_from_u64(8)),
    };
    SoftPrompt::lamp(&src, 3, ReconstructionMode::Verbatim, PoolConfig::average(2), 0).unwrap()
}

#[test]
fn zero_learning_rate_leaves_prompt_bit_identical() {
    let bb = small_backbone();
    let data = tiny_task().generate().unwrap();
    let batch = encode_examples(&bb, &data.train[..4]).unwrap();
    let mut prompt = lamp_prompt(6, 8);
    let before = prompt.clone();
    let mut state = OptimizerState::for_params(prompt.groups().into_iter().map(|g| g.1));
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..TrainConfig::default()
    };
    let loss = train_step(&mut prompt, &bb, &batch, &mut state, &cfg).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    for (a, b) in prompt.groups().iter().zip(before.groups()) {
        assert_eq!(a.1.to_le_bytes(), b.1.to_le_bytes());
    }
}

#[test]
fn training_never_touches_backbone_and_is_reproducible() {
    let bb = small_backbone();
    let digest = bb.digest();
    let snapshot = bb.clone();
    let data = tiny_task().generate().unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let a = train_loop(&bb, &data, lamp_prompt(6, 8), &cfg, LoopOptions::default()).unwrap();
    let b = train_loop(&bb, &data, lamp_prompt(6, 8), &cfg, LoopOptions::default()).unwrap();
    assert_eq!(bb.digest(), digest);
    assert_eq!(bb, snapshot);
    assert_eq!(a.log.to_ndjson(), b.log.to_ndjson());
    assert_eq!(a.prompt, b.prompt);
    // Two splits per epoch plus the initial evaluation.
    assert_eq!(a.log.records.len(), 2 * 4);
    assert!(a.log.records.iter().all(|r| r.trainable_params == 6 * 3 + 3 + 3 * 8));
    assert_eq!(a.optimizer.float_count(), 2 * a.prompt.trainable_params());
}

#[test]
fn zero_epochs_logs_initial_evaluation_only() {
    let bb = small_backbone();
    let data = tiny_task().generate().unwrap();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let out = train_loop(&bb, &data, lamp_prompt(6, 8), &cfg, LoopOptions::default()).unwrap();
    assert_eq!(out.log.records.len(), 2);
    assert!(out.log.records.iter().all(|r| r.epoch == 0));
    assert_eq!(out.prompt, lamp_prompt(6, 8));
}

fn manual_batch_loss(bb: &FrozenBackbone, u: &Rows, q: &[f64], v: &Rows, examples: &[(Vec<usize>, usize)]) -> f64 {
    let (l, r, d) = (u.len(), q.len(), v.len());
    let c: Rows = (0..l)
        .map(|i| (0..d).map(|j| (0..r).map(|k| u[i][k] * q[k] * q[k] * v[j][k]).sum()).collect())
        .collect();
    let pooled: Rows = (0..l / 2)
        .map(|b| (0..d).map(|j| 0.5 * (c[2 * b][j] + c[2 * b + 1][j])).collect())
        .collect();
    let prompt = Matrix::from_rows(&pooled).unwrap();
    let mut total = 0.0;
    for (tokens, label) in examples {
        let z = manual_forward(bb, &prompt, tokens);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - z[*label];
    }
    total / examples.len() as f64
}

/// One optimizer step against forward, central-difference backward and
/// AdamW, all written independently of the library.
#[test]
fn single_step_matches_composed_oracle() {
    let bb = small_backbone();
    let data = tiny_task().generate().unwrap();
    let examples: Vec<(Vec<usize>, usize)> = data.train[..4].iter().map(|e| (e.tokens.clone(), e.label)).collect();
    let batch = encode_examples(&bb, &data.train[..4]).unwrap();
    let mut prompt = lamp_prompt(6, 8);
    let groups: Vec<Rows> = prompt.groups().iter().map(|g| mat(g.1)).collect();

    let loss_at = |g: &[Rows]| manual_batch_loss(&bb, &g[0], &g[1][0], &g[2], &examples);
    let h = 1e-6;
    let mut numeric: Vec<Rows> = groups.clone();
    for gi in 0..3 {
        for i in 0..groups[gi].len() {
            for j in 0..groups[gi][i].len() {
                let mut plus = groups.clone();
                plus[gi][i][j] += h;
                let mut minus = groups.clone();
                minus[gi][i][j] -= h;
                numeric[gi][i][j] = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            }
        }
    }

    let (loss, analytic) = lamp_core::trainer::batch_gradients(&prompt, &bb, &batch).unwrap();
    assert!((loss - loss_at(&groups)).abs() <= 1e-10);
    for (a, n) in analytic.iter().zip(&numeric) {
        let n = Matrix::from_rows(n).unwrap();
        assert!(a.sub(&n).unwrap().max_abs() <= 1e-6 * (1.0 + n.max_abs()));
    }

    let cfg = TrainConfig {
        learning_rate: 0.05,
        ..TrainConfig::default()
    };
    let mut state = OptimizerState::for_params(prompt.groups().into_iter().map(|g| g.1));
    train_step(&mut prompt, &bb, &batch, &mut state, &cfg).unwrap();

    // First AdamW step: m̂ = g, v̂ = g².
    for (gi, after) in prompt.groups().iter().enumerate() {
        for i in 0..groups[gi].len() {
            for j in 0..groups[gi][i].len() {
                let g = numeric[gi][i][j];
                let theta = groups[gi][i][j] * (1.0 - cfg.learning_rate * cfg.weight_decay);
                let want = theta - cfg.learning_rate * g / (g.abs() + cfg.adam_epsilon);
                let got = after.1.get(i, j);
                assert!((got - want).abs() <= 1e-9, "{} [{i},{j}]: {got} vs {want}", after.0);
            }
        }
    }
}
