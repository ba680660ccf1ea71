//! Binary prompt checkpoints (`*.lamp`).
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "LAMP"            4 bytes magic
//! version           u32 (= 1)
//! l, d, r           u32 each
//! U                 l·r  f64, row-major
//! Q                 r    f64
//! V                 d·r  f64, row-major
//! mode              u8   0 = verbatim, 1 = balanced, 2 = dense
//! pool mode         u8   0 = none, 1 = average, 2 = self-attention
//! p                 u32
//! W_sa              d·(l/p) f64, only when pool mode = 2
//! P                 l·d  f64, only when mode = 2 (then r = 0)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{LampError, Result};
use crate::matrix::Matrix;
use crate::prompt::{
    DecomposedPrompt, PoolConfig, PoolMode, PromptParams, ReconstructionMode, SelfAttnPoolParams,
    SoftPrompt,
};

pub const MAGIC: &[u8; 4] = b"LAMP";
pub const VERSION: u32 = 1;
const DENSE_MODE: u8 = 2;

pub fn encode(prompt: &SoftPrompt) -> Result<Vec<u8>> {
    let l = prompt.prompt_len();
    let d = prompt.width();
    let r = prompt.rank();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [VERSION, to_u32(l, "l")?, to_u32(d, "d")?, to_u32(r, "r")?] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mode = match &prompt.params {
        PromptParams::Factored { factors, mode } => {
            for m in [&factors.u, &factors.q, &factors.v] {
                out.extend_from_slice(&m.to_le_bytes());
            }
            mode.code()
        }
        PromptParams::Dense(_) => DENSE_MODE,
    };
    out.push(mode);
    out.push(prompt.pool.mode.code());
    out.extend_from_slice(&to_u32(prompt.pool.p, "p")?.to_le_bytes());
    if let Some(attn) = &prompt.attn {
        out.extend_from_slice(&attn.w.to_le_bytes());
    }
    if let PromptParams::Dense(p) = &prompt.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<SoftPrompt> {
    let mut rd = Reader { bytes, pos: 0 };
    if rd.take(4)? != MAGIC {
        return Err(LampError::Format("bad magic bytes".into()));
    }
    let version = rd.u32()?;
    if version != VERSION {
        return Err(LampError::Format(format!("unsupported version {version}")));
    }
    let l = rd.u32()? as usize;
    let d = rd.u32()? as usize;
    let r = rd.u32()? as usize;
    let u = rd.matrix(l, r)?;
    let q = rd.matrix(1, r)?;
    let v = rd.matrix(d, r)?;
    let mode = rd.u8()?;
    let pool_mode = PoolMode::from_code(rd.u8()?)
        .ok_or_else(|| LampError::Format("unknown pooling mode".into()))?;
    let p = rd.u32()? as usize;
    let pool = PoolConfig { mode: pool_mode, p };
    pool.validate(l).map_err(|e| LampError::Format(e.to_string()))?;
    let attn = if pool_mode == PoolMode::SelfAttention {
        Some(SelfAttnPoolParams {
            w: rd.matrix(d, l / p)?,
        })
    } else {
        None
    };
    let params = match mode {
        0 | 1 => {
            if r == 0 {
                return Err(LampError::Format("factored prompt with r = 0".into()));
            }
            let mode = if mode == 0 {
                ReconstructionMode::Verbatim
            } else {
                ReconstructionMode::Balanced
            };
            PromptParams::Factored {
                factors: DecomposedPrompt { u, q, v },
                mode,
            }
        }
        DENSE_MODE => {
            if r != 0 {
                return Err(LampError::Format("dense prompt must have r = 0".into()));
            }
            PromptParams::Dense(rd.matrix(l, d)?)
        }
        other => return Err(LampError::Format(format!("unknown reconstruction mode {other}"))),
    };
    if rd.pos != bytes.len() {
        return Err(LampError::Format(format!(
            "{} trailing bytes",
            bytes.len() - rd.pos
        )));
    }
    Ok(SoftPrompt { params, pool, attn })
}

pub fn save(prompt: &SoftPrompt, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(prompt)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<SoftPrompt> {
    decode(&fs::read(path)?)
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| LampError::Format(format!("{what} = {v} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| LampError::Format("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| LampError::Format("matrix size overflows".into()))?;
        let data = self
            .take(n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Matrix::new(rows, cols, data).map_err(|e| LampError::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::{init_source_prompt, VocabTable};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn source() -> crate::prompt::SourcePrompt {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vocab = VocabTable::synthetic_zipf(Matrix::random_normal(30, 6, 1.0, &mut rng), 1);
        init_source_prompt(&vocab, 8, 20, 3).unwrap()
    }

    #[test]
    fn header_layout() {
        let p = SoftPrompt::lamp(&source(), 2, ReconstructionMode::Balanced, PoolConfig::average(4), 0).unwrap();
        let bytes = encode(&p).unwrap();
        assert_eq!(&bytes[..4], b"LAMP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 6);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
        let payload = 8 * (8 * 2 + 2 + 6 * 2);
        assert_eq!(bytes.len(), 20 + payload + 1 + 1 + 4);
        assert_eq!(bytes[20 + payload], 1);
        assert_eq!(bytes[21 + payload], 1);
        assert_eq!(decode(&bytes).unwrap(), p);
    }

    #[test]
    fn all_variants_round_trip() {
        let src = source();
        let prompts = [
            SoftPrompt::lamp(&src, 3, ReconstructionMode::Verbatim, PoolConfig::none(), 0).unwrap(),
            SoftPrompt::lamp(&src, 3, ReconstructionMode::Verbatim, PoolConfig::self_attention(2), 5).unwrap(),
            SoftPrompt::vanilla(&src, PoolConfig::average(2), 0).unwrap(),
        ];
        for p in prompts {
            assert_eq!(decode(&encode(&p).unwrap()).unwrap(), p);
        }
    }

    #[test]
    fn rejects_bad_headers() {
        let p = SoftPrompt::lamp(&source(), 2, ReconstructionMode::Verbatim, PoolConfig::none(), 0).unwrap();
        let good = encode(&p).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(LampError::Format(_))));

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(decode(&bad_version).unwrap_err().to_string().contains("version"));

        assert!(decode(&good[..good.len() - 3]).is_err());
        let mut trailing = good.clone();
        trailing.push(0);
        assert!(decode(&trailing).is_err());
    }
}
