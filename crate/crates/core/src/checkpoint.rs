//! Versioned binary checkpoint container, tag "cvar-ckpt/1".
//!
//! Layout (all little-endian): the magic line, a length-prefixed JSON
//! header, then named blocks. Block kinds: f32 tensor (rank + dims + data),
//! raw bytes, u64. Model checkpoints store the config in the header and one
//! tensor block per parameter; training checkpoints add optimizer velocity,
//! RNG state, and progress counters.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8] = b"cvar-ckpt/1\n";

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    TensorF32 { shape: Vec<usize>, data: Vec<f32> },
    Bytes(Vec<u8>),
    U64(u64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed: Option<ModelConfig>,
}

pub fn write(path: &Path, header: &Header, blocks: &[(String, Block)]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let header_json = serde_json::to_vec(header)
        .map_err(|e| Error::Format(format!("checkpoint header encode: {e}")))?;
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, block) in blocks {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        match block {
            Block::TensorF32 { shape, data } => {
                out.push(0);
                out.push(shape.len() as u8);
                for &d in shape {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Block::Bytes(bytes) => {
                out.push(1);
                out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
                out.extend_from_slice(bytes);
            }
            Block::U64(v) => {
                out.push(2);
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader {
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn read(path: &Path) -> Result<(Header, Vec<(String, Block)>)> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        let got = buf
            .iter()
            .take_while(|&&b| b != b'\n')
            .map(|&b| b as char)
            .collect::<String>();
        return Err(Error::Format(format!(
            "checkpoint version {got:?} unsupported, expected {:?}",
            std::str::from_utf8(&MAGIC[..MAGIC.len() - 1]).unwrap()
        )));
    }
    let mut r = Reader {
        buf,
        pos: MAGIC.len(),
    };
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::Format(format!("checkpoint header decode: {e}")))?;
    let n_blocks = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let nlen = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|e| Error::Format(format!("checkpoint block name: {e}")))?
            .to_string();
        let kind = r.take(1)?[0];
        let block = match kind {
            0 => {
                let rank = r.take(1)?[0] as usize;
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    shape.push(r.u64()? as usize);
                }
                let numel: usize = shape.iter().product();
                let raw = r.take(numel * 4)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Block::TensorF32 { shape, data }
            }
            1 => {
                let len = r.u64()? as usize;
                Block::Bytes(r.take(len)?.to_vec())
            }
            2 => Block::U64(r.u64()?),
            other => {
                return Err(Error::Format(format!(
                    "checkpoint block {name:?}: unknown kind {other}"
                )))
            }
        };
        blocks.push((name, block));
    }
    if r.pos != r.buf.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} trailing bytes",
            r.buf.len() - r.pos
        )));
    }
    Ok((header, blocks))
}

pub fn params_to_blocks(prefix: &str, params: &ModelParams<f32>) -> Vec<(String, Block)> {
    params
        .named()
        .into_iter()
        .map(|(name, t)| {
            (
                format!("{prefix}{name}"),
                Block::TensorF32 {
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                },
            )
        })
        .collect()
}

pub fn params_from_blocks(
    prefix: &str,
    cfg: &ModelConfig,
    blocks: &[(String, Block)],
) -> Result<ModelParams<f32>> {
    let mut pairs = Vec::new();
    for (name, block) in blocks {
        if let Some(stripped) = name.strip_prefix(prefix) {
            if let Block::TensorF32 { shape, data } = block {
                pairs.push((
                    stripped.to_string(),
                    Tensor::new(shape.clone(), data.clone())?,
                ));
            }
        }
    }
    ModelParams::from_named(cfg, pairs)
}

/// Save bare model weights.
pub fn save_model(path: &Path, cfg: &ModelConfig, params: &ModelParams<f32>) -> Result<()> {
    let header = Header {
        kind: "model".into(),
        model: *cfg,
        embed: None,
    };
    write(path, &header, &params_to_blocks("model.", params))
}

/// Load model weights from a bare-model or training checkpoint.
pub fn load_model(path: &Path) -> Result<(ModelConfig, ModelParams<f32>)> {
    let (header, blocks) = read(path)?;
    let params = params_from_blocks("model.", &header.model, &blocks)?;
    Ok((header.model, params))
}
