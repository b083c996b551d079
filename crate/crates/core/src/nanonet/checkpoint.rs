//! Little-endian binary checkpoint holding a model's configuration, weights
//! and codebooks.
//!
//! ```text
//! "TATK"                  magic
//! u32                     version (1)
//! u32 ×3                  image height, width, channels
//! u32 ×4                  token_dim, num_global, depth, patch_size
//! f64                     overlap_rate
//! u32 ×3                  codebook_size, patch_code_dim, global_code_dim
//! u64                     seed
//! u32                     tensor count
//! per tensor:             u32 rank, u32 dims[rank], f64 payload (row-major)
//! ```
//!
//! Tensors follow [`Weights::tensors`] order, then the patch codebook and the
//! global codebook.

use std::path::Path;

use super::{init_shapes, Mat, ModelConfig, Params, Weights};
use crate::error::{Error, Result};
use crate::quantizer::{Codebook, CodebookKind, Codebooks};

pub const MAGIC: &[u8; 4] = b"TATK";
pub const VERSION: u32 = 1;

/// A trained (or freshly initialized) model: weights plus codebooks.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Params,
    pub codebooks: Codebooks,
}

impl Checkpoint {
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            params: super::init_params(cfg)?,
            codebooks: crate::quantizer::init_codebooks(cfg)?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.params.config;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let u32s = |out: &mut Vec<u8>, vals: &[usize]| {
            for &v in vals {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
        };
        u32s(&mut out, &[VERSION as usize, c.image_height, c.image_width, c.channels]);
        u32s(&mut out, &[c.token_dim, c.num_global, c.depth, c.patch_size]);
        out.extend_from_slice(&c.overlap_rate.to_le_bytes());
        u32s(&mut out, &[c.codebook_size, c.patch_code_dim, c.global_code_dim]);
        out.extend_from_slice(&c.seed.to_le_bytes());
        let mut tensors = self.params.weights.tensors();
        tensors.push(&self.codebooks.patch.entries);
        tensors.push(&self.codebooks.global.entries);
        u32s(&mut out, &[tensors.len()]);
        for t in tensors {
            u32s(&mut out, &[2, t.nrows(), t.ncols()]);
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Parse("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedFormat(format!("checkpoint version {version}")));
        }
        let config = ModelConfig {
            image_height: r.usize()?,
            image_width: r.usize()?,
            channels: r.usize()?,
            token_dim: r.usize()?,
            num_global: r.usize()?,
            depth: r.usize()?,
            patch_size: r.usize()?,
            overlap_rate: r.f64()?,
            codebook_size: r.usize()?,
            patch_code_dim: r.usize()?,
            global_code_dim: r.usize()?,
            seed: r.u64()?,
        };
        config
            .validate()
            .map_err(|e| Error::Parse(format!("invalid checkpoint config: {e}")))?;
        let mut shapes = init_shapes(&config);
        shapes.push((config.codebook_size, config.patch_code_dim));
        shapes.push((config.codebook_size, config.global_code_dim));
        let count = r.usize()?;
        if count != shapes.len() {
            return Err(Error::Parse(format!("expected {} tensors, found {count}", shapes.len())));
        }
        let mut tensors = Vec::with_capacity(count);
        for (i, &(rows, cols)) in shapes.iter().enumerate() {
            let rank = r.u32()?;
            if rank != 2 {
                return Err(Error::Parse(format!("tensor {i} has rank {rank}, expected 2")));
            }
            let dims = (r.usize()?, r.usize()?);
            if dims != (rows, cols) {
                return Err(Error::Parse(format!("tensor {i} has shape {dims:?}, expected {:?}", (rows, cols))));
            }
            let payload = r.take(rows * cols * 8)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(Mat::from_shape_vec((rows, cols), data).expect("shape checked"));
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let global = tensors.pop().expect("count checked");
        let patch = tensors.pop().expect("count checked");
        let weights = Weights::from_tensors(config.depth, tensors)
            .ok_or_else(|| Error::Parse("tensor count mismatch".into()))?;
        let params = Params { config, weights };
        params.validate()?;
        Ok(Self {
            params,
            codebooks: Codebooks {
                patch: Codebook::new(patch, CodebookKind::Patch)?,
                global: Codebook::new(global, CodebookKind::Global)?,
            },
        })
    }

    /// 32-bit FNV-1a over the serialized checkpoint.
    pub fn checksum(&self) -> u32 {
        fnv1a32(&self.to_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn fnv1a32(bytes: &[u8]) -> u32 {
    bytes.iter().fold(0x811c_9dc5u32, |h, &b| (h ^ b as u32).wrapping_mul(0x0100_0193))
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Parse(format!("truncated at byte {} (wanted {n} more)", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn usize(&mut self) -> Result<usize> {
        self.u32().map(|v| v as usize)
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
