//! Versioned binary checkpoint container.
//!
//! Layout (little-endian): magic `VFSC`, u32 version, six u32 arch fields,
//! u64 training step, u64 rng seed, u128 rng word position, u32 tensor
//! count, then length-prefixed named tensors with f32 payloads. Parameter
//! values are held f32-rounded in memory, so a save/load round trip is
//! bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use diffsearch_autodiff::Tensor;

use crate::error::CoreError;
use crate::model::{Arch, EnergyModel};

pub const MAGIC: &[u8; 4] = b"VFSC";
pub const VERSION: u32 = 1;

/// Training-loop state carried inside a checkpoint for exact resume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainState {
    pub step: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub arch: Arch,
    pub tensors: BTreeMap<String, Tensor>,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [
            self.arch.cond_channels,
            self.arch.x_channels,
            self.arch.width,
            self.arch.blocks,
            self.arch.kernel,
            self.arch.emb_dim,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.state.step.to_le_bytes());
        out.extend_from_slice(&self.state.rng_seed.to_le_bytes());
        out.extend_from_slice(&self.state.rng_word_pos.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CoreError> {
        let mut r = Reader::new(bytes, "checkpoint");
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(r.err_at(0, format!("bad magic {magic:?}, expected {MAGIC:?}")));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(format!("unsupported version {version}, expected {VERSION}")));
        }
        let arch = Arch {
            cond_channels: r.u32()? as usize,
            x_channels: r.u32()? as usize,
            width: r.u32()? as usize,
            blocks: r.u32()? as usize,
            kernel: r.u32()? as usize,
            emb_dim: r.u32()? as usize,
        };
        let state = TrainState {
            step: r.u64()?,
            rng_seed: r.u64()?,
            rng_word_pos: r.u128()?,
        };
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name_bytes = r.take(name_len)?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| r.err("tensor name is not utf-8".to_string()))?
                .to_string();
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(r.err(format!("tensor `{name}` has rank {ndim} > 8")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().try_fold(1usize, |acc, &d| {
                acc.checked_mul(d)
            }).ok_or_else(|| r.err(format!("tensor `{name}` shape {shape:?} overflows")))?;
            if n > r.remaining() / 4 + 1 {
                return Err(r.err(format!(
                    "tensor `{name}` declares {n} values but only {} bytes remain",
                    r.remaining()
                )));
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(r.f32()? as f64);
            }
            let t = Tensor::new(shape, data)
                .map_err(|e| r.err(format!("tensor `{name}`: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(r.err(format!("duplicate tensor `{name}`")));
            }
        }
        if r.remaining() != 0 {
            return Err(r.err(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            arch,
            tensors,
            state,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CoreError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// Model parameters only (optimizer tensors carry an `opt.` prefix).
    pub fn model_params(&self) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter(|(k, _)| !k.starts_with("opt."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn into_model(self) -> Result<EnergyModel, CoreError> {
        let params = self.model_params();
        EnergyModel::from_parts(self.arch, params)
    }

    /// Loads and additionally rejects any arch field differing from
    /// `expected`, naming the field.
    pub fn load_expecting(path: &Path, expected: &Arch) -> Result<Self, CoreError> {
        let ck = Self::load(path)?;
        ck.check_arch(expected)?;
        Ok(ck)
    }

    pub fn check_arch(&self, expected: &Arch) -> Result<(), CoreError> {
        let fields: [(&'static str, usize, usize); 6] = [
            ("cond_channels", self.arch.cond_channels, expected.cond_channels),
            ("x_channels", self.arch.x_channels, expected.x_channels),
            ("width", self.arch.width, expected.width),
            ("blocks", self.arch.blocks, expected.blocks),
            ("kernel", self.arch.kernel, expected.kernel),
            ("emb_dim", self.arch.emb_dim, expected.emb_dim),
        ];
        for (field, found, want) in fields {
            if found != want {
                return Err(CoreError::ArchMismatch {
                    field,
                    found: found.to_string(),
                    expected: want.to_string(),
                });
            }
        }
        Ok(())
    }
}

/// Byte reader that reports the offset of every failure.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self {
            bytes,
            pos: 0,
            what,
        }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn err(&self, msg: String) -> CoreError {
        self.err_at(self.pos as u64, msg)
    }

    pub fn err_at(&self, offset: u64, msg: String) -> CoreError {
        CoreError::Format {
            what: self.what,
            offset,
            msg,
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], CoreError> {
        if self.remaining() < n {
            return Err(self.err(format!(
                "truncated: wanted {n} bytes, {} remain",
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, CoreError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, CoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, CoreError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn u128(&mut self) -> Result<u128, CoreError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32, CoreError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
