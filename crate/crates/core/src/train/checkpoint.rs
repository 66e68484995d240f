//! The `SDAW` checkpoint encoding.
//!
//! Layout, little-endian, no padding:
//! magic `SDAW` · u32 version · u32 tensor count · tensors ·
//! u32 optimizer tensor count · moment tensors (all `m`, then all `v`) ·
//! u64 optimizer step · u64 epoch · u64 rng seed · u128 rng word position ·
//! u32 config length · config text.
//!
//! A tensor is u32 name length · UTF-8 name · u8 precision code (scalar
//! width in bytes) · u8 rank · u64 extents · raw scalars.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernel::{AdamWState, Precision, Scalar, Tensor};
use crate::model::{ModelConfig, SdaNet};
use crate::rng::RngState;

pub const MAGIC: &[u8; 4] = b"SDAW";
pub const VERSION: u32 = 1;
const MAX_RANK: usize = 8;

/// Everything needed to resume training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub params: Vec<Tensor<T>>,
    pub optimizer: AdamWState<T>,
    pub epoch: u64,
    pub rng: RngState,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn model(&self) -> Result<SdaNet<T>> {
        SdaNet::from_params(self.config.clone(), &self.names, self.params.clone())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.params) {
            write_tensor(&mut out, name, t);
        }
        let opt = &self.optimizer;
        out.extend_from_slice(&((opt.m.len() + opt.v.len()) as u32).to_le_bytes());
        for (prefix, list) in [("m.", &opt.m), ("v.", &opt.v)] {
            for (name, t) in self.names.iter().zip(list) {
                write_tensor(&mut out, &format!("{prefix}{name}"), t);
            }
        }
        out.extend_from_slice(&opt.t.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out
    }

    /// Parses and validates a checkpoint. Nothing is returned unless the
    /// whole buffer is well formed and every tensor matches the layout of
    /// the embedded config.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format { offset: 0, detail: "bad magic, expected SDAW".into() });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format { offset: 4, detail: format!("unsupported version {version}") });
        }
        let count = r.u32()? as usize;
        let mut names = Vec::new();
        let mut params = Vec::new();
        for _ in 0..count {
            let (name, t) = r.tensor::<T>()?;
            names.push(name);
            params.push(t);
        }
        let opt_count = r.u32()? as usize;
        if opt_count != 2 * count {
            return Err(Error::Format {
                offset: r.pos - 4,
                detail: format!("{opt_count} optimizer tensors for {count} parameters"),
            });
        }
        let mut moments = Vec::new();
        for i in 0..opt_count {
            let at = r.pos;
            let (name, t) = r.tensor::<T>()?;
            let want = format!("{}{}", if i < count { "m." } else { "v." }, names[i % count]);
            if name != want {
                return Err(Error::Format {
                    offset: at,
                    detail: format!("expected optimizer tensor {want}, found {name}"),
                });
            }
            moments.push(t);
        }
        let v = moments.split_off(count);
        let step = r.u64()?;
        let epoch = r.u64()?;
        let seed = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let text_len = r.u32()? as usize;
        let text_at = r.pos;
        let text = core::str::from_utf8(r.take(text_len)?)
            .map_err(|_| Error::Format { offset: text_at, detail: "config text is not UTF-8".into() })?;
        if r.pos != bytes.len() {
            return Err(Error::Format { offset: r.pos, detail: format!("{} trailing bytes", bytes.len() - r.pos) });
        }
        let config = ModelConfig::from_text(text).map_err(|e| Error::Compat(format!("embedded config: {e}")))?;

        // layout check, including the moments
        SdaNet::from_params(config.clone(), &names, params.clone())?;
        for (t, p) in moments.iter().chain(&v).zip(params.iter().chain(&params)) {
            if t.shape() != p.shape() {
                return Err(Error::Compat(format!(
                    "optimizer moment {:?} does not match parameter {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
        }
        Ok(Self {
            config,
            names,
            params,
            optimizer: AdamWState { m: moments, v, t: step },
            epoch,
            rng: RngState { seed, word_pos },
        })
    }
}

fn write_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::PRECISION.code());
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                detail: format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let len = self.u32()? as usize;
        let at = self.pos;
        let name = core::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Format { offset: at, detail: "tensor name is not UTF-8".into() })?
            .into();
        let at = self.pos;
        let code = self.u8()?;
        match Precision::from_code(code) {
            None => return Err(Error::Format { offset: at, detail: format!("unknown precision code {code}") }),
            Some(p) if p != T::PRECISION => {
                return Err(Error::Precision(format!(
                    "checkpoint holds {p:?} tensors, loader expects {:?}",
                    T::PRECISION
                )))
            }
            Some(_) => {}
        }
        let at = self.pos;
        let rank = self.u8()? as usize;
        if rank > MAX_RANK {
            return Err(Error::Format { offset: at, detail: format!("rank {rank} exceeds {MAX_RANK}") });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = self.pos;
            let e = self.u64()?;
            if e == 0 || e > u32::MAX as u64 {
                return Err(Error::Format { offset: at, detail: format!("implausible extent {e}") });
            }
            shape.push(e as usize);
        }
        let numel = shape.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e));
        let at = self.pos;
        let Some(bytes) = numel.and_then(|n| n.checked_mul(T::BYTES)) else {
            return Err(Error::Format { offset: at, detail: "tensor size overflows".into() });
        };
        let raw = self.take(bytes)?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format { offset: at, detail: format!("{e}") })?;
        Ok((name, t))
    }
}
