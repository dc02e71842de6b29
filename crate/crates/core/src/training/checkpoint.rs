//! Binary checkpoint format.
//!
//! ```text
//! magic "FFABCKPT" | version u8 | config hash u64 | step u64 | seed u64 | stage u8
//! | config length u32 | config JSON | tensor count u32
//! | per tensor: name length u16, name, dtype u8, rank u8, dims u32 x rank, data
//! ```
//! All integers and tensor data are little-endian. Tensor names are unique and
//! sorted, so saving a loaded checkpoint reproduces the file byte for byte.

use std::path::Path;

use crate::error::{format_err, Error, Result};
use crate::model::ModelConfig;
use crate::nn::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"FFABCKPT";
pub const CHECKPOINT_VERSION: u8 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    /// Training stage that wrote the file, 0 when not written by a stage.
    pub stage: u8,
    /// Model parameters plus optional optimizer moments under `opt.m.` / `opt.v.`.
    pub tensors: ParamStore<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        let mut out = Vec::with_capacity(64 + json.len() + self.tensors.num_elements() * 4);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&self.config.hash().to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.push(self.stage);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.tensors.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(match T::DTYPE {
                DType::Real64 => DTYPE_F64,
                _ => DTYPE_F32,
            });
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                match T::DTYPE {
                    DType::Real64 => out.extend_from_slice(&v.to_f64c().to_le_bytes()),
                    _ => out.extend_from_slice(&(v.to_f64c() as f32).to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(format_err(0, "not a checkpoint file"));
        }
        let version = r.u8("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(format_err(8, format!("unsupported checkpoint version {version}")));
        }
        let hash = r.u64("config hash")?;
        let step = r.u64("step")?;
        let seed = r.u64("seed")?;
        let stage = r.u8("stage")?;
        let json_len = r.u32("config length")? as usize;
        let json_pos = r.pos;
        let config: ModelConfig =
            serde_json::from_slice(r.take(json_len, "config")?).map_err(|e| format_err(json_pos, format!("config: {e}")))?;
        if config.hash() != hash {
            return Err(Error::Model(format!("config hash {hash:016x} does not match its config echo ({:016x})", config.hash())));
        }
        let count = r.u32("tensor count")?;
        let mut tensors = ParamStore::new();
        let mut last: Option<String> = None;
        for _ in 0..count {
            let name_pos = r.pos;
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| format_err(name_pos + 2, "tensor name is not UTF-8"))?
                .to_string();
            if last.as_ref().is_some_and(|l| *l >= name) {
                return Err(format_err(name_pos, format!("tensor {name} duplicated or out of order")));
            }
            let dtype_pos = r.pos;
            let width = match r.u8("dtype")? {
                DTYPE_F32 => 4,
                DTYPE_F64 => 8,
                d => return Err(format_err(dtype_pos, format!("unknown dtype tag {d}"))),
            };
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let len: usize = shape.iter().product();
            let data = r.take(len * width, &format!("data of {name}"))?;
            let values: Vec<T> = data
                .chunks_exact(width)
                .map(|c| {
                    T::from_f64c(if width == 4 {
                        f32::from_le_bytes(c.try_into().unwrap()) as f64
                    } else {
                        f64::from_le_bytes(c.try_into().unwrap())
                    })
                })
                .collect();
            tensors.insert(name.clone(), Tensor::new(&shape, values)?);
            last = Some(name);
        }
        if r.pos != bytes.len() {
            return Err(format_err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, step, seed, stage, tensors })
    }

    /// Rejects checkpoints built for a different architecture.
    pub fn expect_config(&self, cfg: &ModelConfig) -> Result<()> {
        if self.config.hash() != cfg.hash() {
            return Err(Error::Model(format!(
                "checkpoint config hash {:016x} does not match expected {:016x}",
                self.config.hash(),
                cfg.hash()
            )));
        }
        Ok(())
    }

    /// Tensors stored under `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for name in self.tensors.names_with_prefix(prefix) {
            out.insert(&name[prefix.len()..], self.tensors.expect(name).clone());
        }
        out
    }

    /// Model parameters without optimizer state.
    pub fn model_params(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, t) in self.tensors.iter().filter(|(n, _)| !n.starts_with("opt.")) {
            out.insert(name.clone(), t.clone());
        }
        out
    }
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, ckpt.to_bytes())?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(format_err(
                self.pos,
                format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
