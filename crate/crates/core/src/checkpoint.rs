//! Binary checkpoint container. All integers little-endian.
//!
//! ```text
//! magic     8 bytes  b"MTSNNCKP"
//! version   u32      1
//! dtype     u8       0 = f32, 1 = f64
//! meta      u64 length + UTF-8 JSON (epoch, resolved config, metrics)
//! rng       32-byte seed, u64 stream, u128 word position
//! tensors   u32 count, then per tensor:
//!             u32 name length + UTF-8 name
//!             u32 rank + rank × u64 dims
//!             product(dims) values
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{DType, Real};
use crate::tensor::Tensor;
use crate::train::RunMetrics;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"MTSNNCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Number of completed epochs.
    pub epoch: usize,
    /// Resolved run config as TOML.
    pub config: String,
    pub metrics: RunMetrics,
    pub peak_test_accuracy: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub rng: RngState,
    pub tensors: Vec<(String, Tensor<T>)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::invalid(
                "checkpoint",
                format!("truncated while reading {what} at byte offset {}", self.pos),
            ));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn str(&mut self, len: usize, what: &str) -> Result<&'a str> {
        std::str::from_utf8(self.take(len, what)?)
            .map_err(|e| Error::invalid("checkpoint", format!("{what}: {e}")))
    }
}

/// Precision stored in a checkpoint, read from its header only.
pub fn peek_dtype(bytes: &[u8]) -> Result<DType> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::invalid(
            "checkpoint",
            "not a checkpoint file (bad magic)",
        ));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::invalid(
            "checkpoint",
            format!("unsupported version {version}"),
        ));
    }
    let tag = r.take(1, "dtype")?[0];
    DType::from_tag(tag)
        .ok_or_else(|| Error::invalid("checkpoint", format!("unknown dtype tag {tag}")))
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(T::DTYPE.tag());
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let dtype = peek_dtype(bytes)?;
        if dtype != T::DTYPE {
            return Err(Error::invalid(
                "checkpoint",
                format!("stored as {dtype:?}, expected {:?}", T::DTYPE),
            ));
        }
        let mut r = Reader { bytes, pos: 13 };
        let meta_len = r.u64("meta length")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "meta")?)?;
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().unwrap());
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = r.str(len, "tensor name")?.to_string();
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u64("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let size = T::DTYPE.size();
            let raw = r.take(n * size, &name)?;
            let data = raw.chunks_exact(size).map(T::read_le).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::invalid(
                "checkpoint",
                format!("trailing bytes at offset {}", r.pos),
            ));
        }
        Ok(Checkpoint {
            meta,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?).map_err(|e| Error::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copy of a named tensor, checked against the expected shape.
    pub fn take_tensor(&self, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
        let t = self
            .tensor(name)
            .ok_or_else(|| Error::invalid("checkpoint", format!("missing tensor `{name}`")))?;
        if t.shape() != shape {
            return Err(Error::shape("checkpoint", shape, t.shape()));
        }
        Ok(t.clone())
    }
}
