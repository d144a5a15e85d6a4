//! Versioned named-tensor container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "FDCE" | version: u32 | payload length: u64 | payload | sha256(payload)
//! payload = config text | step: u64 | params table | m table | v table
//! text    = len: u64 | utf-8 bytes
//! table   = count: u64 | tensor*
//! tensor  = name text | dtype tag: u8 | rank: u8 | extents: u64* | raw values
//! ```
//!
//! The checksum is verified before any tensor is decoded.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::nn::ParamStore;
use crate::tensor::{DType, Real, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"FDCE";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const HEADER_LEN: usize = 4 + 4 + 8;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// Raw tensor values in their stored precision.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn from_tensor<T: Real>(name: &str, t: &Tensor<T>) -> Self {
        let data = match T::DTYPE {
            DType::F32 => TensorData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => TensorData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        NamedTensor {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data,
        }
    }

    /// Converts to `T`; exact when the stored dtype is `T`'s.
    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        let data = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
        };
        Ok(Tensor::new(&self.shape, data)?)
    }
}

/// Serializes every tensor of a store, in store order.
pub fn table_from_store<T: Real>(store: &ParamStore<T>) -> Vec<NamedTensor> {
    store.iter().map(|(n, t)| NamedTensor::from_tensor(n, t)).collect()
}

/// Rebuilds a store from a table, preserving order.
pub fn store_from_table<T: Real>(table: &[NamedTensor]) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    for nt in table {
        store.insert(nt.name.clone(), nt.to_tensor()?)?;
    }
    Ok(store)
}

/// Copies every tensor of `table` into the same-named, same-shaped slot of
/// `store`. Missing or extra names are errors.
pub fn load_into_store<T: Real>(store: &mut ParamStore<T>, table: &[NamedTensor]) -> Result<()> {
    if table.len() != store.len() {
        return Err(CheckpointError::Malformed(format!(
            "table has {} tensors, model expects {}",
            table.len(),
            store.len()
        )));
    }
    for nt in table {
        if store.id(&nt.name).is_none() {
            return Err(CheckpointError::Malformed(format!("unexpected tensor {:?}", nt.name)));
        }
        store.set(&nt.name, nt.to_tensor()?)?;
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// `key = value` configuration snapshot.
    pub config: String,
    /// Optimizer steps completed.
    pub step: u64,
    pub params: Vec<NamedTensor>,
    /// AdamW first moments, same names as `params`.
    pub first_moment: Vec<NamedTensor>,
    /// AdamW second moments, same names as `params`.
    pub second_moment: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        put_text(&mut payload, &self.config);
        payload.extend_from_slice(&self.step.to_le_bytes());
        for table in [&self.params, &self.first_moment, &self.second_moment] {
            put_table(&mut payload, table);
        }
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&Sha256::digest(&payload));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(CheckpointError::Malformed("file shorter than magic".into()));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        if bytes.len() < HEADER_LEN {
            return Err(CheckpointError::Malformed("truncated header".into()));
        }
        let found = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if found != VERSION {
            return Err(CheckpointError::Version { found });
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let len = usize::try_from(len).map_err(|_| CheckpointError::Malformed("payload too large".into()))?;
        let body = &bytes[HEADER_LEN..];
        if body.len() != len.saturating_add(DIGEST_LEN) || len > body.len() {
            return Err(CheckpointError::Malformed(format!(
                "payload length {len} disagrees with file size {}",
                bytes.len()
            )));
        }
        let (payload, digest) = body.split_at(len);
        if Sha256::digest(payload).as_slice() != digest {
            return Err(CheckpointError::Checksum);
        }
        let mut r = Reader { buf: payload, pos: 0 };
        let config = r.text()?;
        let step = r.u64()?;
        let params = r.table()?;
        let first_moment = r.table()?;
        let second_moment = r.table()?;
        if r.pos != payload.len() {
            return Err(CheckpointError::Malformed("trailing bytes in payload".into()));
        }
        Ok(Checkpoint {
            config,
            step,
            params,
            first_moment,
            second_moment,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn put_text(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_table(out: &mut Vec<u8>, table: &[NamedTensor]) {
    out.extend_from_slice(&(table.len() as u64).to_le_bytes());
    for t in table {
        put_text(out, &t.name);
        out.push(t.data.dtype().tag());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &t.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Malformed("unexpected end of payload".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Malformed("length overflow".into()))
    }

    fn text(&mut self) -> Result<String> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("invalid utf-8".into()))
    }

    fn table(&mut self) -> Result<Vec<NamedTensor>> {
        let count = self.usize()?;
        let mut out = Vec::new();
        for _ in 0..count {
            let name = self.text()?;
            let tag = self.u8()?;
            let dtype =
                DType::from_tag(tag).ok_or_else(|| CheckpointError::Malformed(format!("unknown dtype tag {tag}")))?;
            let rank = self.u8()? as usize;
            let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| CheckpointError::Malformed("extent overflow".into()))?;
            let raw = self.take(n.checked_mul(dtype.size()).ok_or_else(|| {
                CheckpointError::Malformed("extent overflow".into())
            })?)?;
            let data = match dtype {
                DType::F32 => TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                DType::F64 => TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
            };
            out.push(NamedTensor { name, shape, data });
        }
        Ok(out)
    }
}
