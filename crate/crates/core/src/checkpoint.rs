//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"USTDCKPT" | u32 version | u64 meta_len | meta_len bytes of JSON
//! u32 tensor_count
//! per tensor: u32 name_len | name | u64 rows | u64 cols | rows*cols f64
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autograd::{Adam, AdamConfig, Mat, ParamStore};
use crate::error::{Result, UstdError};

pub const MAGIC: &[u8; 8] = b"USTDCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Mat>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    /// Adds every parameter of `store` under `prefix/name`.
    pub fn put_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, value) in store.to_named() {
            self.tensors.insert(format!("{prefix}/{name}"), value);
        }
    }

    pub fn load_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let want = format!("{prefix}/");
        let named: BTreeMap<String, Mat> = self
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&want).map(|n| (n.to_string(), v.clone())))
            .collect();
        store
            .load_named(&named)
            .map_err(|e| UstdError::Format(format!("checkpoint section '{prefix}': {e}")))
    }

    /// Stores optimizer moments aligned with `store`, plus the step counter.
    pub fn put_adam(&mut self, prefix: &str, adam: &Adam, store: &ParamStore) {
        for (id, (m, v)) in store.ids().zip(adam.m.iter().zip(&adam.v)) {
            let name = store.name(id);
            self.tensors.insert(format!("{prefix}/m/{name}"), m.clone());
            self.tensors.insert(format!("{prefix}/v/{name}"), v.clone());
        }
        self.tensors
            .insert(format!("{prefix}/step"), Mat::from_elem((1, 1), adam.step as f64));
    }

    pub fn load_adam(&self, prefix: &str, config: AdamConfig, store: &ParamStore) -> Result<Adam> {
        let mut adam = Adam::new(config, store);
        let step = self
            .tensors
            .get(&format!("{prefix}/step"))
            .ok_or_else(|| UstdError::Format(format!("checkpoint lacks optimizer state '{prefix}'")))?;
        adam.step = step[[0, 0]] as u64;
        for (i, id) in store.ids().enumerate() {
            let name = store.name(id);
            for (slot, kind) in [(&mut adam.m[i], "m"), (&mut adam.v[i], "v")] {
                let src = self
                    .tensors
                    .get(&format!("{prefix}/{kind}/{name}"))
                    .ok_or_else(|| UstdError::Format(format!("optimizer state for '{name}' missing")))?;
                if src.dim() != slot.dim() {
                    return Err(UstdError::Format(format!("optimizer state for '{name}' has the wrong shape")));
                }
                slot.assign(src);
            }
        }
        Ok(adam)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| UstdError::Format(e.to_string()))?;
        let payload: usize = self.tensors.iter().map(|(k, v)| 20 + k.len() + 8 * v.len()).sum();
        let mut out = Vec::with_capacity(24 + meta.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, value) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(value.ncols() as u64).to_le_bytes());
            for v in value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(UstdError::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(UstdError::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| UstdError::Format(format!("checkpoint metadata: {e}")))?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| UstdError::Format("tensor name is not UTF-8".into()))?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| UstdError::Format(format!("tensor '{name}' overruns the file")))?;
            let data: Vec<f64> = r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(name, Mat::from_shape_vec((rows, cols), data).expect("length checked"));
        }
        if r.remaining() != 0 {
            return Err(UstdError::Format("trailing bytes after the last tensor".into()));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(UstdError::Format("checkpoint is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
