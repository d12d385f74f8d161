//! Checkpoint container: string metadata plus named tensors.
//!
//! Layout (little-endian): `b"AEPC"`, version `u32`, metadata count `u32`,
//! then `(key, value)` strings, then parameter count `u32` and for each a
//! name string followed by a tensor record. Strings are a `u32` byte length
//! and UTF-8 bytes. Metadata and parameters are written in sorted order, so
//! equal contents give equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{read_u32, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AEPC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> std::result::Result<String, TensorError> {
    let n = read_u32(r)? as usize;
    if n > 1 << 20 {
        return Err(TensorError::Format(format!("implausible string length {n}")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| TensorError::Format("string is not UTF-8".into()))
}

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Self { meta: BTreeMap::new(), params }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            write_str(&mut out, k).expect("Vec write");
            write_str(&mut out, v).expect("Vec write");
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            write_str(&mut out, name).expect("Vec write");
            t.write_to(&mut out).expect("Vec write");
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> std::result::Result<Self, TensorError> {
        let r = &mut bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(TensorError::Format(format!("not a checkpoint (magic {magic:?})")));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(TensorError::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..read_u32(r)? {
            let k = read_str(r)?;
            meta.insert(k, read_str(r)?);
        }
        let mut params = ParamStore::new();
        for _ in 0..read_u32(r)? {
            let name = read_str(r)?;
            params.insert(name, Tensor::read_from(r)?);
        }
        if !r.is_empty() {
            return Err(TensorError::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint { path: path.to_path_buf(), detail: e.to_string() })
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    /// Parameters whose names start with `prefix.`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> ParamStore {
        let p = format!("{prefix}.");
        let mut out = ParamStore::new();
        for (name, t) in self.params.iter() {
            if let Some(rest) = name.strip_prefix(&p) {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    /// Adds every parameter of `store` under `prefix.`.
    pub fn add_section(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.params.insert(format!("{prefix}.{name}"), t.clone());
        }
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`, so
/// readers see either the old or the new contents.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    atomic_write_io(path, bytes).map_err(Error::io(path))
}

pub(crate) fn atomic_write_io(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    fs::rename(&tmp, path)
}
