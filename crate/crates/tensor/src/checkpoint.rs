//! `AUVN` flat binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     4 bytes  "AUVN"
//! version   u32      FORMAT_VERSION
//! count     u32      number of entries
//! entry*    name_len u32, name (UTF-8), ndim u32, dims u32 * ndim,
//!           payload f32 * product(dims)
//! ```
//!
//! Text blocks (JSON configs) are stored as 1-D entries holding one byte value
//! per element, which f32 represents exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AUVN";
pub const FORMAT_VERSION: u32 = 1;
const MAX_DIMS: usize = 8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: IndexMap<String, Tensor<f32>>,
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) {
        self.entries.insert(name.into(), value);
    }

    pub fn insert_text(&mut self, name: impl Into<String>, text: &str) {
        let data: Vec<f32> = text.bytes().map(f32::from).collect();
        let n = data.len();
        self.insert(name, Tensor::new(vec![n], data).expect("1-D"));
    }

    /// Adds every parameter of `store` under `prefix`.
    pub fn insert_params(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (name, value) in store.iter() {
            self.insert(format!("{prefix}{name}"), value.clone());
        }
    }

    /// Parameters whose entry names start with `prefix`, prefix stripped.
    pub fn params(&self, prefix: &str) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        for (name, value) in &self.entries {
            if let Some(rest) = name.strip_prefix(prefix) {
                store.insert(rest, value.clone());
            }
        }
        store
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name).ok_or_else(|| bad(format!("missing entry `{name}`")))
    }

    pub fn text(&self, name: &str) -> Result<String> {
        let t = self.tensor(name)?;
        let bytes = t
            .data()
            .iter()
            .map(|&v| {
                if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(bad(format!("entry `{name}` is not a text block")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        String::from_utf8(bytes).map_err(|_| bad(format!("entry `{name}` is not UTF-8")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, t) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(bad("bad magic, not an AUVN checkpoint"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = IndexMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| bad("entry name is not UTF-8"))?;
            let ndim = r.u32()? as usize;
            if ndim > MAX_DIMS {
                return Err(bad(format!("entry `{name}` has {ndim} dims")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut numel: usize = 1;
            for _ in 0..ndim {
                let d = r.u32()? as usize;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| bad(format!("entry `{name}` shape overflows")))?;
                shape.push(d);
            }
            let payload = r.take(numel.checked_mul(4).ok_or_else(|| bad("payload overflows"))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if entries.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(bad(format!("duplicate entry `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { entries })
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("auvn.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            self.write_to(&mut f)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
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
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad("truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
