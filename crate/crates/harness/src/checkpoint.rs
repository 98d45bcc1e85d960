//! Binary checkpoint container.
//!
//! Layout, little-endian: 8-byte magic, `u32` schema version, the config
//! digest as a length-prefixed string, a `u32` entry count, then per entry a
//! kind byte (0 parameter, 1 buffer), the length-prefixed name, four `u64`
//! dims and the row-major `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use hypca::{ParamStore, Scalar, Tensor};

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"HYPCACKP";
pub const VERSION: u32 = 1;

const PARAM: u8 = 0;
const BUFFER: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub kind: u8,
    pub name: String,
    pub shape: [usize; 4],
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_digest: String,
    pub entries: Vec<Entry>,
}

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Checkpoint(msg.into())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| bad("name is not UTF-8"))
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(store: &ParamStore<T>, config_digest: &str) -> Self {
        let entry = |kind, name: &str, t: &Tensor<T>| Entry {
            kind,
            name: name.to_string(),
            shape: t.shape(),
            values: t.data().iter().map(|v| v.as_f64()).collect(),
        };
        let entries = store
            .iter()
            .map(|(_, p)| entry(PARAM, &p.name, &p.value))
            .chain(store.buffers().iter().map(|b| entry(BUFFER, &b.name, &b.value)))
            .collect();
        Self {
            config_digest: config_digest.to_string(),
            entries,
        }
    }

    /// Copies every entry into the store by name. The store must hold
    /// exactly the same set of names and shapes.
    pub fn apply<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let expected = store.len() + store.buffers().len();
        if self.entries.len() != expected {
            return Err(bad(format!(
                "{} entries for a model with {expected} tensors",
                self.entries.len()
            )));
        }
        for e in &self.entries {
            let t = Tensor::from_f64(e.shape, &e.values)?;
            let slot = match e.kind {
                PARAM => store.find(&e.name).map(|id| &mut store.get_mut(id).value),
                _ => store.buffers_mut().iter_mut().find(|b| b.name == e.name).map(|b| &mut b.value),
            };
            let slot = slot.ok_or_else(|| bad(format!("model has no tensor named {}", e.name)))?;
            if slot.shape() != e.shape {
                return Err(bad(format!(
                    "{}: shape {:?} does not match model shape {:?}",
                    e.name,
                    e.shape,
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str(w, &self.config_digest)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&[e.kind])?;
            write_str(w, &e.name)?;
            for d in e.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in &e.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic, not a checkpoint file"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported schema version {version}")));
        }
        let config_digest = read_str(r)?;
        let count = read_u32(r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let mut kind = [0u8; 1];
            r.read_exact(&mut kind)?;
            if kind[0] != PARAM && kind[0] != BUFFER {
                return Err(bad(format!("unknown entry kind {}", kind[0])));
            }
            let name = read_str(r)?;
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = read_u64(r)? as usize;
            }
            let len = shape.iter().product();
            let mut values = Vec::with_capacity(len);
            for _ in 0..len {
                values.push(f64::from_bits(read_u64(r)?));
            }
            entries.push(Entry {
                kind: kind[0],
                name,
                shape,
                values,
            });
        }
        Ok(Self {
            config_digest,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
