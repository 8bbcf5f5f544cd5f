//! Binary checkpoint format (little-endian throughout):
//!
//! ```text
//! "MOKT" | version: u32 | entries: u32
//! per entry: name_len: u32 | name (UTF-8) | dtype: u8 | rank: u32
//!            | extents: u64 × rank | row-major data
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::{DType, Element, ParamStore, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MOKT";
pub const VERSION: u32 = 1;

/// One raw tensor record, independent of the in-memory element type.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl Entry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn save<T: Element, W: Write>(store: &ParamStore<T>, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(store.len() as u32).to_le_bytes())?;
    let mut buf = Vec::new();
    for (name, t) in store.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[T::DTYPE.tag()])?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            out.write_all(&(e as u64).to_le_bytes())?;
        }
        buf.clear();
        for &v in t.data() {
            v.write_le(&mut buf);
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_file<T: Element>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    save(store, BufWriter::new(File::create(path)?))
}

fn read_array<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated while reading {what}: {e}")))?;
    Ok(b)
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    read_array::<4>(r, what).map(u32::from_le_bytes)
}

/// Parses every entry without converting element types.
pub fn read_entries<R: Read>(mut r: R) -> Result<Vec<Entry>> {
    if &read_array::<4>(&mut r, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a MOKT checkpoint".into()));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r, "entry count")?;
    let mut entries = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let len = read_u32(&mut r, "name length")? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let tag = read_array::<1>(&mut r, "dtype")?[0];
        let dtype =
            DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("'{name}': unknown dtype tag {tag}")))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        let shape = (0..rank)
            .map(|_| read_array::<8>(&mut r, "extent").map(|b| u64::from_le_bytes(b) as usize))
            .collect::<Result<Vec<_>>>()?;
        let bytes = shape
            .iter()
            .try_fold(dtype.size(), |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Checkpoint(format!("'{name}': size overflow")))?;
        let mut data = vec![0u8; bytes];
        r.read_exact(&mut data)
            .map_err(|e| Error::Checkpoint(format!("'{name}': truncated data: {e}")))?;
        entries.push(Entry {
            name,
            dtype,
            shape,
            data,
        });
    }
    Ok(entries)
}

/// Loads a checkpoint whose dtype matches `T`.
pub fn load<T: Element, R: Read>(r: R) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    for e in read_entries(r)? {
        if e.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "'{}' stored as {}, expected {}",
                e.name,
                e.dtype,
                T::DTYPE
            )));
        }
        let data: Vec<T> = e.data.chunks_exact(e.dtype.size()).map(T::read_le).collect();
        let t = Tensor::new(e.shape, data).map_err(|err| Error::Checkpoint(format!("'{}': {err}", e.name)))?;
        store.insert(e.name, t)?;
    }
    Ok(store)
}

pub fn load_file<T: Element>(path: impl AsRef<Path>) -> Result<ParamStore<T>> {
    load(BufReader::new(File::open(path)?))
}

/// Copies `source` into `target`; names and shapes must match one-to-one.
pub fn restore<T: Element>(target: &mut ParamStore<T>, source: &ParamStore<T>) -> Result<()> {
    if target.len() != source.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}",
            source.len(),
            target.len()
        )));
    }
    for (name, t) in source.iter() {
        let id = target
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor '{name}'")))?;
        target.set(id, t.clone())?;
    }
    Ok(())
}
