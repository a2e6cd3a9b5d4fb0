//! Named-array container: a small binary format holding ordered, named 2-D
//! arrays of f64 or u8. Used for model checkpoints, per-case slice data, and
//! exported probability maps. Writes are byte-deterministic: the same entries
//! in the same order always produce the same file.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SNAT";
const FORMAT_VERSION: u32 = 1;

/// One stored array.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayEntry {
    F64(Array2<f64>),
    U8(Array2<u8>),
}

impl ArrayEntry {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            ArrayEntry::F64(a) => (a.nrows(), a.ncols()),
            ArrayEntry::U8(a) => (a.nrows(), a.ncols()),
        }
    }
}

/// An ordered collection of named arrays.
#[derive(Debug, Clone, Default)]
pub struct NamedArrays {
    entries: Vec<(String, ArrayEntry)>,
    index: BTreeMap<String, usize>,
}

impl NamedArrays {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entry names in insertion order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn insert_f64(&mut self, name: impl Into<String>, array: Array2<f64>) -> Result<()> {
        self.insert(name.into(), ArrayEntry::F64(array))
    }

    pub fn insert_u8(&mut self, name: impl Into<String>, array: Array2<u8>) -> Result<()> {
        self.insert(name.into(), ArrayEntry::U8(array))
    }

    fn insert(&mut self, name: String, entry: ArrayEntry) -> Result<()> {
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate entry name '{name}'")));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::contract("entry name too long"));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, entry));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ArrayEntry> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_f64(&self, name: &str) -> Result<&Array2<f64>> {
        match self.get(name) {
            Some(ArrayEntry::F64(a)) => Ok(a),
            Some(ArrayEntry::U8(_)) => {
                Err(Error::contract(format!("entry '{name}' is u8, expected f64")))
            }
            None => Err(Error::contract(format!("missing entry '{name}'"))),
        }
    }

    pub fn get_u8(&self, name: &str) -> Result<&Array2<u8>> {
        match self.get(name) {
            Some(ArrayEntry::U8(a)) => Ok(a),
            Some(ArrayEntry::F64(_)) => {
                Err(Error::contract(format!("entry '{name}' is f64, expected u8")))
            }
            None => Err(Error::contract(format!("missing entry '{name}'"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayEntry)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e))
    }

    /// Serialize to bytes. Layout per entry: name length (u16 LE), name,
    /// dtype byte (0 = f64, 1 = u8), rows (u32 LE), cols (u32 LE), row-major
    /// data (f64 as LE bytes).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match entry {
                ArrayEntry::F64(a) => {
                    out.push(0);
                    out.extend_from_slice(&(a.nrows() as u32).to_le_bytes());
                    out.extend_from_slice(&(a.ncols() as u32).to_le_bytes());
                    for &v in a.iter() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                ArrayEntry::U8(a) => {
                    out.push(1);
                    out.extend_from_slice(&(a.nrows() as u32).to_le_bytes());
                    out.extend_from_slice(&(a.ncols() as u32).to_le_bytes());
                    for &v in a.iter() {
                        out.push(v);
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::Data("not a named-array container (bad magic)".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Data(format!("unsupported container version {version}")));
        }
        let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let mut arrays = NamedArrays::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Data("container entry name is not UTF-8".into()))?
                .to_string();
            let dtype = cur.take(1)?[0];
            let rows = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Data("container entry shape overflow".into()))?;
            let entry = match dtype {
                0 => {
                    let raw = cur.take(n * 8)?;
                    let data: Vec<f64> = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    ArrayEntry::F64(
                        Array2::from_shape_vec((rows, cols), data)
                            .map_err(|e| Error::Data(format!("bad entry shape: {e}")))?,
                    )
                }
                1 => {
                    let raw = cur.take(n)?.to_vec();
                    ArrayEntry::U8(
                        Array2::from_shape_vec((rows, cols), raw)
                            .map_err(|e| Error::Data(format!("bad entry shape: {e}")))?,
                    )
                }
                other => return Err(Error::Data(format!("unknown dtype tag {other}"))),
            };
            arrays.insert(name, entry)?;
        }
        Ok(arrays)
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data("truncated container".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn roundtrip_preserves_bits_and_order() {
        let mut c = NamedArrays::new();
        c.insert_f64("b.weights", array![[1.5, -0.25], [f64::MIN_POSITIVE, 3.0e300]])
            .unwrap();
        c.insert_u8("a.mask", array![[0u8, 1], [255, 7]]).unwrap();
        let bytes = c.to_bytes();
        let back = NamedArrays::from_bytes(&bytes).unwrap();
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["b.weights", "a.mask"]);
        assert_eq!(back.get_f64("b.weights").unwrap(), c.get_f64("b.weights").unwrap());
        assert_eq!(back.get_u8("a.mask").unwrap(), c.get_u8("a.mask").unwrap());
        // Byte determinism.
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut c = NamedArrays::new();
        c.insert_f64("x", Array2::zeros((1, 1))).unwrap();
        assert!(c.insert_f64("x", Array2::zeros((1, 1))).is_err());
    }

    #[test]
    fn truncated_input_rejected() {
        let mut c = NamedArrays::new();
        c.insert_f64("x", Array2::zeros((2, 2))).unwrap();
        let bytes = c.to_bytes();
        assert!(NamedArrays::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(NamedArrays::from_bytes(b"nope").is_err());
    }
}
