//! Flat binary checkpoint of named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "SLCK"
//! version  u32      1
//! count    u32      number of records
//! record*  path_len u32 | path (UTF-8) | ndim u32 | dims u64 × ndim | data f64 × Π dims
//! ```
//!
//! Records are written in lexicographic path order and data is row-major,
//! so a save/load round trip is bit-exact. `ndim` is always 2 today.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SLCK";
pub const VERSION: u32 = 1;

pub fn write_records<W: Write>(mut w: W, records: &BTreeMap<String, Tensor>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (path, t) in records {
        w.write_all(&(path.len() as u32).to_le_bytes())?;
        w.write_all(path.as_bytes())?;
        w.write_all(&2u32.to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_records<R: Read>(mut r: R, origin: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bad = |msg: String| Error::Format {
        path: origin.to_path_buf(),
        msg,
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
        let ndim = read_u32(&mut r)?;
        let dims = (0..ndim)
            .map(|_| read_u64(&mut r))
            .collect::<std::io::Result<Vec<_>>>()?;
        let (rows, cols) = match dims.as_slice() {
            [r, c] => (*r as usize, *c as usize),
            [n] => (1, *n as usize),
            other => return Err(bad(format!("{name}: unsupported rank {}", other.len()))),
        };
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let t = Tensor::new(rows, cols, data).map_err(|e| bad(format!("{name}: {e}")))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(bad(format!("duplicate record {name:?}")));
        }
    }
    Ok(out)
}

pub fn save(path: &Path, records: &BTreeMap<String, Tensor>) -> Result<()> {
    write_records(BufWriter::new(File::create(path)?), records)
}

pub fn load(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    read_records(BufReader::new(File::open(path)?), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            recs in proptest::collection::btree_map(
                "[a-z]{1,6}(\\.[a-z0-9_]{1,4}){0,3}",
                (1usize..4, 1usize..4).prop_flat_map(|(r, c)| {
                    proptest::collection::vec(proptest::num::f64::ANY, r * c)
                        .prop_map(move |d| Tensor::new(r, c, d).unwrap())
                }),
                0..6,
            )
        ) {
            let mut buf = Vec::new();
            write_records(&mut buf, &recs).unwrap();
            let back = read_records(buf.as_slice(), Path::new("<mem>")).unwrap();
            prop_assert_eq!(back.len(), recs.len());
            for (k, v) in &recs {
                let b = &back[k];
                prop_assert_eq!(b.shape(), v.shape());
                let same = b.data().iter().zip(v.data()).all(|(x, y)| x.to_bits() == y.to_bits());
                prop_assert!(same);
            }
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let err = read_records(&b"NOPE\x01\0\0\0\0\0\0\0"[..], Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }
}
