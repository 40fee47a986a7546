//! Binary tensor archives: the on-disk checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  b"FKPT0001"
//! count   u32      number of entries
//! entry*  repeated, sorted ascending by name byte string:
//!   name_len  u16
//!   name      name_len bytes of UTF-8
//!   ndim      u8
//!   dims      ndim x u32
//!   data      prod(dims) x f64 (IEEE-754 bits, exact round trip)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use super::DiffError;

pub const ARCHIVE_MAGIC: &[u8; 8] = b"FKPT0001";

/// Writes tensors to `path`, sorted by name so equal contents produce
/// byte-identical files regardless of insertion order.
pub fn write_archive(path: &Path, entries: &[(&str, &Tensor)]) -> Result<(), DiffError> {
    let mut sorted: Vec<&(&str, &Tensor)> = entries.iter().collect();
    sorted.sort_by_key(|(n, _)| n.as_bytes());
    for w in sorted.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(DiffError::Format {
                what: format!("duplicate archive entry '{}'", w[0].0),
            });
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(ARCHIVE_MAGIC)?;
    out.write_all(&(sorted.len() as u32).to_le_bytes())?;
    for (name, t) in sorted {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(DiffError::Format { what: format!("entry name too long: '{name}'") });
        }
        if t.shape.len() > u8::MAX as usize {
            return Err(DiffError::Format {
                what: format!("entry '{name}' has too many dimensions"),
            });
        }
        out.write_all(&(bytes.len() as u16).to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&[t.shape.len() as u8])?;
        for &d in &t.shape {
            if d > u32::MAX as usize {
                return Err(DiffError::Format { what: format!("entry '{name}' dim too large") });
            }
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &t.data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads an archive written by [`write_archive`]. Returns entries in file
/// (i.e. name-sorted) order.
pub fn read_archive(path: &Path) -> Result<Vec<(String, Tensor)>, DiffError> {
    let mut rd = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    rd.read_exact(&mut magic)?;
    if &magic != ARCHIVE_MAGIC {
        return Err(DiffError::Format { what: "bad archive magic".into() });
    }
    let count = read_u32(&mut rd)? as usize;
    let mut entries = Vec::with_capacity(count);
    let mut prev_name: Option<String> = None;
    for _ in 0..count {
        let name_len = read_u16(&mut rd)? as usize;
        let mut name_buf = vec![0u8; name_len];
        rd.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| DiffError::Format { what: "entry name is not UTF-8".into() })?;
        if let Some(prev) = &prev_name {
            if prev.as_bytes() >= name.as_bytes() {
                return Err(DiffError::Format {
                    what: format!("archive entries not sorted: '{prev}' before '{name}'"),
                });
            }
        }
        let mut ndim = [0u8; 1];
        rd.read_exact(&mut ndim)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            shape.push(read_u32(&mut rd)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            rd.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let tensor = Tensor::new(shape, data)?;
        prev_name = Some(name.clone());
        entries.push((name, tensor));
    }
    // Trailing garbage means the file is not what we wrote.
    let mut rest = [0u8; 1];
    if rd.read(&mut rest)? != 0 {
        return Err(DiffError::Format { what: "trailing bytes after last entry".into() });
    }
    Ok(entries)
}

fn read_u16(rd: &mut impl Read) -> Result<u16, DiffError> {
    let mut b = [0u8; 2];
    rd.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(rd: &mut impl Read) -> Result<u32, DiffError> {
    let mut b = [0u8; 4];
    rd.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
