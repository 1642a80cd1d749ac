//! Versioned binary checkpoints for the parameter store, plus a content hash
//! used by the determinism checks.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

const MAGIC: u32 = 0x524D_5053; // "RMPS"
const VERSION: u32 = 1;

/// Writes every parameter block, sorted by name, as f64 little-endian.
pub fn save_params(store: &ParamStore, path: &Path) -> Result<()> {
    let mut names: Vec<&str> = store.names().collect();
    names.sort_unstable();
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC.to_le_bytes());
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(names.len() as u32).to_le_bytes());
    for name in names {
        let block = store.get(name);
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(block.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(block.ncols() as u32).to_le_bytes());
        for v in block.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut off = 0usize;
    let take_u32 = |buf: &[u8], off: &mut usize| -> Result<u32> {
        if *off + 4 > buf.len() {
            return Err(Error::validation("truncated checkpoint"));
        }
        let v = u32::from_le_bytes(buf[*off..*off + 4].try_into().unwrap());
        *off += 4;
        Ok(v)
    };
    if take_u32(&buf, &mut off)? != MAGIC {
        return Err(Error::validation("not a checkpoint file"));
    }
    let version = take_u32(&buf, &mut off)?;
    if version != VERSION {
        return Err(Error::validation(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = take_u32(&buf, &mut off)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = take_u32(&buf, &mut off)? as usize;
        if off + name_len > buf.len() {
            return Err(Error::validation("truncated checkpoint"));
        }
        let name = std::str::from_utf8(&buf[off..off + name_len])
            .map_err(|_| Error::validation("checkpoint block name is not utf-8"))?
            .to_owned();
        off += name_len;
        let rows = take_u32(&buf, &mut off)? as usize;
        let cols = take_u32(&buf, &mut off)? as usize;
        let bytes = rows * cols * 8;
        if off + bytes > buf.len() {
            return Err(Error::validation("truncated checkpoint"));
        }
        let data: Vec<f64> = buf[off..off + bytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += bytes;
        let arr = Array2::from_shape_vec((rows, cols), data)
            .map_err(|_| Error::validation("bad checkpoint block shape"))?;
        store.add(&name, arr);
    }
    if off != buf.len() {
        return Err(Error::validation("trailing bytes in checkpoint"));
    }
    Ok(store)
}

/// FNV-1a over all parameter bytes in name order. Bitwise-identical stores
/// hash identically on any platform.
pub fn param_hash(store: &ParamStore) -> u64 {
    let mut names: Vec<&str> = store.names().collect();
    names.sort_unstable();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for name in names {
        eat(name.as_bytes());
        let block = store.get(name);
        eat(&(block.nrows() as u64).to_le_bytes());
        eat(&(block.ncols() as u64).to_le_bytes());
        for v in block.iter() {
            eat(&v.to_le_bytes());
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("b.w0", arr2(&[[1.5, -2.25], [0.0, 1e-300]]));
        s.add("a.bias", arr2(&[[0.125, 3.0, -7.5]]));
        s
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let store = sample_store();
        save_params(&store, &path).unwrap();
        let back = load_params(&path).unwrap();
        let mut names: Vec<&str> = back.names().collect();
        names.sort_unstable();
        assert_eq!(names, vec!["a.bias", "b.w0"]);
        for n in names {
            assert_eq!(store.get(n), back.get(n));
        }
        assert_eq!(param_hash(&store), param_hash(&back));
    }

    #[test]
    fn hash_changes_with_any_bit() {
        let store = sample_store();
        let h0 = param_hash(&store);
        let mut other = sample_store();
        other.get_mut("b.w0")[[0, 0]] += f64::EPSILON;
        assert_ne!(h0, param_hash(&other));
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.bin");
        std::fs::write(&bad, b"not a checkpoint").unwrap();
        assert!(load_params(&bad).is_err());
        let path = dir.path().join("ckpt.bin");
        save_params(&sample_store(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_params(&path).is_err());
    }
}
