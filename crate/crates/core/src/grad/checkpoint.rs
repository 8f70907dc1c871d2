//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"NFRL"  u32 version
//! u32 header_len  header_len bytes of UTF-8 key=value text
//! u32 slice_count
//! slice_count × (u32 name_len, name bytes, u64 offset, u64 length)
//! u64 seed
//! P × f64 parameter payload
//! ```

use std::io::{Read, Write};

use super::params::{ParamSlice, ParamStore};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NFRL";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, store: &ParamStore, header: &str) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    w.write_all(&(store.slices().len() as u32).to_le_bytes())?;
    for s in store.slices() {
        w.write_all(&(s.name.len() as u32).to_le_bytes())?;
        w.write_all(s.name.as_bytes())?;
        w.write_all(&(s.offset as u64).to_le_bytes())?;
        w.write_all(&(s.len as u64).to_le_bytes())?;
    }
    w.write_all(&store.rng_seed().to_le_bytes())?;
    let mut buf = Vec::with_capacity(store.len() * 8);
    for v in store.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads a checkpoint, returning the store and its text header.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ParamStore, String)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let header_len = read_u32(&mut r)? as usize;
    let header = String::from_utf8(read_bytes(&mut r, header_len)?).map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let n_slices = read_u32(&mut r)? as usize;
    let mut slices = Vec::with_capacity(n_slices.min(1 << 16));
    let mut total = 0usize;
    for _ in 0..n_slices {
        let name_len = read_u32(&mut r)? as usize;
        let name = String::from_utf8(read_bytes(&mut r, name_len)?).map_err(|_| Error::Format("slice name is not UTF-8".into()))?;
        let offset = read_u64(&mut r)? as usize;
        let len = read_u64(&mut r)? as usize;
        total = total.max(offset + len);
        slices.push(ParamSlice { name, offset, len });
    }
    let seed = read_u64(&mut r)?;
    let bytes = read_bytes(&mut r, total * 8)?;
    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let store = ParamStore::from_parts(values, slices, seed)?;
    Ok((store, header))
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Format(format!("expected {n} bytes, found {}", buf.len())));
    }
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn checkpoint_round_trips(values in proptest::collection::vec(-1e6f64..1e6, 0..40), split in 0usize..40, seed: u64) {
            let split = split.min(values.len());
            let mut store = ParamStore::new(seed);
            store.alloc("first", split);
            store.alloc("second.w", values.len() - split);
            store.values_mut().copy_from_slice(&values);
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &store, "d=2\nblocks=3\n").unwrap();
            let (back, header) = read_checkpoint(&buf[..]).unwrap();
            prop_assert_eq!(back, store);
            prop_assert_eq!(header, "d=2\nblocks=3\n");
        }
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut store = ParamStore::new(0);
        store.alloc("a", 1);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store, "").unwrap();
        buf[0] = b'X';
        assert!(matches!(read_checkpoint(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut store = ParamStore::new(0);
        store.alloc("a", 4);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store, "").unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(&buf[..]).is_err());
    }
}
