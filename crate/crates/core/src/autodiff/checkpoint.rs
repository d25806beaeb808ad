//! Binary parameter checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "GUNT" | version: u32 | count: u32
//! per parameter:
//!     name_len: u32 | name: UTF-8 | rows: u32 | cols: u32 | value: rows*cols f64 (row-major)
//! per parameter, same order (Adam state):
//!     name_len: u32 | name: UTF-8 | rows: u32 | cols: u32 | step: u64
//!     | m: rows*cols f64 | v: rows*cols f64
//! ```

use std::io::{Read, Write};

use ndarray::Array2;

use super::params::{ParamStore, Parameter};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GUNT";
pub const VERSION: u32 = 1;

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_matrix<W: Write>(w: &mut W, m: &Array2<f64>) -> Result<()> {
    for x in m.iter() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn put_header<W: Write>(w: &mut W, p: &Parameter) -> Result<()> {
    let name = p.name.as_bytes();
    put_u32(w, name.len() as u32)?;
    w.write_all(name)?;
    let (r, c) = p.shape();
    put_u32(w, r as u32)?;
    put_u32(w, c as u32)
}

pub fn write_params<W: Write>(w: &mut W, store: &ParamStore) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_u32(w, store.len() as u32)?;
    for p in store.iter() {
        put_header(w, p)?;
        put_matrix(w, &p.value)?;
    }
    for p in store.iter() {
        put_header(w, p)?;
        w.write_all(&p.step.to_le_bytes())?;
        put_matrix(w, &p.m)?;
        put_matrix(w, &p.v)?;
    }
    Ok(())
}

struct Reader<'a, R: Read>(&'a mut R);

impl<R: Read> Reader<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.0
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated payload: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(self.bytes()?));
        }
        Ok(Array2::from_shape_vec((rows, cols), data).expect("shape"))
    }

    fn header(&mut self) -> Result<(String, usize, usize)> {
        let len = self.u32()? as usize;
        if len > 1 << 16 {
            return Err(Error::Checkpoint(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        self.0
            .read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        Ok((name, rows, cols))
    }
}

pub fn read_params<R: Read>(r: &mut R) -> Result<ParamStore> {
    let mut rd = Reader(r);
    if &rd.bytes::<4>()? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = rd.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = rd.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let (name, rows, cols) = rd.header()?;
        let value = rd.matrix(rows, cols)?;
        store.add(name, value);
    }
    for id in store.ids().collect::<Vec<_>>() {
        let (name, rows, cols) = rd.header()?;
        let p = store.get_mut(id);
        if name != p.name || (rows, cols) != p.shape() {
            return Err(Error::Checkpoint(format!(
                "optimizer state for `{name}` does not match parameter `{}`",
                p.name
            )));
        }
        p.step = u64::from_le_bytes(rd.bytes()?);
        p.m = rd.matrix(rows, cols)?;
        p.v = rd.matrix(rows, cols)?;
    }
    Ok(store)
}
