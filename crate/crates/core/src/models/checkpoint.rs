//! Flat little-endian parameter dump.
//!
//! ```text
//! magic  "RLCK"          4 bytes
//! version u32            currently 1
//! count   u32            number of arrays
//! per array:
//!   name_len u32, name   UTF-8 bytes
//!   trainable u8         1 if updated by the optimizer
//!   rank u32, dims       rank × u64
//!   data                 product(dims) × f64
//! ```

use std::io::{Read, Write};

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RLCK";
const VERSION: u32 = 1;

fn io(e: std::io::Error) -> Error {
    Error::InvalidArgument(format!("checkpoint i/o: {e}"))
}

pub fn save_checkpoint(store: &ParamStore, mut w: impl Write) -> Result<()> {
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(store.len() as u32).to_le_bytes()).map_err(io)?;
    for (_, p) in store.iter() {
        w.write_all(&(p.name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(p.name.as_bytes()).map_err(io)?;
        w.write_all(&[u8::from(p.requires_grad)]).map_err(io)?;
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes()).map_err(io)?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(io)?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

/// Reads a store written by [`save_checkpoint`]. Gradients start at zero.
pub fn load_checkpoint(mut r: impl Read) -> Result<ParamStore> {
    if &read_array::<4>(&mut r)? != MAGIC {
        return Err(Error::InvalidArgument("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::InvalidArgument(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let trainable = read_array::<1>(&mut r)?[0] != 0;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(read_array(&mut r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(read_array(&mut r)?));
        }
        let value = Tensor::new(shape, data)?;
        if trainable {
            store.add(name, value);
        } else {
            store.add_frozen(name, value);
        }
    }
    Ok(store)
}
