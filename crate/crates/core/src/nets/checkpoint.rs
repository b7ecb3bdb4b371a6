//! Parameter checkpoint files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    8 bytes  "CNTHCKPT"
//! version  u8       1
//! count    u32      number of records
//! record:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims (u64 × ndim)
//!   data     f64 × product(dims)
//! ```

use std::io::{Read, Write};

use super::NetError;
use crate::ndnum::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CNTHCKPT";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_checkpoint<W: Write>(w: &mut W, params: &[(String, Tensor)]) -> Result<(), NetError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&[CHECKPOINT_VERSION])?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let shape = t.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NetError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Vec<CheckpointRecord>, NetError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NetError::Checkpoint("bad magic header".into()));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != CHECKPOINT_VERSION {
        return Err(NetError::Checkpoint(format!("unsupported version {}", version[0])));
    }
    let count = read_u32(r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| NetError::Checkpoint("record name is not UTF-8".into()))?;
        let ndim = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push(CheckpointRecord { name, shape, data });
    }
    Ok(out)
}

/// Loads records into matching parameters by position, checking names and shapes.
pub fn load_records(params: &[(String, Tensor)], records: &[CheckpointRecord]) -> Result<(), NetError> {
    if params.len() != records.len() {
        return Err(NetError::Checkpoint(format!("expected {} records, found {}", params.len(), records.len())));
    }
    for ((name, t), rec) in params.iter().zip(records) {
        if *name != rec.name || t.shape() != rec.shape {
            return Err(NetError::Checkpoint(format!(
                "record `{}` {:?} does not match parameter `{name}` {:?}",
                rec.name,
                rec.shape,
                t.shape()
            )));
        }
        t.set_data(rec.data.clone())?;
    }
    Ok(())
}
