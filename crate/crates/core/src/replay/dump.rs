//! Buffer snapshot files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic     8 bytes  "CNTHBUF\0"
//! version   u8       1
//! k         u32      context length the buffer was sampled with
//! capacity  u32
//! dims      u32 × 4  observation, goal, achieved goal, action
//! episodes  u32
//! episode:
//!   steps u32
//!   step: observation, goal, achieved goal, action as f64 runs of the dims above
//! ```

use std::io::{Read, Write};

use super::{Dims, MainBuffer, ReplayError, StepRecord};

pub const BUFFER_MAGIC: &[u8; 8] = b"CNTHBUF\0";
pub const BUFFER_VERSION: u8 = 1;

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<(), ReplayError> {
    let v = u32::try_from(v).map_err(|_| ReplayError::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize, ReplayError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, ReplayError> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

pub fn dump_buffer<W: Write>(w: &mut W, buffer: &MainBuffer, k: usize) -> Result<(), ReplayError> {
    let dims = buffer.dims().unwrap_or(Dims {
        obs: 0,
        goal: 0,
        achieved_goal: 0,
        action: 0,
    });
    w.write_all(BUFFER_MAGIC)?;
    w.write_all(&[BUFFER_VERSION])?;
    for v in [k, buffer.capacity(), dims.obs, dims.goal, dims.achieved_goal, dims.action, buffer.len()] {
        put_u32(w, v)?;
    }
    for ep in buffer.episodes() {
        put_u32(w, ep.len())?;
        for step in ep {
            for v in [&step.obs, &step.goal, &step.achieved_goal, &step.action] {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

/// Returns the buffer and the context length recorded with it.
pub fn restore_buffer<R: Read>(r: &mut R) -> Result<(MainBuffer, usize), ReplayError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != BUFFER_MAGIC {
        return Err(ReplayError::Format("bad magic header".into()));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != BUFFER_VERSION {
        return Err(ReplayError::Format(format!("unsupported version {}", version[0])));
    }
    let k = get_u32(r)?;
    let capacity = get_u32(r)?;
    let dims = Dims {
        obs: get_u32(r)?,
        goal: get_u32(r)?,
        achieved_goal: get_u32(r)?,
        action: get_u32(r)?,
    };
    let count = get_u32(r)?;
    let mut buffer = MainBuffer::new(capacity);
    for _ in 0..count {
        let steps = get_u32(r)?;
        let mut ep = Vec::with_capacity(steps);
        for _ in 0..steps {
            ep.push(StepRecord {
                obs: get_f64s(r, dims.obs)?,
                goal: get_f64s(r, dims.goal)?,
                achieved_goal: get_f64s(r, dims.achieved_goal)?,
                action: get_f64s(r, dims.action)?,
            });
        }
        buffer.store_episode(ep)?;
    }
    Ok((buffer, k))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut b = MainBuffer::new(3);
        for e in 0..4 {
            let ep = (0..e + 2)
                .map(|t| StepRecord {
                    obs: vec![t as f64, e as f64],
                    goal: vec![0.25; 3],
                    achieved_goal: vec![-1.0, 0.5, t as f64],
                    action: vec![0.1 * t as f64],
                })
                .collect();
            b.store_episode(ep).unwrap();
        }
        let mut bytes = Vec::new();
        dump_buffer(&mut bytes, &b, 6).unwrap();
        assert_eq!(&bytes[..8], BUFFER_MAGIC);
        let (restored, k) = restore_buffer(&mut bytes.as_slice()).unwrap();
        assert_eq!(k, 6);
        assert_eq!(restored.capacity(), 3);
        assert!(restored.episodes().eq(b.episodes()));

        bytes[0] = b'X';
        assert!(matches!(restore_buffer(&mut bytes.as_slice()), Err(ReplayError::Format(_))));
    }
}
