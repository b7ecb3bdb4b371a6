//! Length-prefixed wire format for driving an environment over TCP.
//!
//! Every frame is a `u32` little-endian length followed by that many bytes:
//! one message-type byte and its payload. Vectors travel as a `u32` count
//! and that many little-endian `f64` values.
//!
//! ```text
//! 0x01 Hello   server → client  version u8
//! 0x02 Reset   client → server  task u8, seed u64
//! 0x03 Step    client → server  action vec
//! 0x04 Close   client → server  (empty)
//! 0x10 Output  server → client  done u8, observation vec, goal vec, achieved_goal vec
//! 0x11 Error   server → client  UTF-8 message
//! ```
//!
//! Task codes: 0 reach, 1 sinusoid, 2 circle, 3 spiral.

use std::io::{ErrorKind, Read, Write};

use super::{EnvError, StepOutput, TaskKind};

pub const PROTOCOL_VERSION: u8 = 1;
/// Largest accepted frame body in bytes.
pub const MAX_FRAME_LEN: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { version: u8 },
    Reset { task: TaskKind, seed: u64 },
    Step { action: Vec<f64> },
    Close,
    Output(StepOutput),
    Error(String),
}

fn put_vec(out: &mut Vec<u8>, v: &[f64]) {
    out.extend((v.len() as u32).to_le_bytes());
    for x in v {
        out.extend(x.to_le_bytes());
    }
}

/// Frame body (type byte and payload), without the length prefix.
pub fn encode_frame(msg: &Message) -> Vec<u8> {
    let mut out = Vec::new();
    match msg {
        Message::Hello { version } => out.extend([0x01, *version]),
        Message::Reset { task, seed } => {
            out.extend([0x02, task.code()]);
            out.extend(seed.to_le_bytes());
        }
        Message::Step { action } => {
            out.push(0x03);
            put_vec(&mut out, action);
        }
        Message::Close => out.push(0x04),
        Message::Output(o) => {
            out.extend([0x10, o.done as u8]);
            put_vec(&mut out, &o.observation);
            put_vec(&mut out, &o.goal);
            put_vec(&mut out, &o.achieved_goal);
        }
        Message::Error(text) => {
            out.push(0x11);
            out.extend(text.as_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EnvError> {
        if self.buf.len() < n {
            return Err(EnvError::Protocol("truncated payload".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, EnvError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, EnvError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, EnvError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn vec(&mut self) -> Result<Vec<f64>, EnvError> {
        let n = self.u32()? as usize;
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| EnvError::Protocol("vector too long".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
    }

    fn finish(self) -> Result<(), EnvError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(EnvError::Protocol(format!("{} trailing bytes", self.buf.len())))
        }
    }
}

pub fn decode_frame(body: &[u8]) -> Result<Message, EnvError> {
    let mut c = Cursor { buf: body };
    let msg = match c.u8()? {
        0x01 => Message::Hello { version: c.u8()? },
        0x02 => {
            let task = TaskKind::from_code(c.u8()?)?;
            Message::Reset { task, seed: c.u64()? }
        }
        0x03 => Message::Step { action: c.vec()? },
        0x04 => Message::Close,
        0x10 => {
            let done = c.u8()? != 0;
            Message::Output(StepOutput {
                observation: c.vec()?,
                goal: c.vec()?,
                achieved_goal: c.vec()?,
                done,
            })
        }
        0x11 => {
            let text = String::from_utf8(c.take(c.buf.len())?.to_vec()).map_err(|_| EnvError::Protocol("error text is not UTF-8".into()))?;
            Message::Error(text)
        }
        other => return Err(EnvError::Protocol(format!("unknown message type 0x{other:02x}"))),
    };
    c.finish()?;
    Ok(msg)
}

pub(crate) fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<(), EnvError> {
    let body = encode_frame(msg);
    w.write_all(&(body.len() as u32).to_le_bytes())?;
    w.write_all(&body)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. `Ok(None)` means the peer closed between frames.
pub(crate) fn read_message<R: Read>(r: &mut R) -> Result<Option<Message>, EnvError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(EnvError::Protocol(format!("frame of {len} bytes exceeds the {MAX_FRAME_LEN}-byte limit")));
    }
    if len == 0 {
        return Err(EnvError::Protocol("empty frame".into()));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    decode_frame(&body).map(Some)
}
