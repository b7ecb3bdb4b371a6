use std::io::ErrorKind;
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use super::protocol::{read_message, write_message, Message, PROTOCOL_VERSION};
use super::{ArmModel, Env, EnvError, Environment, StepOutput, TaskKind, TaskSpec};

const POLL: Duration = Duration::from_millis(50);

/// Serves environments to one client at a time until `shutdown` is set.
/// Further clients wait in the listen backlog. Each connection starts from
/// a fresh environment; `task` is used when a reset asks for its kind and
/// default parameters are used for other kinds.
pub fn serve_env(listener: TcpListener, arm: ArmModel, task: TaskSpec, shutdown: &AtomicBool) -> Result<(), EnvError> {
    arm.validate()?;
    task.validate()?;
    listener.set_nonblocking(true)?;
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::info!("client {peer} connected");
                match serve_client(stream, &arm, &task, shutdown) {
                    Ok(()) => log::info!("client {peer} disconnected"),
                    Err(e) => log::warn!("client {peer} dropped: {e}"),
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

/// Waits for the next frame to start. `false` on disconnect or shutdown.
fn await_frame(stream: &TcpStream, shutdown: &AtomicBool) -> Result<bool, EnvError> {
    stream.set_read_timeout(Some(POLL))?;
    let mut byte = [0u8; 1];
    loop {
        if shutdown.load(Ordering::SeqCst) {
            return Ok(false);
        }
        match stream.peek(&mut byte) {
            Ok(0) => return Ok(false),
            Ok(_) => {
                stream.set_read_timeout(None)?;
                return Ok(true);
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => continue,
            Err(e) => return Err(e.into()),
        }
    }
}

fn serve_client(mut stream: TcpStream, arm: &ArmModel, task: &TaskSpec, shutdown: &AtomicBool) -> Result<(), EnvError> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    write_message(&mut stream, &Message::Hello { version: PROTOCOL_VERSION })?;
    let mut env: Option<Env> = None;
    while await_frame(&stream, shutdown)? {
        let msg = match read_message(&mut stream) {
            Ok(Some(m)) => m,
            Ok(None) => return Ok(()),
            Err(e @ EnvError::Protocol(_)) => {
                write_message(&mut stream, &Message::Error(e.to_string()))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let reply = match msg {
            Message::Reset { task: kind, seed } => {
                let spec = if kind == task.kind { task.clone() } else { TaskSpec::for_kind(kind) };
                let reused = env.as_ref().is_some_and(|e| e.task().kind == kind);
                if !reused {
                    env = Some(Env::new(arm.clone(), spec)?);
                }
                env.as_mut().map(|e| e.reset(seed))
            }
            Message::Step { action } => env.as_mut().map(|e| e.step(&action)),
            Message::Close => return Ok(()),
            other => {
                let e = EnvError::Protocol(format!("unexpected message {other:?}"));
                write_message(&mut stream, &Message::Error(e.to_string()))?;
                return Err(e);
            }
        };
        let reply = match reply.unwrap_or(Err(EnvError::NotReset)) {
            Ok(out) => Message::Output(out),
            Err(e) => Message::Error(e.to_string()),
        };
        write_message(&mut stream, &reply)?;
    }
    Ok(())
}

/// Client side of [`serve_env`], usable anywhere an [`Environment`] is.
#[derive(Debug)]
pub struct RemoteEnv {
    stream: TcpStream,
    task: TaskKind,
    closed: bool,
}

impl RemoteEnv {
    pub fn connect<A: ToSocketAddrs>(addr: A, task: TaskKind) -> Result<Self, EnvError> {
        let mut stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        match read_message(&mut stream)? {
            Some(Message::Hello { version }) if version == PROTOCOL_VERSION => {}
            Some(Message::Hello { version }) => {
                return Err(EnvError::Protocol(format!("server speaks version {version}, client {PROTOCOL_VERSION}")))
            }
            other => return Err(EnvError::Protocol(format!("expected hello, got {other:?}"))),
        }
        Ok(Self { stream, task, closed: false })
    }

    fn call(&mut self, msg: &Message) -> Result<StepOutput, EnvError> {
        write_message(&mut self.stream, msg)?;
        match read_message(&mut self.stream)? {
            Some(Message::Output(out)) => Ok(out),
            Some(Message::Error(text)) => Err(EnvError::Remote(text)),
            other => Err(EnvError::Protocol(format!("expected output, got {other:?}"))),
        }
    }

    pub fn close(mut self) -> Result<(), EnvError> {
        self.closed = true;
        write_message(&mut self.stream, &Message::Close)
    }
}

impl Drop for RemoteEnv {
    fn drop(&mut self) {
        if !self.closed {
            let _ = write_message(&mut self.stream, &Message::Close);
        }
    }
}

impl Environment for RemoteEnv {
    fn reset(&mut self, seed: u64) -> Result<StepOutput, EnvError> {
        self.call(&Message::Reset { task: self.task, seed })
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutput, EnvError> {
        self.call(&Message::Step { action: action.to_vec() })
    }
}
