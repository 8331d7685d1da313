use std::io::{self, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crate::channel::{duplex_pair, Transport};
use crate::protocol::{abort_code, NodeId};

use super::RunError;

/// Wraps every writer a node opens, e.g. to count or corrupt its egress.
pub type WriterHook = Arc<dyn Fn(NodeId, Box<dyn Write + Send>) -> Box<dyn Write + Send> + Send + Sync>;

pub(crate) fn hooked(t: Transport, owner: NodeId, hook: Option<&WriterHook>) -> Transport {
    match hook {
        Some(h) => t.map_writer(|w| h(owner, w)),
        None => t,
    }
}

pub trait Acceptor: Send {
    fn accept(&mut self, timeout: Duration) -> Result<Transport, RunError>;
}

pub trait Connector: Send {
    fn connect(&mut self, timeout: Duration) -> Result<Transport, RunError>;
}

pub struct TcpAcceptor(pub TcpListener);

impl Acceptor for TcpAcceptor {
    fn accept(&mut self, timeout: Duration) -> Result<Transport, RunError> {
        self.0.set_nonblocking(true)?;
        let deadline = Instant::now() + timeout;
        loop {
            match self.0.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false)?;
                    return Ok(Transport::from_tcp(stream)?);
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(RunError::abort(abort_code::TIMEOUT, "no connection before timeout"));
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

/// Connects to `addr`, retrying until the peer is up or the timeout passes.
pub struct TcpConnector(pub String);

impl Connector for TcpConnector {
    fn connect(&mut self, timeout: Duration) -> Result<Transport, RunError> {
        let deadline = Instant::now() + timeout;
        loop {
            match TcpStream::connect(&self.0) {
                Ok(stream) => return Ok(Transport::from_tcp(stream)?),
                Err(e) if Instant::now() >= deadline => {
                    return Err(RunError::abort(abort_code::TIMEOUT, format!("connecting to {}: {e}", self.0)))
                }
                Err(_) => thread::sleep(Duration::from_millis(20)),
            }
        }
    }
}

pub struct LocalAcceptor(pub Receiver<Transport>);

impl Acceptor for LocalAcceptor {
    fn accept(&mut self, timeout: Duration) -> Result<Transport, RunError> {
        self.0.recv_timeout(timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => RunError::abort(abort_code::TIMEOUT, "no connection before timeout"),
            RecvTimeoutError::Disconnected => RunError::abort(abort_code::CHANNEL, "no more peers can connect"),
        })
    }
}

#[derive(Clone)]
pub struct LocalConnector(pub Sender<Transport>);

impl Connector for LocalConnector {
    fn connect(&mut self, _timeout: Duration) -> Result<Transport, RunError> {
        let (mine, theirs) = duplex_pair();
        self.0
            .send(theirs)
            .map_err(|_| RunError::abort(abort_code::CHANNEL, "peer is no longer accepting connections"))?;
        Ok(mine)
    }
}
