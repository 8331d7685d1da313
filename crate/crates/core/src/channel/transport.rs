use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

/// Read side of a reliable ordered byte stream whose blocking reads can be
/// bounded by a timeout.
pub trait TimedRead: Read + Send {
    /// `None` blocks indefinitely. A timed-out read fails with
    /// `ErrorKind::TimedOut` or `ErrorKind::WouldBlock`.
    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()>;
}

/// The two halves of a connected byte stream.
pub struct Transport {
    pub reader: Box<dyn TimedRead>,
    pub writer: Box<dyn Write + Send>,
}

impl Transport {
    pub fn new(reader: impl TimedRead + 'static, writer: impl Write + Send + 'static) -> Self {
        Self { reader: Box::new(reader), writer: Box::new(writer) }
    }

    pub fn from_tcp(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        let writer = stream.try_clone()?;
        Ok(Self::new(stream, writer))
    }

    /// Wraps the writer, e.g. to count or tamper with outgoing bytes.
    pub fn map_writer(self, f: impl FnOnce(Box<dyn Write + Send>) -> Box<dyn Write + Send>) -> Self {
        Self { reader: self.reader, writer: f(self.writer) }
    }
}

impl TimedRead for TcpStream {
    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        TcpStream::set_read_timeout(self, timeout.map(|t| t.max(Duration::from_millis(1))))
    }
}

/// Writing end of an in-process pipe. Dropping it signals EOF to the reader.
pub struct PipeWriter {
    tx: Sender<Vec<u8>>,
}

impl Write for PipeWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        self.tx
            .send(buf.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "pipe reader dropped"))?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

pub struct PipeReader {
    rx: Receiver<Vec<u8>>,
    chunk: Vec<u8>,
    pos: usize,
    timeout: Option<Duration>,
}

impl Read for PipeReader {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        while self.pos == self.chunk.len() {
            let next = match self.timeout {
                None => self.rx.recv().ok(),
                Some(t) => match self.rx.recv_timeout(t) {
                    Ok(c) => Some(c),
                    Err(RecvTimeoutError::Disconnected) => None,
                    Err(RecvTimeoutError::Timeout) => {
                        return Err(io::Error::new(io::ErrorKind::TimedOut, "pipe read timed out"))
                    }
                },
            };
            match next {
                Some(c) => {
                    self.chunk = c;
                    self.pos = 0;
                }
                None => return Ok(0),
            }
        }
        let n = buf.len().min(self.chunk.len() - self.pos);
        buf[..n].copy_from_slice(&self.chunk[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

impl TimedRead for PipeReader {
    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        self.timeout = timeout;
        Ok(())
    }
}

/// A unidirectional in-process byte pipe.
pub fn pipe() -> (PipeWriter, PipeReader) {
    let (tx, rx) = mpsc::channel();
    (PipeWriter { tx }, PipeReader { rx, chunk: Vec::new(), pos: 0, timeout: None })
}

/// Two connected in-process endpoints, behaving like the two ends of a
/// socket.
pub fn duplex_pair() -> (Transport, Transport) {
    let (a_tx, b_rx) = pipe();
    let (b_tx, a_rx) = pipe();
    (Transport::new(a_rx, a_tx), Transport::new(b_rx, b_tx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pipe_delivers_in_order_then_eof() {
        let (mut a, mut b) = duplex_pair();
        a.writer.write_all(b"hello ").unwrap();
        a.writer.write_all(b"world").unwrap();
        drop(a.writer);
        let mut s = String::new();
        b.reader.read_to_string(&mut s).unwrap();
        assert_eq!(s, "hello world");
    }

    #[test]
    fn pipe_read_times_out() {
        let (_a, mut b) = duplex_pair();
        b.reader.set_read_timeout(Some(Duration::from_millis(10))).unwrap();
        let mut buf = [0u8; 4];
        let err = b.reader.read(&mut buf).unwrap_err();
        assert_eq!(err.kind(), io::ErrorKind::TimedOut);
    }

    #[test]
    fn write_to_dropped_reader_fails() {
        let (mut a, b) = duplex_pair();
        drop(b);
        assert_eq!(a.writer.write(b"x").unwrap_err().kind(), io::ErrorKind::BrokenPipe);
    }
}
