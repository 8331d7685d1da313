use std::io::{self, Write};
use std::sync::{Arc, Mutex};

use crate::channel::FRAME_HEADER_LEN;
use crate::protocol::NodeId;

use super::WriterHook;

/// One frame a node put on the wire.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameRecord {
    pub owner: NodeId,
    pub tag: u8,
    /// Whole frame including length prefix and tag.
    pub wire_len: usize,
    /// Up to the first 32 body bytes. For plaintext frames this starts with
    /// the message header.
    pub head: Vec<u8>,
}

/// Records every frame written by the nodes it is hooked into.
#[derive(Clone, Default)]
pub struct TrafficLog {
    frames: Arc<Mutex<Vec<FrameRecord>>>,
}

impl TrafficLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn hook(&self) -> WriterHook {
        let log = self.clone();
        Arc::new(move |owner, inner| Box::new(FrameTap { inner, owner, pending: Vec::new(), log: log.clone() }))
    }

    pub fn frames(&self) -> Vec<FrameRecord> {
        self.frames.lock().unwrap().clone()
    }
}

struct FrameTap {
    inner: Box<dyn Write + Send>,
    owner: NodeId,
    pending: Vec<u8>,
    log: TrafficLog,
}

impl Write for FrameTap {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.pending.extend_from_slice(&buf[..n]);
        while self.pending.len() >= FRAME_HEADER_LEN {
            let body = u32::from_le_bytes(self.pending[..4].try_into().unwrap()) as usize;
            let total = FRAME_HEADER_LEN + body;
            if self.pending.len() < total {
                break;
            }
            let head_end = total.min(FRAME_HEADER_LEN + 32);
            self.log.frames.lock().unwrap().push(FrameRecord {
                owner: self.owner,
                tag: self.pending[4],
                wire_len: total,
                head: self.pending[FRAME_HEADER_LEN..head_end].to_vec(),
            });
            self.pending.drain(..total);
        }
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}
