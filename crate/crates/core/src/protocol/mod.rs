//! Training messages, their canonical wire encoding, and the parameter
//! server's synchronous round state machine.
//!
//! Message layout (all scalars little-endian):
//!
//! ```text
//! schema_version u8 ‖ kind u8 ‖ round u64 ‖ sender.role u8 ‖ sender.index u32 ‖ body_len u32 ‖ body
//! ```

mod codec;
mod ps;

use std::fmt;

use sha2::{Digest, Sha256};

use crate::dlrm::{GradientDelta, ModelParams};
use codec::{Reader, Writer};

pub use ps::{abort_code, aggregate, AggregationError, Outbound, ParameterServer, Phase, ProtocolAbort};

pub const SCHEMA_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 1 + 1 + 8 + 1 + 4 + 4;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("decode error at byte {offset}: {failure}")]
pub struct DecodeError {
    pub offset: usize,
    pub failure: DecodeFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeFailure {
    #[error("input truncated")]
    Truncated,
    #[error("unsupported schema version {0}")]
    Version(u8),
    #[error("unknown message kind {0:#04x}")]
    UnknownKind(u8),
    #[error("unknown node role {0}")]
    UnknownRole(u8),
    #[error("trailing bytes")]
    TrailingBytes,
    #[error("invalid value: {0}")]
    Invalid(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    ParameterServer,
    Worker,
    Chief,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId {
    pub role: Role,
    pub index: u32,
}

impl NodeId {
    pub const PS: NodeId = NodeId { role: Role::ParameterServer, index: 0 };
    pub const CHIEF: NodeId = NodeId { role: Role::Chief, index: 0 };

    pub fn worker(index: u32) -> Self {
        NodeId { role: Role::Worker, index }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.role {
            Role::ParameterServer => write!(f, "ps{}", self.index),
            Role::Worker => write!(f, "worker{}", self.index),
            Role::Chief => write!(f, "chief{}", self.index),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MessageKind {
    Register = 1,
    RegisterAck = 2,
    ModelBroadcast = 3,
    GradientPush = 4,
    GradientAck = 5,
    ShardTransfer = 6,
    ConfigTransfer = 7,
    TrainComplete = 8,
    Abort = 9,
}

impl MessageKind {
    fn from_wire(b: u8) -> Option<Self> {
        use MessageKind::*;
        Some(match b {
            1 => Register,
            2 => RegisterAck,
            3 => ModelBroadcast,
            4 => GradientPush,
            5 => GradientAck,
            6 => ShardTransfer,
            7 => ConfigTransfer,
            8 => TrainComplete,
            9 => Abort,
            _ => return None,
        })
    }
}

/// Loss and held-out accuracy of the model broadcast in one round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundMetrics {
    pub round: u64,
    /// Batch-size weighted mean of the workers' minibatch losses.
    pub loss: f64,
    pub accuracy: f64,
    pub duration_us: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Body {
    Register,
    RegisterAck { num_workers: u32, rounds: u64 },
    ModelBroadcast { params: ModelParams<f32> },
    /// A worker's gradient for the round, with its minibatch loss and its
    /// held-out evaluation of the broadcast model.
    GradientPush { grad: GradientDelta<f32>, loss: f64, eval_correct: u64, eval_total: u64 },
    GradientAck,
    ShardTransfer { worker_index: u32, data: Vec<u8> },
    ConfigTransfer { text: String },
    TrainComplete { params_digest: [u8; 32], metrics: Vec<RoundMetrics>, params: Option<ModelParams<f32>> },
    Abort { code: u16, detail: String },
}

impl Body {
    pub fn kind(&self) -> MessageKind {
        match self {
            Body::Register => MessageKind::Register,
            Body::RegisterAck { .. } => MessageKind::RegisterAck,
            Body::ModelBroadcast { .. } => MessageKind::ModelBroadcast,
            Body::GradientPush { .. } => MessageKind::GradientPush,
            Body::GradientAck => MessageKind::GradientAck,
            Body::ShardTransfer { .. } => MessageKind::ShardTransfer,
            Body::ConfigTransfer { .. } => MessageKind::ConfigTransfer,
            Body::TrainComplete { .. } => MessageKind::TrainComplete,
            Body::Abort { .. } => MessageKind::Abort,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub round: u64,
    pub sender: NodeId,
    pub body: Body,
}

impl Message {
    pub fn new(round: u64, sender: NodeId, body: Body) -> Self {
        Self { round, sender, body }
    }

    pub fn kind(&self) -> MessageKind {
        self.body.kind()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut body = Writer::default();
        encode_body(&mut body, &self.body);
        let mut w = Writer { buf: Vec::with_capacity(HEADER_LEN + body.buf.len()) };
        w.u8(SCHEMA_VERSION);
        w.u8(self.kind() as u8);
        w.u64(self.round);
        w.u8(match self.sender.role {
            Role::ParameterServer => 0,
            Role::Worker => 1,
            Role::Chief => 2,
        });
        w.u32(self.sender.index);
        w.bytes(&body.buf);
        w.buf
    }

    pub fn decode(buf: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(buf, 0);
        let version = r.u8()?;
        if version != SCHEMA_VERSION {
            return Err(DecodeError { offset: 0, failure: DecodeFailure::Version(version) });
        }
        let kind_byte = r.u8()?;
        let kind = MessageKind::from_wire(kind_byte)
            .ok_or(DecodeError { offset: 1, failure: DecodeFailure::UnknownKind(kind_byte) })?;
        let round = r.u64()?;
        let role_byte = r.u8()?;
        let role = match role_byte {
            0 => Role::ParameterServer,
            1 => Role::Worker,
            2 => Role::Chief,
            other => return Err(DecodeError { offset: 10, failure: DecodeFailure::UnknownRole(other) }),
        };
        let index = r.u32()?;
        let body_len = r.u32()? as usize;
        if r.remaining() < body_len {
            return Err(r.err(DecodeFailure::Truncated));
        }
        if r.remaining() > body_len {
            return Err(DecodeError { offset: HEADER_LEN + body_len, failure: DecodeFailure::TrailingBytes });
        }
        let body = decode_body(&mut r, kind)?;
        r.finish()?;
        Ok(Message { round, sender: NodeId { role, index }, body })
    }
}

fn encode_body(w: &mut Writer, body: &Body) {
    match body {
        Body::Register | Body::GradientAck => {}
        Body::RegisterAck { num_workers, rounds } => {
            w.u32(*num_workers);
            w.u64(*rounds);
        }
        Body::ModelBroadcast { params } => codec::put_params(w, params),
        Body::GradientPush { grad, loss, eval_correct, eval_total } => {
            codec::put_grad(w, grad);
            w.f64(*loss);
            w.u64(*eval_correct);
            w.u64(*eval_total);
        }
        Body::ShardTransfer { worker_index, data } => {
            w.u32(*worker_index);
            w.bytes(data);
        }
        Body::ConfigTransfer { text } => w.bytes(text.as_bytes()),
        Body::TrainComplete { params_digest, metrics, params } => {
            w.buf.extend_from_slice(params_digest);
            w.len(metrics.len());
            for m in metrics {
                w.u64(m.round);
                w.f64(m.loss);
                w.f64(m.accuracy);
                w.u64(m.duration_us);
            }
            match params {
                None => w.u8(0),
                Some(p) => {
                    w.u8(1);
                    codec::put_params(w, p);
                }
            }
        }
        Body::Abort { code, detail } => {
            w.u16(*code);
            w.bytes(detail.as_bytes());
        }
    }
}

fn utf8(at: usize, raw: &[u8]) -> Result<String, DecodeError> {
    String::from_utf8(raw.to_vec()).map_err(|_| DecodeError { offset: at, failure: DecodeFailure::Invalid("text is not UTF-8") })
}

fn decode_body(r: &mut Reader, kind: MessageKind) -> Result<Body, DecodeError> {
    Ok(match kind {
        MessageKind::Register => Body::Register,
        MessageKind::GradientAck => Body::GradientAck,
        MessageKind::RegisterAck => Body::RegisterAck { num_workers: r.u32()?, rounds: r.u64()? },
        MessageKind::ModelBroadcast => Body::ModelBroadcast { params: codec::get_params(r)? },
        MessageKind::GradientPush => Body::GradientPush {
            grad: codec::get_grad(r)?,
            loss: r.f64()?,
            eval_correct: r.u64()?,
            eval_total: r.u64()?,
        },
        MessageKind::ShardTransfer => Body::ShardTransfer { worker_index: r.u32()?, data: r.bytes()?.to_vec() },
        MessageKind::ConfigTransfer => {
            let at = r.pos;
            let raw = r.bytes()?;
            Body::ConfigTransfer { text: utf8(at, raw)? }
        }
        MessageKind::TrainComplete => {
            let params_digest: [u8; 32] = r.take(32)?.try_into().unwrap();
            let n = r.count(32)?;
            let mut metrics = Vec::with_capacity(n);
            for _ in 0..n {
                metrics.push(RoundMetrics { round: r.u64()?, loss: r.f64()?, accuracy: r.f64()?, duration_us: r.u64()? });
            }
            let at = r.pos;
            let params = match r.u8()? {
                0 => None,
                1 => Some(codec::get_params(r)?),
                _ => return Err(DecodeError { offset: at, failure: DecodeFailure::Invalid("option flag") }),
            };
            Body::TrainComplete { params_digest, metrics, params }
        }
        MessageKind::Abort => {
            let code = r.u16()?;
            let at = r.pos;
            let raw = r.bytes()?;
            Body::Abort { code, detail: utf8(at, raw)? }
        }
    })
}

/// Canonical encoding of a parameter set, as carried in `ModelBroadcast`.
pub fn encode_params(params: &ModelParams<f32>) -> Vec<u8> {
    let mut w = Writer::default();
    codec::put_params(&mut w, params);
    w.buf
}

pub fn decode_params(buf: &[u8]) -> Result<ModelParams<f32>, DecodeError> {
    let mut r = Reader::new(buf, 0);
    let p = codec::get_params(&mut r)?;
    r.finish()?;
    Ok(p)
}

pub fn encode_grad(grad: &GradientDelta<f32>) -> Vec<u8> {
    let mut w = Writer::default();
    codec::put_grad(&mut w, grad);
    w.buf
}

/// SHA-256 of the canonical parameter encoding (includes the version).
pub fn params_digest(params: &ModelParams<f32>) -> [u8; 32] {
    Sha256::digest(encode_params(params)).into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dlrm::{init_params, DlrmConfig};

    fn tiny() -> ModelParams<f32> {
        let cfg = DlrmConfig {
            num_dense: 2,
            num_sparse: 2,
            vocab_sizes: vec![3, 4],
            embed_dim: 2,
            bottom_mlp_dims: vec![3, 2],
            top_mlp_dims: vec![2, 1],
            ..DlrmConfig::default()
        };
        init_params(&cfg).unwrap()
    }

    fn samples() -> Vec<Message> {
        let p = tiny();
        let mut g = GradientDelta::zeros_like(&p, 5);
        g.sparse_grads.push(crate::dlrm::SparseRowGrad { table: 1, row: 2, grad: vec![0.5, -1.0] });
        vec![
            Message::new(0, NodeId::worker(3), Body::Register),
            Message::new(0, NodeId::PS, Body::RegisterAck { num_workers: 4, rounds: 9 }),
            Message::new(7, NodeId::PS, Body::ModelBroadcast { params: p.clone() }),
            Message::new(7, NodeId::worker(1), Body::GradientPush { grad: g, loss: 0.25, eval_correct: 3, eval_total: 4 }),
            Message::new(7, NodeId::PS, Body::GradientAck),
            Message::new(0, NodeId::CHIEF, Body::ShardTransfer { worker_index: 1, data: vec![1, 2, 3] }),
            Message::new(0, NodeId::CHIEF, Body::ConfigTransfer { text: "rounds=3\n".into() }),
            Message::new(
                9,
                NodeId::PS,
                Body::TrainComplete {
                    params_digest: params_digest(&p),
                    metrics: vec![RoundMetrics { round: 0, loss: 0.6, accuracy: 0.5, duration_us: 12 }],
                    params: Some(p),
                },
            ),
            Message::new(2, NodeId::PS, Body::Abort { code: 2, detail: "stale round ✗".into() }),
        ]
    }

    #[test]
    fn every_kind_round_trips() {
        for m in samples() {
            let bytes = m.encode();
            assert_eq!(bytes, m.encode());
            assert_eq!(Message::decode(&bytes).unwrap(), m);
        }
    }

    #[test]
    fn decode_errors_report_offsets() {
        assert_eq!(Message::decode(&[]).unwrap_err(), DecodeError { offset: 0, failure: DecodeFailure::Truncated });
        let mut bytes = samples()[1].encode();
        bytes[0] = 2;
        assert_eq!(Message::decode(&bytes).unwrap_err().failure, DecodeFailure::Version(2));
        bytes[0] = 1;
        bytes[1] = 0x42;
        assert_eq!(Message::decode(&bytes).unwrap_err(), DecodeError { offset: 1, failure: DecodeFailure::UnknownKind(0x42) });
        bytes[1] = 2;
        bytes.push(0);
        assert_eq!(Message::decode(&bytes).unwrap_err(), DecodeError { offset: HEADER_LEN + 12, failure: DecodeFailure::TrailingBytes });
        bytes.truncate(bytes.len() - 2);
        assert_eq!(Message::decode(&bytes).unwrap_err().failure, DecodeFailure::Truncated);
    }

    #[test]
    fn body_must_match_kind() {
        // A RegisterAck body relabelled as GradientAck leaves unread bytes.
        let mut bytes = samples()[1].encode();
        bytes[1] = MessageKind::GradientAck as u8;
        assert_eq!(Message::decode(&bytes).unwrap_err().failure, DecodeFailure::TrailingBytes);
    }

    #[test]
    fn digest_changes_with_any_parameter() {
        let p = tiny();
        let mut q = p.clone();
        q.top_mlp[0].bias[0] += 1e-6;
        assert_ne!(params_digest(&p), params_digest(&q));
        assert_eq!(decode_params(&encode_params(&p)).unwrap(), p);
    }
}
