//! Node lifecycles for both topologies.
//!
//! * HFL: workers hold their shards; per round they receive the model,
//!   compute a gradient on one local minibatch and push it to the
//!   parameter server.
//! * SDT: a chief owns the dataset, sends the training recipe and one shard
//!   to each worker over attested channels, and receives the final model.
//!
//! Every role runs over [`Transport`]s, so the same code serves TCP
//! deployments and the in-process [`run_local`].

mod audit;
mod chief;
mod config;
mod local;
mod net;
mod ps;
mod worker;

use std::sync::Arc;
use std::time::Duration;

use crate::attest::{measure, AttestationAuthority, Measurement, VerifyPolicy};
use crate::channel::{ChannelError, ChannelMode, ChannelOptions, NodeIdentity, RecvHalf, Security, SendHalf};
use crate::datagen::{DataError, Dataset};
use crate::dlrm::DlrmConfig;
use crate::protocol::{abort_code, Body, Message, NodeId, RoundMetrics};

pub use audit::{FrameRecord, TrafficLog};
pub use chief::{chief_session, run_chief, ChiefOutcome};
pub use config::{RunConfig, Topology};
pub use local::{run_local, LocalOptions, LocalOutcome};
pub use net::{Acceptor, Connector, LocalAcceptor, LocalConnector, TcpAcceptor, TcpConnector, WriterHook};
pub use ps::{run_ps, serve_ps, PsOutcome};
pub use worker::{
    minibatch_indices, run_worker_hfl, run_worker_sdt, run_worker_session, sdt_worker_session, split_holdout, worker_session,
    Schedule,
};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("run aborted (code {code}): {detail}")]
    Aborted { code: u16, detail: String, partial: Box<TrainReport> },
}

impl RunError {
    pub(crate) fn abort(code: u16, detail: impl Into<String>) -> Self {
        RunError::Aborted { code, detail: detail.into(), partial: Box::default() }
    }

    pub(crate) fn with_partial(self, report: TrainReport) -> Self {
        match self {
            RunError::Aborted { code, detail, .. } => RunError::Aborted { code, detail, partial: Box::new(report) },
            other => other,
        }
    }

    /// The abort code, if this is a protocol-level abort.
    pub fn abort_code(&self) -> Option<u16> {
        match self {
            RunError::Aborted { code, .. } => Some(*code),
            _ => None,
        }
    }
}

fn channel_abort(context: &str, e: ChannelError) -> RunError {
    let code = match e {
        ChannelError::Attestation(_) | ChannelError::PeerAlert(_) => abort_code::ATTESTATION,
        ChannelError::Timeout => abort_code::TIMEOUT,
        _ => abort_code::CHANNEL,
    };
    RunError::abort(code, format!("{context}: {e}"))
}

/// Per-node outcome of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub rounds: Vec<RoundMetrics>,
    pub final_digest: Option<[u8; 32]>,
    /// Total time this node spent in channel handshakes.
    pub handshake_time: Duration,
    pub handshakes: u32,
    pub wall_time: Duration,
}

/// The static configuration covered by a node's measurement. Every role
/// runs the same code, so all nodes of a run share one measurement.
pub fn measured_config(topology: Topology) -> Vec<u8> {
    format!("efl-node\nmode={topology}\n").into_bytes()
}

pub fn node_measurement(cfg: &RunConfig) -> Measurement {
    measure(cfg.build_id.as_bytes(), &measured_config(cfg.topology))
}

/// Channel security for a node using `authority` both to quote and to
/// verify peers.
pub fn security_with(cfg: &RunConfig, authority: Arc<AttestationAuthority>) -> Result<Security, RunError> {
    if cfg.channel_mode == ChannelMode::Native {
        return Ok(Security::Native);
    }
    let measurement = node_measurement(cfg);
    let allowed = std::iter::once(measurement).chain(cfg.extra_measurements.iter().copied());
    let policy = VerifyPolicy::new(authority.public_key(), allowed).map_err(|e| RunError::Config(e.to_string()))?;
    Ok(Security::Attested { identity: NodeIdentity { measurement, authority }, policy })
}

/// Channel security from the config's `authority_key` file.
pub fn node_security(cfg: &RunConfig) -> Result<Security, RunError> {
    if cfg.channel_mode == ChannelMode::Native {
        return Ok(Security::Native);
    }
    let path = cfg
        .authority_key
        .as_ref()
        .ok_or_else(|| RunError::Config("attested mode needs authority_key".into()))?;
    let authority = AttestationAuthority::load(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
    security_with(cfg, Arc::new(authority))
}

fn channel_options(cfg: &RunConfig, read_timeout: Option<Duration>) -> ChannelOptions {
    ChannelOptions { handshake_timeout: cfg.handshake_timeout, read_timeout }
}

/// Checks that records of `data` fit a model built from `dlrm`.
fn check_data_fits(dlrm: &DlrmConfig, data: &Dataset) -> Result<(), RunError> {
    if data.num_dense != dlrm.num_dense || data.num_sparse() != dlrm.num_sparse {
        return Err(RunError::Config(format!(
            "data has {} dense / {} sparse features, model expects {} / {}",
            data.num_dense,
            data.num_sparse(),
            dlrm.num_dense,
            dlrm.num_sparse
        )));
    }
    if let Some(t) = (0..dlrm.num_sparse).find(|&t| data.vocab_sizes[t] as usize > dlrm.vocab_sizes[t]) {
        return Err(RunError::Config(format!(
            "table {t}: data vocabulary {} exceeds model vocabulary {}",
            data.vocab_sizes[t], dlrm.vocab_sizes[t]
        )));
    }
    Ok(())
}

fn send_msg(tx: &mut SendHalf, msg: &Message) -> Result<usize, RunError> {
    tx.send(&msg.encode()).map_err(|e| channel_abort(&format!("sending {:?}", msg.kind()), e))
}

fn recv_msg(rx: &mut RecvHalf) -> Result<Message, RunError> {
    let bytes = rx.recv().map_err(|e| channel_abort("receiving", e))?;
    Message::decode(&bytes).map_err(|e| RunError::abort(abort_code::DECODE, e.to_string()))
}

/// Best-effort notice to a peer that this node is giving up.
fn notify_abort(tx: &mut SendHalf, me: NodeId, round: u64, err: &RunError) {
    let (code, detail) = match err {
        RunError::Aborted { code, detail, .. } => (*code, detail.clone()),
        RunError::Config(d) => (abort_code::CONFIG, d.clone()),
        RunError::Data(d) => (abort_code::DATA, d.to_string()),
        RunError::Io(d) => (abort_code::CHANNEL, d.to_string()),
    };
    let _ = tx.send(&Message::new(round, me, Body::Abort { code, detail }).encode());
}

fn export_params(cfg: &RunConfig, params: &crate::dlrm::ModelParams<f32>) -> Result<(), RunError> {
    if let Some(path) = &cfg.export_params {
        std::fs::write(path, crate::protocol::encode_params(params))?;
    }
    Ok(())
}
