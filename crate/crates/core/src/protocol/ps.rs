use std::collections::{BTreeMap, BTreeSet};

use log::debug;

use crate::dlrm::{sgd_apply, GradientDelta, Linear, ModelParams, SparseRowGrad};

use super::{Body, Message, MessageKind, NodeId, Role, RoundMetrics};

/// Reason codes carried by `Abort` messages and reported by failed runs.
pub mod abort_code {
    pub const DUPLICATE_PUSH: u16 = 1;
    pub const ROUND_MISMATCH: u16 = 2;
    pub const UNKNOWN_NODE: u16 = 3;
    pub const DUPLICATE_REGISTRATION: u16 = 4;
    pub const REGISTRATION_CLOSED: u16 = 5;
    pub const UNEXPECTED_MESSAGE: u16 = 6;
    pub const INVALID_GRADIENT: u16 = 7;
    pub const TIMEOUT: u16 = 8;
    pub const CHANNEL: u16 = 9;
    pub const CONFIG: u16 = 10;
    pub const PEER_ABORT: u16 = 11;
    pub const DATA: u16 = 12;
    pub const DECODE: u16 = 13;
    pub const ATTESTATION: u16 = 14;
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AggregationError {
    #[error("no gradients to aggregate")]
    Empty,
    #[error("total batch size is zero")]
    ZeroBatch,
    #[error("gradient shapes differ: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolAbort {
    #[error("worker {0} pushed twice in one round")]
    DuplicatePush(u32),
    #[error("push for round {got} while collecting round {expected}")]
    RoundMismatch { expected: u64, got: u64 },
    #[error("message from unknown node {0}")]
    UnknownNode(NodeId),
    #[error("worker index {0} registered twice")]
    DuplicateRegistration(u32),
    #[error("registration from {0} after training started")]
    RegistrationClosed(NodeId),
    #[error("unexpected {kind:?} message in phase {phase:?}")]
    UnexpectedMessage { kind: MessageKind, phase: Phase },
    #[error("invalid gradient from worker {worker}: {reason}")]
    InvalidGradient { worker: u32, reason: String },
}

impl ProtocolAbort {
    pub fn code(&self) -> u16 {
        match self {
            ProtocolAbort::DuplicatePush(_) => abort_code::DUPLICATE_PUSH,
            ProtocolAbort::RoundMismatch { .. } => abort_code::ROUND_MISMATCH,
            ProtocolAbort::UnknownNode(_) => abort_code::UNKNOWN_NODE,
            ProtocolAbort::DuplicateRegistration(_) => abort_code::DUPLICATE_REGISTRATION,
            ProtocolAbort::RegistrationClosed(_) => abort_code::REGISTRATION_CLOSED,
            ProtocolAbort::UnexpectedMessage { .. } => abort_code::UNEXPECTED_MESSAGE,
            ProtocolAbort::InvalidGradient { .. } => abort_code::INVALID_GRADIENT,
        }
    }
}

/// Batch-size weighted mean `Σ bⱼ·δⱼ / Σ bⱼ`, accumulated in f64 in slice
/// order. Sparse rows missing from a delta count as zero for that delta.
pub fn aggregate(deltas: &[&GradientDelta<f32>]) -> Result<GradientDelta<f32>, AggregationError> {
    let first = deltas.first().ok_or(AggregationError::Empty)?;
    let total: u64 = deltas
        .iter()
        .try_fold(0u64, |acc, d| acc.checked_add(d.batch_size))
        .ok_or_else(|| AggregationError::Shape("batch sizes overflow".into()))?;
    if total == 0 {
        return Err(AggregationError::ZeroBatch);
    }
    let denom = total as f64;

    let mean_layers = |pick: fn(&GradientDelta<f32>) -> &Vec<Linear<f32>>| -> Result<Vec<Linear<f32>>, AggregationError> {
        let reference = pick(first);
        let mut acc: Vec<(Vec<f64>, Vec<f64>)> =
            reference.iter().map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()])).collect();
        for d in deltas {
            let layers = pick(d);
            if layers.len() != reference.len() || layers.iter().zip(reference).any(|(a, b)| !a.same_shape(b)) {
                return Err(AggregationError::Shape("dense layer shapes differ between workers".into()));
            }
            let w = d.batch_size as f64;
            for (l, (aw, ab)) in layers.iter().zip(acc.iter_mut()) {
                aw.iter_mut().zip(&l.weight).for_each(|(a, &g)| *a += w * g as f64);
                ab.iter_mut().zip(&l.bias).for_each(|(a, &g)| *a += w * g as f64);
            }
        }
        Ok(reference
            .iter()
            .zip(acc)
            .map(|(l, (aw, ab))| Linear {
                in_dim: l.in_dim,
                out_dim: l.out_dim,
                weight: aw.into_iter().map(|v| (v / denom) as f32).collect(),
                bias: ab.into_iter().map(|v| (v / denom) as f32).collect(),
            })
            .collect())
    };
    let bottom_mlp = mean_layers(|d| &d.bottom_mlp)?;
    let top_mlp = mean_layers(|d| &d.top_mlp)?;

    let mut dim = None;
    let mut rows: BTreeMap<(u32, u32), Vec<f64>> = BTreeMap::new();
    for d in deltas {
        let w = d.batch_size as f64;
        for s in &d.sparse_grads {
            if *dim.get_or_insert(s.grad.len()) != s.grad.len() {
                return Err(AggregationError::Shape(format!("sparse row ({}, {}) has a different width", s.table, s.row)));
            }
            let acc = rows.entry((s.table, s.row)).or_insert_with(|| vec![0.0; s.grad.len()]);
            acc.iter_mut().zip(&s.grad).for_each(|(a, &g)| *a += w * g as f64);
        }
    }
    let sparse_grads = rows
        .into_iter()
        .map(|((table, row), acc)| SparseRowGrad { table, row, grad: acc.into_iter().map(|v| (v / denom) as f32).collect() })
        .collect();
    Ok(GradientDelta { bottom_mlp, top_mlp, sparse_grads, batch_size: total })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Registering,
    Broadcasting,
    Collecting,
    Aggregating,
    Finished,
    Aborted,
}

/// A message addressed to one worker.
#[derive(Clone, Debug, PartialEq)]
pub struct Outbound {
    pub to: u32,
    pub msg: Message,
}

struct Push {
    grad: GradientDelta<f32>,
    loss: f64,
    eval_correct: u64,
    eval_total: u64,
}

/// The parameter server's synchronous barrier. Events are fed one at a
/// time; each call returns the messages to send. Any protocol violation
/// moves the server to `Aborted` for good.
pub struct ParameterServer {
    num_workers: u32,
    rounds: u64,
    learning_rate: f64,
    params: ModelParams<f32>,
    registered: BTreeSet<u32>,
    round: u64,
    phase: Phase,
    received: BTreeMap<u32, Push>,
    metrics: Vec<RoundMetrics>,
}

impl ParameterServer {
    pub fn new(params: ModelParams<f32>, num_workers: u32, rounds: u64, learning_rate: f64) -> Self {
        assert!(num_workers >= 1 && rounds >= 1, "need at least one worker and one round");
        Self {
            num_workers,
            rounds,
            learning_rate,
            params,
            registered: BTreeSet::new(),
            round: 0,
            phase: Phase::Registering,
            received: BTreeMap::new(),
            metrics: Vec::new(),
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn into_params(self) -> ModelParams<f32> {
        self.params
    }

    /// One entry per completed round; `duration_us` is left at zero for
    /// the driver to fill in.
    pub fn metrics(&self) -> &[RoundMetrics] {
        &self.metrics
    }

    pub fn handle(&mut self, msg: Message) -> Result<Vec<Outbound>, ProtocolAbort> {
        let res = self.step(msg);
        if res.is_err() {
            self.phase = Phase::Aborted;
        }
        res
    }

    fn unexpected(&self, kind: MessageKind) -> ProtocolAbort {
        ProtocolAbort::UnexpectedMessage { kind, phase: self.phase }
    }

    fn step(&mut self, msg: Message) -> Result<Vec<Outbound>, ProtocolAbort> {
        if msg.sender.role != Role::Worker || msg.sender.index >= self.num_workers {
            return Err(ProtocolAbort::UnknownNode(msg.sender));
        }
        let worker = msg.sender.index;
        let kind = msg.kind();
        match (self.phase, msg.body) {
            (Phase::Registering, Body::Register) => {
                if !self.registered.insert(worker) {
                    return Err(ProtocolAbort::DuplicateRegistration(worker));
                }
                let ack = Body::RegisterAck { num_workers: self.num_workers, rounds: self.rounds };
                let mut out = vec![Outbound { to: worker, msg: Message::new(0, NodeId::PS, ack) }];
                if self.registered.len() == self.num_workers as usize {
                    out.extend(self.broadcast());
                }
                Ok(out)
            }
            (Phase::Collecting | Phase::Finished | Phase::Aborted, Body::Register) => {
                Err(ProtocolAbort::RegistrationClosed(msg.sender))
            }
            (Phase::Collecting, Body::GradientPush { grad, loss, eval_correct, eval_total }) => {
                if !self.registered.contains(&worker) {
                    return Err(ProtocolAbort::UnknownNode(msg.sender));
                }
                if msg.round != self.round {
                    return Err(ProtocolAbort::RoundMismatch { expected: self.round, got: msg.round });
                }
                if self.received.contains_key(&worker) {
                    return Err(ProtocolAbort::DuplicatePush(worker));
                }
                let invalid = |reason: String| ProtocolAbort::InvalidGradient { worker, reason };
                grad.check_against(&self.params).map_err(|e| invalid(e.to_string()))?;
                if !grad.all_finite() || !loss.is_finite() || eval_correct > eval_total {
                    return Err(invalid("non-finite values or inconsistent evaluation counts".into()));
                }
                self.received.insert(worker, Push { grad, loss, eval_correct, eval_total });
                let mut out = vec![Outbound { to: worker, msg: Message::new(self.round, NodeId::PS, Body::GradientAck) }];
                if self.received.len() == self.num_workers as usize {
                    self.aggregate_round()?;
                    if self.phase == Phase::Broadcasting {
                        out.extend(self.broadcast());
                    }
                }
                Ok(out)
            }
            _ => Err(self.unexpected(kind)),
        }
    }

    fn broadcast(&mut self) -> Vec<Outbound> {
        self.phase = Phase::Broadcasting;
        let out = (0..self.num_workers)
            .map(|to| Outbound {
                to,
                msg: Message::new(self.round, NodeId::PS, Body::ModelBroadcast { params: self.params.clone() }),
            })
            .collect();
        self.phase = Phase::Collecting;
        out
    }

    fn aggregate_round(&mut self) -> Result<(), ProtocolAbort> {
        self.phase = Phase::Aggregating;
        let pushes = std::mem::take(&mut self.received);
        // BTreeMap iteration gives ascending worker index: a fixed f64
        // accumulation order whatever the arrival order was.
        let grads: Vec<&GradientDelta<f32>> = pushes.values().map(|p| &p.grad).collect();
        let agg = aggregate(&grads).map_err(|e| ProtocolAbort::InvalidGradient { worker: u32::MAX, reason: e.to_string() })?;
        sgd_apply(&mut self.params, &agg, self.learning_rate)
            .map_err(|e| ProtocolAbort::InvalidGradient { worker: u32::MAX, reason: e.to_string() })?;

        let weight: f64 = pushes.values().map(|p| p.grad.batch_size as f64).sum();
        let loss = pushes.values().map(|p| p.grad.batch_size as f64 * p.loss).sum::<f64>() / weight;
        let correct: u64 = pushes.values().map(|p| p.eval_correct).sum();
        let total: u64 = pushes.values().map(|p| p.eval_total).sum();
        let accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
        debug!("round {} aggregated: loss {loss:.6} accuracy {accuracy:.4}", self.round);
        self.metrics.push(RoundMetrics { round: self.round, loss, accuracy, duration_us: 0 });

        self.round += 1;
        self.phase = if self.round == self.rounds { Phase::Finished } else { Phase::Broadcasting };
        Ok(())
    }
}
