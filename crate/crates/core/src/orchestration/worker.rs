use std::io;
use std::net::TcpListener;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channel::{handshake, Security, Side};
use crate::datagen::{self, Dataset};
use crate::dlrm::{backward, bce_loss, evaluate, forward, ModelParams, Record};
use crate::protocol::{abort_code, Body, Message, NodeId, Role};

use super::net::hooked;
use super::{
    channel_abort, channel_options, check_data_fits, node_security, notify_abort, recv_msg, send_msg, Acceptor,
    Connector, RunConfig, RunError, TcpAcceptor, TcpConnector, TrainReport, WriterHook,
};

/// Splits off the last 10% of `records` (rounded down) as the held-out set.
pub fn split_holdout(records: &[Record]) -> (&[Record], &[Record]) {
    records.split_at(records.len() - records.len() / 10)
}

/// Cyclic minibatch schedule over a fixed seeded permutation of the
/// training records. Batches wrap around the end of the permutation; a
/// batch size of at least `n` means every round uses the whole set.
#[derive(Clone, Debug)]
pub struct Schedule {
    order: Vec<usize>,
    batch: usize,
}

impl Schedule {
    pub fn new(n: usize, batch: usize, seed: u64, worker: u32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(worker as u64 + 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, batch: batch.min(n) }
    }

    pub fn indices(&self, round: u64) -> Vec<usize> {
        let n = self.order.len();
        if n == 0 {
            return Vec::new();
        }
        let start = ((round as u128 * self.batch as u128) % n as u128) as usize;
        (0..self.batch).map(|i| self.order[(start + i) % n]).collect()
    }
}

/// Indices into the training part of a shard used by `worker` in `round`.
pub fn minibatch_indices(n_train: usize, batch: usize, seed: u64, worker: u32, round: u64) -> Vec<usize> {
    Schedule::new(n_train, batch, seed, worker).indices(round)
}

struct Trainer<'a> {
    train: &'a [Record],
    heldout: &'a [Record],
    schedule: Schedule,
}

impl Trainer<'_> {
    fn gradient_push(&self, params: &ModelParams<f32>, round: u64) -> Result<Body, RunError> {
        let model_err = |e: crate::dlrm::DlrmError| RunError::abort(abort_code::CONFIG, format!("model: {e}"));
        let batch: Vec<Record> = self.schedule.indices(round).into_iter().map(|i| self.train[i].clone()).collect();
        let labels: Vec<u8> = batch.iter().map(|r| r.label).collect();
        let (probs, cache) = forward(params, &batch).map_err(model_err)?;
        let loss = bce_loss(&probs, &labels).map_err(model_err)?;
        let grad = backward(params, &cache, &labels).map_err(model_err)?;
        let eval_correct = if self.heldout.is_empty() { 0 } else { evaluate(params, self.heldout).map_err(model_err)?.1 };
        Ok(Body::GradientPush { grad, loss, eval_correct, eval_total: self.heldout.len() as u64 })
    }
}

/// One worker over an already opened transport to the parameter server.
/// The worker's data never leaves it: it sends only registration,
/// gradients and evaluation counts.
pub fn run_worker_session(
    cfg: &RunConfig,
    index: u32,
    data: &Dataset,
    transport: crate::channel::Transport,
    security: &Security,
) -> Result<TrainReport, RunError> {
    let start = Instant::now();
    let me = NodeId::worker(index);
    check_data_fits(&cfg.dlrm, data)?;
    if data.is_empty() {
        return Err(RunError::Config(format!("worker {index} has no records")));
    }
    let (train, heldout) = split_holdout(&data.records);
    let trainer = Trainer { train, heldout, schedule: Schedule::new(train.len(), cfg.local_batch_size, cfg.seed, index) };

    let ch = handshake(transport, Side::Initiator, security, &channel_options(cfg, Some(cfg.round_timeout)))
        .map_err(|e| channel_abort("handshake with parameter server", e))?;
    let mut report = TrainReport { handshake_time: ch.info().handshake_duration, handshakes: 1, ..Default::default() };
    let (mut tx, mut rx, _) = ch.split();

    let mut next_round = 0u64;
    let result = (|| -> Result<(), RunError> {
        send_msg(&mut tx, &Message::new(0, me, Body::Register))?;
        loop {
            let msg = recv_msg(&mut rx)?;
            if msg.sender != NodeId::PS {
                return Err(RunError::abort(abort_code::UNKNOWN_NODE, format!("message from {}", msg.sender)));
            }
            match msg.body {
                Body::RegisterAck { num_workers, rounds } => {
                    if num_workers != cfg.num_workers || rounds != cfg.rounds {
                        return Err(RunError::abort(
                            abort_code::CONFIG,
                            format!("server runs {num_workers} workers × {rounds} rounds, expected {} × {}", cfg.num_workers, cfg.rounds),
                        ));
                    }
                }
                Body::ModelBroadcast { params } => {
                    if msg.round != next_round {
                        return Err(RunError::abort(
                            abort_code::ROUND_MISMATCH,
                            format!("broadcast for round {} while expecting {next_round}", msg.round),
                        ));
                    }
                    let push = trainer.gradient_push(&params, msg.round)?;
                    send_msg(&mut tx, &Message::new(msg.round, me, push))?;
                    debug!("worker {index} pushed round {}", msg.round);
                    next_round += 1;
                }
                Body::GradientAck => {}
                Body::TrainComplete { params_digest, metrics, .. } => {
                    report.rounds = metrics;
                    report.final_digest = Some(params_digest);
                    return Ok(());
                }
                Body::Abort { code, detail } => return Err(RunError::abort(code, format!("server aborted: {detail}"))),
                other => {
                    return Err(RunError::abort(abort_code::UNEXPECTED_MESSAGE, format!("{:?} from the server", other.kind())))
                }
            }
        }
    })();
    report.wall_time = start.elapsed();
    match result {
        Ok(()) => {
            info!("worker {index} done after {} rounds", report.rounds.len());
            Ok(report)
        }
        Err(e) => {
            if !matches!(e, RunError::Aborted { code: abort_code::CHANNEL | abort_code::DECODE, .. }) {
                notify_abort(&mut tx, me, next_round, &e);
            }
            Err(e.with_partial(report))
        }
    }
}

/// HFL worker reading its own shard and connecting to the parameter server
/// through `connector`.
pub fn worker_session(
    cfg: &RunConfig,
    index: u32,
    data: &Dataset,
    connector: &mut dyn Connector,
    security: &Security,
    hook: Option<&WriterHook>,
) -> Result<TrainReport, RunError> {
    cfg.validate()?;
    let t = hooked(connector.connect(cfg.round_timeout)?, NodeId::worker(index), hook);
    run_worker_session(cfg, index, data, t, security)
}

/// HFL worker over TCP with its shard read from `shard_path`.
pub fn run_worker_hfl(cfg: &RunConfig, index: u32, shard_path: &Path) -> Result<TrainReport, RunError> {
    cfg.validate()?;
    if index >= cfg.num_workers {
        return Err(RunError::Config(format!("worker index {index} out of range for {} workers", cfg.num_workers)));
    }
    let data = datagen::read_file(shard_path).map_err(|e| match e {
        datagen::DataError::Io(io) if io.kind() == io::ErrorKind::NotFound => {
            RunError::Config(format!("shard file {} not found", shard_path.display()))
        }
        other => RunError::Data(other),
    })?;
    let security = node_security(cfg)?;
    worker_session(cfg, index, &data, &mut TcpConnector(cfg.ps_addr.clone()), &security, None)
}

/// SDT worker: receives the training recipe and its shard from the chief,
/// then trains against the parameter server. A failure while receiving is
/// reported to the parameter server so the whole run stops cleanly.
pub fn sdt_worker_session(
    cfg: &RunConfig,
    index: u32,
    chief: &mut dyn Acceptor,
    ps: &mut dyn Connector,
    security: &Security,
    hook: Option<&WriterHook>,
) -> Result<TrainReport, RunError> {
    let me = NodeId::worker(index);
    let mut cfg = cfg.clone();
    let mut handshake_time = std::time::Duration::ZERO;
    let received = (|| -> Result<Dataset, RunError> {
        let t = hooked(chief.accept(cfg.round_timeout)?, me, hook);
        let ch = handshake(t, Side::Responder, security, &channel_options(&cfg, Some(cfg.round_timeout)))
            .map_err(|e| channel_abort("handshake with chief", e))?;
        handshake_time += ch.info().handshake_duration;
        let (_tx, mut rx, _) = ch.split();
        let mut data = None;
        while data.is_none() {
            let msg = recv_msg(&mut rx)?;
            if msg.sender.role != Role::Chief {
                return Err(RunError::abort(abort_code::UNKNOWN_NODE, format!("setup message from {}", msg.sender)));
            }
            match msg.body {
                Body::ConfigTransfer { text } => cfg.apply_training_text(&text)?,
                Body::ShardTransfer { worker_index, data: bytes } if worker_index == index => {
                    data = Some(datagen::decode(&bytes)?)
                }
                Body::Abort { code, detail } => return Err(RunError::abort(code, format!("chief aborted: {detail}"))),
                other => {
                    return Err(RunError::abort(abort_code::UNEXPECTED_MESSAGE, format!("{:?} from the chief", other.kind())))
                }
            }
        }
        Ok(data.unwrap())
    })();

    let t = hooked(ps.connect(cfg.round_timeout)?, me, hook);
    let data = match received {
        Ok(d) => d,
        Err(e) => {
            // Tell the parameter server so nobody starts training.
            if let Ok(ch) = handshake(t, Side::Initiator, security, &channel_options(&cfg, Some(cfg.round_timeout))) {
                let (mut tx, _, _) = ch.split();
                notify_abort(&mut tx, me, 0, &e);
            }
            return Err(e);
        }
    };
    let mut report = run_worker_session(&cfg, index, &data, t, security)?;
    report.handshake_time += handshake_time;
    report.handshakes += 1;
    Ok(report)
}

/// SDT worker over TCP: listens on `worker_addrs[index]` for the chief.
pub fn run_worker_sdt(cfg: &RunConfig, index: u32) -> Result<TrainReport, RunError> {
    cfg.validate()?;
    cfg.validate_sdt_addresses()?;
    let addr = cfg
        .worker_addrs
        .get(index as usize)
        .ok_or_else(|| RunError::Config(format!("no worker address for index {index}")))?;
    let security = node_security(cfg)?;
    let listener = TcpListener::bind(addr)?;
    info!("worker {index} waiting for the chief on {addr}");
    sdt_worker_session(cfg, index, &mut TcpAcceptor(listener), &mut TcpConnector(cfg.ps_addr.clone()), &security, None)
}
