use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};

use crate::channel::{handshake, SecureChannel, Security, SendHalf, Side};
use crate::dlrm::{init_params, ModelParams};
use crate::protocol::{abort_code, params_digest, Body, Message, MessageKind, NodeId, ParameterServer, Phase, Role};

use super::net::hooked;
use super::{
    channel_abort, channel_options, export_params, node_security, notify_abort, recv_msg, send_msg, Acceptor,
    RunConfig, RunError, TcpAcceptor, Topology, TrainReport, WriterHook,
};

#[derive(Debug)]
pub struct PsOutcome {
    pub report: TrainReport,
    pub params: ModelParams<f32>,
}

/// Binds `cfg.ps_addr` and serves one run.
pub fn run_ps(cfg: &RunConfig) -> Result<PsOutcome, RunError> {
    let security = node_security(cfg)?;
    let listener = TcpListener::bind(&cfg.ps_addr)?;
    info!("parameter server listening on {}", listener.local_addr()?);
    serve_ps(cfg, &mut TcpAcceptor(listener), &security, None)
}

struct Conns {
    workers: Vec<SendHalf>,
    chief: Option<SendHalf>,
}

impl Conns {
    fn abort_all(&mut self, round: u64, err: &RunError) {
        for tx in self.workers.iter_mut().chain(self.chief.as_mut()) {
            notify_abort(tx, NodeId::PS, round, err);
        }
    }
}

fn accept_channel(
    acceptor: &mut dyn Acceptor,
    cfg: &RunConfig,
    security: &Security,
    hook: Option<&WriterHook>,
    report: &mut TrainReport,
) -> Result<SecureChannel, RunError> {
    let t = hooked(acceptor.accept(cfg.round_timeout)?, NodeId::PS, hook);
    let ch = handshake(t, Side::Responder, security, &channel_options(cfg, None)).map_err(|e| channel_abort("handshake", e))?;
    report.handshake_time += ch.info().handshake_duration;
    report.handshakes += 1;
    Ok(ch)
}

/// Runs the parameter server over connections from `acceptor`: the chief
/// first in SDT mode, then one connection per worker.
pub fn serve_ps(
    cfg: &RunConfig,
    acceptor: &mut dyn Acceptor,
    security: &Security,
    hook: Option<&WriterHook>,
) -> Result<PsOutcome, RunError> {
    let start = Instant::now();
    let mut cfg = cfg.clone();
    cfg.validate()?;
    let mut report = TrainReport::default();
    let mut conns = Conns { workers: Vec::new(), chief: None };

    if cfg.topology == Topology::Sdt {
        let ch = accept_channel(acceptor, &cfg, security, hook, &mut report)?;
        let (mut tx, mut rx, _) = ch.split();
        let res = recv_msg(&mut rx).and_then(|msg| match (msg.sender.role, msg.body) {
            (Role::Chief, Body::ConfigTransfer { text }) => cfg.apply_training_text(&text),
            (_, body) => Err(RunError::abort(abort_code::UNEXPECTED_MESSAGE, format!("expected config from chief, got {:?}", body.kind()))),
        });
        if let Err(e) = res {
            notify_abort(&mut tx, NodeId::PS, 0, &e);
            return Err(e);
        }
        conns.chief = Some(tx);
    }

    let params = init_params::<f32>(&cfg.dlrm).map_err(|e| RunError::Config(e.to_string()))?;
    let mut ps = ParameterServer::new(params, cfg.num_workers, cfg.rounds, cfg.dlrm.learning_rate);

    let (events_tx, events) = mpsc::channel::<(usize, Result<Message, RunError>)>();
    for conn in 0..cfg.num_workers as usize {
        let ch = match accept_channel(acceptor, &cfg, security, hook, &mut report) {
            Ok(ch) => ch,
            Err(e) => {
                conns.abort_all(0, &e);
                return Err(e);
            }
        };
        let (tx, mut rx, _) = ch.split();
        conns.workers.push(tx);
        let events_tx = events_tx.clone();
        thread::spawn(move || loop {
            let ev = recv_msg(&mut rx);
            let stop = ev.is_err();
            if events_tx.send((conn, ev)).is_err() || stop {
                break;
            }
        });
    }
    drop(events_tx);

    let mut worker_of_conn: Vec<Option<u32>> = vec![None; conns.workers.len()];
    let mut conn_of_worker = vec![usize::MAX; conns.workers.len()];
    let mut round_started = Instant::now();
    let mut durations: Vec<Duration> = Vec::new();

    let result: Result<(), RunError> = (|| {
        while ps.phase() != Phase::Finished {
            let (conn, ev) = match events.recv_timeout(cfg.round_timeout) {
                Ok(ev) => ev,
                Err(_) => {
                    return Err(RunError::abort(abort_code::TIMEOUT, format!("no message within round {} timeout", ps.round())))
                }
            };
            let msg = ev?;
            if let Body::Abort { code, detail } = &msg.body {
                return Err(RunError::abort(*code, format!("{} aborted: {detail}", msg.sender)));
            }
            match worker_of_conn[conn] {
                Some(w) if msg.sender != NodeId::worker(w) => {
                    return Err(RunError::abort(abort_code::UNKNOWN_NODE, format!("{} on the connection of worker{w}", msg.sender)))
                }
                _ => {}
            }
            let is_register = msg.kind() == MessageKind::Register;
            let sender = msg.sender;
            let completed = ps.metrics().len();
            let out = ps.handle(msg).map_err(|a| RunError::abort(a.code(), a.to_string()))?;
            if is_register && worker_of_conn[conn].is_none() {
                worker_of_conn[conn] = Some(sender.index);
                conn_of_worker[sender.index as usize] = conn;
            }
            if ps.metrics().len() > completed {
                durations.push(round_started.elapsed().max(Duration::from_micros(1)));
            }
            for o in &out {
                if o.msg.kind() == MessageKind::ModelBroadcast && o.to == 0 {
                    round_started = Instant::now();
                }
                send_msg(&mut conns.workers[conn_of_worker[o.to as usize]], &o.msg)?;
            }
        }
        Ok(())
    })();

    report.rounds = ps
        .metrics()
        .iter()
        .zip(&durations)
        .map(|(m, d)| crate::protocol::RoundMetrics { duration_us: d.as_micros() as u64, ..*m })
        .collect();
    if let Err(e) = result {
        warn!("parameter server aborting: {e}");
        conns.abort_all(ps.round(), &e);
        report.wall_time = start.elapsed();
        return Err(e.with_partial(report));
    }

    let params = ps.into_params();
    let digest = params_digest(&params);
    report.final_digest = Some(digest);
    let done = |params: Option<ModelParams<f32>>| {
        Message::new(cfg.rounds, NodeId::PS, Body::TrainComplete { params_digest: digest, metrics: report.rounds.clone(), params })
    };
    for tx in conns.workers.iter_mut() {
        send_msg(tx, &done(None))?;
    }
    if let Some(tx) = conns.chief.as_mut() {
        send_msg(tx, &done(Some(params.clone())))?;
    }
    export_params(&cfg, &params)?;
    report.wall_time = start.elapsed();
    info!("parameter server finished {} rounds, digest {}", cfg.rounds, hex::encode(digest));
    Ok(PsOutcome { report, params })
}
