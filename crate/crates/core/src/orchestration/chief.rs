use std::path::Path;
use std::time::Instant;

use log::info;

use crate::channel::{handshake, Security, SendHalf, Side};
use crate::datagen::{self, Dataset};
use crate::dlrm::ModelParams;
use crate::protocol::{abort_code, params_digest, Body, Message, NodeId};

use super::net::hooked;
use super::{
    channel_abort, channel_options, check_data_fits, export_params, node_security, notify_abort, recv_msg, send_msg,
    Connector, RunConfig, RunError, TcpConnector, Topology, TrainReport, WriterHook,
};

#[derive(Debug)]
pub struct ChiefOutcome {
    pub report: TrainReport,
    pub params: ModelParams<f32>,
}

/// SDT chief over `ps` and one connector per worker: shards `dataset`,
/// sends the recipe to every node and each shard to its worker, then waits
/// for the final model from the parameter server.
pub fn chief_session(
    cfg: &RunConfig,
    dataset: &Dataset,
    ps: &mut dyn Connector,
    workers: &mut [Box<dyn Connector>],
    security: &Security,
    hook: Option<&WriterHook>,
) -> Result<ChiefOutcome, RunError> {
    let start = Instant::now();
    cfg.validate()?;
    if cfg.topology != Topology::Sdt {
        return Err(RunError::Config("the chief only takes part in sdt mode".into()));
    }
    if workers.len() != cfg.num_workers as usize {
        return Err(RunError::Config(format!("{} worker connections for {} workers", workers.len(), cfg.num_workers)));
    }
    check_data_fits(&cfg.dlrm, dataset)?;
    let shards = datagen::shard(dataset, cfg.num_workers as usize)?;
    let recipe = Message::new(0, NodeId::CHIEF, Body::ConfigTransfer { text: cfg.training_text() });
    let mut report = TrainReport::default();

    // The whole run happens between the recipe and the final model; allow
    // one round timeout per round plus set-up.
    let wait = cfg.round_timeout.saturating_mul(u32::try_from(cfg.rounds.saturating_add(2)).unwrap_or(u32::MAX));
    let open = |c: &mut dyn Connector, report: &mut TrainReport| -> Result<(SendHalf, crate::channel::RecvHalf), RunError> {
        let t = hooked(c.connect(cfg.round_timeout)?, NodeId::CHIEF, hook);
        let ch = handshake(t, Side::Initiator, security, &channel_options(cfg, Some(wait)))
            .map_err(|e| channel_abort("chief handshake", e))?;
        report.handshake_time += ch.info().handshake_duration;
        report.handshakes += 1;
        let (tx, rx, _) = ch.split();
        Ok((tx, rx))
    };

    let (mut ps_tx, mut ps_rx) = open(ps, &mut report)?;
    send_msg(&mut ps_tx, &recipe)?;
    let distributed = (|| -> Result<(), RunError> {
        for (i, (c, shard)) in workers.iter_mut().zip(&shards).enumerate() {
            let (mut tx, _rx) = open(c.as_mut(), &mut report)?;
            send_msg(&mut tx, &recipe)?;
            let transfer = Body::ShardTransfer { worker_index: i as u32, data: datagen::encode(&shard.data) };
            send_msg(&mut tx, &Message::new(0, NodeId::CHIEF, transfer))?;
        }
        Ok(())
    })();
    if let Err(e) = distributed {
        notify_abort(&mut ps_tx, NodeId::CHIEF, 0, &e);
        return Err(e);
    }
    info!("chief distributed {} shards", shards.len());

    loop {
        let msg = recv_msg(&mut ps_rx)?;
        match msg.body {
            Body::TrainComplete { params_digest: digest, metrics, params: Some(params) } => {
                if params_digest(&params) != digest {
                    return Err(RunError::abort(abort_code::DECODE, "final model does not match its digest"));
                }
                export_params(cfg, &params)?;
                report.rounds = metrics;
                report.final_digest = Some(digest);
                report.wall_time = start.elapsed();
                return Ok(ChiefOutcome { report, params });
            }
            Body::Abort { code, detail } => return Err(RunError::abort(code, format!("parameter server aborted: {detail}"))),
            other => {
                return Err(RunError::abort(abort_code::UNEXPECTED_MESSAGE, format!("{:?} from the parameter server", other.kind())))
            }
        }
    }
}

/// SDT chief over TCP using `ps_addr` and `worker_addrs`.
pub fn run_chief(cfg: &RunConfig, dataset_path: &Path) -> Result<ChiefOutcome, RunError> {
    cfg.validate()?;
    cfg.validate_sdt_addresses()?;
    let dataset = datagen::read_file(dataset_path)?;
    let security = node_security(cfg)?;
    let mut workers: Vec<Box<dyn Connector>> =
        cfg.worker_addrs.iter().map(|a| Box::new(TcpConnector(a.clone())) as Box<dyn Connector>).collect();
    chief_session(cfg, &dataset, &mut TcpConnector(cfg.ps_addr.clone()), &mut workers, &security, None)
}
