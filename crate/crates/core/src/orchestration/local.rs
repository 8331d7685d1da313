use std::sync::mpsc;
use std::sync::Arc;
use std::thread;

use crate::attest::AttestationAuthority;
use crate::channel::{ChannelMode, Security};
use crate::datagen::{self, Dataset};
use crate::dlrm::ModelParams;
use crate::protocol::NodeId;

use super::chief::chief_session;
use super::ps::serve_ps;
use super::worker::{sdt_worker_session, worker_session};
use super::{check_data_fits, security_with, Connector, LocalAcceptor, LocalConnector, RunConfig, RunError, Topology, TrainReport, WriterHook};

/// Per-node security override: receives the node and the default security.
pub type SecurityOverride = Arc<dyn Fn(NodeId, &Security) -> Security + Send + Sync>;

#[derive(Clone, Default)]
pub struct LocalOptions {
    pub hook: Option<WriterHook>,
    pub security: Option<SecurityOverride>,
}

#[derive(Debug)]
pub struct LocalOutcome {
    pub ps: TrainReport,
    pub workers: Vec<TrainReport>,
    pub chief: Option<TrainReport>,
    pub params: ModelParams<f32>,
}

/// Runs every role of `cfg` in this process over in-memory streams. In
/// HFL mode worker `i` trains on shard `i` of `dataset`; in SDT mode the
/// chief owns `dataset` and ships the same shards.
///
/// Attested runs use a fresh in-process authority.
pub fn run_local(cfg: &RunConfig, dataset: &Dataset, opts: &LocalOptions) -> Result<LocalOutcome, RunError> {
    cfg.validate()?;
    check_data_fits(&cfg.dlrm, dataset)?;
    let base = match cfg.channel_mode {
        ChannelMode::Native => Security::Native,
        ChannelMode::Attested => security_with(cfg, Arc::new(AttestationAuthority::generate()))?,
    };
    let security = |id: NodeId| opts.security.as_ref().map_or_else(|| base.clone(), |f| f(id, &base));
    let hook = opts.hook.as_ref();
    let k = cfg.num_workers;

    let (ps_tx, ps_rx) = mpsc::channel();
    thread::scope(|s| {
        let ps_sec = security(NodeId::PS);
        let ps = s.spawn(move || serve_ps(cfg, &mut LocalAcceptor(ps_rx), &ps_sec, hook));

        let mut workers = Vec::new();
        let mut chief = None;
        match cfg.topology {
            Topology::Hfl => {
                let shards = datagen::shard(dataset, k as usize)?;
                for shard in shards {
                    let i = shard.worker_index as u32;
                    let sec = security(NodeId::worker(i));
                    let mut conn = LocalConnector(ps_tx.clone());
                    workers.push(s.spawn(move || worker_session(cfg, i, &shard.data, &mut conn, &sec, hook)));
                }
            }
            Topology::Sdt => {
                let mut to_workers: Vec<Box<dyn Connector>> = Vec::new();
                for i in 0..k {
                    let (wtx, wrx) = mpsc::channel();
                    to_workers.push(Box::new(LocalConnector(wtx)));
                    let sec = security(NodeId::worker(i));
                    let mut conn = LocalConnector(ps_tx.clone());
                    workers.push(s.spawn(move || sdt_worker_session(cfg, i, &mut LocalAcceptor(wrx), &mut conn, &sec, hook)));
                }
                let sec = security(NodeId::CHIEF);
                let mut conn = LocalConnector(ps_tx.clone());
                chief = Some(s.spawn(move || chief_session(cfg, dataset, &mut conn, &mut to_workers, &sec, hook)));
            }
        }
        drop(ps_tx);

        let ps = ps.join().expect("parameter server thread panicked");
        let workers: Vec<_> = workers.into_iter().map(|h| h.join().expect("worker thread panicked")).collect();
        let chief = chief.map(|h| h.join().expect("chief thread panicked"));

        let ps = ps?;
        let workers = workers.into_iter().collect::<Result<Vec<_>, _>>()?;
        let (chief, params) = match chief {
            Some(c) => {
                let c = c?;
                (Some(c.report), c.params)
            }
            None => (None, ps.params),
        };
        Ok(LocalOutcome { ps: ps.report, workers, chief, params })
    })
}
