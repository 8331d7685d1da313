use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use crate::attest::Measurement;
use crate::channel::ChannelMode;
use crate::dlrm::DlrmConfig;

use super::RunError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Topology {
    /// Workers hold their own shards; only gradients leave them.
    Hfl,
    /// A chief owns the dataset and ships config and shards at start-up.
    Sdt,
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Topology::Hfl => "hfl",
            Topology::Sdt => "sdt",
        })
    }
}

impl FromStr for Topology {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "hfl" => Ok(Topology::Hfl),
            "sdt" => Ok(Topology::Sdt),
            other => Err(format!("unknown mode {other:?} (expected hfl|sdt)")),
        }
    }
}

/// Everything a node needs to take part in a run.
///
/// Text form is flat `key=value` lines; see [`RunConfig::KEYS`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub topology: Topology,
    pub num_workers: u32,
    pub rounds: u64,
    pub local_batch_size: usize,
    /// Seeds model initialisation and the minibatch schedules.
    pub seed: u64,
    pub channel_mode: ChannelMode,
    pub dlrm: DlrmConfig,
    pub ps_addr: String,
    /// SDT only: where each worker listens for the chief.
    pub worker_addrs: Vec<String>,
    pub build_id: String,
    /// Hex-encoded authority secret used to produce and check quotes.
    pub authority_key: Option<PathBuf>,
    /// Measurements accepted in addition to this node's own.
    pub extra_measurements: Vec<Measurement>,
    pub handshake_timeout: Duration,
    pub round_timeout: Duration,
    /// Writes the final model here (parameter server or chief). Off by default.
    pub export_params: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            topology: Topology::Hfl,
            num_workers: 4,
            rounds: 100,
            local_batch_size: 128,
            seed: 0,
            channel_mode: ChannelMode::Attested,
            dlrm: DlrmConfig::default(),
            ps_addr: "127.0.0.1:7700".into(),
            worker_addrs: Vec::new(),
            build_id: concat!("efl-", env!("CARGO_PKG_VERSION")).into(),
            authority_key: None,
            extra_measurements: Vec::new(),
            handshake_timeout: Duration::from_secs(10),
            round_timeout: Duration::from_secs(120),
            export_params: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, RunError>
where
    T::Err: fmt::Display,
{
    value.trim().parse().map_err(|e| RunError::Config(format!("{key}={value}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, RunError>
where
    T::Err: fmt::Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "mode",
        "num_workers",
        "rounds",
        "local_batch_size",
        "seed",
        "channel_mode",
        "num_dense",
        "num_sparse",
        "vocab_sizes",
        "embed_dim",
        "bottom_mlp",
        "top_mlp",
        "learning_rate",
        "ps_addr",
        "worker_addrs",
        "build_id",
        "authority_key",
        "allowed_measurements",
        "handshake_timeout_ms",
        "round_timeout_ms",
        "export_params",
    ];

    /// Keys the chief forwards to the other nodes in SDT mode: the training
    /// recipe, not deployment details.
    pub const TRAINING_KEYS: &'static [&'static str] = &[
        "mode",
        "num_workers",
        "rounds",
        "local_batch_size",
        "seed",
        "num_dense",
        "num_sparse",
        "vocab_sizes",
        "embed_dim",
        "bottom_mlp",
        "top_mlp",
        "learning_rate",
    ];

    /// Applies `key=value` settings on top of `self`. Unknown keys are
    /// rejected. `vocab_sizes` may be a single value applied to every table.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<(), RunError> {
        let mut uniform_vocab = None;
        for (key, value) in pairs {
            let v = value.trim();
            match key.trim() {
                "mode" => self.topology = parse(key, v)?,
                "num_workers" => self.num_workers = parse(key, v)?,
                "rounds" => self.rounds = parse(key, v)?,
                "local_batch_size" => self.local_batch_size = parse(key, v)?,
                "seed" => self.seed = parse(key, v)?,
                "channel_mode" => self.channel_mode = parse(key, v)?,
                "num_dense" => self.dlrm.num_dense = parse(key, v)?,
                "num_sparse" => self.dlrm.num_sparse = parse(key, v)?,
                "vocab_sizes" => {
                    let sizes: Vec<usize> = parse_list(key, v)?;
                    if sizes.len() == 1 {
                        uniform_vocab = Some(sizes[0]);
                    } else {
                        uniform_vocab = None;
                        self.dlrm.vocab_sizes = sizes;
                    }
                }
                "embed_dim" => self.dlrm.embed_dim = parse(key, v)?,
                "bottom_mlp" => self.dlrm.bottom_mlp_dims = parse_list(key, v)?,
                "top_mlp" => self.dlrm.top_mlp_dims = parse_list(key, v)?,
                "learning_rate" => self.dlrm.learning_rate = parse(key, v)?,
                "ps_addr" => self.ps_addr = v.to_string(),
                "worker_addrs" => self.worker_addrs = parse_list(key, v)?,
                "build_id" => self.build_id = v.to_string(),
                "authority_key" => self.authority_key = (!v.is_empty()).then(|| PathBuf::from(v)),
                "allowed_measurements" => {
                    self.extra_measurements = parse_list::<String>(key, v)?
                        .iter()
                        .map(|h| {
                            let bytes = hex::decode(h.trim()).ok().and_then(|b| <[u8; 32]>::try_from(b).ok());
                            bytes.map(Measurement).ok_or_else(|| RunError::Config(format!("allowed_measurements: bad hex {h:?}")))
                        })
                        .collect::<Result<_, _>>()?
                }
                "handshake_timeout_ms" => self.handshake_timeout = Duration::from_millis(parse(key, v)?),
                "round_timeout_ms" => self.round_timeout = Duration::from_millis(parse(key, v)?),
                "export_params" => self.export_params = (!v.is_empty()).then(|| PathBuf::from(v)),
                other => return Err(RunError::Config(format!("unknown config key {other:?}"))),
            }
        }
        if let Some(v) = uniform_vocab {
            self.dlrm.vocab_sizes = vec![v; self.dlrm.num_sparse];
        }
        // The model seed follows the run seed.
        self.dlrm.seed = self.seed;
        Ok(())
    }

    /// Parses `key=value` text. Blank lines and `#` comments are skipped.
    pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, RunError> {
        text.lines()
            .enumerate()
            .map(|(i, l)| (i, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .map(|(i, l)| {
                l.split_once('=')
                    .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                    .ok_or_else(|| RunError::Config(format!("line {}: expected key=value, got {l:?}", i + 1)))
            })
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self, RunError> {
        let pairs = Self::parse_pairs(text)?;
        let mut cfg = Self::default();
        cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "mode" => self.topology.to_string(),
            "num_workers" => self.num_workers.to_string(),
            "rounds" => self.rounds.to_string(),
            "local_batch_size" => self.local_batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "channel_mode" => self.channel_mode.to_string(),
            "num_dense" => self.dlrm.num_dense.to_string(),
            "num_sparse" => self.dlrm.num_sparse.to_string(),
            "vocab_sizes" => join(&self.dlrm.vocab_sizes),
            "embed_dim" => self.dlrm.embed_dim.to_string(),
            "bottom_mlp" => join(&self.dlrm.bottom_mlp_dims),
            "top_mlp" => join(&self.dlrm.top_mlp_dims),
            // `{:?}` on f64 is shortest round-trip.
            "learning_rate" => format!("{:?}", self.dlrm.learning_rate),
            "ps_addr" => self.ps_addr.clone(),
            "worker_addrs" => self.worker_addrs.join(","),
            "build_id" => self.build_id.clone(),
            "authority_key" => self.authority_key.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "allowed_measurements" => join(&self.extra_measurements),
            "handshake_timeout_ms" => self.handshake_timeout.as_millis().to_string(),
            "round_timeout_ms" => self.round_timeout.as_millis().to_string(),
            "export_params" => self.export_params.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    fn render(&self, keys: &[&str]) -> String {
        keys.iter().map(|k| format!("{k}={}\n", self.value_of(k))).collect()
    }

    /// Complete text form; `from_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        self.render(Self::KEYS)
    }

    /// The training recipe sent from chief to the other nodes.
    pub fn training_text(&self) -> String {
        self.render(Self::TRAINING_KEYS)
    }

    /// Overwrites the training recipe with one received from the chief.
    pub fn apply_training_text(&mut self, text: &str) -> Result<(), RunError> {
        let pairs = Self::parse_pairs(text)?;
        if let Some((k, _)) = pairs.iter().find(|(k, _)| !Self::TRAINING_KEYS.contains(&k.as_str())) {
            return Err(RunError::Config(format!("key {k:?} may not be set by the chief")));
        }
        self.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        self.validate()
    }

    /// Every setting except `channel_mode`, as a map; two runs that differ
    /// only in channel mode have equal maps.
    pub fn without_channel_mode(&self) -> BTreeMap<&'static str, String> {
        Self::KEYS.iter().filter(|k| **k != "channel_mode").map(|k| (*k, self.value_of(k))).collect()
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let fail = |m: &str| Err(RunError::Config(m.to_string()));
        if self.num_workers == 0 {
            return fail("num_workers must be at least 1");
        }
        if self.rounds == 0 {
            return fail("rounds must be at least 1");
        }
        if self.local_batch_size == 0 {
            return fail("local_batch_size must be at least 1");
        }
        if self.handshake_timeout.is_zero() || self.round_timeout.is_zero() {
            return fail("timeouts must be positive");
        }
        self.dlrm.validate().map_err(|e| RunError::Config(e.to_string()))
    }

    /// Extra checks for a deployed (multi-process) run in SDT mode.
    pub fn validate_sdt_addresses(&self) -> Result<(), RunError> {
        if self.topology == Topology::Sdt && self.worker_addrs.len() != self.num_workers as usize {
            return Err(RunError::Config(format!(
                "sdt mode needs {} worker_addrs, got {}",
                self.num_workers,
                self.worker_addrs.len()
            )));
        }
        Ok(())
    }
}
