//! `efl`: data generation, node entrypoints and the overhead benchmark.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use efl_core::attest::AttestationAuthority;
use efl_core::bench::bench;
use efl_core::datagen::{self, SyntheticSpec};
use efl_core::metrics::emit_metrics;
use efl_core::orchestration::{
    node_measurement, run_chief, run_local, run_ps, run_worker_hfl, run_worker_sdt, LocalOptions, RunConfig,
    RunError, Topology, TrainReport,
};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  I/O or data file error
  2  usage error (bad or missing flag)
  3  configuration error
  4  run aborted by the protocol (metrics end with `# ABORT <code>`)
  5  benchmark parity failure (native and attested runs disagree)

Configuration is resolved from, in ascending precedence: the --config file
(key=value lines), EFL_<KEY> environment variables (e.g. EFL_PS_ADDR), and
command-line flags. Unknown keys are rejected. EFL_LOG sets the log filter.";

#[derive(Parser, Debug)]
#[command(name = "efl", version, about = "Federated DLRM training over attested channels", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic click dataset.
    GenData(GenData),
    /// Create a simulated attestation authority key shared by all nodes.
    GenAuthority {
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve as the parameter server on ps_addr.
    RunPs(NodeArgs),
    /// Serve as worker `--index`.
    RunWorker {
        #[arg(long)]
        index: u32,
        /// Local shard (hfl only; in sdt mode the chief sends it).
        #[arg(long)]
        shard: Option<PathBuf>,
        #[command(flatten)]
        node: NodeArgs,
    },
    /// Run the sdt chief, which owns the dataset.
    RunChief {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        node: NodeArgs,
    },
    /// Run every node in this process.
    RunLocal {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        node: NodeArgs,
    },
    /// Run natively, then attested, and compare.
    Bench {
        #[arg(long)]
        data: PathBuf,
        /// Write the benchmark CSV here as well as printing it.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        node: NodeArgs,
    },
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 13)]
    num_dense: usize,
    #[arg(long, default_value_t = 26)]
    num_sparse: usize,
    /// One size for every table, or a comma-separated list.
    #[arg(long, default_value = "1000", value_delimiter = ',')]
    vocab: Vec<u32>,
    /// Probability of flipping each label.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 4.0)]
    teacher_scale: f64,
    /// Also write `<out>.shard<i>` for i in 0..K, one per hfl worker.
    #[arg(long)]
    shards: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct NodeArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Set any configuration key, e.g. `--set embed_dim=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Topology: hfl or sdt.
    #[arg(long)]
    mode: Option<String>,
    /// native or attested.
    #[arg(long)]
    channel_mode: Option<String>,
    #[arg(long)]
    workers: Option<u32>,
    #[arg(long)]
    rounds: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    ps_addr: Option<String>,
    /// Comma-separated worker listen addresses (sdt).
    #[arg(long)]
    worker_addrs: Option<String>,
    #[arg(long)]
    authority_key: Option<PathBuf>,
    /// Write the final model parameters here. Off by default.
    #[arg(long)]
    export: Option<PathBuf>,
    /// Write per-round metrics CSV here.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Run(#[from] RunError),
    #[error("{0}")]
    Data(#[from] datagen::DataError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Config(String),
    #[error("native and attested runs disagree")]
    Parity,
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) | CliError::Data(_) => 1,
            CliError::Run(RunError::Io(_) | RunError::Data(_)) => 1,
            CliError::Config(_) | CliError::Run(RunError::Config(_)) => 3,
            CliError::Run(RunError::Aborted { .. }) => 4,
            CliError::Parity => 5,
        }
    }
}

const ENV_PREFIX: &str = "EFL_";
const ENV_RESERVED: &[&str] = &["EFL_LOG"];

/// Merges file, environment and flags (later wins) and builds the config.
fn resolve(args: &NodeArgs, env: impl IntoIterator<Item = (String, String)>) -> Result<RunConfig, CliError> {
    let mut merged: BTreeMap<String, String> = BTreeMap::new();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        merged.extend(RunConfig::parse_pairs(&text)?);
    }
    for (k, v) in env {
        if let Some(key) = k.strip_prefix(ENV_PREFIX) {
            if !ENV_RESERVED.contains(&k.as_str()) {
                merged.insert(key.to_ascii_lowercase(), v);
            }
        }
    }
    let typed = [
        ("mode", args.mode.clone()),
        ("channel_mode", args.channel_mode.clone()),
        ("num_workers", args.workers.map(|v| v.to_string())),
        ("rounds", args.rounds.map(|v| v.to_string())),
        ("local_batch_size", args.batch.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
        ("learning_rate", args.learning_rate.map(|v| format!("{v:?}"))),
        ("ps_addr", args.ps_addr.clone()),
        ("worker_addrs", args.worker_addrs.clone()),
        ("authority_key", args.authority_key.as_ref().map(|p| p.display().to_string())),
        ("export_params", args.export.as_ref().map(|p| p.display().to_string())),
    ];
    for (k, v) in typed {
        if let Some(v) = v {
            merged.insert(k.to_string(), v);
        }
    }
    for s in &args.set {
        let (k, v) = s.split_once('=').ok_or_else(|| CliError::Config(format!("--set {s:?}: expected KEY=VALUE")))?;
        merged.insert(k.trim().to_string(), v.trim().to_string());
    }
    let mut cfg = RunConfig::default();
    cfg.apply(merged.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_from_process_env(args: &NodeArgs) -> Result<RunConfig, CliError> {
    resolve(args, std::env::vars())
}

/// Writes metrics for a finished or aborted run and passes the result on.
fn finish(result: Result<TrainReport, RunError>, metrics: Option<&Path>) -> Result<(), CliError> {
    let (report, abort) = match &result {
        Ok(r) => (r, None),
        Err(RunError::Aborted { code, partial, .. }) => (&**partial, Some(*code)),
        Err(_) => return result.map(|_| ()).map_err(CliError::from),
    };
    if let Some(path) = metrics {
        emit_metrics(report, abort, path)?;
    }
    match report.rounds.last() {
        Some(last) => println!(
            "{} rounds, final loss {:.6}, held-out accuracy {:.4}",
            report.rounds.len(),
            last.loss,
            last.accuracy
        ),
        None => println!("no rounds completed"),
    }
    if let Some(d) = report.final_digest {
        println!("params digest {}", hex::encode(d));
    }
    result.map(|_| ()).map_err(CliError::from)
}

fn gen_data(a: &GenData) -> Result<(), CliError> {
    let vocab_sizes = if a.vocab.len() == 1 { vec![a.vocab[0]; a.num_sparse] } else { a.vocab.clone() };
    let spec = SyntheticSpec {
        num_samples: a.samples,
        num_dense: a.num_dense,
        num_sparse: a.num_sparse,
        vocab_sizes,
        seed: a.seed,
        teacher_noise: a.noise,
        teacher_scale: a.teacher_scale,
    };
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let data = datagen::generate(&spec)?;
    datagen::write_file(&data, &a.out)?;
    println!("wrote {} records to {}", data.len(), a.out.display());
    if let Some(k) = a.shards {
        for s in datagen::shard(&data, k).map_err(|e| CliError::Config(e.to_string()))? {
            let path = PathBuf::from(format!("{}.shard{}", a.out.display(), s.worker_index));
            datagen::write_file(&s.data, &path)?;
            println!("wrote {} records to {}", s.data.len(), path.display());
        }
    }
    Ok(())
}

fn gen_authority(out: &Path) -> Result<(), CliError> {
    let authority = AttestationAuthority::generate();
    authority.save_secret(out).map_err(|e| CliError::Config(format!("{}: {e}", out.display())))?;
    println!("authority public key {}", hex::encode(authority.public_key().to_bytes()));
    for t in [Topology::Hfl, Topology::Sdt] {
        let cfg = RunConfig { topology: t, ..RunConfig::default() };
        println!("{t} node measurement {}", hex::encode(node_measurement(&cfg).0));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::GenAuthority { out } => gen_authority(&out),
        Command::RunPs(node) => {
            let cfg = resolve_from_process_env(&node)?;
            finish(run_ps(&cfg).map(|o| o.report), node.metrics.as_deref())
        }
        Command::RunWorker { index, shard, node } => {
            let cfg = resolve_from_process_env(&node)?;
            let report = match (cfg.topology, shard) {
                (Topology::Hfl, Some(path)) => run_worker_hfl(&cfg, index, &path),
                (Topology::Hfl, None) => return Err(CliError::Config("hfl workers need --shard".into())),
                (Topology::Sdt, Some(_)) => {
                    return Err(CliError::Config("sdt workers receive their shard from the chief; drop --shard".into()))
                }
                (Topology::Sdt, None) => run_worker_sdt(&cfg, index),
            };
            finish(report, node.metrics.as_deref())
        }
        Command::RunChief { data, node } => {
            let cfg = resolve_from_process_env(&node)?;
            finish(run_chief(&cfg, &data).map(|o| o.report), node.metrics.as_deref())
        }
        Command::RunLocal { data, node } => {
            let cfg = resolve_from_process_env(&node)?;
            let dataset = datagen::read_file(&data)?;
            finish(run_local(&cfg, &dataset, &LocalOptions::default()).map(|o| o.ps), node.metrics.as_deref())
        }
        Command::Bench { data, out, node } => {
            let mut cfg = resolve_from_process_env(&node)?;
            cfg.export_params = None;
            let dataset = datagen::read_file(&data)?;
            let result = bench(&cfg, &dataset)?;
            let csv = result.to_csv();
            print!("{csv}\n{}", result.summary());
            if let Some(path) = out {
                std::fs::write(path, &csv)?;
            }
            if let Some(path) = &node.metrics {
                emit_metrics(&result.attested.report, None, path)?;
            }
            if result.parity {
                Ok(())
            } else {
                Err(CliError::Parity)
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EFL_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(argv: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("efl").chain(argv.iter().copied())).unwrap()
    }

    fn node(cli: Cli) -> NodeArgs {
        match cli.command {
            Command::RunPs(n) | Command::RunLocal { node: n, .. } => n,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn flags_beat_env_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        std::fs::write(&file, "rounds=7\nseed=1\nps_addr=10.0.0.1:1\nnum_workers=3\n").unwrap();
        let n = node(args(&["run-ps", "--config", file.to_str().unwrap(), "--seed", "9"]));
        let env = [("EFL_SEED".into(), "5".into()), ("EFL_PS_ADDR".into(), "10.0.0.2:2".into())];
        let cfg = resolve(&n, env).unwrap();
        assert_eq!((cfg.rounds, cfg.num_workers), (7, 3));
        assert_eq!(cfg.ps_addr, "10.0.0.2:2");
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let n = node(args(&["run-ps", "--set", "colour=blue"]));
        assert_eq!(resolve(&n, []).unwrap_err().exit_code(), 3);
        let n = node(args(&["run-ps"]));
        assert_eq!(resolve(&n, [("EFL_COLOUR".into(), "x".into())]).unwrap_err().exit_code(), 3);
        assert!(resolve(&n, [("EFL_LOG".into(), "debug".into()), ("HOME".into(), "/".into())]).is_ok());
    }

    #[test]
    fn gen_data_requires_out() {
        assert!(Cli::try_parse_from(["efl", "gen-data", "--samples", "1000", "--seed", "7", "--out", "d.bin"]).is_ok());
        let err = Cli::try_parse_from(["efl", "gen-data", "--samples", "1000"]).unwrap_err();
        assert!(err.to_string().contains("--out"));
        assert!(Cli::try_parse_from(["efl", "run-ps", "--no-such-flag"]).is_err());
    }
}
