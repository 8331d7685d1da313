//! Native versus attested overhead measurement.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use crate::channel::ChannelMode;
use crate::datagen::Dataset;
use crate::orchestration::{run_local, LocalOptions, RunConfig, RunError, TrainReport};

#[derive(Clone, Debug)]
pub struct ModeTiming {
    pub mode: ChannelMode,
    /// Wall time of the whole run, including handshakes.
    pub total: Duration,
    /// Sum of the parameter server's per-round durations (no handshakes).
    pub rounds_total: Duration,
    pub mean_round: Duration,
    /// Parameter server time spent in handshakes, and their count.
    pub handshake: Duration,
    pub handshakes: u32,
    pub report: TrainReport,
}

#[derive(Clone, Debug)]
pub struct BenchResult {
    pub native: ModeTiming,
    pub attested: ModeTiming,
    /// attested total / native total.
    pub overhead_ratio: f64,
    /// attested per-round time / native per-round time.
    pub round_overhead_ratio: f64,
    /// Loss and accuracy columns bitwise equal, and equal final digests.
    pub parity: bool,
    /// Digest of every setting except the channel mode, equal for both runs.
    pub config_digest: [u8; 32],
}

fn config_digest(cfg: &RunConfig) -> [u8; 32] {
    let mut h = Sha256::new();
    for (k, v) in cfg.without_channel_mode() {
        h.update(format!("{k}={v}\n"));
    }
    h.finalize().into()
}

fn timed(cfg: &RunConfig, dataset: &Dataset) -> Result<ModeTiming, RunError> {
    let start = Instant::now();
    let out = run_local(cfg, dataset, &LocalOptions::default())?;
    let total = start.elapsed();
    let report = out.ps;
    let rounds_total: Duration = report.rounds.iter().map(|m| Duration::from_micros(m.duration_us)).sum();
    Ok(ModeTiming {
        mode: cfg.channel_mode,
        total,
        rounds_total,
        mean_round: rounds_total / report.rounds.len().max(1) as u32,
        handshake: report.handshake_time,
        handshakes: report.handshakes,
        report,
    })
}

/// Bitwise comparison of the math columns and final model of two runs.
pub fn reports_match(a: &TrainReport, b: &TrainReport) -> bool {
    a.final_digest == b.final_digest
        && a.rounds.len() == b.rounds.len()
        && a.rounds.iter().zip(&b.rounds).all(|(x, y)| {
            x.round == y.round && x.loss.to_bits() == y.loss.to_bits() && x.accuracy.to_bits() == y.accuracy.to_bits()
        })
}

/// Runs `cfg` natively and then attested, one after the other, in this
/// process.
pub fn bench(cfg: &RunConfig, dataset: &Dataset) -> Result<BenchResult, RunError> {
    let native_cfg = RunConfig { channel_mode: ChannelMode::Native, ..cfg.clone() };
    let attested_cfg = RunConfig { channel_mode: ChannelMode::Attested, ..cfg.clone() };
    let digest = config_digest(&native_cfg);
    assert_eq!(digest, config_digest(&attested_cfg), "bench runs differ in more than channel mode");

    let native = timed(&native_cfg, dataset)?;
    let attested = timed(&attested_cfg, dataset)?;
    let ratio = |a: Duration, n: Duration| a.as_secs_f64() / n.as_secs_f64().max(1e-9);
    Ok(BenchResult {
        overhead_ratio: ratio(attested.total, native.total),
        round_overhead_ratio: ratio(attested.rounds_total, native.rounds_total),
        parity: reports_match(&native.report, &attested.report),
        config_digest: digest,
        native,
        attested,
    })
}

impl BenchResult {
    pub fn to_csv(&self) -> String {
        let ms = |d: Duration| d.as_secs_f64() * 1000.0;
        let mut out = String::from("mode,total_ms,rounds_ms,mean_round_ms,handshake_ms,handshakes\n");
        for t in [&self.native, &self.attested] {
            let _ = writeln!(
                out,
                "{},{:.3},{:.3},{:.3},{:.3},{}",
                t.mode,
                ms(t.total),
                ms(t.rounds_total),
                ms(t.mean_round),
                ms(t.handshake),
                t.handshakes
            );
        }
        let _ = writeln!(out, "# overhead_ratio {:.4}", self.overhead_ratio);
        let _ = writeln!(out, "# round_overhead_ratio {:.4}", self.round_overhead_ratio);
        let _ = writeln!(out, "# parity {}", self.parity);
        let _ = writeln!(out, "# config_digest {}", hex::encode(self.config_digest));
        out
    }

    pub fn summary(&self) -> String {
        let ms = |d: Duration| d.as_secs_f64() * 1000.0;
        let per_handshake = |t: &ModeTiming| ms(t.handshake) / t.handshakes.max(1) as f64;
        format!(
            "native:   {:.1} ms total, {:.3} ms per round\n\
             attested: {:.1} ms total, {:.3} ms per round, {:.3} ms per handshake\n\
             overhead: {:.3}x end to end, {:.3}x per round\n\
             parity:   {}\n\
             Enclaves are simulated here: there is no EPC paging or library OS cost,\n\
             so these ratios measure channel cryptography only and are expected to\n\
             sit well below hardware enclave overheads.\n",
            ms(self.native.total),
            ms(self.native.mean_round),
            ms(self.attested.total),
            ms(self.attested.mean_round),
            per_handshake(&self.attested),
            self.overhead_ratio,
            self.round_overhead_ratio,
            if self.parity { "loss and accuracy identical" } else { "MISMATCH" },
        )
    }
}
