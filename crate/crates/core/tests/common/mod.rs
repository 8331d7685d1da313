//! Test-only oracles shared by the integration and acceptance suites.
#![allow(dead_code)]

use efl_core::dlrm::{bce_loss, forward, DlrmConfig, ModelParams, Record};
use rand::Rng;

pub const FD_STEP: f64 = 1e-3;
/// Denominator floor for relative errors so exact zeros compare cleanly.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// A random small but complete config: every DLRM component present.
pub fn random_tiny_config<R: Rng>(rng: &mut R) -> DlrmConfig {
    let d = rng.gen_range(1..=4);
    let num_sparse = rng.gen_range(1..=3);
    let mut bottom: Vec<usize> = (0..rng.gen_range(0..=1)).map(|_| rng.gen_range(2..=5)).collect();
    bottom.push(d);
    let mut top: Vec<usize> = (0..rng.gen_range(1..=2)).map(|_| rng.gen_range(2..=5)).collect();
    top.push(1);
    DlrmConfig {
        num_dense: rng.gen_range(1..=4),
        num_sparse,
        vocab_sizes: (0..num_sparse).map(|_| rng.gen_range(1..=10)).collect(),
        embed_dim: d,
        bottom_mlp_dims: bottom,
        top_mlp_dims: top,
        learning_rate: 0.1,
        seed: rng.gen(),
    }
}

pub fn random_batch<R: Rng>(rng: &mut R, cfg: &DlrmConfig, n: usize) -> Vec<Record> {
    (0..n)
        .map(|_| Record {
            dense: (0..cfg.num_dense).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            sparse: cfg.vocab_sizes.iter().map(|&v| rng.gen_range(0..v as u32)).collect(),
            label: rng.gen_range(0..=1),
        })
        .collect()
}

/// Every parameter as one flat vector: embedding tables (all rows), then
/// bottom and top layers (weights then bias).
pub fn flatten(p: &ModelParams<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    for t in &p.embeddings {
        out.extend_from_slice(&t.data);
    }
    for l in p.bottom_mlp.iter().chain(&p.top_mlp) {
        out.extend_from_slice(&l.weight);
        out.extend_from_slice(&l.bias);
    }
    out
}

pub fn unflatten(template: &ModelParams<f64>, flat: &[f64]) -> ModelParams<f64> {
    let mut p = template.clone();
    let mut k = 0;
    let mut take = |dst: &mut Vec<f64>| {
        let n = dst.len();
        dst.copy_from_slice(&flat[k..k + n]);
        k += n;
    };
    for t in &mut p.embeddings {
        take(&mut t.data);
    }
    for l in p.bottom_mlp.iter_mut().chain(p.top_mlp.iter_mut()) {
        take(&mut l.weight);
        take(&mut l.bias);
    }
    p
}

/// Replaces every parameter (biases included) with a uniform draw in
/// ±`scale`, so no pre-activation sits exactly on a ReLU kink.
pub fn randomize<R: Rng>(rng: &mut R, p: &ModelParams<f64>, scale: f64) -> ModelParams<f64> {
    let flat: Vec<f64> = flatten(p).iter().map(|_| rng.gen_range(-scale..scale)).collect();
    unflatten(p, &flat)
}

/// The analytic gradient laid out like [`flatten`], with embedding tables
/// expanded densely (rows absent from `sparse_grads` are zero).
pub fn flatten_grad(p: &ModelParams<f64>, g: &efl_core::dlrm::GradientDelta<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    for (t, table) in p.embeddings.iter().enumerate() {
        let mut dense = vec![0.0; table.data.len()];
        for s in g.sparse_grads.iter().filter(|s| s.table as usize == t) {
            let r = s.row as usize;
            dense[r * table.dim..(r + 1) * table.dim].copy_from_slice(&s.grad);
        }
        out.extend(dense);
    }
    for l in g.bottom_mlp.iter().chain(&g.top_mlp) {
        out.extend_from_slice(&l.weight);
        out.extend_from_slice(&l.bias);
    }
    out
}

fn loss_and_pattern(p: &ModelParams<f64>, batch: &[Record]) -> (f64, Vec<bool>) {
    let (probs, cache) = forward(p, batch).unwrap();
    let labels: Vec<u8> = batch.iter().map(|r| r.label).collect();
    (bce_loss(&probs, &labels).unwrap(), cache.relu_pattern())
}

#[derive(Debug, Default, Clone)]
pub struct GradCheck {
    pub coords: usize,
    pub compared: usize,
    pub within_1e4: usize,
    pub max_rel: f64,
    /// Coordinates whose 1e-3 probes crossed a ReLU kink and were
    /// re-probed with a smaller step.
    pub refined: usize,
    /// Coordinates where no step kept both probes off the kink.
    pub unresolved: usize,
}

impl GradCheck {
    pub fn merge(&mut self, o: &GradCheck) {
        self.coords += o.coords;
        self.compared += o.compared;
        self.within_1e4 += o.within_1e4;
        self.max_rel = self.max_rel.max(o.max_rel);
        self.refined += o.refined;
        self.unresolved += o.unresolved;
    }

    pub fn frac_within_1e4(&self) -> f64 {
        self.within_1e4 as f64 / self.compared.max(1) as f64
    }
}

/// Central finite differences over every parameter coordinate, compared
/// against `analytic` (laid out like [`flatten`]).
///
/// The step is `FD_STEP`; when a probe flips any ReLU unit the difference
/// quotient straddles a kink, so the step shrinks by 10x until both probes
/// keep the activation pattern of the base point.
pub fn finite_difference_check(p: &ModelParams<f64>, batch: &[Record], analytic: &[f64]) -> GradCheck {
    let base = flatten(p);
    assert_eq!(base.len(), analytic.len());
    let (_, pattern) = loss_and_pattern(p, batch);
    let mut out = GradCheck { coords: base.len(), ..Default::default() };
    let mut probe = base.clone();
    for k in 0..base.len() {
        let mut numeric = None;
        for (attempt, h) in [FD_STEP, 1e-4, 1e-5, 1e-6, 1e-7].into_iter().enumerate() {
            probe[k] = base[k] + h;
            let (plus, pat_plus) = loss_and_pattern(&unflatten(p, &probe), batch);
            probe[k] = base[k] - h;
            let (minus, pat_minus) = loss_and_pattern(&unflatten(p, &probe), batch);
            probe[k] = base[k];
            if pat_plus == pattern && pat_minus == pattern {
                if attempt > 0 {
                    out.refined += 1;
                }
                numeric = Some((plus - minus) / (2.0 * h));
                break;
            }
        }
        let Some(numeric) = numeric else {
            out.unresolved += 1;
            continue;
        };
        let e = rel_err(analytic[k], numeric);
        out.compared += 1;
        if e <= 1e-4 {
            out.within_1e4 += 1;
        }
        out.max_rel = out.max_rel.max(e);
    }
    out
}

/// A small model and matching synthetic data for whole-run tests.
pub fn small_run(
    topology: efl_core::orchestration::Topology,
    workers: u32,
    rounds: u64,
    samples: usize,
) -> (efl_core::orchestration::RunConfig, efl_core::datagen::Dataset) {
    use efl_core::channel::ChannelMode;
    use efl_core::datagen::{generate, SyntheticSpec};
    use efl_core::orchestration::RunConfig;
    use std::time::Duration;

    let dlrm = DlrmConfig {
        num_dense: 4,
        num_sparse: 3,
        vocab_sizes: vec![20; 3],
        embed_dim: 4,
        bottom_mlp_dims: vec![8, 4],
        top_mlp_dims: vec![8, 1],
        learning_rate: 0.3,
        seed: 11,
    };
    let cfg = RunConfig {
        topology,
        num_workers: workers,
        rounds,
        local_batch_size: 16,
        seed: 11,
        channel_mode: ChannelMode::Attested,
        dlrm,
        handshake_timeout: Duration::from_secs(10),
        round_timeout: Duration::from_secs(30),
        ..RunConfig::default()
    };
    let spec = SyntheticSpec {
        num_samples: samples,
        num_dense: 4,
        num_sparse: 3,
        vocab_sizes: vec![20; 3],
        seed: 3,
        ..SyntheticSpec::default()
    };
    (cfg, generate(&spec).unwrap())
}

/// A writer hook that splits each hooked node's egress into frames and
/// hands `(owner, tag, wire_len, body)` to `f`.
pub fn observer_hook<F>(f: F) -> efl_core::orchestration::WriterHook
where
    F: Fn(efl_core::protocol::NodeId, u8, usize, &[u8]) + Send + Sync + 'static,
{
    use std::io::{self, Write};
    use std::sync::Arc;

    struct Observe {
        inner: Box<dyn Write + Send>,
        owner: efl_core::protocol::NodeId,
        pending: Vec<u8>,
        f: Arc<dyn Fn(efl_core::protocol::NodeId, u8, usize, &[u8]) + Send + Sync>,
    }
    impl Write for Observe {
        fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
            let n = self.inner.write(buf)?;
            self.pending.extend_from_slice(&buf[..n]);
            while self.pending.len() >= 5 {
                let total = 5 + u32::from_le_bytes(self.pending[..4].try_into().unwrap()) as usize;
                if self.pending.len() < total {
                    break;
                }
                (self.f)(self.owner, self.pending[4], total, &self.pending[5..total]);
                self.pending.drain(..total);
            }
            Ok(n)
        }
        fn flush(&mut self) -> io::Result<()> {
            self.inner.flush()
        }
    }
    let f: Arc<dyn Fn(efl_core::protocol::NodeId, u8, usize, &[u8]) + Send + Sync> = Arc::new(f);
    Arc::new(move |owner, inner| Box::new(Observe { inner, owner, pending: Vec::new(), f: f.clone() }))
}

fn random_layers<R: Rng>(rng: &mut R) -> Vec<efl_core::dlrm::Linear<f32>> {
    (0..rng.gen_range(0..3))
        .map(|_| {
            let (i, o) = (rng.gen_range(0..4), rng.gen_range(0..4));
            efl_core::dlrm::Linear {
                in_dim: i,
                out_dim: o,
                weight: (0..i * o).map(|_| rng.gen_range(-1e3f32..1e3)).collect(),
                bias: (0..o).map(|_| rng.gen()).collect(),
            }
        })
        .collect()
}

fn random_params<R: Rng>(rng: &mut R) -> ModelParams<f32> {
    ModelParams {
        embeddings: (0..rng.gen_range(0..3))
            .map(|_| {
                let (rows, dim) = (rng.gen_range(0..4), rng.gen_range(0..4));
                efl_core::dlrm::EmbeddingTable { rows, dim, data: (0..rows * dim).map(|_| rng.gen()).collect() }
            })
            .collect(),
        bottom_mlp: random_layers(rng),
        top_mlp: random_layers(rng),
        version: rng.gen(),
    }
}

fn random_text<R: Rng>(rng: &mut R) -> String {
    let alphabet = ['a', 'Z', '=', '\n', ' ', 'é', '✓', '0'];
    (0..rng.gen_range(0..20)).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
}

/// A random well-formed message of any kind.
pub fn random_message<R: Rng>(rng: &mut R) -> efl_core::protocol::Message {
    use efl_core::dlrm::{GradientDelta, SparseRowGrad};
    use efl_core::protocol::{Body, Message, NodeId, Role, RoundMetrics};

    let body = match rng.gen_range(0..9) {
        0 => Body::Register,
        1 => Body::RegisterAck { num_workers: rng.gen(), rounds: rng.gen() },
        2 => Body::ModelBroadcast { params: random_params(rng) },
        3 => {
            let dim = rng.gen_range(0..4);
            let mut keys: Vec<(u32, u32)> = (0..rng.gen_range(0..5)).map(|_| (rng.gen_range(0..3), rng.gen_range(0..50))).collect();
            keys.sort_unstable();
            keys.dedup();
            let grad = GradientDelta {
                bottom_mlp: random_layers(rng),
                top_mlp: random_layers(rng),
                sparse_grads: keys
                    .into_iter()
                    .map(|(table, row)| SparseRowGrad { table, row, grad: (0..dim).map(|_| rng.gen()).collect() })
                    .collect(),
                batch_size: rng.gen(),
            };
            Body::GradientPush { grad, loss: rng.gen(), eval_correct: rng.gen(), eval_total: rng.gen() }
        }
        4 => Body::GradientAck,
        5 => Body::ShardTransfer { worker_index: rng.gen(), data: (0..rng.gen_range(0..40)).map(|_| rng.gen()).collect() },
        6 => Body::ConfigTransfer { text: random_text(rng) },
        7 => Body::TrainComplete {
            params_digest: rng.gen(),
            metrics: (0..rng.gen_range(0..4))
                .map(|_| RoundMetrics { round: rng.gen(), loss: rng.gen(), accuracy: rng.gen(), duration_us: rng.gen() })
                .collect(),
            params: if rng.gen() { Some(random_params(rng)) } else { None },
        },
        _ => Body::Abort { code: rng.gen(), detail: random_text(rng) },
    };
    let role = [Role::ParameterServer, Role::Worker, Role::Chief][rng.gen_range(0..3)];
    Message::new(rng.gen(), NodeId { role, index: rng.gen() }, body)
}
