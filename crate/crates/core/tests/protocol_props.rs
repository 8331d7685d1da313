mod common;

use common::*;
use efl_core::dlrm::{backward, forward, init_params, GradientDelta, ModelParams, Record};
use efl_core::protocol::{aggregate, AggregationError, Message};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grad_of(p: &ModelParams<f32>, batch: &[Record]) -> GradientDelta<f32> {
    let labels: Vec<u8> = batch.iter().map(|r| r.label).collect();
    let (_, cache) = forward(p, batch).unwrap();
    backward(p, &cache, &labels).unwrap()
}

/// Dense coordinates followed by a dense copy of every embedding table.
fn dense_view(p: &ModelParams<f32>, g: &GradientDelta<f32>) -> Vec<f64> {
    let mut v: Vec<f64> =
        g.bottom_mlp.iter().chain(&g.top_mlp).flat_map(|l| l.weight.iter().chain(&l.bias)).map(|&x| x as f64).collect();
    let offset = v.len();
    let mut starts = Vec::new();
    let mut at = offset;
    for t in &p.embeddings {
        starts.push(at);
        at += t.data.len();
    }
    v.resize(at, 0.0);
    for s in &g.sparse_grads {
        let base = starts[s.table as usize] + s.row as usize * s.grad.len();
        for (k, &x) in s.grad.iter().enumerate() {
            v[base + k] = x as f64;
        }
    }
    v
}

fn setup(seed: u64, workers: usize) -> (ModelParams<f32>, Vec<Vec<Record>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = random_tiny_config(&mut rng);
    let p = randomize(&mut rng, &init_params(&cfg).unwrap(), 0.8).cast::<f32>();
    let batches = (0..workers)
        .map(|_| {
            let n = rng.gen_range(1..=8);
            random_batch(&mut rng, &cfg, n)
        })
        .collect();
    (p, batches)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn messages_round_trip(seed in any::<u64>()) {
        let m = random_message(&mut ChaCha8Rng::seed_from_u64(seed));
        let bytes = m.encode();
        prop_assert_eq!(Message::decode(&bytes).unwrap(), m);
    }

    #[test]
    fn every_strict_prefix_is_rejected(seed in any::<u64>()) {
        let bytes = random_message(&mut ChaCha8Rng::seed_from_u64(seed)).encode();
        let step = (bytes.len() / 64).max(1);
        for cut in (0..bytes.len()).step_by(step) {
            let err = Message::decode(&bytes[..cut]).unwrap_err();
            prop_assert!(err.offset <= cut);
        }
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
        let _ = Message::decode(&bytes);
    }

    #[test]
    fn aggregate_matches_f64_weighted_mean(seed in any::<u64>(), k in 1usize..=5) {
        let (p, batches) = setup(seed, k);
        let grads: Vec<_> = batches.iter().map(|b| grad_of(&p, b)).collect();
        let refs: Vec<_> = grads.iter().collect();
        let agg = aggregate(&refs).unwrap();
        let total: f64 = grads.iter().map(|g| g.batch_size as f64).sum();
        prop_assert_eq!(agg.batch_size as f64, total);
        let mut oracle = vec![0.0; dense_view(&p, &agg).len()];
        for g in &grads {
            for (o, x) in oracle.iter_mut().zip(dense_view(&p, g)) {
                *o += g.batch_size as f64 * x / total;
            }
        }
        for (a, o) in dense_view(&p, &agg).into_iter().zip(oracle) {
            prop_assert!((a - o).abs() <= 1e-7 * o.abs() + 1e-12, "{} vs {}", a, o);
        }
        // Sparse rows are exactly the union of the workers' rows.
        let mut union: Vec<_> = grads.iter().flat_map(|g| g.sparse_grads.iter().map(|s| (s.table, s.row))).collect();
        union.sort();
        union.dedup();
        let got: Vec<_> = agg.sparse_grads.iter().map(|s| (s.table, s.row)).collect();
        prop_assert_eq!(got, union);
    }

    #[test]
    fn aggregate_of_shards_is_gradient_of_union(seed in any::<u64>(), k in 1usize..=4) {
        let (p, batches) = setup(seed, k);
        let grads: Vec<_> = batches.iter().map(|b| grad_of(&p, b)).collect();
        let agg = aggregate(&grads.iter().collect::<Vec<_>>()).unwrap();
        let union: Vec<Record> = batches.concat();
        let central = grad_of(&p, &union);
        let (a, c) = (dense_view(&p, &agg), dense_view(&p, &central));
        let diff = a.iter().zip(&c).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        // f32 rounding scales with the terms being summed, not with their
        // (possibly cancelling) sum.
        let scale = grads
            .iter()
            .map(|g| dense_view(&p, g).iter().map(|y| y * y).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        prop_assert!(diff <= 1e-6 * scale, "{} / {}", diff, scale);
    }

    #[test]
    fn identical_deltas_aggregate_to_themselves(seed in any::<u64>(), k in 1usize..=4) {
        let (p, batches) = setup(seed, 1);
        let g = grad_of(&p, &batches[0]);
        let mut copies = vec![g.clone(); k];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in &mut copies {
            c.batch_size = rng.gen_range(1..100);
        }
        let agg = aggregate(&copies.iter().collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(agg.bottom_mlp, g.bottom_mlp);
        prop_assert_eq!(agg.top_mlp, g.top_mlp);
        prop_assert_eq!(agg.sparse_grads, g.sparse_grads);
    }
}

#[test]
fn degenerate_inputs_are_refused() {
    assert_eq!(aggregate(&[]).unwrap_err(), AggregationError::Empty);
    let (p, batches) = setup(1, 1);
    let mut g = grad_of(&p, &batches[0]);
    g.batch_size = 0;
    assert_eq!(aggregate(&[&g]).unwrap_err(), AggregationError::ZeroBatch);
    g.batch_size = 1;
    let mut h = g.clone();
    h.top_mlp.pop();
    assert!(matches!(aggregate(&[&g, &h]), Err(AggregationError::Shape(_))));
}
