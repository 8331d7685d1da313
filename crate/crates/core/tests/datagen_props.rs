use efl_core::datagen::{decode, encode, generate, shard, DataError, SyntheticSpec};
use proptest::prelude::*;

fn spec(n: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec { num_samples: n, seed, vocab_sizes: vec![50; 26], teacher_noise: 0.2, ..Default::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shards_partition_the_dataset(n in 1usize..60, k in 1usize..12, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let d = generate(&spec(n, seed)).unwrap();
        let shards = shard(&d, k).unwrap();
        prop_assert_eq!(shards.len(), k);
        let sizes: Vec<usize> = shards.iter().map(|s| s.records().len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let joined: Vec<_> = shards.iter().flat_map(|s| s.records().iter().cloned()).collect();
        prop_assert_eq!(&joined, &d.records);
        for (i, s) in shards.iter().enumerate() {
            prop_assert_eq!(s.worker_index, i);
            prop_assert_eq!(s.parent_digest(), d.spec_digest);
        }
    }

    #[test]
    fn round_trip(n in 1usize..30, seed in any::<u64>()) {
        let d = generate(&spec(n, seed)).unwrap();
        prop_assert_eq!(decode(&encode(&d)).unwrap(), d);
    }

    /// Mutating anything in the first 157 bytes (the whole header plus the
    /// start of the first record) either fails cleanly or decodes to a
    /// dataset whose records are all valid and whose count matches.
    #[test]
    fn header_mutations_never_misparse(
        seed in any::<u64>(),
        edits in proptest::collection::vec((0usize..157, any::<u8>()), 1..6),
    ) {
        let d = generate(&spec(4, seed)).unwrap();
        let mut bytes = encode(&d);
        for (at, v) in edits {
            bytes[at] = v;
        }
        match decode(&bytes) {
            Err(DataError::Format { offset, .. }) => prop_assert!((offset as usize) <= bytes.len()),
            Err(e) => prop_assert!(false, "unexpected error kind {e}"),
            Ok(parsed) => {
                let count = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
                prop_assert_eq!(parsed.records.len() as u64, count);
                for r in &parsed.records {
                    prop_assert!(r.label <= 1);
                    prop_assert_eq!(r.dense.len(), parsed.num_dense);
                    prop_assert!(r.sparse.iter().zip(&parsed.vocab_sizes).all(|(&s, &v)| s < v));
                }
            }
        }
    }
}

#[test]
fn noise_free_large_teacher_is_deterministic_in_features() {
    let a = generate(&SyntheticSpec { num_samples: 500, teacher_scale: 1e6, ..spec(0, 9) }).unwrap();
    let b = generate(&SyntheticSpec { num_samples: 500, teacher_scale: 1e6, teacher_noise: 0.0, ..spec(0, 9) }).unwrap();
    // Noise only moves the threshold away from ½; with huge logits the
    // label is the logit's sign either way.
    let agree = a.records.iter().zip(&b.records).filter(|(x, y)| x.label == y.label).count();
    assert_eq!(agree, 500);
}
