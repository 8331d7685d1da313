//! Synthetic Criteo-shaped click data, its binary file format, and
//! contiguous sharding across workers.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic "DLRMDS01" | version u16 = 1 | num_samples u64 | num_dense u16 | num_sparse u16
//! | num_sparse × vocab u32 | spec digest [32]
//! then per record: label u8 | num_dense × f32 | num_sparse × u32
//! ```
//!
//! With the default 13 dense and 26 sparse features a record is 157 bytes.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::dlrm::Record;

pub const MAGIC: &[u8; 8] = b"DLRMDS01";
pub const FORMAT_VERSION: u16 = 1;

/// Share of the teacher logit carried by each categorical bias, relative to
/// the dense weights. Small enough that the dense signal dominates.
const CATEGORICAL_WEIGHT: f64 = 0.03;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid synthetic spec: {0}")]
    Config(String),
    #[error("cannot shard: {0}")]
    Shard(String),
    #[error("malformed dataset at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_err<T>(offset: usize, reason: impl Into<String>) -> Result<T, DataError> {
    Err(DataError::Format { offset: offset as u64, reason: reason.into() })
}

/// Parameters of a synthetic dataset. Labels come from a hidden logistic
/// teacher: `label = 1` iff `sigmoid(w·(dense − ½) + Σ b[i][sparse[i]]) > t`
/// with threshold `t = ½ + teacher_noise·(u − ½)`, `u ~ U[0,1)` per sample.
/// At `teacher_noise = 0` labels are a deterministic function of features.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_samples: usize,
    pub num_dense: usize,
    pub num_sparse: usize,
    pub vocab_sizes: Vec<u32>,
    pub seed: u64,
    pub teacher_noise: f64,
    /// Magnitude of teacher weights; zero makes every logit zero.
    pub teacher_scale: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_samples: 10_000,
            num_dense: 13,
            num_sparse: 26,
            vocab_sizes: vec![1000; 26],
            seed: 0,
            teacher_noise: 0.0,
            teacher_scale: 4.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::Config(m));
        if self.num_samples == 0 {
            return fail("num_samples must be at least 1".into());
        }
        if self.num_dense == 0 || self.num_dense > u16::MAX as usize {
            return fail(format!("num_dense {} out of range", self.num_dense));
        }
        if self.num_sparse == 0 || self.num_sparse > u16::MAX as usize {
            return fail(format!("num_sparse {} out of range", self.num_sparse));
        }
        if self.vocab_sizes.len() != self.num_sparse {
            return fail(format!("{} vocab sizes for {} tables", self.vocab_sizes.len(), self.num_sparse));
        }
        if let Some(t) = self.vocab_sizes.iter().position(|&v| v == 0) {
            return fail(format!("vocab size of table {t} is zero"));
        }
        if !(0.0..1.0).contains(&self.teacher_noise) {
            return fail(format!("teacher_noise {} not in [0, 1)", self.teacher_noise));
        }
        if !(self.teacher_scale.is_finite() && self.teacher_scale >= 0.0) {
            return fail(format!("teacher_scale {} must be finite and non-negative", self.teacher_scale));
        }
        Ok(())
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"efl-synthetic-spec-v1");
        h.update((self.num_samples as u64).to_le_bytes());
        h.update((self.num_dense as u64).to_le_bytes());
        h.update((self.num_sparse as u64).to_le_bytes());
        for v in &self.vocab_sizes {
            h.update(v.to_le_bytes());
        }
        h.update(self.seed.to_le_bytes());
        h.update(self.teacher_noise.to_le_bytes());
        h.update(self.teacher_scale.to_le_bytes());
        h.finalize().into()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_dense: usize,
    pub vocab_sizes: Vec<u32>,
    pub records: Vec<Record>,
    /// Digest of the generating spec (or of the parent dataset for shards).
    pub spec_digest: [u8; 32],
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_sparse(&self) -> usize {
        self.vocab_sizes.len()
    }

    pub fn record_size(&self) -> usize {
        record_size(self.num_dense, self.num_sparse())
    }
}

fn record_size(num_dense: usize, num_sparse: usize) -> usize {
    1 + 4 * num_dense + 4 * num_sparse
}

fn header_size(num_sparse: usize) -> usize {
    8 + 2 + 8 + 2 + 2 + 4 * num_sparse + 32
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Deterministic synthetic dataset; a pure function of `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scale = spec.teacher_scale;
    let dense_w: Vec<f64> = (0..spec.num_dense).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
    let cat_b: Vec<Vec<f64>> = spec
        .vocab_sizes
        .iter()
        .map(|&v| (0..v).map(|_| scale * CATEGORICAL_WEIGHT * rng.gen_range(-1.0..1.0)).collect())
        .collect();

    let records = (0..spec.num_samples)
        .map(|_| {
            let dense: Vec<f32> = (0..spec.num_dense).map(|_| rng.gen::<f32>()).collect();
            let sparse: Vec<u32> = spec.vocab_sizes.iter().map(|&v| rng.gen_range(0..v)).collect();
            let u: f64 = rng.gen();
            let logit: f64 = dense.iter().zip(&dense_w).map(|(&x, &w)| w * (x as f64 - 0.5)).sum::<f64>()
                + sparse.iter().zip(&cat_b).map(|(&s, b)| b[s as usize]).sum::<f64>();
            let threshold = 0.5 + spec.teacher_noise * (u - 0.5);
            Record { dense, sparse, label: u8::from(sigmoid(logit) > threshold) }
        })
        .collect();

    Ok(Dataset {
        num_dense: spec.num_dense,
        vocab_sizes: spec.vocab_sizes.clone(),
        records,
        spec_digest: spec.digest(),
    })
}

/// One worker's contiguous slice of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    pub worker_index: usize,
    /// The slice; its `spec_digest` is the parent dataset's digest.
    pub data: Dataset,
}

impl Shard {
    pub fn records(&self) -> &[Record] {
        &self.data.records
    }

    pub fn parent_digest(&self) -> [u8; 32] {
        self.data.spec_digest
    }
}

/// Splits `dataset` into `k` contiguous shards whose sizes differ by at most
/// one; the first `n mod k` shards get the extra record.
pub fn shard(dataset: &Dataset, k: usize) -> Result<Vec<Shard>, DataError> {
    let n = dataset.len();
    if k == 0 {
        return Err(DataError::Shard("shard count must be at least 1".into()));
    }
    if k > n {
        return Err(DataError::Shard(format!("{k} shards requested for {n} records")));
    }
    let (base, extra) = (n / k, n % k);
    let mut start = 0;
    Ok((0..k)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let records = dataset.records[start..start + len].to_vec();
            start += len;
            Shard {
                worker_index: i,
                data: Dataset {
                    num_dense: dataset.num_dense,
                    vocab_sizes: dataset.vocab_sizes.clone(),
                    records,
                    spec_digest: dataset.spec_digest,
                },
            }
        })
        .collect())
}

pub fn encode(dataset: &Dataset) -> Vec<u8> {
    let ns = dataset.num_sparse();
    let mut out = Vec::with_capacity(header_size(ns) + dataset.len() * dataset.record_size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    out.extend_from_slice(&(dataset.num_dense as u16).to_le_bytes());
    out.extend_from_slice(&(ns as u16).to_le_bytes());
    for v in &dataset.vocab_sizes {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&dataset.spec_digest);
    for r in &dataset.records {
        out.push(r.label);
        for x in &r.dense {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for s in &r.sparse {
            out.extend_from_slice(&s.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        if self.buf.len() - self.pos < n {
            return format_err(self.pos, format!("truncated {what}"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<Dataset, DataError> {
    let mut c = Cursor { buf, pos: 0 };
    let magic = c.take(8, "magic")?;
    if let Some(i) = magic.iter().zip(MAGIC).position(|(a, b)| a != b) {
        return format_err(i, "bad magic");
    }
    let version = c.u16("version")?;
    if version != FORMAT_VERSION {
        return format_err(8, format!("unsupported version {version}"));
    }
    let num_samples = c.u64("sample count")?;
    let num_dense = c.u16("dense count")? as usize;
    if num_dense == 0 {
        return format_err(18, "zero dense features");
    }
    let num_sparse = c.u16("sparse count")? as usize;
    if num_sparse == 0 {
        return format_err(20, "zero sparse features");
    }
    let mut vocab_sizes = Vec::with_capacity(num_sparse);
    for t in 0..num_sparse {
        let at = c.pos;
        let v = c.u32("vocab sizes")?;
        if v == 0 {
            return format_err(at, format!("vocab size of table {t} is zero"));
        }
        vocab_sizes.push(v);
    }
    let spec_digest: [u8; 32] = c.take(32, "digest")?.try_into().unwrap();

    let rec = record_size(num_dense, num_sparse);
    let body = buf.len() - c.pos;
    let complete = body / rec;
    if (complete as u64) < num_samples {
        return format_err(c.pos + complete * rec, format!("truncated record {complete} of {num_samples}"));
    }
    let expected_end = c.pos + num_samples as usize * rec;
    if buf.len() > expected_end {
        return format_err(expected_end, format!("{} trailing bytes", buf.len() - expected_end));
    }

    let mut records = Vec::with_capacity(num_samples as usize);
    for i in 0..num_samples as usize {
        let at = c.pos;
        let label = c.take(1, "label")?[0];
        if label > 1 {
            return format_err(at, format!("record {i} has label {label}"));
        }
        let mut dense = Vec::with_capacity(num_dense);
        for _ in 0..num_dense {
            let at = c.pos;
            let x = f32::from_le_bytes(c.take(4, "dense")?.try_into().unwrap());
            if !x.is_finite() {
                return format_err(at, format!("record {i} has non-finite dense value"));
            }
            dense.push(x);
        }
        let mut sparse = Vec::with_capacity(num_sparse);
        for (t, &vocab) in vocab_sizes.iter().enumerate() {
            let at = c.pos;
            let s = c.u32("sparse")?;
            if s >= vocab {
                return format_err(at, format!("record {i} table {t} index {s} >= vocab {vocab}"));
            }
            sparse.push(s);
        }
        records.push(Record { dense, sparse, label });
    }
    Ok(Dataset { num_dense, vocab_sizes, records, spec_digest })
}

pub fn write_file(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    fs::write(path, encode(dataset))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Dataset, DataError> {
    decode(&fs::read(path)?)
}
