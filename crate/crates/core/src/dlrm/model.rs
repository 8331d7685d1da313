use std::collections::BTreeMap;

use super::{DlrmError, GradientDelta, Linear, ModelParams, Scalar, SparseRowGrad};

/// Probabilities are clipped to `[BCE_EPSILON, 1 - BCE_EPSILON]` before the log.
pub const BCE_EPSILON: f64 = 1e-7;

/// One training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub dense: Vec<f32>,
    pub sparse: Vec<u32>,
    pub label: u8,
}

/// Inputs and pre-activations of one MLP layer for a whole batch,
/// stored row-major `batch × width`.
#[derive(Clone, Debug)]
struct LayerTrace<T> {
    input: Vec<T>,
    pre: Vec<T>,
}

/// Intermediates retained by [`forward`] for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    version: u64,
    batch_size: usize,
    sparse: Vec<Vec<u32>>,
    bottom: Vec<LayerTrace<T>>,
    /// Per sample: the dense output followed by the looked-up embeddings,
    /// `(num_sparse + 1) × d` values.
    vectors: Vec<T>,
    top: Vec<LayerTrace<T>>,
    probs: Vec<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Sign pattern (`pre > 0`) of every ReLU unit in both MLPs.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let hidden = |traces: &[LayerTrace<T>]| -> Vec<bool> {
            let n = traces.len().saturating_sub(1);
            traces[..n].iter().flat_map(|t| t.pre.iter().map(|&v| v > T::zero())).collect()
        };
        let mut pattern = hidden(&self.bottom);
        pattern.extend(hidden(&self.top));
        pattern
    }
}

fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Logistic function kept strictly inside (0, 1) even where the
/// floating-point result would round to an endpoint.
fn sigmoid<T: Scalar>(x: T) -> T {
    let p = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let half_ulp = T::epsilon() / T::from_f64(2.0);
    p.max(T::min_positive_value()).min(T::one() - half_ulp)
}

/// Runs `input` (batch × in_dim) through `layers`, ReLU on every layer but
/// the last. Returns the final outputs and the per-layer trace.
fn mlp_forward<T: Scalar>(layers: &[Linear<T>], input: Vec<T>, batch: usize) -> (Vec<T>, Vec<LayerTrace<T>>) {
    let mut traces = Vec::with_capacity(layers.len());
    let mut x = input;
    for (l, layer) in layers.iter().enumerate() {
        let mut pre = vec![T::zero(); batch * layer.out_dim];
        for s in 0..batch {
            let xs = &x[s * layer.in_dim..(s + 1) * layer.in_dim];
            for o in 0..layer.out_dim {
                let w = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                let mut acc = layer.bias[o];
                for (&wi, &xi) in w.iter().zip(xs) {
                    acc = acc + wi * xi;
                }
                pre[s * layer.out_dim + o] = acc;
            }
        }
        let out = if l + 1 < layers.len() {
            pre.iter().map(|&v| relu(v)).collect()
        } else {
            pre.clone()
        };
        traces.push(LayerTrace { input: x, pre });
        x = out;
    }
    (x, traces)
}

/// Backpropagates `grad_out` (batch × last out_dim) through `layers`,
/// writing parameter gradients into `grads`. Returns the gradient with
/// respect to the MLP input.
fn mlp_backward<T: Scalar>(
    layers: &[Linear<T>],
    traces: &[LayerTrace<T>],
    grads: &mut [Linear<T>],
    mut grad_out: Vec<T>,
    batch: usize,
) -> Vec<T> {
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let trace = &traces[l];
        let g = &mut grads[l];
        let mut grad_in = vec![T::zero(); batch * layer.in_dim];
        for s in 0..batch {
            let xs = &trace.input[s * layer.in_dim..(s + 1) * layer.in_dim];
            let gin = &mut grad_in[s * layer.in_dim..(s + 1) * layer.in_dim];
            for o in 0..layer.out_dim {
                let go = grad_out[s * layer.out_dim + o];
                if go == T::zero() {
                    continue;
                }
                g.bias[o] = g.bias[o] + go;
                let w = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                let gw = &mut g.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                for i in 0..layer.in_dim {
                    gw[i] = gw[i] + go * xs[i];
                    gin[i] = gin[i] + go * w[i];
                }
            }
        }
        if l > 0 {
            // The input of layer l is relu(pre of layer l-1).
            let prev_pre = &traces[l - 1].pre;
            for (gi, &p) in grad_in.iter_mut().zip(prev_pre) {
                if p <= T::zero() {
                    *gi = T::zero();
                }
            }
        }
        grad_out = grad_in;
    }
    grad_out
}

fn validate_batch<T: Scalar>(params: &ModelParams<T>, batch: &[Record]) -> Result<(), DlrmError> {
    if batch.is_empty() {
        return Err(DlrmError::Shape("empty batch".into()));
    }
    let (nd, ns) = (params.num_dense(), params.num_sparse());
    for r in batch {
        if r.dense.len() != nd || r.sparse.len() != ns {
            return Err(DlrmError::Shape(format!(
                "record has {} dense / {} sparse features, model expects {nd} / {ns}",
                r.dense.len(),
                r.sparse.len()
            )));
        }
        for (t, &idx) in r.sparse.iter().enumerate() {
            let vocab = params.embeddings[t].rows;
            if idx as usize >= vocab {
                return Err(DlrmError::Index { table: t, index: idx as usize, vocab });
            }
        }
    }
    Ok(())
}

/// Click probabilities for `batch` plus the cache needed by [`backward`].
///
/// Per sample: the bottom MLP maps the dense features to a d-vector, each
/// categorical index selects an embedding row, all pairwise dot products
/// among these `num_sparse + 1` vectors (upper triangle, no self terms) are
/// concatenated after the dense vector, and the top MLP produces a logit.
pub fn forward<T: Scalar>(params: &ModelParams<T>, batch: &[Record]) -> Result<(Vec<T>, ForwardCache<T>), DlrmError> {
    params.check_shapes()?;
    validate_batch(params, batch)?;
    let b = batch.len();
    let d = params.embed_dim();
    let n = params.num_sparse() + 1;
    let pairs = n * (n - 1) / 2;

    let dense_in: Vec<T> = batch
        .iter()
        .flat_map(|r| r.dense.iter().map(|&v| T::from_f64(v as f64)))
        .collect();
    let (z, bottom) = mlp_forward(&params.bottom_mlp, dense_in, b);

    let mut vectors = Vec::with_capacity(b * n * d);
    let mut top_in = Vec::with_capacity(b * (d + pairs));
    for (s, rec) in batch.iter().enumerate() {
        let base = vectors.len();
        vectors.extend_from_slice(&z[s * d..(s + 1) * d]);
        for (t, &idx) in rec.sparse.iter().enumerate() {
            vectors.extend_from_slice(params.embeddings[t].row(idx as usize));
        }
        let vs = &vectors[base..];
        top_in.extend_from_slice(&vs[..d]);
        for i in 0..n {
            for j in i + 1..n {
                let dot = vs[i * d..(i + 1) * d]
                    .iter()
                    .zip(&vs[j * d..(j + 1) * d])
                    .fold(T::zero(), |acc, (&a, &c)| acc + a * c);
                top_in.push(dot);
            }
        }
    }

    let (logits, top) = mlp_forward(&params.top_mlp, top_in, b);
    let probs: Vec<T> = logits.iter().map(|&x| sigmoid(x)).collect();
    let cache = ForwardCache {
        version: params.version,
        batch_size: b,
        sparse: batch.iter().map(|r| r.sparse.clone()).collect(),
        bottom,
        vectors,
        top,
        probs: probs.clone(),
    };
    Ok((probs, cache))
}

/// Mean binary cross-entropy with probabilities clipped to
/// `[BCE_EPSILON, 1 - BCE_EPSILON]`, accumulated in `f64`.
pub fn bce_loss<T: Scalar>(probs: &[T], labels: &[u8]) -> Result<f64, DlrmError> {
    if probs.len() != labels.len() {
        return Err(DlrmError::Shape(format!(
            "{} probabilities for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(DlrmError::Shape("empty batch".into()));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.as_f64().clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
            if y != 0 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Exact gradient of `bce_loss ∘ forward` with respect to every parameter,
/// mean-reduced over the batch.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    labels: &[u8],
) -> Result<GradientDelta<T>, DlrmError> {
    if cache.version != params.version {
        return Err(DlrmError::Cache { cache: cache.version, params: params.version });
    }
    let b = cache.batch_size;
    if labels.len() != b {
        return Err(DlrmError::Shape(format!("{} labels for batch of {b}", labels.len())));
    }
    let d = params.embed_dim();
    let n = params.num_sparse() + 1;
    let width = d + n * (n - 1) / 2;
    let scale = T::from_f64(1.0 / b as f64);

    let dlogit: Vec<T> = cache
        .probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| (p - if y != 0 { T::one() } else { T::zero() }) * scale)
        .collect();

    let mut grad = GradientDelta::zeros_like(params, b as u64);
    let dtop_in = mlp_backward(&params.top_mlp, &cache.top, &mut grad.top_mlp, dlogit, b);

    let mut dz = vec![T::zero(); b * d];
    let mut rows: BTreeMap<(u32, u32), Vec<T>> = BTreeMap::new();
    let mut dvec = vec![T::zero(); n * d];
    for s in 0..b {
        let g = &dtop_in[s * width..(s + 1) * width];
        let vs = &cache.vectors[s * n * d..(s + 1) * n * d];
        dvec.iter_mut().for_each(|v| *v = T::zero());
        dvec[..d].copy_from_slice(&g[..d]);
        let mut k = d;
        for i in 0..n {
            for j in i + 1..n {
                let gij = g[k];
                k += 1;
                if gij == T::zero() {
                    continue;
                }
                for e in 0..d {
                    dvec[i * d + e] = dvec[i * d + e] + gij * vs[j * d + e];
                    dvec[j * d + e] = dvec[j * d + e] + gij * vs[i * d + e];
                }
            }
        }
        dz[s * d..(s + 1) * d].copy_from_slice(&dvec[..d]);
        for (t, &row) in cache.sparse[s].iter().enumerate() {
            let acc = rows.entry((t as u32, row)).or_insert_with(|| vec![T::zero(); d]);
            for (a, &v) in acc.iter_mut().zip(&dvec[(t + 1) * d..(t + 2) * d]) {
                *a = *a + v;
            }
        }
    }
    mlp_backward(&params.bottom_mlp, &cache.bottom, &mut grad.bottom_mlp, dz, b);

    grad.sparse_grads = rows
        .into_iter()
        .map(|((table, row), grad)| SparseRowGrad { table, row, grad })
        .collect();
    Ok(grad)
}

/// Loss and number of correct predictions (threshold 0.5) over `records`.
pub fn evaluate<T: Scalar>(params: &ModelParams<T>, records: &[Record]) -> Result<(f64, u64), DlrmError> {
    let (probs, _) = forward(params, records)?;
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let loss = bce_loss(&probs, &labels)?;
    let correct = probs
        .iter()
        .zip(&labels)
        .filter(|(&p, &y)| (p.as_f64() > 0.5) == (y != 0))
        .count() as u64;
    Ok((loss, correct))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dlrm::{init_params, sgd_apply, DlrmConfig, EmbeddingTable};

    fn tiny_config() -> DlrmConfig {
        DlrmConfig {
            num_dense: 3,
            num_sparse: 2,
            vocab_sizes: vec![8, 4],
            embed_dim: 2,
            bottom_mlp_dims: vec![4, 2],
            top_mlp_dims: vec![3, 1],
            learning_rate: 0.1,
            seed: 5,
        }
    }

    fn rec(dense: &[f32], sparse: &[u32], label: u8) -> Record {
        Record { dense: dense.to_vec(), sparse: sparse.to_vec(), label }
    }

    /// d=2, one table of 3 rows, bottom 2→2→2, top 3→2→1.
    fn hand_model() -> ModelParams<f64> {
        ModelParams {
            embeddings: vec![EmbeddingTable {
                rows: 3,
                dim: 2,
                data: vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6],
            }],
            bottom_mlp: vec![
                Linear { in_dim: 2, out_dim: 2, weight: vec![0.5, -0.25, 0.75, 0.5], bias: vec![0.1, -0.3] },
                Linear { in_dim: 2, out_dim: 2, weight: vec![1.0, 0.5, -0.5, 2.0], bias: vec![0.0, 0.2] },
            ],
            top_mlp: vec![
                Linear {
                    in_dim: 3,
                    out_dim: 2,
                    weight: vec![0.3, -0.6, 1.2, -0.4, 0.8, 0.5],
                    bias: vec![0.05, 0.1],
                },
                Linear { in_dim: 2, out_dim: 1, weight: vec![1.5, -0.7], bias: vec![-0.2] },
            ],
            version: 0,
        }
    }

    #[test]
    fn hand_computed_probability() {
        // Values computed independently by hand-expanding the network.
        let p = hand_model();
        let batch = [rec(&[1.0, 2.0], &[1], 1), rec(&[0.0, -1.0], &[2], 0)];
        let (probs, _) = forward(&p, &batch).unwrap();
        assert!((probs[0] - 0.128_098_718_864_318_12).abs() < 1e-12, "{}", probs[0]);
        assert!((probs[1] - 0.450_166_002_687_522_16).abs() < 1e-12, "{}", probs[1]);
    }

    #[test]
    fn zero_model_gives_half() {
        let mut p: ModelParams = init_params(&tiny_config()).unwrap();
        for t in &mut p.embeddings {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        for l in p.bottom_mlp.iter_mut().chain(p.top_mlp.iter_mut()) {
            l.weight.iter_mut().for_each(|v| *v = 0.0);
        }
        let batch = [rec(&[0.3, 0.1, 0.9], &[7, 3], 1), rec(&[0.0, 0.5, 0.2], &[0, 0], 0)];
        let (probs, _) = forward(&p, &batch).unwrap();
        assert!(probs.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn out_of_range_index_is_rejected() {
        let p: ModelParams = init_params(&tiny_config()).unwrap();
        let err = forward(&p, &[rec(&[0.0; 3], &[8, 0], 1)]).unwrap_err();
        assert!(matches!(err, DlrmError::Index { table: 0, index: 8, vocab: 8 }));
        assert!(matches!(forward(&p, &[]), Err(DlrmError::Shape(_))));
        assert!(matches!(forward(&p, &[rec(&[0.0; 2], &[0, 0], 1)]), Err(DlrmError::Shape(_))));
    }

    #[test]
    fn bce_reference_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((bce_loss(&[0.5f32], &[1]).unwrap() - ln2).abs() < 1e-12);
        assert!((bce_loss(&[0.5f32, 0.5, 0.5], &[1, 0, 0]).unwrap() - ln2).abs() < 1e-12);
        let clipped = bce_loss(&[1e-9f64], &[1]).unwrap();
        assert!((clipped - 16.118_095_650_958_32).abs() < 1e-9);
        let at_eps = bce_loss(&[1e-7f64], &[1]).unwrap();
        assert!((at_eps - 16.118_095_650_958_32).abs() < 1e-9);
        assert!(matches!(bce_loss(&[0.5f32], &[1, 0]), Err(DlrmError::Shape(_))));
    }

    #[test]
    fn dlogit_identity() {
        // Only the final bias sees dL/dlogit directly: its gradient is the
        // batch mean of (p - y).
        let p: ModelParams<f64> = init_params(&tiny_config()).unwrap();
        let batch = [rec(&[0.3, 0.1, 0.9], &[7, 3], 1), rec(&[0.0, 0.5, 0.2], &[0, 1], 0)];
        let (probs, cache) = forward(&p, &batch).unwrap();
        let g = backward(&p, &cache, &[1, 0]).unwrap();
        let expected = ((probs[0] - 1.0) + probs[1]) / 2.0;
        assert!((g.top_mlp[1].bias[0] - expected).abs() < 1e-15);
        assert_eq!(g.batch_size, 2);
    }

    #[test]
    fn sparse_grads_cover_touched_rows_only() {
        let cfg = DlrmConfig { num_sparse: 1, vocab_sizes: vec![10], top_mlp_dims: vec![3, 1], ..tiny_config() };
        let p: ModelParams = init_params(&cfg).unwrap();
        let batch = [rec(&[0.1, 0.2, 0.3], &[3], 1), rec(&[0.4, 0.5, 0.6], &[7], 0), rec(&[0.7, 0.8, 0.9], &[3], 0)];
        let (_, cache) = forward(&p, &batch).unwrap();
        let g = backward(&p, &cache, &[1, 0, 0]).unwrap();
        let keys: Vec<_> = g.sparse_grads.iter().map(|s| (s.table, s.row)).collect();
        assert_eq!(keys, vec![(0, 3), (0, 7)]);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut p: ModelParams = init_params(&tiny_config()).unwrap();
        let batch = [rec(&[0.3, 0.1, 0.9], &[7, 3], 1)];
        let (_, cache) = forward(&p, &batch).unwrap();
        let g = backward(&p, &cache, &[1]).unwrap();
        sgd_apply(&mut p, &g, 0.1).unwrap();
        assert!(matches!(backward(&p, &cache, &[1]), Err(DlrmError::Cache { cache: 0, params: 1 })));
        let (_, cache) = forward(&p, &batch).unwrap();
        assert!(matches!(backward(&p, &cache, &[1, 0]), Err(DlrmError::Shape(_))));
    }

    #[test]
    fn forward_is_bitwise_reproducible() {
        let p: ModelParams = init_params(&DlrmConfig::default()).unwrap();
        let batch: Vec<Record> = (0..4)
            .map(|i| Record {
                dense: (0..13).map(|j| ((i * 13 + j) as f32 * 0.37).sin().abs()).collect(),
                sparse: (0..26).map(|j| ((i * 31 + j * 17) % 1000) as u32).collect(),
                label: (i % 2) as u8,
            })
            .collect();
        let (a, _) = forward(&p, &batch).unwrap();
        let (b, _) = forward(&p, &batch).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
