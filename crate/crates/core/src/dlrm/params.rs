use std::fmt::Debug;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DlrmConfig, DlrmError};

/// Floating-point element type for parameters and activations.
///
/// Parameters are stored as `f32`; `f64` exists for gradient checking.
pub trait Scalar: Float + Debug + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Fully connected layer, `weight` stored row-major as `out_dim × in_dim`.
///
/// The same type carries the matching gradient inside [`GradientDelta`].
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
        }
    }

    pub fn same_shape<U>(&self, other: &Linear<U>) -> bool {
        self.in_dim == other.in_dim
            && self.out_dim == other.out_dim
            && self.weight.len() == other.weight.len()
            && self.bias.len() == other.bias.len()
    }

    fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weight: self.weight.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            bias: self.bias.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T> {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.dim..(r + 1) * self.dim]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub embeddings: Vec<EmbeddingTable<T>>,
    pub bottom_mlp: Vec<Linear<T>>,
    pub top_mlp: Vec<Linear<T>>,
    /// Number of updates applied so far.
    pub version: u64,
}

impl<T: Scalar> ModelParams<T> {
    pub fn num_dense(&self) -> usize {
        self.bottom_mlp.first().map_or(0, |l| l.in_dim)
    }

    pub fn num_sparse(&self) -> usize {
        self.embeddings.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.bottom_mlp.last().map_or(0, |l| l.out_dim)
    }

    /// Element-wise conversion, e.g. to `f64` for finite-difference checks.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            embeddings: self
                .embeddings
                .iter()
                .map(|t| EmbeddingTable {
                    rows: t.rows,
                    dim: t.dim,
                    data: t.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
            bottom_mlp: self.bottom_mlp.iter().map(Linear::cast).collect(),
            top_mlp: self.top_mlp.iter().map(Linear::cast).collect(),
            version: self.version,
        }
    }

    pub fn all_finite(&self) -> bool {
        let layers = self.bottom_mlp.iter().chain(&self.top_mlp);
        self.embeddings
            .iter()
            .flat_map(|t| t.data.iter())
            .chain(layers.flat_map(|l| l.weight.iter().chain(&l.bias)))
            .all(|v| v.is_finite())
    }

    /// Checks the structural invariants that forward/backward rely on.
    pub fn check_shapes(&self) -> Result<(), DlrmError> {
        let d = self.embed_dim();
        let shape = |msg: String| Err(DlrmError::Shape(msg));
        if self.bottom_mlp.is_empty() || self.top_mlp.is_empty() || self.embeddings.is_empty() {
            return shape("model has an empty component".into());
        }
        for t in &self.embeddings {
            if t.dim != d || t.data.len() != t.rows * t.dim {
                return shape(format!("embedding table {}x{} inconsistent with d={d}", t.rows, t.dim));
            }
        }
        for mlp in [&self.bottom_mlp, &self.top_mlp] {
            for l in mlp {
                if l.weight.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                    return shape(format!("layer {}x{} has wrong buffer sizes", l.out_dim, l.in_dim));
                }
            }
            for pair in mlp.windows(2) {
                if pair[0].out_dim != pair[1].in_dim {
                    return shape("consecutive MLP layers disagree".into());
                }
            }
        }
        let n = self.embeddings.len() + 1;
        if self.top_mlp[0].in_dim != d + n * (n - 1) / 2 {
            return shape("top MLP input does not match interaction width".into());
        }
        if self.top_mlp.last().map(|l| l.out_dim) != Some(1) {
            return shape("top MLP must end in a single logit".into());
        }
        Ok(())
    }
}

/// Deterministic initialization from `config.seed`.
///
/// MLP weights are uniform in ±sqrt(1/fan_in), biases zero, embedding rows
/// uniform in ±1/sqrt(d).
pub fn init_params<T: Scalar>(config: &DlrmConfig) -> Result<ModelParams<T>, DlrmError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut uniform = |bound: f64| T::from_f64(bound * (2.0 * rng.gen::<f64>() - 1.0));

    let d = config.embed_dim;
    let emb_bound = 1.0 / (d as f64).sqrt();
    let embeddings = config
        .vocab_sizes
        .iter()
        .map(|&rows| EmbeddingTable {
            rows,
            dim: d,
            data: (0..rows * d).map(|_| uniform(emb_bound)).collect(),
        })
        .collect();

    let mut make_mlp = |shapes: Vec<(usize, usize)>| -> Vec<Linear<T>> {
        shapes
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = (1.0 / fan_in as f64).sqrt();
                Linear {
                    in_dim: fan_in,
                    out_dim: fan_out,
                    weight: (0..fan_in * fan_out).map(|_| uniform(bound)).collect(),
                    bias: vec![T::zero(); fan_out],
                }
            })
            .collect()
    };
    let bottom_mlp = make_mlp(config.bottom_layer_shapes());
    let top_mlp = make_mlp(config.top_layer_shapes());

    Ok(ModelParams {
        embeddings,
        bottom_mlp,
        top_mlp,
        version: 0,
    })
}

/// Gradient of one embedding row.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRowGrad<T> {
    pub table: u32,
    pub row: u32,
    pub grad: Vec<T>,
}

/// Mean-reduced gradient over `batch_size` samples.
///
/// `sparse_grads` is sorted by `(table, row)` with no duplicates.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientDelta<T = f32> {
    pub bottom_mlp: Vec<Linear<T>>,
    pub top_mlp: Vec<Linear<T>>,
    pub sparse_grads: Vec<SparseRowGrad<T>>,
    pub batch_size: u64,
}

impl<T: Scalar> GradientDelta<T> {
    /// A zero gradient shaped like `params`, with no sparse rows.
    pub fn zeros_like(params: &ModelParams<T>, batch_size: u64) -> Self {
        let zeros = |mlp: &[Linear<T>]| mlp.iter().map(|l| Linear::zeros(l.in_dim, l.out_dim)).collect();
        Self {
            bottom_mlp: zeros(&params.bottom_mlp),
            top_mlp: zeros(&params.top_mlp),
            sparse_grads: Vec::new(),
            batch_size,
        }
    }

    pub fn all_finite(&self) -> bool {
        let layers = self.bottom_mlp.iter().chain(&self.top_mlp);
        layers
            .flat_map(|l| l.weight.iter().chain(&l.bias))
            .chain(self.sparse_grads.iter().flat_map(|s| s.grad.iter()))
            .all(|v| v.is_finite())
    }

    /// Checks that this gradient can be applied to `params`.
    pub fn check_against(&self, params: &ModelParams<T>) -> Result<(), DlrmError> {
        let mlps_match = |a: &[Linear<T>], b: &[Linear<T>]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.same_shape(y))
        };
        if !mlps_match(&self.bottom_mlp, &params.bottom_mlp) || !mlps_match(&self.top_mlp, &params.top_mlp) {
            return Err(DlrmError::Shape("dense gradient does not match model layers".into()));
        }
        if self.batch_size == 0 {
            return Err(DlrmError::Shape("gradient batch_size is zero".into()));
        }
        let mut prev: Option<(u32, u32)> = None;
        for s in &self.sparse_grads {
            let key = (s.table, s.row);
            if prev.is_some_and(|p| p >= key) {
                return Err(DlrmError::Shape(format!(
                    "sparse rows not strictly ordered at table {} row {}",
                    s.table, s.row
                )));
            }
            prev = Some(key);
            let table = params
                .embeddings
                .get(s.table as usize)
                .ok_or(DlrmError::Index { table: s.table as usize, index: s.row as usize, vocab: 0 })?;
            if s.row as usize >= table.rows {
                return Err(DlrmError::Index {
                    table: s.table as usize,
                    index: s.row as usize,
                    vocab: table.rows,
                });
            }
            if s.grad.len() != table.dim {
                return Err(DlrmError::Shape(format!(
                    "sparse gradient for table {} has length {}, expected {}",
                    s.table,
                    s.grad.len(),
                    table.dim
                )));
            }
        }
        Ok(())
    }
}

/// Plain SGD step: `p ← p − lr·g` on dense layers and on the embedding rows
/// named in `grad.sparse_grads`. Bumps `version` by one.
///
/// Nothing is modified if the gradient does not fit the model.
pub fn sgd_apply<T: Scalar>(params: &mut ModelParams<T>, grad: &GradientDelta<T>, lr: f64) -> Result<(), DlrmError> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(DlrmError::Config(format!("learning rate {lr} must be positive")));
    }
    grad.check_against(params)?;
    let lr = T::from_f64(lr);
    let step = |p: &mut [T], g: &[T]| {
        for (p, &g) in p.iter_mut().zip(g) {
            *p = *p - lr * g;
        }
    };
    for (layer, g) in params
        .bottom_mlp
        .iter_mut()
        .zip(&grad.bottom_mlp)
        .chain(params.top_mlp.iter_mut().zip(&grad.top_mlp))
    {
        step(&mut layer.weight, &g.weight);
        step(&mut layer.bias, &g.bias);
    }
    for s in &grad.sparse_grads {
        step(params.embeddings[s.table as usize].row_mut(s.row as usize), &s.grad);
    }
    params.version += 1;
    Ok(())
}
