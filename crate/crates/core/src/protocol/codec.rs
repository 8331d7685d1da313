//! Canonical little-endian encoding of model parameters and gradients.

use crate::dlrm::{EmbeddingTable, GradientDelta, Linear, ModelParams, SparseRowGrad};

use super::{DecodeError, DecodeFailure};

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("field longer than u32::MAX"));
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.len(b.len());
        self.buf.extend_from_slice(b);
    }

    pub fn f32s(&mut self, v: &[f32]) {
        self.buf.reserve(v.len() * 4);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], base: usize) -> Self {
        Self { buf, pos: base }
    }

    pub fn err(&self, failure: DecodeFailure) -> DecodeError {
        DecodeError { offset: self.pos, failure }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.remaining() < n {
            return Err(self.err(DecodeFailure::Truncated));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// A count of items of `item_size` bytes each; refuses counts that
    /// cannot fit in the remaining input, so allocation stays bounded.
    pub fn count(&mut self, item_size: usize) -> Result<usize, DecodeError> {
        let at = self.pos;
        let n = self.u32()? as usize;
        if n.saturating_mul(item_size.max(1)) > self.remaining() {
            return Err(DecodeError { offset: at, failure: DecodeFailure::Truncated });
        }
        Ok(n)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        let n = self.count(1)?;
        self.take(n)
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>, DecodeError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.err(DecodeFailure::Truncated))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn finish(&self) -> Result<(), DecodeError> {
        if self.remaining() != 0 {
            return Err(self.err(DecodeFailure::TrailingBytes));
        }
        Ok(())
    }
}

fn put_layers(w: &mut Writer, layers: &[Linear<f32>]) {
    w.len(layers.len());
    for l in layers {
        w.len(l.in_dim);
        w.len(l.out_dim);
        w.f32s(&l.weight);
        w.f32s(&l.bias);
    }
}

fn get_layers(r: &mut Reader) -> Result<Vec<Linear<f32>>, DecodeError> {
    let n = r.count(8)?;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.pos;
        let in_dim = r.u32()? as usize;
        let out_dim = r.u32()? as usize;
        let cells = in_dim
            .checked_mul(out_dim)
            .filter(|c| c.saturating_add(out_dim).saturating_mul(4) <= r.remaining())
            .ok_or(DecodeError { offset: at, failure: DecodeFailure::Truncated })?;
        let weight = r.f32s(cells)?;
        let bias = r.f32s(out_dim)?;
        layers.push(Linear { in_dim, out_dim, weight, bias });
    }
    Ok(layers)
}

pub(crate) fn put_params(w: &mut Writer, p: &ModelParams<f32>) {
    w.u64(p.version);
    w.len(p.embeddings.len());
    for t in &p.embeddings {
        w.len(t.rows);
        w.len(t.dim);
        w.f32s(&t.data);
    }
    put_layers(w, &p.bottom_mlp);
    put_layers(w, &p.top_mlp);
}

pub(crate) fn get_params(r: &mut Reader) -> Result<ModelParams<f32>, DecodeError> {
    let version = r.u64()?;
    let n = r.count(8)?;
    let mut embeddings = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.pos;
        let rows = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let cells = rows
            .checked_mul(dim)
            .filter(|c| c.saturating_mul(4) <= r.remaining())
            .ok_or(DecodeError { offset: at, failure: DecodeFailure::Truncated })?;
        embeddings.push(EmbeddingTable { rows, dim, data: r.f32s(cells)? });
    }
    let bottom_mlp = get_layers(r)?;
    let top_mlp = get_layers(r)?;
    Ok(ModelParams { embeddings, bottom_mlp, top_mlp, version })
}

pub(crate) fn put_grad(w: &mut Writer, g: &GradientDelta<f32>) {
    w.u64(g.batch_size);
    put_layers(w, &g.bottom_mlp);
    put_layers(w, &g.top_mlp);
    let dim = g.sparse_grads.first().map_or(0, |s| s.grad.len());
    assert!(g.sparse_grads.iter().all(|s| s.grad.len() == dim), "sparse rows of unequal width");
    w.len(g.sparse_grads.len());
    w.len(dim);
    for s in &g.sparse_grads {
        w.u32(s.table);
        w.u32(s.row);
        w.f32s(&s.grad);
    }
}

pub(crate) fn get_grad(r: &mut Reader) -> Result<GradientDelta<f32>, DecodeError> {
    let batch_size = r.u64()?;
    let bottom_mlp = get_layers(r)?;
    let top_mlp = get_layers(r)?;
    let n = r.count(8)?;
    let dim = r.u32()? as usize;
    if n > 0 && (8 + dim * 4).saturating_mul(n) > r.remaining() {
        return Err(r.err(DecodeFailure::Truncated));
    }
    let mut sparse_grads: Vec<SparseRowGrad<f32>> = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.pos;
        let table = r.u32()?;
        let row = r.u32()?;
        if sparse_grads.last().is_some_and(|p| (p.table, p.row) >= (table, row)) {
            return Err(DecodeError { offset: at, failure: DecodeFailure::Invalid("sparse rows out of order") });
        }
        sparse_grads.push(SparseRowGrad { table, row, grad: r.f32s(dim)? });
    }
    if n == 0 && dim != 0 {
        return Err(r.err(DecodeFailure::Invalid("sparse width without rows")));
    }
    Ok(GradientDelta { bottom_mlp, top_mlp, sparse_grads, batch_size })
}
