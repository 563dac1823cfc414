//! Raw kernels shared by the forward and backward passes of the tape.

use super::{Result, Scalar, TensorError};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Maps flat output indices of a broadcast result back to an input buffer.
pub(crate) enum BroadcastMap {
    Same,
    Cyclic(usize),
    Table(Vec<usize>),
}

impl BroadcastMap {
    pub(crate) fn new(input: &[usize], out: &[usize]) -> Self {
        let in_len: usize = input.iter().product();
        let out_len: usize = out.iter().product();
        if in_len == out_len {
            return BroadcastMap::Same;
        }
        let trimmed: Vec<usize> = input.iter().copied().skip_while(|&d| d == 1).collect();
        if out.ends_with(&trimmed) {
            return BroadcastMap::Cyclic(in_len.max(1));
        }
        let rank = out.len();
        let offset = rank - input.len();
        let mut in_strides = vec![0usize; rank];
        let mut stride = 1;
        for i in (0..input.len()).rev() {
            in_strides[i + offset] = if input[i] == 1 { 0 } else { stride };
            stride *= input[i];
        }
        let mut table = Vec::with_capacity(out_len);
        let mut idx = vec![0usize; rank];
        for _ in 0..out_len {
            table.push(idx.iter().zip(&in_strides).map(|(i, s)| i * s).sum());
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        BroadcastMap::Table(table)
    }

    #[inline]
    pub(crate) fn at(&self, i: usize) -> usize {
        match self {
            BroadcastMap::Same => i,
            BroadcastMap::Cyclic(n) => i % n,
            BroadcastMap::Table(t) => t[i],
        }
    }

    /// Sums an output-shaped gradient back into the input's layout.
    pub(crate) fn reduce<T: Scalar>(&self, grad: &[T], in_len: usize) -> Vec<T> {
        match self {
            BroadcastMap::Same => grad.to_vec(),
            BroadcastMap::Cyclic(n) => {
                let mut out = vec![T::zero(); in_len];
                for chunk in grad.chunks(*n) {
                    out.iter_mut().zip(chunk).for_each(|(o, g)| *o = *o + *g);
                }
                out
            }
            BroadcastMap::Table(_) => {
                let mut out = vec![T::zero(); in_len];
                for (i, g) in grad.iter().enumerate() {
                    out[self.at(i)] = out[self.at(i)] + *g;
                }
                out
            }
        }
    }
}

/// Batch layout of a matmul: `[.., m, k] x [.., k, n]` where either side may
/// be a plain matrix that is broadcast over the other's batch.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MatMulDims {
    pub batch: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(MatMulDims, Vec<usize>)> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (ab, am) = a.split_at(a.len() - 2);
    let (bb, bm) = b.split_at(b.len() - 2);
    if am[1] != bm[0] {
        return Err(mismatch());
    }
    let batch_shape = if ab == bb || bb.is_empty() {
        ab
    } else if ab.is_empty() {
        bb
    } else {
        return Err(mismatch());
    };
    let mut out = batch_shape.to_vec();
    out.extend_from_slice(&[am[0], bm[1]]);
    Ok((
        MatMulDims {
            batch: batch_shape.iter().product(),
            a_batched: !ab.is_empty(),
            b_batched: !bb.is_empty(),
            m: am[0],
            k: am[1],
            n: bm[1],
        },
        out,
    ))
}

pub(crate) fn matmul_forward<T: Scalar>(d: MatMulDims, a: &[T], b: &[T]) -> Vec<T> {
    let MatMulDims { batch, m, k, n, .. } = d;
    let mut c = vec![T::zero(); batch * m * n];
    if d.a_batched && !d.b_batched {
        // Fold the batch into the row dimension.
        T::gemm(batch * m, k, n, T::one(), a, k as isize, 1, b, n as isize, 1, T::zero(), &mut c, n as isize, 1);
        return c;
    }
    for bi in 0..batch {
        let ao = if d.a_batched { bi * m * k } else { 0 };
        let bo = if d.b_batched { bi * k * n } else { 0 };
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a[ao..ao + m * k],
            k as isize,
            1,
            &b[bo..bo + k * n],
            n as isize,
            1,
            T::zero(),
            &mut c[bi * m * n..(bi + 1) * m * n],
            n as isize,
            1,
        );
    }
    c
}

/// Gradients of `c = a b` given `dc`; either side may be skipped.
pub(crate) fn matmul_backward<T: Scalar>(
    d: MatMulDims,
    a: &[T],
    b: &[T],
    dc: &[T],
    want_a: bool,
    want_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let MatMulDims { batch, m, k, n, .. } = d;
    let (ki, ni) = (k as isize, n as isize);
    let mut da = want_a.then(|| vec![T::zero(); a.len()]);
    let mut db = want_b.then(|| vec![T::zero(); b.len()]);
    if d.a_batched && !d.b_batched {
        let rows = batch * m;
        if let Some(da) = da.as_mut() {
            T::gemm(rows, n, k, T::one(), dc, ni, 1, b, 1, ni, T::zero(), da, ki, 1);
        }
        if let Some(db) = db.as_mut() {
            T::gemm(k, rows, n, T::one(), a, 1, ki, dc, ni, 1, T::zero(), db, ni, 1);
        }
        return (da, db);
    }
    for bi in 0..batch {
        let ao = if d.a_batched { bi * m * k } else { 0 };
        let bo = if d.b_batched { bi * k * n } else { 0 };
        let dcb = &dc[bi * m * n..(bi + 1) * m * n];
        if let Some(da) = da.as_mut() {
            T::gemm(m, n, k, T::one(), dcb, ni, 1, &b[bo..bo + k * n], 1, ni, T::one(), &mut da[ao..ao + m * k], ki, 1);
        }
        if let Some(db) = db.as_mut() {
            T::gemm(k, m, n, T::one(), &a[ao..ao + m * k], 1, ki, dcb, ni, 1, T::one(), &mut db[bo..bo + k * n], ni, 1);
        }
    }
    (da, db)
}

pub(crate) fn transpose_last2<T: Scalar>(shape: &[usize], x: &[T]) -> Vec<T> {
    let r = shape[shape.len() - 2];
    let c = shape[shape.len() - 1];
    let mut out = vec![T::zero(); x.len()];
    for (bo, block) in x.chunks(r * c).enumerate() {
        let dst = &mut out[bo * r * c..(bo + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = block[i * c + j];
            }
        }
    }
    out
}

/// `(outer, axis_len, inner)` split of a shape around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_rows<T: Scalar>(x: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (o, v) in dst.iter_mut().zip(row) {
            *o = (*v - max).exp();
            total = total + *o;
        }
        for o in dst.iter_mut() {
            *o = *o / total;
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], width: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, dyr), dxr) in y.chunks(width).zip(dy.chunks(width)).zip(dx.chunks_mut(width)) {
        let dot: T = yr.iter().zip(dyr).map(|(a, b)| *a * *b).sum();
        for ((o, yv), dv) in dxr.iter_mut().zip(yr).zip(dyr) {
            *o = *yv * (*dv - dot);
        }
    }
    dx
}

pub(crate) struct LayerNormOut<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn layer_norm<T: Scalar>(x: &[T], gain: &[T], bias: &[T]) -> LayerNormOut<T> {
    let d = gain.len();
    let eps = T::of(LAYER_NORM_EPS);
    let inv_d = T::one() / T::of(d as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / d);
    for ((row, yr), hr) in x.chunks(d).zip(y.chunks_mut(d)).zip(xhat.chunks_mut(d)) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_d;
        let is = T::one() / (var + eps).sqrt();
        for j in 0..d {
            hr[j] = (row[j] - mean) * is;
            yr[j] = hr[j] * gain[j] + bias[j];
        }
        inv_std.push(is);
    }
    LayerNormOut { y, xhat, inv_std }
}

/// `tanh` through one `exp`; libm's `tanhf` dominates GELU cost otherwise.
fn tanh<T: Scalar>(u: T) -> T {
    T::one() - T::of(2.0) / ((u + u).exp() + T::one())
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    let u = c * (x + T::of(0.044715) * x * x * x);
    half * x * (T::one() + tanh(u))
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    let a = T::of(0.044715);
    let t = tanh(c * (x + a * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}
