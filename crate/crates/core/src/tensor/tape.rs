use super::ops::{self, BroadcastMap, MatMulDims};
use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var, MatMulDims),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Gather { input: Var, index: Vec<usize> },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Gelu(Var),
    MaskedMse { pred: Var, target: Var, rows: Vec<usize> },
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Linear record of executed operations.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order. A tape supports a single backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients of leaf nodes produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient for `v`, or `None` when `v` did not influence the loss or
    /// does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Batched matrix product over the last two axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (dims, shape) = ops::matmul_dims(self.shape(a), self.shape(b))?;
        let data = ops::matmul_forward(dims, self.value(a).data(), self.value(b).data());
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::MatMul(a, b, dims), rg))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let shape = ops::broadcast_shape(op, self.shape(a), self.shape(b))?;
        let ma = BroadcastMap::new(self.shape(a), &shape);
        let mb = BroadcastMap::new(self.shape(b), &shape);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let numel: usize = shape.iter().product();
        let data = match (&ma, &mb) {
            (BroadcastMap::Same, BroadcastMap::Same) => ad.iter().zip(bd).map(|(x, y)| f(*x, *y)).collect(),
            (BroadcastMap::Same, BroadcastMap::Cyclic(n)) => {
                let mut out = Vec::with_capacity(numel);
                for row in ad.chunks(*n) {
                    out.extend(row.iter().zip(bd).map(|(x, y)| f(*x, *y)));
                }
                out
            }
            _ => (0..numel).map(|i| f(ad[ma.at(i)], bd[mb.at(i)])).collect(),
        };
        Ok((Tensor::new(&shape, data)?, self.any_grad(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a);
        let t = Tensor::from_fn(v.shape(), |i| v.data()[i] * c);
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() < 2 {
            return Err(TensorError::BadAxis {
                op: "transpose",
                axis: 1,
                rank: v.rank(),
            });
        }
        let mut shape = v.shape().to_vec();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let data = ops::transpose_last2(v.shape(), v.data());
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(TensorError::EmptyAxis { op: "concat" })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::BadAxis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = ops::axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let chunk = self.shape(*v)[axis] * inner;
                data.extend_from_slice(&self.value(*v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::BadAxis {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        if start + len > shape[axis] {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                len: shape[axis],
            });
        }
        let (outer, n, inner) = ops::axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(&out_shape, data)?, Op::Slice { input: a, axis, start }, rg))
    }

    /// Splits `a` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let total = self.shape(a).get(axis).copied().unwrap_or(0);
        if sizes.iter().sum::<usize>() != total {
            return Err(TensorError::ShapeMismatch {
                op: "split",
                lhs: self.shape(a).to_vec(),
                rhs: sizes.to_vec(),
            });
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(a, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Selects rows along axis 0; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if v.rank() == 0 {
            return Err(TensorError::BadAxis {
                op: "gather_rows",
                axis: 0,
                rank: 0,
            });
        }
        let rows = v.shape()[0];
        let width = v.len() / rows.max(1);
        let mut data = Vec::with_capacity(index.len() * width);
        for &i in index {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            data.extend_from_slice(&v.data()[i * width..(i + 1) * width]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = index.len();
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Gather {
                input: a,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    fn last_dim(&self, op: &'static str, a: Var) -> Result<usize> {
        match self.shape(a).last() {
            Some(&d) if d > 0 => Ok(d),
            _ => Err(TensorError::EmptyAxis { op }),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let d = self.last_dim("softmax", a)?;
        let v = self.value(a);
        let t = Tensor::new(v.shape(), ops::softmax_rows(v.data(), d))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.last_dim("layer_norm", x)?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let out = ops::layer_norm(self.value(x).data(), self.value(gain).data(), self.value(bias).data());
        let t = Tensor::new(self.shape(x), out.y)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: out.xhat,
                inv_std: out.inv_std,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::from_fn(v.shape(), |i| ops::gelu(v.data()[i]));
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Mean squared error restricted to the listed rows (axis 0).
    ///
    /// Rows outside `rows` are never read, so the loss is independent of them.
    pub fn masked_mse(&mut self, pred: Var, target: Var, rows: &[usize]) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() || p.rank() == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "masked_mse",
                lhs: p.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        if rows.is_empty() {
            return Err(TensorError::EmptyAxis { op: "masked_mse" });
        }
        let n = p.shape()[0];
        let w = p.len() / n;
        let mut acc = T::zero();
        for &r in rows {
            if r >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "masked_mse",
                    index: r,
                    len: n,
                });
            }
            let (pr, tr) = (&p.data()[r * w..(r + 1) * w], &t.data()[r * w..(r + 1) * w]);
            acc = acc + pr.iter().zip(tr).map(|(a, b)| (*a - *b) * (*a - *b)).sum::<T>();
        }
        let loss = acc / T::of((rows.len() * w) as f64);
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedMse {
                pred,
                target,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Mean squared error over every element.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let n = self.shape(pred).first().copied().unwrap_or(0);
        let rows: Vec<usize> = (0..n).collect();
        self.masked_mse(pred, target, &rows)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.len().max(1) as f64);
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Reverse-mode sweep from a single-element `loss`.
    ///
    /// Returns gradients for every leaf that requires them. The tape is
    /// consumed; a second call fails with [`TensorError::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Grads<T>> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape(), g).expect("gradient shape matches"))
                }
                _ => None,
            })
            .collect();
        Ok(Grads { grads })
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, contrib: Vec<T>| accumulate(grads, v, contrib);

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b, dims) => {
                let (da, db) = ops::matmul_backward(
                    *dims,
                    self.value(*a).data(),
                    self.value(*b).data(),
                    g,
                    wants(*a),
                    wants(*b),
                );
                if let Some(da) = da {
                    acc(*a, da);
                }
                if let Some(db) = db {
                    acc(*b, db);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let negate = matches!(node.op, Op::Sub(..));
                if wants(*a) {
                    let m = BroadcastMap::new(self.shape(*a), out_shape);
                    acc(*a, m.reduce(g, self.value(*a).len()));
                }
                if wants(*b) {
                    let m = BroadcastMap::new(self.shape(*b), out_shape);
                    let mut gb = m.reduce(g, self.value(*b).len());
                    if negate {
                        gb.iter_mut().for_each(|x| *x = -*x);
                    }
                    acc(*b, gb);
                }
            }
            Op::Mul(a, b) => {
                let ma = BroadcastMap::new(self.shape(*a), out_shape);
                let mb = BroadcastMap::new(self.shape(*b), out_shape);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if wants(*a) {
                    let prod: Vec<T> = g.iter().enumerate().map(|(j, gv)| *gv * bd[mb.at(j)]).collect();
                    acc(*a, ma.reduce(&prod, ad.len()));
                }
                if wants(*b) {
                    let prod: Vec<T> = g.iter().enumerate().map(|(j, gv)| *gv * ad[ma.at(j)]).collect();
                    acc(*b, mb.reduce(&prod, bd.len()));
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|x| *x * *c).collect()),
            Op::Transpose(a) => acc(*a, ops::transpose_last2(out_shape, g)),
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = ops::axis_split(out_shape, *axis);
                let mut offset = 0;
                let total = out_shape[*axis] * inner;
                for v in inputs {
                    let chunk = self.shape(*v)[*axis] * inner;
                    if wants(*v) {
                        let mut part = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * total + offset;
                            part.extend_from_slice(&g[base..base + chunk]);
                        }
                        acc(*v, part);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.shape(*input);
                let (outer, n, inner) = ops::axis_split(in_shape, *axis);
                let len = out_shape[*axis];
                let mut full = vec![T::zero(); self.value(*input).len()];
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    let src = o * len * inner;
                    full[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                acc(*input, full);
            }
            Op::Gather { input, index } => {
                let src = self.value(*input);
                let width = src.len() / src.shape()[0].max(1);
                let mut full = vec![T::zero(); src.len()];
                for (k, &r) in index.iter().enumerate() {
                    for j in 0..width {
                        full[r * width + j] = full[r * width + j] + g[k * width + j];
                    }
                }
                acc(*input, full);
            }
            Op::Softmax(a) => {
                let d = *out_shape.last().expect("softmax output has an axis");
                acc(*a, ops::softmax_backward(node.value.data(), g, d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gd = self.value(*gain).data();
                let d = gd.len();
                let inv_d = T::one() / T::of(d as f64);
                if wants(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gd[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * gd[j];
                            dx[r * d + j] = *is * (dh - inv_d * sum_dh - hr[j] * inv_d * sum_dh_h);
                        }
                    }
                    acc(*x, dx);
                }
                if wants(*gain) {
                    let mut dg = vec![T::zero(); d];
                    for (gv, hv) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] = dg[j] + gv[j] * hv[j];
                        }
                    }
                    acc(*gain, dg);
                }
                if wants(*bias) {
                    let mut db = vec![T::zero(); d];
                    for gv in g.chunks(d) {
                        for j in 0..d {
                            db[j] = db[j] + gv[j];
                        }
                    }
                    acc(*bias, db);
                }
            }
            Op::Gelu(a) => {
                let xd = self.value(*a).data();
                acc(*a, g.iter().zip(xd).map(|(gv, xv)| *gv * ops::gelu_grad(*xv)).collect());
            }
            Op::MaskedMse { pred, target, rows } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let n = p.shape()[0];
                let w = p.len() / n;
                let coef = g[0] * T::of(2.0) / T::of((rows.len() * w) as f64);
                let mut dp = vec![T::zero(); p.len()];
                for &r in rows {
                    for j in r * w..(r + 1) * w {
                        dp[j] = dp[j] + coef * (p.data()[j] - t.data()[j]);
                    }
                }
                if wants(*target) {
                    acc(*target, dp.iter().map(|v| -*v).collect());
                }
                if wants(*pred) {
                    acc(*pred, dp);
                }
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                acc(*a, vec![g[0] / T::of(n.max(1) as f64); n]);
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e = *e + c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}
