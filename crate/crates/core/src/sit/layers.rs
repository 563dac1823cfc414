//! Parameter initialisation and forward passes for the transformer layers.
//!
//! Layers are stateless: each reads its parameters from a [`BoundParams`]
//! under a dotted prefix such as `encoder.blocks.0.attn.q`.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::tensor::{BoundParams, ParamSet, Result, Scalar, Tape, Tensor, Var};

/// Xavier-uniform weight `[fan_in, fan_out]` and zero bias.
pub fn init_linear<T: Scalar>(params: &mut ParamSet<T>, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    params.insert(
        format!("{prefix}.weight"),
        Tensor::from_fn(&[fan_in, fan_out], |_| T::of(dist.sample(rng))),
    );
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
}

pub fn init_layer_norm<T: Scalar>(params: &mut ParamSet<T>, prefix: &str, dim: usize) {
    params.insert(format!("{prefix}.gain"), Tensor::full(&[dim], T::one()));
    params.insert(format!("{prefix}.bias"), Tensor::zeros(&[dim]));
}

pub fn init_normal<T: Scalar>(params: &mut ParamSet<T>, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) {
    let dist = Normal::new(0.0, std).expect("positive std");
    params.insert(name, Tensor::from_fn(shape, |_| T::of(dist.sample(rng))));
}

pub fn init_block<T: Scalar>(params: &mut ParamSet<T>, prefix: &str, dim: usize, ffn_mult: usize, rng: &mut impl Rng) {
    init_layer_norm(params, &format!("{prefix}.norm1"), dim);
    for proj in ["q", "k", "v", "o"] {
        init_linear(params, &format!("{prefix}.attn.{proj}"), dim, dim, rng);
    }
    init_layer_norm(params, &format!("{prefix}.norm2"), dim);
    init_linear(params, &format!("{prefix}.ffn.fc1"), dim, ffn_mult * dim, rng);
    init_linear(params, &format!("{prefix}.ffn.fc2"), ffn_mult * dim, dim, rng);
}

pub fn linear<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.weight"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

pub fn layer_norm<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams<T>, prefix: &str, x: Var) -> Result<Var> {
    let g = p.var(&format!("{prefix}.gain"))?;
    let b = p.var(&format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, b)
}

/// Multi-head self-attention over a `[S, D]` sequence.
///
/// Returns the output and the per-head `[S, S]` attention matrices.
pub fn self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams<T>,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let dim = *tape.shape(x).last().unwrap_or(&0);
    let head_dim = dim / heads;
    let scale = T::of(1.0 / (head_dim as f64).sqrt());
    let q = linear(tape, p, &format!("{prefix}.q"), x)?;
    let k = linear(tape, p, &format!("{prefix}.k"), x)?;
    let v = linear(tape, p, &format!("{prefix}.v"), x)?;
    let sizes = vec![head_dim; heads];
    let qs = tape.split(q, 1, &sizes)?;
    let ks = tape.split(k, 1, &sizes)?;
    let vs = tape.split(v, 1, &sizes)?;
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let kt = tape.transpose(ks[h])?;
        let scores = tape.matmul(qs[h], kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores)?;
        outs.push(tape.matmul(attn, vs[h])?);
        maps.push(attn);
    }
    let merged = if heads == 1 { outs[0] } else { tape.concat(&outs, 1)? };
    Ok((linear(tape, p, &format!("{prefix}.o"), merged)?, maps))
}

pub fn feed_forward<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams<T>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(tape, p, &format!("{prefix}.fc1"), x)?;
    let h = tape.gelu(h);
    linear(tape, p, &format!("{prefix}.fc2"), h)
}

/// Pre-norm residual block: `z = x + attn(norm1(x))`, `out = z + ffn(norm2(z))`.
pub fn block<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams<T>,
    prefix: &str,
    x: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let h = layer_norm(tape, p, &format!("{prefix}.norm1"), x)?;
    let (attn, maps) = self_attention(tape, p, &format!("{prefix}.attn"), h, heads)?;
    let z = tape.add(x, attn)?;
    let h = layer_norm(tape, p, &format!("{prefix}.norm2"), z)?;
    let f = feed_forward(tape, p, &format!("{prefix}.ffn"), h)?;
    Ok((tape.add(z, f)?, maps))
}

/// Applies `layers` consecutive blocks named `{prefix}.{i}`.
pub fn stack<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams<T>,
    prefix: &str,
    mut x: Var,
    layers: usize,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let mut maps = Vec::new();
    for i in 0..layers {
        let (y, m) = block(tape, p, &format!("{prefix}.{i}"), x, heads)?;
        x = y;
        maps.extend(m);
    }
    Ok((x, maps))
}
