//! Oracles shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smae_core::sit::{self, layers, ForwardOptions, SitConfig, SitModel};
use smae_core::ssl::{CorruptionRecord, MaskPlan, MppModel, SmaeModel};
use smae_core::tensor::{grad_check, GradCheckReport, ParamSet, Tape, Tensor, TensorError, Var};
use smae_core::Result;

pub const H: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// 20 patches of 6 vertices over ico1, two channels.
pub fn toy_config() -> SitConfig {
    SitConfig {
        patch_level: 0,
        data_level: 1,
        channels: 2,
        hidden_dim: 8,
        layers: 2,
        heads: 2,
        ffn_mult: 2,
    }
}

/// Adds noise to every parameter so that zero-initialised biases, unit
/// gains and the zero mask token are exercised away from their defaults.
pub fn jitter(params: &mut ParamSet<f64>, scale: f64, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = params.names().to_vec();
    for n in names {
        let t = params.get_mut(&n).expect("own name");
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-scale..scale));
    }
}

/// Central-difference check of a loss over every parameter of `params`.
pub fn check_params<F>(params: &ParamSet<f64>, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &smae_core::tensor::BoundParams<f64>) -> Result<Var>,
{
    grad_check(
        |tape, vars| {
            let p = params.attach(vars.to_vec())?;
            f(tape, &p)
        },
        params.tensors(),
        H,
    )
}

/// Weighted sum of all outputs so that every output element matters.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, rng: &mut ChaCha8Rng) -> std::result::Result<Var, TensorError> {
    let w = random(tape.shape(y), rng);
    let w = tape.constant(w);
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

type LayerCheck = (&'static str, GradCheckReport);

/// Gradient checks of every layer type on random inputs for one seed.
pub fn layer_checks(seed: u64) -> Result<Vec<LayerCheck>> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let (s, d, heads) = (5, 6, 2);

    let x = random(&[s, d], &mut r);
    let w = random(&[d, 4], &mut r);
    let b = random(&[4], &mut r);
    let wsum = random(&[s, 4], &mut r);
    out.push((
        "linear",
        grad_check(
            |tape, v| {
                let xw = tape.matmul(v[0], v[1])?;
                let y = tape.add(xw, v[2])?;
                let c = tape.constant(wsum.clone());
                let p = tape.mul(y, c)?;
                Ok::<_, TensorError>(tape.sum(p))
            },
            &[x.clone(), w, b],
            H,
        )?,
    ));

    let a = random(&[3, s, d], &mut r);
    let bm = random(&[3, d, 4], &mut r);
    let wb = random(&[3, s, 4], &mut r);
    out.push((
        "batched matmul",
        grad_check(
            |tape, v| {
                let y = tape.matmul(v[0], v[1])?;
                let t = tape.transpose(y)?;
                let t = tape.transpose(t)?;
                let c = tape.constant(wb.clone());
                let p = tape.mul(t, c)?;
                Ok::<_, TensorError>(tape.sum(p))
            },
            &[a, bm],
            H,
        )?,
    ));

    let gain = random(&[d], &mut r);
    let bias = random(&[d], &mut r);
    let wl = random(&[s, d], &mut r);
    out.push((
        "layer norm",
        grad_check(
            |tape, v| {
                let y = tape.layer_norm(v[0], v[1], v[2])?;
                let c = tape.constant(wl.clone());
                let p = tape.mul(y, c)?;
                Ok::<_, TensorError>(tape.sum(p))
            },
            &[x.clone(), gain, bias],
            H,
        )?,
    ));

    let ws = random(&[s, d], &mut r);
    out.push((
        "softmax",
        grad_check(
            |tape, v| {
                let y = tape.softmax(v[0])?;
                let c = tape.constant(ws.clone());
                let p = tape.mul(y, c)?;
                Ok::<_, TensorError>(tape.sum(p))
            },
            &[x.clone()],
            H,
        )?,
    ));

    let wg = random(&[s, d], &mut r);
    out.push((
        "gelu",
        grad_check(
            |tape, v| {
                let y = tape.gelu(v[0]);
                let c = tape.constant(wg.clone());
                let p = tape.mul(y, c)?;
                Ok::<_, TensorError>(tape.sum(p))
            },
            &[Tensor::from_fn(&[s, d], |k| 3.0 * x.data()[k])],
            H,
        )?,
    ));

    let other = random(&[s, d], &mut r);
    let row = random(&[d], &mut r);
    out.push((
        "elementwise and broadcast",
        grad_check(
            |tape, v| {
                let a = tape.sub(v[0], v[1])?;
                let b = tape.mul(a, v[0])?;
                let c = tape.add(b, v[2])?;
                let c = tape.scale(c, 0.7);
                let m = tape.mean(c);
                let sq = tape.mul(c, c)?;
                let s = tape.sum(sq);
                Ok::<_, TensorError>(tape.add(s, m)?)
            },
            &[x.clone(), other.clone(), row],
            H,
        )?,
    ));

    out.push((
        "reshape concat split slice gather",
        grad_check(
            |tape, v| {
                let c = tape.concat(&[v[0], v[1]], 0)?;
                let parts = tape.split(c, 1, &[2, 4])?;
                let r = tape.reshape(parts[1], &[s, 8])?;
                let sl = tape.slice(r, 0, 1, 3)?;
                let g = tape.gather_rows(parts[0], &[0, 3, 3, 9, 1])?;
                let a = tape.sum(sl);
                let sq = tape.mul(g, g)?;
                let b = tape.sum(sq);
                Ok::<_, TensorError>(tape.add(a, b)?)
            },
            &[x.clone(), other.clone()],
            H,
        )?,
    ));

    let target = random(&[s, d], &mut r);
    out.push((
        "masked mse",
        grad_check(
            |tape, v| {
                let t = tape.constant(target.clone());
                Ok::<_, TensorError>(tape.masked_mse(v[0], t, &[0, 2, 4])?)
            },
            &[x.clone()],
            H,
        )?,
    ));

    // Transformer layers through their parameter sets.
    let mut params = ParamSet::new();
    layers::init_block(&mut params, "b", d, 2, &mut r);
    jitter(&mut params, 0.3, &mut r);
    let xin = random(&[s, d], &mut r);
    let mut wr = r.clone();
    let wsum_block = random(&[s, d], &mut wr);
    let sum_out = |tape: &mut Tape<f64>, y: Var| -> Result<Var> {
        let c = tape.constant(wsum_block.clone());
        let p = tape.mul(y, c)?;
        Ok(tape.sum(p))
    };
    out.push((
        "self attention",
        check_params(&params, |tape, p| {
            let x = tape.constant(xin.clone());
            let (y, _) = layers::self_attention(tape, p, "b.attn", x, heads)?;
            sum_out(tape, y)
        })?,
    ));
    out.push((
        "feed forward",
        check_params(&params, |tape, p| {
            let x = tape.constant(xin.clone());
            let y = layers::feed_forward(tape, p, "b.ffn", x)?;
            sum_out(tape, y)
        })?,
    ));
    out.push((
        "encoder block",
        check_params(&params, |tape, p| {
            let x = tape.constant(xin.clone());
            let (y, _) = layers::block(tape, p, "b", x, heads)?;
            sum_out(tape, y)
        })?,
    ));
    // Block input gradient as well.
    out.push((
        "encoder block input",
        grad_check(
            |tape, v| {
                let bound = params.bind(tape, |_| false);
                let (y, _) = layers::block(tape, &bound, "b", v[0], heads)?;
                let mut wr = rng(seed ^ 0xb10c);
                Ok::<_, smae_core::Error>(weighted_sum(tape, y, &mut wr)?)
            },
            &[xin.clone()],
            H,
        )?,
    ));
    Ok(out)
}

/// Gradient check of the SiT prediction on the toy sphere.
pub fn sit_check(seed: u64) -> Result<GradCheckReport> {
    let cfg = toy_config();
    let mut r = rng(seed);
    let mut model = SitModel::<f64>::new(cfg.clone(), seed)?;
    jitter(&mut model.params, 0.2, &mut r);
    let x = random(&[cfg.num_patches(), cfg.patch_dim()], &mut r);
    check_params(&model.params, |tape, p| {
        let out = model.forward(tape, p, &x, ForwardOptions::default())?;
        Ok(tape.sum(out.prediction))
    })
}

/// Gradient check of the full sMAE loss on the toy sphere.
pub fn smae_check(seed: u64, ratio: f64) -> Result<GradCheckReport> {
    let cfg = toy_config();
    let mut r = rng(seed);
    let mut model = SmaeModel::<f64>::new(cfg.clone(), seed)?;
    jitter(&mut model.params, 0.2, &mut r);
    let x = random(&[cfg.num_patches(), cfg.patch_dim()], &mut r);
    let plan = MaskPlan::sample(cfg.num_patches(), ratio, &mut r)?;
    check_params(&model.params, |tape, p| Ok(model.forward(tape, p, &x, &x, &plan)?.loss))
}

pub fn mpp_check(seed: u64) -> Result<GradCheckReport> {
    let cfg = toy_config();
    let mut r = rng(seed);
    let mut model = MppModel::<f64>::new(cfg.clone(), seed)?;
    jitter(&mut model.params, 0.2, &mut r);
    let x = random(&[cfg.num_patches(), cfg.patch_dim()], &mut r);
    let rec = CorruptionRecord::sample(cfg.num_patches(), &mut r)?;
    check_params(&model.params, |tape, p| Ok(model.forward(tape, p, &x, &x, &rec)?.loss))
}

/// sMAE loss with `target`, evaluated without gradients.
pub fn smae_loss(model: &SmaeModel<f64>, x: &Tensor<f64>, target: &Tensor<f64>, plan: &MaskPlan) -> Result<f64> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, |_| false);
    let t = model.forward(&mut tape, &p, x, target, plan)?;
    Ok(tape.value(t.loss).item())
}

pub fn mpp_loss(model: &MppModel<f64>, x: &Tensor<f64>, target: &Tensor<f64>, rec: &CorruptionRecord) -> Result<f64> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, |_| false);
    let t = model.forward(&mut tape, &p, x, target, rec)?;
    Ok(tape.value(t.loss).item())
}

/// Adds `delta` to every value of the given patch rows.
pub fn perturb_rows(t: &Tensor<f64>, rows: &[usize], delta: f64) -> Tensor<f64> {
    let mut out = t.clone();
    let w = t.shape()[1];
    for &i in rows {
        out.data_mut()[i * w..(i + 1) * w].iter_mut().for_each(|v| *v += delta);
    }
    out
}

/// Sentinel config: 80 patches, identity encoder, patch width > D.
pub fn sentinel_config() -> SitConfig {
    SitConfig {
        patch_level: 1,
        data_level: 2,
        channels: 2,
        hidden_dim: 8,
        layers: 0,
        heads: 2,
        ffn_mult: 2,
    }
}

/// Model whose patch embedding copies the first `D` columns of each token,
/// and whose mask token is a value no embedded row takes.
pub fn sentinel_model() -> Result<SmaeModel<f64>> {
    let cfg = sentinel_config();
    let mut model = SmaeModel::<f64>::new(cfg.clone(), 0)?;
    let (pd, d) = (cfg.patch_dim(), cfg.hidden_dim);
    model.params.insert(
        "encoder.patch_embed.weight",
        Tensor::from_fn(&[pd, d], |i| if i / d == i % d { 1.0 } else { 0.0 }),
    );
    model.params.insert("encoder.reg_token", Tensor::full(&[1, d], -1000.0));
    model.params.insert("mask_token", Tensor::full(&[1, d], -7.5));
    Ok(model)
}

/// Tags patch `i` with value `i + 1` at the embedding output and checks that
/// after dropping, encoding (identity), reinsertion and unshuffling, decoder
/// row `r` holds patch `r - 1` or the mask token exactly. Also checks the
/// encoder sequence length.
pub fn sentinel_unshuffle(model: &SmaeModel<f64>, plan: &MaskPlan) -> Result<bool> {
    let cfg = &model.config;
    let (n, d) = (cfg.num_patches(), cfg.hidden_dim);
    let x = Tensor::from_fn(&[n, cfg.patch_dim()], |k| (k / cfg.patch_dim() + 1) as f64);
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, |_| false);
    let trace = model.forward(&mut tape, &p, &x, &x, plan)?;
    if tape.shape(trace.encoder_input) != [n - plan.num_masked() + 1, d] {
        return Ok(false);
    }
    let emb = tape.value(trace.embedded);
    let dec = tape.value(trace.decoder_tokens);
    let masked: std::collections::HashSet<usize> = plan.masked().iter().copied().collect();
    for r in 0..=n {
        let got = dec.row(r);
        let ok = if r > 0 && masked.contains(&(r - 1)) {
            got.iter().all(|&v| v == -7.5)
        } else {
            got == emb.row(r)
        };
        if !ok {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Max deviation from permutation equivariance over `trials` permutations:
/// permuting patch tokens must permute output rows 1..N and keep row 0.
pub fn equivariance_error(model: &SitModel<f32>, trials: usize, seed: u64) -> Result<f64> {
    use rand::seq::SliceRandom;
    let cfg = &model.config;
    let n = cfg.num_patches();
    let mut r = rng(seed);
    let x: Tensor<f32> = Tensor::from_fn(&[n, cfg.patch_dim()], |_| r.gen_range(-1.0..1.0));
    let opts = ForwardOptions {
        positional_encoding: false,
    };
    let run = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, |_| false);
        let out = model.forward(&mut tape, &p, t, opts)?;
        Ok(tape.value(out.sequence).clone())
    };
    let base = run(&x)?;
    let mut worst = 0f64;
    for _ in 0..trials {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let w = cfg.patch_dim();
        let xp = Tensor::from_fn(&[n, w], |k| x.data()[perm[k / w] * w + k % w]);
        let out = run(&xp)?;
        for row in 0..=n {
            let src = if row == 0 { 0 } else { perm[row - 1] + 1 };
            for (a, b) in out.row(row).iter().zip(base.row(src)) {
                worst = worst.max((a - b).abs() as f64);
            }
        }
    }
    Ok(worst)
}

/// Largest `|row sum - 1|` over all attention maps of one forward pass.
pub fn attention_row_error(model: &SitModel<f32>, seed: u64) -> Result<f64> {
    let cfg = &model.config;
    let mut r = rng(seed);
    let x: Tensor<f32> = Tensor::from_fn(&[cfg.num_patches(), cfg.patch_dim()], |_| r.gen_range(-1.0..1.0));
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, |_| false);
    let out = model.forward(&mut tape, &p, &x, ForwardOptions::default())?;
    let mut worst = 0f64;
    for a in &out.attention {
        let t = tape.value(*a);
        let cols = t.shape()[1];
        for row in t.data().chunks(cols) {
            worst = worst.max((row.iter().map(|v| *v as f64).sum::<f64>() - 1.0).abs());
        }
    }
    Ok(worst)
}

pub fn embed_only(model: &SitModel<f64>, tokens: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, |_| false);
    let x = tape.constant(tokens.clone());
    let pe = tape.constant(model.pos_enc().clone());
    let seq = sit::embed(&mut tape, &p, x, Some(pe))?;
    Ok(tape.value(seq).clone())
}
