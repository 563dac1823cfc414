//! Self-supervised pretraining objectives.
//!
//! * sMAE: the encoder sees only the regression token and the unmasked patch
//!   tokens; mask tokens are re-inserted, the sequence is unshuffled back to
//!   patch order, and a light decoder reconstructs every patch. The loss only
//!   reads masked patches.
//! * MPP: half of the patch embeddings are corrupted (masked, swapped with
//!   another patch, or kept), the full sequence is encoded and projected back
//!   to patch space, and the loss reads every patch.

mod pretrain;

pub use pretrain::{pretrain, PretrainConfig, PretrainEpoch, PretrainOutcome, SslMethod};
pub(crate) use pretrain::{split_tokens, table_for};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::sit::{self, layers, SitConfig};
use crate::synthcortex::round_count;
use crate::tensor::{BoundParams, ParamSet, Scalar, Tape, Tensor, Var};

/// Masking ratios of the ratio sweep.
pub const SWEEP_RATIOS: [f64; 4] = [0.25, 0.50, 0.75, 0.90];
pub const MPP_MASKED: f64 = 0.40;
pub const MPP_SWAPPED: f64 = 0.05;
pub const MPP_CORRUPTED: f64 = 0.50;
pub const MPP_MIN_PATCHES: usize = 20;

/// Random split of the `N` patch tokens into masked and unmasked sets.
///
/// Patch indices are 0-based; patch `i` is row `i + 1` of the embedded
/// sequence, whose row 0 is the regression token and is never masked.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub num_patches: usize,
    pub ratio: f64,
    /// Shuffled patch order: unmasked patches first, masked last.
    pub permutation: Vec<usize>,
    /// `inverse[permutation[k]] == k`.
    pub inverse: Vec<usize>,
    num_masked: usize,
}

impl MaskPlan {
    pub fn masked_count(num_patches: usize, ratio: f64) -> usize {
        round_count(ratio * num_patches as f64)
    }

    pub fn sample(num_patches: usize, ratio: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::Config(format!("masking ratio {ratio} must lie in (0, 1)")));
        }
        let num_masked = Self::masked_count(num_patches, ratio);
        if num_masked == 0 || num_masked >= num_patches {
            return Err(Error::Config(format!(
                "masking ratio {ratio} masks {num_masked} of {num_patches} patches"
            )));
        }
        let mut permutation: Vec<usize> = (0..num_patches).collect();
        permutation.shuffle(rng);
        let mut inverse = vec![0; num_patches];
        for (k, &p) in permutation.iter().enumerate() {
            inverse[p] = k;
        }
        Ok(Self {
            num_patches,
            ratio,
            permutation,
            inverse,
            num_masked,
        })
    }

    pub fn num_masked(&self) -> usize {
        self.num_masked
    }

    pub fn num_unmasked(&self) -> usize {
        self.num_patches - self.num_masked
    }

    pub fn unmasked(&self) -> &[usize] {
        &self.permutation[..self.num_unmasked()]
    }

    pub fn masked(&self) -> &[usize] {
        &self.permutation[self.num_unmasked()..]
    }

    /// Rows of the embedded sequence fed to the encoder: the regression
    /// token, then the unmasked patches in shuffled order.
    pub fn encoder_rows(&self) -> Vec<usize> {
        std::iter::once(0).chain(self.unmasked().iter().map(|p| p + 1)).collect()
    }

    /// For the decoder sequence in original order, the row to take from
    /// `[encoder output (1 + unmasked rows); mask tokens (masked rows)]`.
    /// Because masked patches sit last in the shuffled order, that stacked
    /// sequence is exactly the shuffled sequence and row `1 + inverse[i]`
    /// holds patch `i`.
    pub fn restore_rows(&self) -> Vec<usize> {
        std::iter::once(0).chain(self.inverse.iter().map(|k| k + 1)).collect()
    }
}

/// MPP corruption of the patch embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionRecord {
    pub num_patches: usize,
    pub masked: Vec<usize>,
    /// `(destination, source)`: destination takes the source's embedding.
    pub swapped: Vec<(usize, usize)>,
    pub kept: Vec<usize>,
    pub untouched: Vec<usize>,
}

impl CorruptionRecord {
    /// `(masked, swapped, kept)` counts for `n` patches.
    pub fn counts(n: usize) -> (usize, usize, usize) {
        let total = round_count(MPP_CORRUPTED * n as f64);
        let masked = round_count(MPP_MASKED * n as f64);
        let swapped = round_count(MPP_SWAPPED * n as f64);
        (masked, swapped, total.saturating_sub(masked + swapped))
    }

    pub fn sample(n: usize, rng: &mut impl Rng) -> Result<Self> {
        if n < MPP_MIN_PATCHES {
            return Err(Error::Config(format!("MPP needs at least {MPP_MIN_PATCHES} patches, got {n}")));
        }
        let (m, s, k) = Self::counts(n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let masked = order[..m].to_vec();
        let swapped = order[m..m + s]
            .iter()
            .map(|&dst| {
                let mut src = rng.gen_range(0..n - 1);
                if src >= dst {
                    src += 1;
                }
                (dst, src)
            })
            .collect();
        let kept = order[m + s..m + s + k].to_vec();
        let untouched = order[m + s + k..].to_vec();
        Ok(Self {
            num_patches: n,
            masked,
            swapped,
            kept,
            untouched,
        })
    }

    /// No corruption at all.
    pub fn none(n: usize) -> Self {
        Self {
            num_patches: n,
            masked: Vec::new(),
            swapped: Vec::new(),
            kept: Vec::new(),
            untouched: (0..n).collect(),
        }
    }

    /// Row of `[embeddings (n rows); mask token]` that feeds each patch slot.
    pub fn source_rows(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = (0..self.num_patches).collect();
        for &i in &self.masked {
            rows[i] = self.num_patches;
        }
        for &(dst, src) in &self.swapped {
            rows[dst] = src;
        }
        rows
    }
}

/// Replaces corrupted rows of an `N × D` embedding per `record`.
pub fn mpp_corrupt<T: Scalar>(tape: &mut Tape<T>, embedded: Var, mask_token: Var, record: &CorruptionRecord) -> Result<Var> {
    let stacked = tape.concat(&[embedded, mask_token], 0)?;
    Ok(tape.gather_rows(stacked, &record.source_rows())?)
}

/// Appends one mask token per masked patch after the encoder output and
/// restores the original patch order.
pub fn unshuffle_with_mask_tokens<T: Scalar>(
    tape: &mut Tape<T>,
    encoded: Var,
    mask_token: Var,
    plan: &MaskPlan,
) -> Result<Var> {
    let fill = tape.gather_rows(mask_token, &vec![0; plan.num_masked()])?;
    let stacked = tape.concat(&[encoded, fill], 0)?;
    Ok(tape.gather_rows(stacked, &plan.restore_rows())?)
}

pub fn decoder_layers(cfg: &SitConfig) -> usize {
    (cfg.layers / 4).max(1)
}

fn check_tokens<T: Scalar>(cfg: &SitConfig, input: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    let want = [cfg.num_patches(), cfg.patch_dim()];
    if input.shape() != want || target.shape() != want {
        return Err(Error::Shape(format!(
            "input {:?} / target {:?}, expected {want:?}",
            input.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Intermediate values of one sMAE forward pass.
pub struct SmaeTrace {
    /// `(N+1) × D` embedded sequence with encoder positions added.
    pub embedded: Var,
    pub encoder_input: Var,
    pub encoded: Var,
    /// Decoder input in original order, before decoder positions are added.
    pub decoder_tokens: Var,
    /// `N × (P·C)` reconstruction of every patch.
    pub reconstruction: Var,
    pub loss: Var,
}

/// Encoder, zero-initialised mask token and a `max(1, L/4)`-block decoder.
#[derive(Debug, Clone)]
pub struct SmaeModel<T> {
    pub config: SitConfig,
    pub params: ParamSet<T>,
    pos_enc: Tensor<T>,
}

impl<T: Scalar> SmaeModel<T> {
    pub fn new(config: SitConfig, seed: u64) -> Result<Self> {
        config.check_buildable()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        sit::init_encoder(&mut params, &config, &mut rng);
        params.insert("mask_token", Tensor::zeros(&[1, config.hidden_dim]));
        for i in 0..decoder_layers(&config) {
            layers::init_block(&mut params, &format!("decoder.blocks.{i}"), config.hidden_dim, config.ffn_mult, &mut rng);
        }
        layers::init_layer_norm(&mut params, "decoder.norm", config.hidden_dim);
        layers::init_linear(&mut params, "decoder.output_proj", config.hidden_dim, config.patch_dim(), &mut rng);
        Self::from_params(config, params)
    }

    pub fn from_params(config: SitConfig, params: ParamSet<T>) -> Result<Self> {
        config.check_buildable()?;
        let pos_enc = sit::sincos_posenc(config.num_patches() + 1, config.hidden_dim)?;
        Ok(Self {
            config,
            params,
            pos_enc,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(&[ModelKind::Smae])?;
        Self::from_params(ckpt.meta.model.clone(), ckpt.params_as())
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &BoundParams<T>,
        input: &Tensor<T>,
        target: &Tensor<T>,
        plan: &MaskPlan,
    ) -> Result<SmaeTrace> {
        let cfg = &self.config;
        check_tokens(cfg, input, target)?;
        if plan.num_patches != cfg.num_patches() {
            return Err(Error::Shape(format!(
                "mask plan over {} patches, model has {}",
                plan.num_patches,
                cfg.num_patches()
            )));
        }
        let x = tape.constant(input.clone());
        // Encoder and decoder positions share the same fixed table.
        let pe = tape.constant(self.pos_enc.clone());
        let embedded = sit::embed(tape, p, x, Some(pe))?;
        let encoder_input = tape.gather_rows(embedded, &plan.encoder_rows())?;
        let (encoded, _) = sit::encoder_forward(tape, p, cfg, encoder_input)?;
        let mask_token = p.var("mask_token")?;
        let decoder_tokens = unshuffle_with_mask_tokens(tape, encoded, mask_token, plan)?;
        let h = tape.add(decoder_tokens, pe)?;
        let (h, _) = layers::stack(tape, p, "decoder.blocks", h, decoder_layers(cfg), cfg.heads)?;
        let h = layers::layer_norm(tape, p, "decoder.norm", h)?;
        let patches = tape.slice(h, 0, 1, cfg.num_patches())?;
        let reconstruction = layers::linear(tape, p, "decoder.output_proj", patches)?;
        let t = tape.constant(target.clone());
        let loss = tape.masked_mse(reconstruction, t, plan.masked())?;
        Ok(SmaeTrace {
            embedded,
            encoder_input,
            encoded,
            decoder_tokens,
            reconstruction,
            loss,
        })
    }
}

pub struct MppTrace {
    pub corrupted: Var,
    pub reconstruction: Var,
    pub loss: Var,
}

/// Encoder, mask token and a linear projection back to patch space.
#[derive(Debug, Clone)]
pub struct MppModel<T> {
    pub config: SitConfig,
    pub params: ParamSet<T>,
    pos_enc: Tensor<T>,
}

impl<T: Scalar> MppModel<T> {
    pub fn new(config: SitConfig, seed: u64) -> Result<Self> {
        config.check_buildable()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        sit::init_encoder(&mut params, &config, &mut rng);
        params.insert("mask_token", Tensor::zeros(&[1, config.hidden_dim]));
        layers::init_linear(&mut params, "decoder.output_proj", config.hidden_dim, config.patch_dim(), &mut rng);
        Self::from_params(config, params)
    }

    pub fn from_params(config: SitConfig, params: ParamSet<T>) -> Result<Self> {
        config.check_buildable()?;
        let pos_enc = sit::sincos_posenc(config.num_patches() + 1, config.hidden_dim)?;
        Ok(Self {
            config,
            params,
            pos_enc,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(&[ModelKind::Mpp])?;
        Self::from_params(ckpt.meta.model.clone(), ckpt.params_as())
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &BoundParams<T>,
        input: &Tensor<T>,
        target: &Tensor<T>,
        record: &CorruptionRecord,
    ) -> Result<MppTrace> {
        let cfg = &self.config;
        check_tokens(cfg, input, target)?;
        if record.num_patches != cfg.num_patches() {
            return Err(Error::Shape(format!(
                "corruption over {} patches, model has {}",
                record.num_patches,
                cfg.num_patches()
            )));
        }
        let x = tape.constant(input.clone());
        let embedded = sit::embed_patches(tape, p, x)?;
        let mask_token = p.var("mask_token")?;
        let corrupted = mpp_corrupt(tape, embedded, mask_token, record)?;
        let seq = sit::prepend_reg_token(tape, p, corrupted)?;
        let pe = tape.constant(self.pos_enc.clone());
        let seq = tape.add(seq, pe)?;
        let (h, _) = sit::encoder_forward(tape, p, cfg, seq)?;
        let patches = tape.slice(h, 0, 1, cfg.num_patches())?;
        let reconstruction = layers::linear(tape, p, "decoder.output_proj", patches)?;
        let t = tape.constant(target.clone());
        let loss = tape.mse(reconstruction, t)?;
        Ok(MppTrace {
            corrupted,
            reconstruction,
            loss,
        })
    }
}
