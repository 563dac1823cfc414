//! Surface vision transformer: patch tokens, sine-cosine positions, a
//! pre-norm encoder and a layernorm + linear regression head.

pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesy::PatchTable;
use crate::tensor::{BoundParams, ParamSet, Scalar, Tape, Tensor, Var};

pub const ENCODER_PREFIX: &str = "encoder.";
pub const HEAD_PREFIX: &str = "head.";
const TOKEN_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SitConfig {
    pub patch_level: u32,
    pub data_level: u32,
    pub channels: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl SitConfig {
    /// SiT-tiny on ico6 data with ico3 patches.
    pub fn tiny() -> Self {
        Self {
            patch_level: 3,
            data_level: 6,
            channels: 4,
            hidden_dim: 192,
            layers: 12,
            heads: 3,
            ffn_mult: 4,
        }
    }

    /// ico4 data, ico1 patches, D=64, L=4, H=2.
    pub fn desk() -> Self {
        Self {
            patch_level: 1,
            data_level: 4,
            channels: 4,
            hidden_dim: 64,
            layers: 4,
            heads: 2,
            ffn_mult: 4,
        }
    }

    pub fn depth(&self) -> u32 {
        self.data_level.saturating_sub(self.patch_level)
    }

    pub fn num_patches(&self) -> usize {
        20 * 4usize.pow(self.patch_level)
    }

    pub fn num_vertices(&self) -> usize {
        10 * 4usize.pow(self.data_level) + 2
    }

    pub fn patch_size(&self) -> usize {
        PatchTable::patch_size_for(self.depth())
    }

    /// Width of a flattened patch token: patch size times channels.
    pub fn patch_dim(&self) -> usize {
        self.patch_size() * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads.max(1)
    }

    /// Structural checks needed to build a model. Zero layers is allowed
    /// here (an identity encoder); [`SitConfig::validate`] rejects it.
    pub fn check_buildable(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.data_level <= self.patch_level {
            problems.push(format!(
                "dataLevel {} must exceed patchLevel {}",
                self.data_level, self.patch_level
            ));
        }
        if self.channels == 0 {
            problems.push("channels must be at least 1".into());
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            problems.push(format!("hiddenDim {} not divisible by heads {}", self.hidden_dim, self.heads));
        }
        if self.hidden_dim == 0 || self.hidden_dim % 2 != 0 {
            problems.push(format!("hiddenDim {} must be even and positive", self.hidden_dim));
        }
        if self.ffn_mult == 0 {
            problems.push("ffnMult must be at least 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.check_buildable()?;
        if self.layers == 0 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        Ok(())
    }

    /// True when encoder weights trained under `other` fit this config.
    pub fn encoder_compatible(&self, other: &SitConfig) -> bool {
        self == other
    }
}

/// Flattens a `|V| × C` surface map into `N × (P·C)` patch tokens.
///
/// Each row holds channel 0 at the patch's vertices in table order, then
/// channel 1, and so on.
pub fn patchify<T: Scalar>(map: &Tensor<T>, table: &PatchTable) -> Result<Tensor<T>> {
    if map.rank() != 2 || map.shape()[0] != table.num_vertices() {
        return Err(Error::Shape(format!(
            "surface map {:?} does not match {} data-level vertices",
            map.shape(),
            table.num_vertices()
        )));
    }
    let c = map.shape()[1];
    let p = table.patch_size;
    let mut data = Vec::with_capacity(table.num_patches() * p * c);
    for row in table.patches() {
        for ch in 0..c {
            data.extend(row.iter().map(|&v| map.data()[v as usize * c + ch]));
        }
    }
    Ok(Tensor::new(&[table.num_patches(), p * c], data)?)
}

/// Inverse of [`patchify`]: every vertex receives the mean of all patch slots
/// that reference it.
pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, table: &PatchTable) -> Result<Tensor<T>> {
    let p = table.patch_size;
    if tokens.rank() != 2 || tokens.shape()[0] != table.num_patches() || tokens.shape()[1] % p != 0 {
        return Err(Error::Shape(format!(
            "tokens {:?} do not match {} patches of {p} vertices",
            tokens.shape(),
            table.num_patches()
        )));
    }
    let c = tokens.shape()[1] / p;
    let mut sum = vec![T::zero(); table.num_vertices() * c];
    for (i, row) in table.patches().enumerate() {
        let tok = tokens.row(i);
        for ch in 0..c {
            for (k, &v) in row.iter().enumerate() {
                let dst = v as usize * c + ch;
                sum[dst] = sum[dst] + tok[ch * p + k];
            }
        }
    }
    for (v, m) in table.multiplicity.iter().enumerate() {
        let m = T::of(*m as f64);
        for ch in 0..c {
            sum[v * c + ch] = sum[v * c + ch] / m;
        }
    }
    Ok(Tensor::new(&[table.num_vertices(), c], sum)?)
}

/// Fixed 1D sine-cosine positional encoding, `length × dim`.
///
/// Column `j < dim/2` holds `sin(p / 10000^(2j/dim))`; column `dim/2 + j`
/// holds the matching cosine.
pub fn sincos_posenc<T: Scalar>(length: usize, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("positional encoding dim {dim} must be even")));
    }
    let half = dim / 2;
    let mut data = vec![T::zero(); length * dim];
    for p in 0..length {
        for j in 0..half {
            let angle = p as f64 / 10000f64.powf(2.0 * j as f64 / dim as f64);
            data[p * dim + j] = T::of(angle.sin());
            data[p * dim + half + j] = T::of(angle.cos());
        }
    }
    Ok(Tensor::new(&[length, dim], data)?)
}

pub fn init_encoder<T: Scalar>(params: &mut ParamSet<T>, cfg: &SitConfig, rng: &mut ChaCha8Rng) {
    layers::init_linear(params, "encoder.patch_embed", cfg.patch_dim(), cfg.hidden_dim, rng);
    layers::init_normal(params, "encoder.reg_token", &[1, cfg.hidden_dim], TOKEN_INIT_STD, rng);
    for i in 0..cfg.layers {
        layers::init_block(params, &format!("encoder.blocks.{i}"), cfg.hidden_dim, cfg.ffn_mult, rng);
    }
}

pub fn init_head<T: Scalar>(params: &mut ParamSet<T>, cfg: &SitConfig, rng: &mut ChaCha8Rng) {
    layers::init_layer_norm(params, "head.norm", cfg.hidden_dim);
    layers::init_linear(params, "head.linear", cfg.hidden_dim, 1, rng);
}

/// Linear projection of `N × (P·C)` patch tokens to `N × D`.
pub fn embed_patches<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams<T>, tokens: Var) -> Result<Var> {
    Ok(layers::linear(tape, p, "encoder.patch_embed", tokens)?)
}

/// Prepends the learned regression token as row 0.
pub fn prepend_reg_token<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams<T>, x: Var) -> Result<Var> {
    let reg = p.var("encoder.reg_token")?;
    Ok(tape.concat(&[reg, x], 0)?)
}

/// Patch projection, regression token and (optionally) positional encoding:
/// an `(N+1) × D` sequence.
pub fn embed<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams<T>, tokens: Var, pos_enc: Option<Var>) -> Result<Var> {
    let x = embed_patches(tape, p, tokens)?;
    let x = prepend_reg_token(tape, p, x)?;
    match pos_enc {
        Some(pe) => Ok(tape.add(x, pe)?),
        None => Ok(x),
    }
}

/// The encoder's `L` blocks. Returns the output sequence and all attention
/// maps (layer-major, head-minor).
pub fn encoder_forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams<T>,
    cfg: &SitConfig,
    seq: Var,
) -> Result<(Var, Vec<Var>)> {
    Ok(layers::stack(tape, p, "encoder.blocks", seq, cfg.layers, cfg.heads)?)
}

/// Head applied to row 0 (the regression token); a `1 × 1` prediction.
pub fn predict<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams<T>, seq_out: Var) -> Result<Var> {
    let reg = tape.gather_rows(seq_out, &[0])?;
    let h = layers::layer_norm(tape, p, "head.norm", reg)?;
    Ok(layers::linear(tape, p, "head.linear", h)?)
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub positional_encoding: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            positional_encoding: true,
        }
    }
}

pub struct SitOutput {
    pub sequence: Var,
    pub prediction: Var,
    pub attention: Vec<Var>,
}

/// Encoder plus regression head.
#[derive(Debug, Clone)]
pub struct SitModel<T> {
    pub config: SitConfig,
    pub params: ParamSet<T>,
    pos_enc: Tensor<T>,
}

impl<T: Scalar> SitModel<T> {
    pub fn new(config: SitConfig, seed: u64) -> Result<Self> {
        config.check_buildable()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        init_encoder(&mut params, &config, &mut rng);
        init_head(&mut params, &config, &mut rng);
        Self::from_params(config, params)
    }

    pub fn from_params(config: SitConfig, params: ParamSet<T>) -> Result<Self> {
        config.check_buildable()?;
        let pos_enc = sincos_posenc(config.num_patches() + 1, config.hidden_dim)?;
        Ok(Self {
            config,
            params,
            pos_enc,
        })
    }

    pub fn pos_enc(&self) -> &Tensor<T> {
        &self.pos_enc
    }

    pub fn head_param_count(&self) -> usize {
        self.params.count(|n| n.starts_with(HEAD_PREFIX))
    }

    pub fn encoder_param_count(&self) -> usize {
        self.params.count(|n| n.starts_with(ENCODER_PREFIX))
    }

    /// Overwrites every `encoder.*` parameter with the one in `source`.
    pub fn load_encoder(&mut self, source_config: &SitConfig, source: &ParamSet<T>) -> Result<()> {
        if !self.config.encoder_compatible(source_config) {
            return Err(Error::Config(format!(
                "checkpoint encoder config {source_config:?} does not match model config {:?}",
                self.config
            )));
        }
        let names: Vec<String> = self
            .params
            .names()
            .iter()
            .filter(|n| n.starts_with(ENCODER_PREFIX))
            .cloned()
            .collect();
        for name in names {
            let value = source
                .get(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks `{name}`")))?;
            if value.shape() != self.params.get(&name).expect("own name").shape() {
                return Err(Error::Shape(format!("checkpoint `{name}` has shape {:?}", value.shape())));
            }
            self.params.insert(name, value.clone());
        }
        Ok(())
    }

    /// Full forward pass on bound parameters.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &BoundParams<T>,
        tokens: &Tensor<T>,
        opts: ForwardOptions,
    ) -> Result<SitOutput> {
        if tokens.shape() != [self.config.num_patches(), self.config.patch_dim()] {
            return Err(Error::Shape(format!(
                "tokens {:?}, expected [{}, {}]",
                tokens.shape(),
                self.config.num_patches(),
                self.config.patch_dim()
            )));
        }
        let x = tape.constant(tokens.clone());
        let pe = opts.positional_encoding.then(|| tape.constant(self.pos_enc.clone()));
        let seq = embed(tape, p, x, pe)?;
        let (sequence, attention) = encoder_forward(tape, p, &self.config, seq)?;
        let prediction = predict(tape, p, sequence)?;
        Ok(SitOutput {
            sequence,
            prediction,
            attention,
        })
    }

    /// Prediction without gradient tracking.
    pub fn predict_value(&self, tokens: &Tensor<T>) -> Result<T> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, |_| false);
        let out = self.forward(&mut tape, &p, tokens, ForwardOptions::default())?;
        Ok(tape.value(out.prediction).item())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesy::{build_hierarchy, patch_table};
    use rand::Rng;

    fn random_map(rows: usize, c: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[rows, c], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn patchify_shapes_and_constant_map() {
        let table = patch_table(&build_hierarchy(1, 3).unwrap());
        let map = Tensor::full(&[2562, 4], 1.5f64);
        let tokens = patchify(&map, &table).unwrap();
        assert_eq!(tokens.shape(), &[80, 180]);
        assert!(tokens.data().iter().all(|v| *v == 1.5));
        let bad = Tensor::<f64>::zeros(&[10, 4]);
        assert!(patchify(&bad, &table).is_err());
    }

    #[test]
    fn patchify_unpatchify_round_trip() {
        let table = patch_table(&build_hierarchy(0, 3).unwrap());
        for seed in 0..5 {
            let map = random_map(table.num_vertices(), 3, seed);
            let back = unpatchify(&patchify(&map, &table).unwrap(), &table).unwrap();
            for (a, b) in map.data().iter().zip(back.data()) {
                assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn unpatchify_zero_and_disagreement() {
        let table = patch_table(&build_hierarchy(0, 1).unwrap());
        let zero = Tensor::<f64>::zeros(&[20, 6]);
        assert!(unpatchify(&zero, &table).unwrap().data().iter().all(|v| *v == 0.0));
        // Vertex 0 is corner `a` of face 0 and is shared by 5 patches.
        let mut tokens = Tensor::<f64>::zeros(&[20, 6]);
        let holders: Vec<(usize, usize)> = table
            .patches()
            .enumerate()
            .filter_map(|(i, row)| row.iter().position(|&v| v == 0).map(|k| (i, k)))
            .collect();
        assert_eq!(holders.len(), 5);
        tokens.data_mut()[holders[0].0 * 6 + holders[0].1] = 1.0;
        tokens.data_mut()[holders[1].0 * 6 + holders[1].1] = -1.0;
        let map = unpatchify(&tokens, &table).unwrap();
        assert_eq!(map.data()[0], 0.0);
        assert!(unpatchify(&Tensor::<f64>::zeros(&[20, 7]), &table).is_err());
    }

    #[test]
    fn posenc_properties() {
        let pe: Tensor<f64> = sincos_posenc(81, 64).unwrap();
        assert!(pe.row(0)[..32].iter().all(|v| *v == 0.0));
        assert!(pe.row(0)[32..].iter().all(|v| *v == 1.0));
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(sincos_posenc::<f64>(4, 3).is_err());
    }

    #[test]
    fn posenc_rows_distinct() {
        // Brute-force pairwise comparison.
        let n = 1281;
        let pe: Tensor<f64> = sincos_posenc(n, 192).unwrap();
        for p in 0..n {
            for q in p + 1..n {
                assert!(pe.row(p) != pe.row(q), "rows {p} and {q} coincide");
            }
        }
    }

    #[test]
    fn head_parameter_counts() {
        let mut cfg = SitConfig::desk();
        let m = SitModel::<f32>::new(cfg.clone(), 0).unwrap();
        assert_eq!(m.head_param_count(), 193);
        cfg = SitConfig::tiny();
        cfg.layers = 1;
        let m = SitModel::<f32>::new(cfg, 0).unwrap();
        assert_eq!(m.head_param_count(), 577);
    }

    #[test]
    fn embed_shapes_and_zero_input() {
        let mut cfg = SitConfig::desk();
        cfg.layers = 0;
        let mut m = SitModel::<f64>::new(cfg.clone(), 1).unwrap();
        m.params.insert("encoder.patch_embed.weight", Tensor::zeros(&[180, 64]));
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape, |_| false);
        let x = tape.constant(Tensor::zeros(&[80, 180]));
        let pe = tape.constant(m.pos_enc().clone());
        let seq = embed(&mut tape, &p, x, Some(pe)).unwrap();
        assert_eq!(tape.shape(seq), &[81, 64]);
        assert_eq!(&tape.value(seq).data()[64..], &m.pos_enc().data()[64..]);
        // L = 0 encoder is the identity.
        let (out, _) = encoder_forward(&mut tape, &p, &cfg, seq).unwrap();
        assert_eq!(tape.value(out), tape.value(seq));
    }

    #[test]
    fn zero_head_predicts_bias() {
        let cfg = SitConfig::desk();
        let mut m = SitModel::<f64>::new(cfg, 3).unwrap();
        m.params.insert("head.linear.weight", Tensor::zeros(&[64, 1]));
        m.params.insert("head.linear.bias", Tensor::new(&[1], vec![0.25]).unwrap());
        let tokens = random_map(80, 180, 9);
        assert_eq!(m.predict_value(&tokens).unwrap(), 0.25);
    }

    #[test]
    fn config_validation() {
        let mut cfg = SitConfig::desk();
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        cfg = SitConfig::desk();
        cfg.layers = 0;
        assert!(cfg.validate().is_err());
        assert!(cfg.check_buildable().is_ok());
    }
}
