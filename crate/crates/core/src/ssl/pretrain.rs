//! Pretraining loop shared by sMAE and MPP.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorruptionRecord, MaskPlan, MppModel, SmaeModel};
use crate::batch::{batch_gradients, mean_loss};
use crate::checkpoint::{Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geodesy::{build_hierarchy, patch_table, PatchTable};
use crate::sit::{unpatchify, SitConfig};
use crate::synthcortex::{normalize, subject_tokens, write_dataset, Split, SurfaceDataset, SurfaceSubject};
use crate::tensor::{sgd_step, BoundParams, ParamSet, SgdState, Tape, Tensor, TensorError, Var};

const STREAM_TRAIN: u64 = 1;
const STREAM_VAL: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SslMethod {
    Smae,
    Mpp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct PretrainConfig {
    pub method: SslMethod,
    /// sMAE masking ratio; MPP uses its fixed corruption fractions.
    pub ratio: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Reconstruction dump period in epochs; 0 disables dumps.
    pub dump_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            method: SslMethod::Smae,
            ratio: 0.5,
            epochs: 100,
            batch: 16,
            seed: 0,
            learning_rate: 1e-4,
            momentum: 0.9,
            dump_every: 1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.method == SslMethod::Smae && !(self.ratio > 0.0 && self.ratio < 1.0) {
            problems.push(format!("ratio {} must lie in (0, 1)", self.ratio));
        }
        if self.batch == 0 {
            problems.push("batch must be at least 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learningRate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PretrainEpoch {
    pub epoch: usize,
    /// Mean training loss over the epoch; `NaN` for epoch 0.
    pub train_loss: f64,
    /// Validation reconstruction MSE: masked patches for sMAE, all patches
    /// for MPP.
    pub val_masked_mse: f64,
    pub wall_clock_sec: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub history: Vec<PretrainEpoch>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub checkpoint: Checkpoint,
}

impl PretrainOutcome {
    /// Relative drop of validation MSE from epoch 0 to the best epoch.
    pub fn val_reduction(&self) -> f64 {
        let first = self.history[0].val_masked_mse;
        (first - self.best_val) / first
    }
}

enum Corruption {
    Mask(MaskPlan),
    Mpp(CorruptionRecord),
}

enum Pretrainer {
    Smae(SmaeModel<f32>),
    Mpp(MppModel<f32>),
}

impl Pretrainer {
    fn new(method: SslMethod, cfg: &SitConfig, seed: u64) -> Result<Self> {
        Ok(match method {
            SslMethod::Smae => Pretrainer::Smae(SmaeModel::new(cfg.clone(), seed)?),
            SslMethod::Mpp => Pretrainer::Mpp(MppModel::new(cfg.clone(), seed)?),
        })
    }

    fn params(&self) -> &ParamSet<f32> {
        match self {
            Pretrainer::Smae(m) => &m.params,
            Pretrainer::Mpp(m) => &m.params,
        }
    }

    fn params_mut(&mut self) -> &mut ParamSet<f32> {
        match self {
            Pretrainer::Smae(m) => &mut m.params,
            Pretrainer::Mpp(m) => &mut m.params,
        }
    }

    fn kind(&self) -> ModelKind {
        match self {
            Pretrainer::Smae(_) => ModelKind::Smae,
            Pretrainer::Mpp(_) => ModelKind::Mpp,
        }
    }

    fn sample(&self, n: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Result<Corruption> {
        Ok(match self {
            Pretrainer::Smae(_) => Corruption::Mask(MaskPlan::sample(n, ratio, rng)?),
            Pretrainer::Mpp(_) => Corruption::Mpp(CorruptionRecord::sample(n, rng)?),
        })
    }

    /// Returns `(reconstruction, loss)`.
    fn forward(
        &self,
        tape: &mut Tape<f32>,
        p: &BoundParams<f32>,
        tokens: &Tensor<f32>,
        corruption: &Corruption,
    ) -> Result<(Var, Var)> {
        match (self, corruption) {
            (Pretrainer::Smae(m), Corruption::Mask(plan)) => {
                let t = m.forward(tape, p, tokens, tokens, plan)?;
                Ok((t.reconstruction, t.loss))
            }
            (Pretrainer::Mpp(m), Corruption::Mpp(rec)) => {
                let t = m.forward(tape, p, tokens, tokens, rec)?;
                Ok((t.reconstruction, t.loss))
            }
            _ => unreachable!("corruption sampled by the same pretrainer"),
        }
    }
}

fn check_dataset(dataset: &SurfaceDataset, cfg: &SitConfig) -> Result<()> {
    if dataset.data_level != cfg.data_level || dataset.patch_level != cfg.patch_level || dataset.channels != cfg.channels {
        return Err(Error::Config(format!(
            "dataset (dataLevel {}, patchLevel {}, channels {}) does not match model (dataLevel {}, patchLevel {}, channels {})",
            dataset.data_level, dataset.patch_level, dataset.channels, cfg.data_level, cfg.patch_level, cfg.channels
        )));
    }
    Ok(())
}

pub(crate) fn table_for(cfg: &SitConfig) -> Result<PatchTable> {
    Ok(patch_table(&build_hierarchy(cfg.patch_level, cfg.depth())?))
}

pub(crate) fn split_tokens(dataset: &SurfaceDataset, split: Split, table: &PatchTable) -> Result<Vec<Tensor<f32>>> {
    dataset.split(split).map(|s| subject_tokens(s, table)).collect()
}

/// Trains an sMAE or MPP model on the train split, tracking validation
/// reconstruction error after every epoch (epoch 0 is the untrained model).
///
/// With `out_dir`, writes `metrics.csv`, the best-validation `checkpoint.smck`
/// and reconstruction dumps `recon_epoch_NNN.ssrf` of the first validation
/// subject.
pub fn pretrain(
    dataset: &SurfaceDataset,
    model: &SitConfig,
    cfg: &PretrainConfig,
    out_dir: Option<&Path>,
    exec: Exec,
) -> Result<PretrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    check_dataset(dataset, model)?;
    let table = table_for(model)?;
    let train = split_tokens(dataset, Split::Train, &table)?;
    let val = split_tokens(dataset, Split::Val, &table)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "pretraining needs train and val subjects, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    let n = model.num_patches();
    let mut net = Pretrainer::new(cfg.method, model, cfg.seed)?;
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    val_rng.set_stream(STREAM_VAL);
    let val_items: Vec<(&Tensor<f32>, Corruption)> = val
        .iter()
        .map(|t| Ok((t, net.sample(n, cfg.ratio, &mut val_rng)?)))
        .collect::<Result<_>>()?;
    let mut train_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    train_rng.set_stream(STREAM_TRAIN);

    let run = serde_json::json!({ "pretrain": cfg, "model": model });
    let mut csv = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut f = fs::File::create(dir.join("metrics.csv"))?;
            writeln!(f, "# {run}")?;
            writeln!(f, "epoch,trainLoss,valMaskedMSE,wallClockSec")?;
            Some(f)
        }
        None => None,
    };
    let dump_subject = dataset.split(Split::Val).next().expect("val split is non-empty");

    let start = Instant::now();
    let mut state = SgdState::new(net.params(), cfg.learning_rate as f32, cfg.momentum as f32);
    let trainable = net.params().mask(|_| true);
    let mut history = Vec::with_capacity(cfg.epochs + 1);
    let mut best: Option<(usize, f64, ParamSet<f32>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..=cfg.epochs {
        let mut train_loss = f64::NAN;
        if epoch > 0 {
            order.shuffle(&mut train_rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch) {
                let items: Vec<(&Tensor<f32>, Corruption)> = chunk
                    .iter()
                    .map(|&i| Ok((&train[i], net.sample(n, cfg.ratio, &mut train_rng)?)))
                    .collect::<Result<_>>()?;
                let bg = batch_gradients(net.params(), &trainable, &items, exec, |(x, c), tape, p| {
                    Ok(net.forward(tape, p, x, c)?.1)
                })?;
                if !bg.loss.is_finite() {
                    return Err(Error::NonFinite(format!("training loss {} at epoch {epoch}", bg.loss)));
                }
                total += bg.loss * chunk.len() as f64;
                match sgd_step(net.params_mut(), &bg.grads, &mut state) {
                    Err(TensorError::NonFinite(name)) => {
                        return Err(Error::NonFinite(format!("gradient of `{name}` at epoch {epoch}")))
                    }
                    other => other?,
                }
            }
            train_loss = total / train.len() as f64;
        }
        let val_loss = mean_loss(net.params(), &val_items, exec, |(x, c), tape, p| Ok(net.forward(tape, p, x, c)?.1))?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss {val_loss} at epoch {epoch}")));
        }
        let row = PretrainEpoch {
            epoch,
            train_loss,
            val_masked_mse: val_loss,
            wall_clock_sec: start.elapsed().as_secs_f64(),
        };
        if let Some(f) = csv.as_mut() {
            writeln!(
                f,
                "{},{},{},{:.3}",
                row.epoch, row.train_loss, row.val_masked_mse, row.wall_clock_sec
            )?;
        }
        history.push(row);
        if best.as_ref().map_or(true, |(_, b, _)| val_loss < *b) {
            best = Some((epoch, val_loss, net.params().clone()));
            if let Some(dir) = out_dir {
                Checkpoint::new(net.kind(), model.clone(), net.params(), run.clone()).write(dir.join("checkpoint.smck"))?;
            }
        }
        if let Some(dir) = out_dir {
            if cfg.dump_every > 0 && epoch % cfg.dump_every == 0 {
                let (x, c) = &val_items[0];
                let dump = reconstruction_dump(&net, &table, dataset, model, dump_subject, x, c, epoch, &run)?;
                write_dataset(&dump, dir.join(format!("recon_epoch_{epoch:03}.ssrf")))?;
            }
        }
    }

    let (best_epoch, best_val, params) = best.expect("at least epoch 0 evaluated");
    let checkpoint = Checkpoint::new(net.kind(), model.clone(), &params, run);
    Ok(PretrainOutcome {
        history,
        best_epoch,
        best_val,
        checkpoint,
    })
}

/// Two-subject dataset: the normalised input and its reconstruction.
#[allow(clippy::too_many_arguments)]
fn reconstruction_dump(
    net: &Pretrainer,
    table: &PatchTable,
    dataset: &SurfaceDataset,
    model: &SitConfig,
    subject: &SurfaceSubject,
    tokens: &Tensor<f32>,
    corruption: &Corruption,
    epoch: usize,
    run: &serde_json::Value,
) -> Result<SurfaceDataset> {
    let mut tape = Tape::new();
    let p = net.params().bind(&mut tape, |_| false);
    let (recon, _) = net.forward(&mut tape, &p, tokens, corruption)?;
    let map = unpatchify(tape.value(recon), table)?;
    let corrupted: Vec<usize> = match corruption {
        Corruption::Mask(plan) => plan.masked().to_vec(),
        Corruption::Mpp(rec) => {
            let mut v = rec.masked.clone();
            v.extend(rec.swapped.iter().map(|(d, _)| *d));
            v.extend(&rec.kept);
            v
        }
    };
    let input = normalize(subject);
    Ok(SurfaceDataset {
        data_level: model.data_level,
        patch_level: model.patch_level,
        channels: model.channels,
        subjects: vec![
            SurfaceSubject {
                id: format!("{}/input", subject.id),
                ..input.clone()
            },
            SurfaceSubject {
                id: format!("{}/reconstruction", subject.id),
                map,
                ..input
            },
        ],
        provenance: serde_json::json!({
            "epoch": epoch,
            "corruptedPatches": corrupted,
            "run": run,
            "dataset": dataset.provenance,
        }),
    })
}
