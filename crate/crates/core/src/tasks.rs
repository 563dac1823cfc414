//! Supervised phenotype regression: training from scratch, end-to-end
//! finetuning from a pretrained encoder, linear probing, partial-data
//! subsets, evaluation and run comparison.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::batch_gradients;
use crate::checkpoint::{Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::sit::{self, SitConfig, SitModel, HEAD_PREFIX};
use crate::ssl::{split_tokens, table_for};
use crate::synthcortex::{phenotype_bins, round_count, Split, SurfaceDataset, DEFAULT_BINS};
use crate::tensor::{sgd_step, ParamSet, Scalar, SgdState, Tape, Tensor, TensorError};

pub const SCRATCH_EPOCHS: usize = 1000;
pub const FINETUNE_EPOCHS: usize = 200;
pub const DEFAULT_LR: f64 = 1e-4;
pub const PROBE_LR: f64 = 1e-5;
pub const DEFAULT_PATIENCE: usize = 20;
pub const IMPROVEMENT_THRESHOLD: f64 = 1e-6;
pub const DATA_FRACTIONS: [f64; 4] = [0.10, 0.20, 0.50, 1.0];

const STREAM_ORDER: u64 = 3;
const STREAM_SUBSET: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Random initialisation, everything trained.
    Scratch,
    /// Encoder from a checkpoint, everything trained.
    Finetune,
    /// Encoder frozen (from a checkpoint or random), head trained.
    Probe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct TrainRun {
    pub mode: TrainMode,
    pub data_fraction: f64,
    /// Defaults to 1000 from scratch and 200 otherwise.
    pub max_epochs: Option<usize>,
    pub patience: usize,
    /// Defaults to 1e-4, or 1e-5 when probing.
    pub learning_rate: Option<f64>,
    pub momentum: f64,
    pub seed: u64,
    pub batch: usize,
    pub bins: usize,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            mode: TrainMode::Scratch,
            data_fraction: 1.0,
            max_epochs: None,
            patience: DEFAULT_PATIENCE,
            learning_rate: None,
            momentum: 0.9,
            seed: 0,
            batch: 16,
            bins: DEFAULT_BINS,
        }
    }
}

impl TrainRun {
    pub fn new(mode: TrainMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn epochs(&self) -> usize {
        self.max_epochs.unwrap_or(match self.mode {
            TrainMode::Scratch => SCRATCH_EPOCHS,
            _ => FINETUNE_EPOCHS,
        })
    }

    pub fn lr(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.mode {
            TrainMode::Probe => PROBE_LR,
            _ => DEFAULT_LR,
        })
    }

    /// Copy with mode-dependent defaults filled in.
    pub fn resolved(&self) -> Self {
        Self {
            max_epochs: Some(self.epochs()),
            learning_rate: Some(self.lr()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            problems.push(format!("dataFraction {} must lie in (0, 1]", self.data_fraction));
        }
        if self.batch == 0 {
            problems.push("batch must be at least 1".to_string());
        }
        if self.bins == 0 {
            problems.push("bins must be at least 1".to_string());
        }
        if self.patience == 0 {
            problems.push("patience must be at least 1".to_string());
        }
        if !(self.lr() > 0.0 && self.lr().is_finite()) {
            problems.push(format!("learningRate {} must be positive", self.lr()));
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

/// Keeps `round(fraction * binSize)` randomly chosen training subjects per
/// equal-width phenotype bin. Validation and test subjects are untouched.
pub fn stratified_subset(dataset: &SurfaceDataset, fraction: f64, bins: usize, seed: u64) -> Result<SurfaceDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} must lie in (0, 1]")));
    }
    if bins == 0 {
        return Err(Error::Config("bins must be at least 1".into()));
    }
    let train: Vec<usize> = (0..dataset.subjects.len())
        .filter(|&i| dataset.subjects[i].split == Split::Train)
        .collect();
    if fraction == 1.0 {
        return Ok(dataset.clone());
    }
    let phen: Vec<f64> = train.iter().map(|&i| dataset.subjects[i].phenotype).collect();
    let bin_of = phenotype_bins(&phen, bins);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_SUBSET);
    let mut keep = vec![true; dataset.subjects.len()];
    train.iter().for_each(|&i| keep[i] = false);
    let mut total = 0;
    for b in 0..bins {
        let mut members: Vec<usize> = train.iter().zip(&bin_of).filter(|(_, &k)| k == b).map(|(&i, _)| i).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let take = round_count(fraction * members.len() as f64);
        members[..take].iter().for_each(|&i| keep[i] = true);
        total += take;
    }
    if total == 0 {
        return Err(Error::Config(format!(
            "fraction {fraction} of {} training subjects selects none",
            train.len()
        )));
    }
    let mut out = dataset.clone();
    out.subjects = dataset
        .subjects
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(s, _)| s.clone())
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Metrics {
    pub mae: f64,
    /// `None` when the targets have zero variance.
    pub r2: Option<f64>,
    pub n: usize,
}

pub fn regression_metrics(predictions: &[f64], targets: &[f64]) -> Result<Metrics> {
    if predictions.len() != targets.len() || targets.is_empty() {
        return Err(Error::Data(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let n = targets.len() as f64;
    let mae = predictions.iter().zip(targets).map(|(p, y)| (p - y).abs()).sum::<f64>() / n;
    let mean = targets.iter().sum::<f64>() / n;
    let ss_tot: f64 = targets.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = predictions.iter().zip(targets).map(|(p, y)| (p - y).powi(2)).sum();
    let r2 = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    Ok(Metrics {
        mae,
        r2,
        n: targets.len(),
    })
}

/// Predictions of `model` for every subject of `split`.
pub fn predict_split(model: &SitModel<f32>, dataset: &SurfaceDataset, split: Split, exec: Exec) -> Result<Vec<f64>> {
    let table = table_for(&model.config)?;
    let tokens = split_tokens(dataset, split, &table)?;
    exec.map(&tokens, |t| model.predict_value(t).map(f64::from)).into_iter().collect()
}

pub fn evaluate(model: &SitModel<f32>, dataset: &SurfaceDataset, split: Split, exec: Exec) -> Result<Metrics> {
    let targets: Vec<f64> = dataset.split(split).map(|s| s.phenotype).collect();
    if targets.is_empty() {
        return Err(Error::Data(format!("split {split:?} is empty")));
    }
    regression_metrics(&predict_split(model, dataset, split, exec)?, &targets)
}

/// Patience-based convergence on validation loss and MAE.
///
/// An epoch improves when either value drops below its best so far by more
/// than the threshold. The run has converged once `patience` consecutive
/// epochs pass without improvement; the epoch of the last improvement is the
/// epochs-to-convergence.
#[derive(Debug, Clone)]
pub struct ConvergenceTracker {
    pub patience: usize,
    pub threshold: f64,
    best_loss: f64,
    best_mae: f64,
    last_improvement: usize,
    stale: usize,
}

impl ConvergenceTracker {
    pub fn new(patience: usize, threshold: f64) -> Self {
        Self {
            patience,
            threshold,
            best_loss: f64::INFINITY,
            best_mae: f64::INFINITY,
            last_improvement: 0,
            stale: 0,
        }
    }

    /// Records an epoch; returns true once converged.
    pub fn observe(&mut self, epoch: usize, loss: f64, mae: f64) -> bool {
        let better_loss = loss < self.best_loss - self.threshold;
        let better_mae = mae < self.best_mae - self.threshold;
        self.best_loss = self.best_loss.min(loss);
        self.best_mae = self.best_mae.min(mae);
        if better_loss || better_mae {
            self.last_improvement = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.converged()
    }

    pub fn converged(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn last_improvement(&self) -> usize {
        self.last_improvement
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrainEpoch {
    pub epoch: usize,
    /// `NaN` for epoch 0.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mae: f64,
    pub wall_clock_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrainSummary {
    pub mode: TrainMode,
    pub seed: u64,
    pub data_fraction: f64,
    pub train_subjects: usize,
    pub trainable_params: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub converged: bool,
    /// Last improving epoch if converged, else the epoch budget.
    pub epochs_to_converge: usize,
    pub val: Metrics,
    pub test: Option<Metrics>,
    pub mae: f64,
    pub r2: Option<f64>,
    pub config: serde_json::Value,
}

pub struct TrainOutcome {
    pub history: Vec<TrainEpoch>,
    pub summary: TrainSummary,
    /// Best-validation model.
    pub model: SitModel<f32>,
    pub checkpoint: Checkpoint,
}

fn encoder_snapshot(params: &ParamSet<f32>) -> Vec<(String, Vec<u32>)> {
    params
        .iter()
        .filter(|(n, _)| !n.starts_with(HEAD_PREFIX))
        .map(|(n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

/// Row-0 encoder features, `1 × D`, for the frozen encoder in probe mode.
fn probe_features(model: &SitModel<f32>, tokens: &[Tensor<f32>], exec: Exec) -> Result<Vec<Tensor<f32>>> {
    exec.map(tokens, |t| {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, |_| false);
        let out = model.forward(&mut tape, &p, t, sit::ForwardOptions::default())?;
        let row = tape.gather_rows(out.sequence, &[0])?;
        Ok(tape.value(row).clone())
    })
    .into_iter()
    .collect()
}

/// Supervised training on the train split with validation-based early
/// stopping. `init` supplies the encoder for finetuning and (optionally)
/// probing.
pub fn train(
    run: &TrainRun,
    dataset: &SurfaceDataset,
    config: &SitConfig,
    init: Option<&Checkpoint>,
    out_dir: Option<&Path>,
    exec: Exec,
) -> Result<TrainOutcome> {
    run.validate()?;
    config.validate()?;
    match (run.mode, init) {
        (TrainMode::Scratch, Some(_)) => {
            return Err(Error::Config("scratch training takes no initial checkpoint".into()))
        }
        (TrainMode::Finetune, None) => return Err(Error::Config("finetuning needs an initial checkpoint".into())),
        _ => {}
    }
    let mut model = SitModel::<f32>::new(config.clone(), run.seed)?;
    if let Some(ckpt) = init {
        ckpt.expect_kind(&[ModelKind::Sit, ModelKind::Smae, ModelKind::Mpp])?;
        model.load_encoder(&ckpt.meta.model, &ckpt.params_as())?;
    }
    let data = stratified_subset(dataset, run.data_fraction, run.bins, run.seed)?;
    if data.data_level != config.data_level || data.patch_level != config.patch_level || data.channels != config.channels {
        return Err(Error::Config(format!(
            "dataset (dataLevel {}, patchLevel {}, channels {}) does not match model",
            data.data_level, data.patch_level, data.channels
        )));
    }
    let table = table_for(config)?;
    let train_x = split_tokens(&data, Split::Train, &table)?;
    let train_y: Vec<f32> = data.split(Split::Train).map(|s| s.phenotype as f32).collect();
    let val_x = split_tokens(&data, Split::Val, &table)?;
    let val_y: Vec<f64> = data.split(Split::Val).map(|s| s.phenotype).collect();
    if train_x.is_empty() || val_x.is_empty() {
        return Err(Error::Data(format!(
            "training needs train and val subjects, got {} and {}",
            train_x.len(),
            val_x.len()
        )));
    }

    let probe = run.mode == TrainMode::Probe;
    let trainable = trainable_mask(&model.params, run.mode);
    let trainable_params = trainable_count(&model.params, run.mode);
    let frozen_before = probe.then(|| encoder_snapshot(&model.params));
    // A frozen encoder maps each subject to fixed features; only the head
    // needs to run per step.
    let (train_in, val_in) = if probe {
        (probe_features(&model, &train_x, exec)?, probe_features(&model, &val_x, exec)?)
    } else {
        (train_x, val_x)
    };
    let forward = |model: &SitModel<f32>, tape: &mut Tape<f32>, p: &crate::tensor::BoundParams<f32>, x: &Tensor<f32>| {
        if probe {
            let feat = tape.constant(x.clone());
            sit::predict(tape, p, feat)
        } else {
            Ok(model.forward(tape, p, x, sit::ForwardOptions::default())?.prediction)
        }
    };
    let validate = |model: &SitModel<f32>| -> Result<(f64, f64)> {
        let preds: Vec<f64> = exec
            .map(&val_in, |x| -> Result<f64> {
                let mut tape = Tape::new();
                let p = model.params.bind(&mut tape, |_| false);
                let y = forward(model, &mut tape, &p, x)?;
                Ok(tape.value(y).item() as f64)
            })
            .into_iter()
            .collect::<Result<_>>()?;
        let mse = preds.iter().zip(&val_y).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / val_y.len() as f64;
        Ok((mse, regression_metrics(&preds, &val_y)?.mae))
    };

    let resolved = run.resolved();
    let run_json = serde_json::json!({ "train": resolved, "model": config, "dataset": dataset.provenance });
    let mut csv = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut f = fs::File::create(dir.join("metrics.csv"))?;
            writeln!(f, "# {run_json}")?;
            writeln!(f, "epoch,trainLoss,valLoss,valMAE,wallClockSec")?;
            Some(f)
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    rng.set_stream(STREAM_ORDER);
    let mut state = SgdState::new(&model.params, run.lr() as f32, run.momentum as f32);
    let mut tracker = ConvergenceTracker::new(run.patience, IMPROVEMENT_THRESHOLD);
    let mut order: Vec<usize> = (0..train_in.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamSet<f32>)> = None;
    let start = Instant::now();
    let items: Vec<(Tensor<f32>, f32)> = train_in.into_iter().zip(train_y).collect();

    for epoch in 0..=run.epochs() {
        let mut train_loss = f64::NAN;
        if epoch > 0 {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(run.batch) {
                let batch: Vec<&(Tensor<f32>, f32)> = chunk.iter().map(|&i| &items[i]).collect();
                let bg = batch_gradients(&model.params, &trainable, &batch, exec, |(x, y), tape, p| {
                    let pred = forward(&model, tape, p, x)?;
                    let target = tape.constant(Tensor::new(&[1, 1], vec![*y])?);
                    Ok(tape.mse(pred, target)?)
                })?;
                if !bg.loss.is_finite() {
                    return Err(Error::NonFinite(format!("training loss {} at epoch {epoch}", bg.loss)));
                }
                total += bg.loss * chunk.len() as f64;
                match sgd_step(&mut model.params, &bg.grads, &mut state) {
                    Err(TensorError::NonFinite(name)) => {
                        return Err(Error::NonFinite(format!("gradient of `{name}` at epoch {epoch}")))
                    }
                    other => other?,
                }
            }
            train_loss = total / items.len() as f64;
        }
        let (val_loss, val_mae) = validate(&model)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss {val_loss} at epoch {epoch}")));
        }
        let row = TrainEpoch {
            epoch,
            train_loss,
            val_loss,
            val_mae,
            wall_clock_sec: start.elapsed().as_secs_f64(),
        };
        if let Some(f) = csv.as_mut() {
            writeln!(
                f,
                "{},{},{},{},{:.3}",
                row.epoch, row.train_loss, row.val_loss, row.val_mae, row.wall_clock_sec
            )?;
        }
        history.push(row);
        if best.as_ref().map_or(true, |(_, b, _)| val_mae < *b) {
            best = Some((epoch, val_mae, model.params.clone()));
        }
        if tracker.observe(epoch, val_loss, val_mae) {
            break;
        }
    }

    if let Some(before) = frozen_before {
        if encoder_snapshot(&model.params) != before {
            return Err(Error::FrozenParamChanged("encoder parameters changed during probing".into()));
        }
    }
    let (best_epoch, _, params) = best.expect("epoch 0 evaluated");
    let best_model = SitModel::from_params(config.clone(), params)?;
    let val = evaluate(&best_model, &data, Split::Val, exec)?;
    let test = if data.count(Split::Test) > 0 {
        Some(evaluate(&best_model, &data, Split::Test, exec)?)
    } else {
        None
    };
    let headline = test.unwrap_or(val);
    let epochs_run = history.last().map_or(0, |r| r.epoch);
    let summary = TrainSummary {
        mode: run.mode,
        seed: run.seed,
        data_fraction: run.data_fraction,
        train_subjects: items.len(),
        trainable_params,
        best_epoch,
        epochs_run,
        converged: tracker.converged(),
        epochs_to_converge: if tracker.converged() {
            tracker.last_improvement()
        } else {
            run.epochs()
        },
        val,
        test,
        mae: headline.mae,
        r2: headline.r2,
        config: run_json.clone(),
    };
    let checkpoint = Checkpoint::new(ModelKind::Sit, config.clone(), &best_model.params, run_json);
    if let Some(dir) = out_dir {
        checkpoint.write(dir.join("checkpoint.smck"))?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(TrainOutcome {
        history,
        summary,
        model: best_model,
        checkpoint,
    })
}

/// Which parameters (in `params` order) a run of `mode` updates. Probing
/// trains the head only.
pub fn trainable_mask<T: Scalar>(params: &ParamSet<T>, mode: TrainMode) -> Vec<bool> {
    params.mask(|n| mode != TrainMode::Probe || n.starts_with(HEAD_PREFIX))
}

pub fn trainable_count<T: Scalar>(params: &ParamSet<T>, mode: TrainMode) -> usize {
    params
        .tensors()
        .iter()
        .zip(trainable_mask(params, mode))
        .filter(|(_, t)| *t)
        .map(|(t, _)| t.len())
        .sum()
}

/// One finished run for comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunRecord {
    pub label: String,
    pub seed: u64,
    pub mae: f64,
    pub epochs_to_converge: usize,
    /// Identifies the dataset; runs compared together must agree.
    pub dataset: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ComparisonRow {
    pub label: String,
    pub runs: usize,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub epochs_mean: f64,
    pub epochs_median: f64,
    /// `(epochs_baseline - epochs) / epochs_baseline * 100` on mean epochs.
    pub speedup_pct: f64,
    /// `(mae_baseline - mae) / mae_baseline * 100` on mean MAE.
    pub mae_improvement_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Comparison {
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
}

pub fn speedup_pct(baseline_epochs: f64, epochs: f64) -> f64 {
    (baseline_epochs - epochs) / baseline_epochs * 100.0
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Groups runs by label (in first-seen order) and compares each group with
/// `baseline`. The standard deviation is the sample standard deviation over
/// seeds.
pub fn compare_runs(runs: &[RunRecord], baseline: &str) -> Result<Comparison> {
    if runs.len() < 2 {
        return Err(Error::Data(format!("need at least 2 runs to compare, got {}", runs.len())));
    }
    if let Some(other) = runs.iter().find(|r| r.dataset != runs[0].dataset) {
        return Err(Error::Data(format!(
            "run `{}` uses dataset {} but `{}` uses {}",
            other.label, other.dataset, runs[0].label, runs[0].dataset
        )));
    }
    let mut labels: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in runs {
        if !groups.contains_key(r.label.as_str()) {
            labels.push(&r.label);
        }
        groups.entry(&r.label).or_default().push(r);
    }
    let base = groups
        .get(baseline)
        .ok_or_else(|| Error::Data(format!("baseline `{baseline}` has no runs")))?;
    let base_mae = mean_std(&base.iter().map(|r| r.mae).collect::<Vec<_>>()).0;
    let base_epochs = mean_std(&base.iter().map(|r| r.epochs_to_converge as f64).collect::<Vec<_>>()).0;
    let rows = labels
        .iter()
        .map(|label| {
            let g = &groups[label];
            let maes: Vec<f64> = g.iter().map(|r| r.mae).collect();
            let epochs: Vec<f64> = g.iter().map(|r| r.epochs_to_converge as f64).collect();
            let (mae_mean, mae_std) = mean_std(&maes);
            let epochs_mean = mean_std(&epochs).0;
            ComparisonRow {
                label: label.to_string(),
                runs: g.len(),
                mae_mean,
                mae_std,
                epochs_mean,
                epochs_median: median(&epochs),
                speedup_pct: speedup_pct(base_epochs, epochs_mean),
                mae_improvement_pct: (base_mae - mae_mean) / base_mae * 100.0,
            }
        })
        .collect();
    Ok(Comparison {
        baseline: baseline.to_string(),
        rows,
    })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,runs,maeMean,maeStd,epochsMean,epochsMedian,speedupPct,maeImprovementPct\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.label, r.runs, r.mae_mean, r.mae_std, r.epochs_mean, r.epochs_median, r.speedup_pct, r.mae_improvement_pct
            ));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
        let mut s = format!(
            "{:<width$}  {:>4}  {:>17}  {:>8}  {:>8}  {:>8}\n",
            "run", "n", "MAE (mean ± std)", "epochs", "speedup", "MAE gain"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<width$}  {:>4}  {:>8.4} ± {:<6.4}  {:>8.1}  {:>7.1}%  {:>7.1}%\n",
                r.label, r.runs, r.mae_mean, r.mae_std, r.epochs_median, r.speedup_pct, r.mae_improvement_pct
            ));
        }
        s.push_str(&format!("baseline: {}\n", self.baseline));
        s
    }
}
