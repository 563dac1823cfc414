//! Masking-ratio sweep: pretrain at each ratio, finetune, rank.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::sit::SitConfig;
use crate::ssl::{pretrain, PretrainConfig, SslMethod};
use crate::synthcortex::SurfaceDataset;
use crate::tasks::{train, TrainMode, TrainRun};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SweepRow {
    pub ratio: f64,
    pub val_masked_mse: f64,
    pub best_epoch: usize,
    pub mae: f64,
    pub epochs_to_converge: usize,
    pub config: serde_json::Value,
}

/// sMAE pretraining at `ratio` followed by full finetuning. Outputs go to
/// `out/pretrain` and `out/finetune` when `out` is given.
pub fn sweep_ratio(
    dataset: &SurfaceDataset,
    model: &SitConfig,
    pretrain_cfg: &PretrainConfig,
    run: &TrainRun,
    ratio: f64,
    out: Option<&Path>,
    exec: Exec,
) -> Result<SweepRow> {
    let pre_cfg = PretrainConfig {
        method: SslMethod::Smae,
        ratio,
        ..pretrain_cfg.clone()
    };
    let run = TrainRun {
        mode: TrainMode::Finetune,
        ..run.clone()
    }
    .resolved();
    let pre = pretrain(dataset, model, &pre_cfg, out.map(|d| d.join("pretrain")).as_deref(), exec)?;
    let ft = train(&run, dataset, model, Some(&pre.checkpoint), out.map(|d| d.join("finetune")).as_deref(), exec)?;
    Ok(SweepRow {
        ratio,
        val_masked_mse: pre.best_val,
        best_epoch: pre.best_epoch,
        mae: ft.summary.mae,
        epochs_to_converge: ft.summary.epochs_to_converge,
        config: serde_json::json!({ "model": model, "pretrain": pre_cfg, "train": run }),
    })
}

/// Sorts by validation masked MSE, best first.
pub fn rank(rows: &mut [SweepRow]) {
    rows.sort_by(|a, b| a.val_masked_mse.total_cmp(&b.val_masked_mse));
}

/// CSV (with `comment` as a leading `#` line) and a plain-text table of
/// ranked rows.
pub fn sweep_table(rows: &[SweepRow], comment: &str) -> (String, String) {
    let mut csv = format!("# {comment}\nrank,ratio,valMaskedMSE,bestEpoch,mae,epochsToConverge\n");
    let mut text = String::from("rank  masking ratio  val masked MSE  downstream MAE  epochs\n");
    for (i, r) in rows.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i + 1,
            r.ratio,
            r.val_masked_mse,
            r.best_epoch,
            r.mae,
            r.epochs_to_converge
        ));
        text.push_str(&format!(
            "{:>4}  {:>12.0}%  {:>14.5}  {:>14.4}  {:>6}\n",
            i + 1,
            r.ratio * 100.0,
            r.val_masked_mse,
            r.mae,
            r.epochs_to_converge
        ));
    }
    (csv, text)
}
