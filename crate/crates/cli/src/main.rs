//! `smae`: geometry checks, synthetic data, pretraining, finetuning, masking
//! ratio sweeps and run reports.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime or
//! numerical failure.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use smae_core::checkpoint::Checkpoint;
use smae_core::exec::Exec;
use smae_core::geodesy::{build_hierarchy, patch_table};
use smae_core::ssl::{pretrain, SslMethod, SWEEP_RATIOS};
use smae_core::sweep::{rank, sweep_ratio, sweep_table, SweepRow};
use smae_core::synthcortex::{self, GeneratorConfig, Split};
use smae_core::tasks::{compare_runs, train, RunRecord, TrainMode, TrainSummary};

use config::{invalid, Invalid, RunConfig};

#[derive(Parser)]
#[command(name = "smae", version, about = "Surface masked autoencoder experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an icosphere hierarchy and check its invariants.
    GeomCheck {
        /// Data (finest) subdivision level.
        #[arg(long)]
        level: u32,
        /// Patch level; defaults to `level - 3`.
        #[arg(long)]
        patch_level: Option<u32>,
    },
    /// Generate a synthetic dataset with train/val/test labels.
    GenData {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        level: u32,
        /// Defaults to `level - 3`.
        #[arg(long)]
        patch_level: Option<u32>,
        #[arg(long, default_value_t = 4)]
        channels: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 5.0)]
        snr: f64,
        /// Train, val and test fractions.
        #[arg(long, value_delimiter = ',', default_value = "0.7,0.15,0.15")]
        split: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised pretraining.
    Pretrain {
        #[arg(long, value_enum)]
        method: Option<Method>,
        /// sMAE masking ratio (ignored by MPP).
        #[arg(long)]
        ratio: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Supervised training: from scratch, finetuning or linear probing.
    Finetune {
        /// Checkpoint with a pretrained encoder, or `none`.
        #[arg(long, default_value = "none")]
        init: String,
        #[arg(long, value_enum, default_value_t = Mode::Full)]
        mode: Mode,
        /// Stratified fraction of the training split.
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        patience: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain and finetune once per masking ratio and rank the ratios.
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = SWEEP_RATIOS.to_vec())]
        ratios: Vec<f64>,
        /// Concurrent ratio runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Supervised epochs after pretraining; defaults to the finetune budget.
        #[arg(long)]
        finetune_epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Aggregate `summary.json` files under a directory into a comparison.
    Report {
        #[arg(long)]
        runs: PathBuf,
        /// Label of the reference group; defaults to `scratch` when present.
        #[arg(long)]
        baseline: Option<String>,
    },
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Evaluate batch items one at a time.
    #[arg(long)]
    sequential: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Smae,
    Mpp,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Mode {
    Full,
    Probe,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Invalid>().is_some() {
        return 1;
    }
    match e.downcast_ref::<smae_core::Error>() {
        Some(smae_core::Error::Config(_) | smae_core::Error::Data(_) | smae_core::Error::Shape(_)) => 1,
        _ => 2,
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GeomCheck { level, patch_level } => geom_check(level, patch_level),
        Command::GenData {
            n,
            level,
            patch_level,
            channels,
            seed,
            snr,
            split,
            out,
        } => gen_data(n, level, patch_level, channels, seed, snr, &split, &out),
        Command::Pretrain { method, ratio, common } => cmd_pretrain(method, ratio, &common),
        Command::Finetune {
            init,
            mode,
            fraction,
            patience,
            common,
        } => cmd_finetune(&init, mode, fraction, patience, &common),
        Command::Sweep {
            ratios,
            jobs,
            finetune_epochs,
            common,
        } => cmd_sweep(&ratios, jobs, finetune_epochs, &common),
        Command::Report { runs, baseline } => cmd_report(&runs, baseline.as_deref()),
    }
}

fn default_patch_level(level: u32, patch_level: Option<u32>) -> Result<u32> {
    match patch_level {
        Some(p) if p < level => Ok(p),
        Some(p) => Err(invalid(format!("patch level {p} must be below level {level}"))),
        None => level
            .checked_sub(3)
            .ok_or_else(|| invalid(format!("level {level} leaves no room for depth-3 patches; pass --patch-level"))),
    }
}

fn geom_check(level: u32, patch_level: Option<u32>) -> Result<()> {
    let patch_level = default_patch_level(level, patch_level)?;
    let h = build_hierarchy(patch_level, level - patch_level)?;
    let mut failures = Vec::new();
    for mesh in &h.meshes {
        failures.extend(mesh.check_invariants().into_iter().map(|f| format!("level {}: {f}", mesh.level)));
    }
    let table = patch_table(&h);
    let mesh = h.data_mesh();
    let covered = table.multiplicity.iter().filter(|&&m| m > 0).count();
    if covered != mesh.vertices.len() {
        failures.push(format!("patches cover {covered} of {} vertices", mesh.vertices.len()));
    }
    for (i, row) in table.patches().enumerate() {
        let mut sorted = row.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != table.patch_size {
            failures.push(format!("patch {i} has {} distinct vertices", sorted.len()));
        }
    }
    let slots: usize = table.multiplicity.iter().map(|&m| m as usize).sum();
    if slots != table.num_patches() * table.patch_size {
        failures.push(format!("multiplicity sums to {slots}"));
    }
    println!(
        "{} vertices, {} faces, {} patches × {}",
        mesh.vertices.len(),
        mesh.faces.len(),
        table.num_patches(),
        table.patch_size
    );
    if failures.is_empty() {
        Ok(())
    } else {
        Err(invalid(format!("invariant failures:\n  {}", failures.join("\n  "))))
    }
}

#[allow(clippy::too_many_arguments)]
fn gen_data(
    n: usize,
    level: u32,
    patch_level: Option<u32>,
    channels: usize,
    seed: Option<u64>,
    snr: f64,
    ratios: &[f64],
    out: &Path,
) -> Result<()> {
    let patch_level = default_patch_level(level, patch_level)?;
    let mut cfg = RunConfig::default();
    cfg.apply_seed(seed)?;
    let seed = cfg.seed.unwrap_or(0);
    let ratios: [f64; 3] = ratios
        .try_into()
        .map_err(|_| invalid(format!("--split needs 3 fractions, got {}", ratios.len())))?;
    let gen = GeneratorConfig {
        subjects: n,
        data_level: level,
        patch_level,
        channels,
        seed,
        snr,
        ..GeneratorConfig::default()
    };
    let ds = synthcortex::generate(&gen)?;
    let mut ds = synthcortex::split(&ds, ratios, synthcortex::DEFAULT_BINS, seed)?;
    ds.provenance = serde_json::json!({ "generator": gen, "split": ratios, "bins": synthcortex::DEFAULT_BINS });
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    synthcortex::write_dataset(&ds, out)?;
    println!(
        "{} subjects ({} train / {} val / {} test), {} vertices × {} channels -> {}",
        ds.subjects.len(),
        ds.count(Split::Train),
        ds.count(Split::Val),
        ds.count(Split::Test),
        ds.num_vertices(),
        ds.channels,
        out.display()
    );
    Ok(())
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.apply_seed(common.seed)?;
    if common.sequential {
        cfg.exec = Exec::Sequential;
    }
    Ok(cfg)
}

fn read_data(path: &Path) -> Result<synthcortex::SurfaceDataset> {
    synthcortex::read_dataset(path).with_context(|| format!("reading {}", path.display()))
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    Ok(())
}

fn cmd_pretrain(method: Option<Method>, ratio: Option<f64>, common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(m) = method {
        cfg.pretrain.method = match m {
            Method::Smae => SslMethod::Smae,
            Method::Mpp => SslMethod::Mpp,
        };
    }
    if let Some(r) = ratio {
        if cfg.pretrain.method == SslMethod::Mpp {
            eprintln!("warning: --ratio is ignored by MPP, which corrupts 40/5/5% of patches");
        } else {
            cfg.pretrain.ratio = r;
        }
    }
    if let Some(e) = common.epochs {
        cfg.pretrain.epochs = e;
    }
    if let Some(lr) = common.lr {
        cfg.pretrain.learning_rate = lr;
    }
    cfg.validate()?;
    let ds = read_data(&common.data)?;
    write_resolved(&common.out, &cfg)?;
    let out = pretrain(&ds, &cfg.model, &cfg.pretrain, Some(&common.out), cfg.exec)?;
    let first = out.history[0].val_masked_mse;
    println!(
        "best epoch {} val MSE {:.5} (epoch 0: {:.5}, -{:.1}%) -> {}",
        out.best_epoch,
        out.best_val,
        first,
        out.val_reduction() * 100.0,
        common.out.join("checkpoint.smck").display()
    );
    Ok(())
}

fn finetune_run(
    cfg: &mut RunConfig,
    init: &str,
    mode: Mode,
    fraction: Option<f64>,
    patience: Option<usize>,
    common: &Common,
) -> Result<Option<Checkpoint>> {
    let ckpt = match init {
        "none" => None,
        path => Some(Checkpoint::read(path).with_context(|| format!("reading checkpoint {path}"))?),
    };
    cfg.train.mode = match (mode, &ckpt) {
        (Mode::Probe, _) => TrainMode::Probe,
        (Mode::Full, None) => TrainMode::Scratch,
        (Mode::Full, Some(_)) => TrainMode::Finetune,
    };
    if let Some(f) = fraction {
        cfg.train.data_fraction = f;
    }
    if let Some(p) = patience {
        cfg.train.patience = p;
    }
    if let Some(e) = common.epochs {
        cfg.train.max_epochs = Some(e);
    }
    if let Some(lr) = common.lr {
        cfg.train.learning_rate = Some(lr);
    }
    cfg.train = cfg.train.resolved();
    Ok(ckpt)
}

fn cmd_finetune(init: &str, mode: Mode, fraction: Option<f64>, patience: Option<usize>, common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    let ckpt = finetune_run(&mut cfg, init, mode, fraction, patience, common)?;
    cfg.validate()?;
    let ds = read_data(&common.data)?;
    write_resolved(&common.out, &cfg)?;
    let out = train(&cfg.train, &ds, &cfg.model, ckpt.as_ref(), Some(&common.out), cfg.exec)?;
    let s = &out.summary;
    println!(
        "{:?}: MAE {:.4}, R² {}, epochs to converge {}{}, {} trainable parameters -> {}",
        s.mode,
        s.mae,
        s.r2.map_or("n/a".to_string(), |r| format!("{r:.4}")),
        s.epochs_to_converge,
        if s.converged { "" } else { " (budget)" },
        s.trainable_params,
        common.out.join("summary.json").display()
    );
    Ok(())
}

fn ratio_dir(out: &Path, ratio: f64) -> PathBuf {
    out.join(format!("ratio_{ratio:.2}"))
}

fn sweep_one(cfg: &RunConfig, ds: &synthcortex::SurfaceDataset, ratio: f64, finetune_epochs: Option<usize>, out: &Path) -> Result<SweepRow> {
    let dir = ratio_dir(out, ratio);
    let summary_path = dir.join("summary.json");
    if let Some(row) = fs::read(&summary_path).ok().and_then(|b| serde_json::from_slice::<SweepRow>(&b).ok()) {
        eprintln!("ratio {ratio:.2}: reusing {}", summary_path.display());
        return Ok(row);
    }
    let mut cfg = cfg.clone();
    cfg.pretrain.method = SslMethod::Smae;
    cfg.pretrain.ratio = ratio;
    cfg.train.mode = TrainMode::Finetune;
    if finetune_epochs.is_some() {
        cfg.train.max_epochs = finetune_epochs;
    }
    cfg.train = cfg.train.resolved();
    cfg.validate()?;
    write_resolved(&dir, &cfg)?;
    let row = sweep_ratio(ds, &cfg.model, &cfg.pretrain, &cfg.train, ratio, Some(&dir), cfg.exec)?;
    fs::write(&summary_path, serde_json::to_string_pretty(&row)?)?;
    eprintln!("ratio {ratio:.2}: val masked MSE {:.5}, MAE {:.4}", row.val_masked_mse, row.mae);
    Ok(row)
}

fn cmd_sweep(ratios: &[f64], jobs: usize, finetune_epochs: Option<usize>, common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(e) = common.epochs {
        cfg.pretrain.epochs = e;
    }
    if let Some(lr) = common.lr {
        cfg.pretrain.learning_rate = lr;
        cfg.train.learning_rate = Some(lr);
    }
    if ratios.is_empty() {
        return Err(invalid("--ratios is empty"));
    }
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
        return Err(invalid(format!("masking ratio {r} must lie in (0, 1)")));
    }
    if jobs == 0 {
        return Err(invalid("--jobs must be at least 1"));
    }
    cfg.validate()?;
    if jobs > 1 {
        // Ratios already run concurrently.
        cfg.exec = Exec::Sequential;
    }
    let ds = read_data(&common.data)?;
    fs::create_dir_all(&common.out)?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SweepRow>>>> = Mutex::new(ratios.iter().map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(ratios.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&ratio) = ratios.get(i) else { break };
                let r = sweep_one(&cfg, &ds, ratio, finetune_epochs, &common.out);
                results.lock().expect("no panics while held")[i] = Some(r);
            });
        }
    });
    let mut rows = Vec::new();
    for r in results.into_inner().expect("threads joined") {
        rows.push(r.expect("every ratio ran")?);
    }
    rank(&mut rows);
    let (csv, text) = sweep_table(&rows, &serde_json::to_string(&cfg)?);
    fs::write(common.out.join("sweep.csv"), csv)?;
    fs::write(common.out.join("sweep.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn find_summaries(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            find_summaries(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == "summary.json") {
            out.push(path);
        }
    }
    Ok(())
}

/// Runs are grouped by the first directory under `runs`.
fn cmd_report(runs: &Path, baseline: Option<&str>) -> Result<()> {
    if !runs.is_dir() {
        return Err(invalid(format!("{} is not a directory", runs.display())));
    }
    let mut paths = Vec::new();
    find_summaries(runs, &mut paths)?;
    let mut records = Vec::new();
    for path in &paths {
        let Ok(summary) = serde_json::from_slice::<TrainSummary>(&fs::read(path)?) else {
            continue;
        };
        let rel = path.strip_prefix(runs).expect("found under runs");
        let label = rel
            .components()
            .next()
            .filter(|_| rel.components().count() > 1)
            .map_or("runs".to_string(), |c| c.as_os_str().to_string_lossy().into_owned());
        records.push(RunRecord {
            label,
            seed: summary.seed,
            mae: summary.mae,
            epochs_to_converge: summary.epochs_to_converge,
            dataset: summary.config.get("dataset").map_or(String::new(), |d| d.to_string()),
        });
    }
    if records.is_empty() {
        return Err(invalid(format!("no runs found under {}", runs.display())));
    }
    let baseline = baseline.map(str::to_string).unwrap_or_else(|| {
        if records.iter().any(|r| r.label == "scratch") {
            "scratch".to_string()
        } else {
            records[0].label.clone()
        }
    });
    let cmp = compare_runs(&records, &baseline)?;
    let header = serde_json::json!({ "runs": runs, "baseline": baseline, "summaries": paths.len() });
    fs::write(runs.join("report.csv"), format!("# {header}\n{}", cmp.to_csv()))?;
    fs::write(runs.join("report.txt"), cmp.to_text())?;
    print!("{}", cmp.to_text());
    Ok(())
}
