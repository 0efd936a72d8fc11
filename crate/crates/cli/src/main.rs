//! muca: synthesize benchmarks, train the semi-supervised segmentation
//! model, evaluate checkpoints, and run the ablation matrix.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric
//! failure.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Parser, Subcommand};

use muca_core::checkpoint;
use muca_core::error::{Error, Result};
use muca_core::synth::{atomic_write, generate, DatasetManifest, SceneSpec, Split};
use muca_core::trainer::{
    eval_split, eval_split_with_ctsa, run_training, TrainConfig, TrainMode,
};

#[derive(Parser)]
#[command(name = "muca", version, about = "Semi-supervised segmentation at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic benchmark dataset and its manifest.
    Synth {
        /// Output directory for images, labels, and manifest.tsv.
        #[arg(long)]
        out: PathBuf,
        /// Total image count, split 6:2:2 into train/val/test.
        #[arg(long)]
        n: usize,
        /// Generator seed (defaults to MUCA_SEED or 1).
        #[arg(long)]
        seed: Option<u64>,
        /// Number of classes (2..=5).
        #[arg(long, default_value_t = 5)]
        classes: usize,
        /// Square image extent (must be divisible by 16 for training).
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train on a manifest; writes loss/metric CSVs and the best checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Labeled fraction of the train split (e.g. 0.01, 0.05, 0.10).
        #[arg(long)]
        ratio: Option<f64>,
        /// onlysup | nouc | msuc | ctsa | muca.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Config file of `key = value` lines; CLI flags win over it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra overrides as key=value (repeatable), applied last.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a split; writes metrics and confusion CSVs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// train | val | test.
        #[arg(long, default_value = "val")]
        split: String,
        /// Output directory (defaults to the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Which saved model predicts: teacher | student.
        #[arg(long, default_value = "teacher")]
        model: String,
        /// Evaluate through the cross-attention path (student features,
        /// deepest stage reconstructed under teacher guidance).
        #[arg(long)]
        ctsa: bool,
        /// Also write a row-normalized confusion matrix.
        #[arg(long)]
        row_normalize: bool,
    },
    /// Train the mode x seed ablation matrix and summarize test mIoU.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "onlysup,nouc,msuc,ctsa,muca")]
        modes: String,
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        /// Concurrent runs (each sequential and deterministic internally).
        #[arg(long, default_value_t = 2)]
        jobs: usize,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn env_seed() -> Option<u64> {
    std::env::var("MUCA_SEED").ok().and_then(|v| v.parse().ok())
}

/// Apply one `key = value` setting to the config.
fn apply_kv(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    let bad = |what: &str, v: &str| Error::Config(format!("bad value for {what}: {v}"));
    match key {
        "mode" => cfg.mode = TrainMode::parse(value)?,
        "epochs" => cfg.epochs = value.parse().map_err(|_| bad(key, value))?,
        "steps_per_epoch" => cfg.steps_per_epoch = value.parse().map_err(|_| bad(key, value))?,
        "batch_labeled" => cfg.batch_labeled = value.parse().map_err(|_| bad(key, value))?,
        "batch_unlabeled" => cfg.batch_unlabeled = value.parse().map_err(|_| bad(key, value))?,
        "lr0" => cfg.lr0 = value.parse().map_err(|_| bad(key, value))?,
        "lr_min" => cfg.lr_min = value.parse().map_err(|_| bad(key, value))?,
        "weight_decay" => cfg.weight_decay = value.parse().map_err(|_| bad(key, value))?,
        "momentum" => cfg.momentum = value.parse().map_err(|_| bad(key, value))?,
        "ema_alpha" => cfg.ema_alpha = value.parse().map_err(|_| bad(key, value))?,
        "mc_passes" => cfg.mc_passes = value.parse().map_err(|_| bad(key, value))?,
        "rho" => cfg.rho = value.parse().map_err(|_| bad(key, value))?,
        "h_max" => cfg.h_max = value.parse().map_err(|_| bad(key, value))?,
        "dropout" => cfg.dropout = value.parse().map_err(|_| bad(key, value))?,
        "heads" => cfg.heads = value.parse().map_err(|_| bad(key, value))?,
        "seed" => cfg.seed = value.parse().map_err(|_| bad(key, value))?,
        "labeled_ratio" => cfg.labeled_ratio = value.parse().map_err(|_| bad(key, value))?,
        "val_every" => cfg.val_every = value.parse().map_err(|_| bad(key, value))?,
        "aug_labeled" => cfg.aug_labeled = value.parse().map_err(|_| bad(key, value))?,
        other => return Err(Error::Config(format!("unknown config key: {other}"))),
    }
    Ok(())
}

/// `key = value` lines with `#` comments.
fn apply_config_file(cfg: &mut TrainConfig, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("read config {}", path.display()), e))?;
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("{}:{}: expected key = value", path.display(), ln + 1))
        })?;
        apply_kv(cfg, key.trim(), value.trim())?;
    }
    Ok(())
}

fn build_train_config(
    config: Option<&Path>,
    ratio: Option<f64>,
    mode: Option<&str>,
    seed: Option<u64>,
    epochs: Option<usize>,
    overrides: &[String],
) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(s) = env_seed() {
        cfg.seed = s;
    }
    if let Some(path) = config {
        apply_config_file(&mut cfg, path)?;
    }
    if let Some(r) = ratio {
        cfg.labeled_ratio = r;
    }
    if let Some(m) = mode {
        cfg.mode = TrainMode::parse(m)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    for kv in overrides {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv}")))?;
        apply_kv(&mut cfg, key.trim(), value.trim())?;
    }
    Ok(cfg)
}

fn cmd_synth(out: &Path, n: usize, seed: u64, classes: usize, size: usize) -> Result<()> {
    let snapshot = format!("command = synth\nn = {n}\nseed = {seed}\nclasses = {classes}\nsize = {size}\n");
    atomic_write(&out.join("resolved_config.txt"), snapshot.as_bytes())?;
    let spec = SceneSpec {
        height: size,
        width: size,
        num_classes: classes,
        seed,
    };
    let man = generate(&spec, n, out)?;
    println!(
        "wrote {} train / {} val / {} test images under {}",
        man.train.len(),
        man.val.len(),
        man.test.len(),
        out.display()
    );
    println!("manifest: {}", out.join("manifest.tsv").display());
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::Config(format!("unknown split {other} (train|val|test)"))),
    }
}

fn cmd_train(manifest: &Path, out: &Path, cfg: &TrainConfig) -> Result<()> {
    let summary = run_training(cfg, manifest, out)?;
    println!(
        "trained {} steps; best val mIoU {:.4} at epoch {}; outputs in {}",
        summary.steps,
        summary.best_val_miou,
        summary.best_epoch,
        out.display()
    );
    if summary.empty_ce_warnings > 0 {
        eprintln!(
            "warning: {} steps saw an empty supervised pixel set",
            summary.empty_ce_warnings
        );
    }
    Ok(())
}

fn cmd_eval(
    ckpt_path: &Path,
    manifest: &Path,
    split: Split,
    out: &Path,
    model: &str,
    use_ctsa: bool,
    row_normalize: bool,
) -> Result<()> {
    let snapshot = format!(
        "command = eval\ncheckpoint = {}\nsplit = {}\nmodel = {model}\nctsa = {use_ctsa}\n",
        ckpt_path.display(),
        split.name()
    );
    atomic_write(&out.join("resolved_config.txt"), snapshot.as_bytes())?;
    let ck = checkpoint::load(ckpt_path)?;
    let man = DatasetManifest::load(manifest)?;
    let (report, cm) = if use_ctsa {
        eval_split_with_ctsa(&ck.student, &ck.teacher, &ck.ctsa, &man, split)?
    } else {
        match model {
            "teacher" => eval_split(&ck.teacher, &man, split)?,
            "student" => eval_split(&ck.student, &man, split)?,
            other => return Err(Error::Config(format!("unknown model {other} (teacher|student)"))),
        }
    };
    atomic_write(&out.join("metrics.csv"), report.to_csv().as_bytes())?;
    atomic_write(&out.join("confusion.csv"), cm.to_csv(false).as_bytes())?;
    if row_normalize {
        atomic_write(&out.join("confusion_rownorm.csv"), cm.to_csv(true).as_bytes())?;
    }
    println!(
        "{} split: mIoU {:.4} mF1 {:.4} OA {:.4} kappa {:.4}",
        split.name(),
        report.miou,
        report.mf1,
        report.oa,
        report.kappa
    );
    Ok(())
}

fn cmd_ablate(
    manifest: &Path,
    out: &Path,
    modes: &[TrainMode],
    seeds: &[u64],
    jobs: usize,
    base_cfg: &TrainConfig,
) -> Result<()> {
    let snapshot = format!(
        "command = ablate\nmodes = {}\nseeds = {:?}\njobs = {jobs}\n{}",
        modes.iter().map(|m| m.name()).collect::<Vec<_>>().join(","),
        seeds,
        base_cfg.resolved_text()
    );
    atomic_write(&out.join("resolved_config.txt"), snapshot.as_bytes())?;

    let mut tasks = VecDeque::new();
    for &seed in seeds {
        for &mode in modes {
            tasks.push_back((mode, seed));
        }
    }
    let queue = Mutex::new(tasks);
    let results: Mutex<Vec<(TrainMode, u64, f64, f64)>> = Mutex::new(Vec::new());
    let first_err: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1) {
            scope.spawn(|| loop {
                let task = queue.lock().unwrap().pop_front();
                let Some((mode, seed)) = task else { break };
                if first_err.lock().unwrap().is_some() {
                    break;
                }
                let mut cfg = base_cfg.clone();
                cfg.mode = mode;
                cfg.seed = seed;
                let run_dir = out.join(format!("{}_seed{}", mode.name(), seed));
                let outcome = run_training(&cfg, manifest, &run_dir).and_then(|summary| {
                    let ck = checkpoint::load(&run_dir.join("best.ckpt"))?;
                    let man = DatasetManifest::load(manifest)?;
                    let (test_rep, _) = eval_split(&ck.teacher, &man, Split::Test)?;
                    Ok((summary.best_val_miou, test_rep.miou))
                });
                match outcome {
                    Ok((val_miou, test_miou)) => {
                        eprintln!(
                            "[ablate] {} seed {seed}: val mIoU {val_miou:.4}, test mIoU {test_miou:.4}",
                            mode.name()
                        );
                        results.lock().unwrap().push((mode, seed, val_miou, test_miou));
                    }
                    Err(e) => {
                        let mut slot = first_err.lock().unwrap();
                        if slot.is_none() {
                            *slot = Some(e);
                        }
                    }
                }
            });
        }
    });
    if let Some(e) = first_err.into_inner().unwrap() {
        return Err(e);
    }
    let mut rows = results.into_inner().unwrap();
    rows.sort_by_key(|(m, s, _, _)| (m.name(), *s));
    let mut csv = String::from("mode,seed,best_val_miou,test_miou\n");
    for (mode, seed, val, test) in &rows {
        csv.push_str(&format!("{},{},{},{}\n", mode.name(), seed, val, test));
    }
    atomic_write(&out.join("ablation_summary.csv"), csv.as_bytes())?;
    println!("ablation summary: {}", out.join("ablation_summary.csv").display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { out, n, seed, classes, size } => {
            let seed = seed.or_else(env_seed).unwrap_or(1);
            cmd_synth(&out, n, seed, classes, size)
        }
        Cmd::Train { manifest, out, ratio, mode, seed, epochs, config, overrides } => {
            let cfg = build_train_config(
                config.as_deref(),
                ratio,
                mode.as_deref(),
                seed,
                epochs,
                &overrides,
            )?;
            cmd_train(&manifest, &out, &cfg)
        }
        Cmd::Eval { checkpoint, manifest, split, out, model, ctsa, row_normalize } => {
            let split = parse_split(&split)?;
            let out_dir = out.unwrap_or_else(|| {
                checkpoint
                    .parent()
                    .map(|p| p.to_path_buf())
                    .unwrap_or_else(|| PathBuf::from("."))
            });
            cmd_eval(&checkpoint, &manifest, split, &out_dir, &model, ctsa, row_normalize)
        }
        Cmd::Ablate { manifest, out, modes, seeds, jobs, epochs, ratio, config, overrides } => {
            let cfg = build_train_config(config.as_deref(), ratio, None, None, epochs, &overrides)?;
            let modes: Vec<TrainMode> = modes
                .split(',')
                .filter(|s| !s.is_empty())
                .map(TrainMode::parse)
                .collect::<Result<_>>()?;
            let seeds: Vec<u64> = seeds
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::Config(format!("bad seed {s}")))
                })
                .collect::<Result<_>>()?;
            if modes.is_empty() || seeds.is_empty() {
                return Err(Error::Config("ablate: need at least one mode and one seed".into()));
            }
            cmd_ablate(&manifest, &out, &modes, &seeds, jobs, &cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
