//! Run directories, training and evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mtsnn::checkpoint::{peek_dtype, Checkpoint};
use mtsnn::config::RunConfig;
use mtsnn::data::{load_split, load_splits, resolve_data_root, Split};
use mtsnn::train::{evaluate, RunMetrics, Trainer};
use mtsnn::{DType, Real};
use serde_json::json;

use crate::{CliResult, ConfigArgs, Failure};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Loads `--config` with `--set`, `--seed` and any extra overrides applied, in that order.
pub fn resolve_config(args: &ConfigArgs, extra: &[String]) -> CliResult<RunConfig> {
    let path = args
        .config
        .as_deref()
        .ok_or_else(|| Failure::Usage("--config is required".into()))?;
    let mut overrides = args.set.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    overrides.extend_from_slice(extra);
    RunConfig::load(path, &overrides).map_err(|e| match e {
        mtsnn::Error::Io(io) => Failure::Usage(format!("{}: {io}", path.display())),
        other => other.into(),
    })
}

/// Creates `<parent>/<name>-<unix seconds>`, adding a counter if that exists.
pub fn create_run_dir(parent: &Path, name: &str) -> CliResult<PathBuf> {
    fs::create_dir_all(parent)?;
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let base = format!("{name}-{stamp}");
    for i in 0.. {
        let dir = parent.join(if i == 0 {
            base.clone()
        } else {
            format!("{base}-{i}")
        });
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}

pub fn load_checkpoint<T: Real>(path: &Path) -> CliResult<Checkpoint<T>> {
    Checkpoint::load(path).map_err(|e| Failure::Usage(e.to_string()))
}

pub fn checkpoint_dtype(path: &Path) -> CliResult<DType> {
    let bytes = fs::read(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    peek_dtype(&bytes).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

/// Trains `config` in a fresh run directory under `parent`.
pub fn train_config(
    config: RunConfig,
    root: Option<&Path>,
    parent: &Path,
) -> CliResult<(PathBuf, RunMetrics)> {
    let dir = create_run_dir(parent, &config.name)?;
    let metrics = match config.train.dtype {
        DType::F32 => train_in::<f32>(config, None, root, &dir)?,
        DType::F64 => train_in::<f64>(config, None, root, &dir)?,
    };
    Ok((dir, metrics))
}

/// Trains per the resolved config (or resumes) and returns the run directory.
pub fn train(args: &ConfigArgs, steps: Option<usize>, resume: Option<&Path>) -> CliResult<PathBuf> {
    let extra: Vec<String> = steps
        .map(|s| format!("model.steps={s}"))
        .into_iter()
        .collect();
    match resume {
        None => {
            let config = resolve_config(args, &extra)?;
            Ok(train_config(config, args.data_root.as_deref(), &args.out)?.0)
        }
        Some(path) => {
            let mut overrides = args.set.clone();
            overrides.extend(extra);
            match checkpoint_dtype(path)? {
                DType::F32 => resume_in::<f32>(path, &overrides, args),
                DType::F64 => resume_in::<f64>(path, &overrides, args),
            }
        }
    }
}

fn resume_in<T: Real>(path: &Path, overrides: &[String], args: &ConfigArgs) -> CliResult<PathBuf> {
    let ckpt = load_checkpoint::<T>(path)?;
    let trainer = Trainer::resume(&ckpt)?;
    let config = RunConfig::from_toml(&ckpt.meta.config, overrides)?;
    if config.model() != trainer.config.model() || config.seed != trainer.config.seed {
        return Err(Failure::Usage(
            "overrides on resume may only change the [train] and [data] sections".into(),
        ));
    }
    let dir = create_run_dir(&args.out, &config.name)?;
    train_in(config, Some(trainer), args.data_root.as_deref(), &dir)?;
    Ok(dir)
}

fn train_in<T: Real>(
    config: RunConfig,
    resumed: Option<Trainer<T>>,
    root: Option<&Path>,
    dir: &Path,
) -> CliResult<RunMetrics> {
    fs::write(dir.join(RESOLVED_CONFIG), config.to_toml())?;
    let root = resolve_data_root(root);
    let (train, test) = load_splits::<T>(&config, root.as_deref())?;
    let mut trainer = match resumed {
        Some(mut t) => {
            t.config = config;
            t
        }
        None => Trainer::new(config)?,
    };
    let ckpt_dir = dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir)?;
    eprintln!(
        "training {} ({} train / {} test samples) in {}",
        trainer.config.name,
        train.len(),
        test.len(),
        dir.display()
    );
    let every = trainer.config.train.checkpoint_every;
    let last = trainer.config.train.epochs;
    trainer.metrics.write_csv(&dir.join(METRICS_CSV))?;
    trainer.fit(&train, &test, |t| {
        t.metrics.write_csv(&dir.join(METRICS_CSV))?;
        if let [.., tr, te] = t.metrics.rows.as_slice() {
            eprintln!(
                "epoch {:>4}  lr {:.4}  train loss {:.4} acc {:.4}  test loss {:.4} acc {:.4}",
                tr.epoch, tr.lr, tr.loss, tr.accuracy, te.loss, te.accuracy
            );
        }
        if t.epoch % every == 0 || t.epoch == last {
            t.checkpoint()
                .save(&ckpt_dir.join(format!("epoch-{:04}.ckpt", t.epoch)))?;
        }
        Ok(())
    })?;
    if trainer.epoch > 0 {
        trainer.checkpoint().save(&ckpt_dir.join("last.ckpt"))?;
    }
    println!(
        "{}",
        json!({
            "run_dir": dir,
            "epochs": trainer.epoch,
            "peak_test_accuracy": trainer.metrics.peak_test_accuracy(),
            "final_test_accuracy": trainer.metrics.final_test_accuracy(),
        })
    );
    Ok(trainer.metrics)
}

/// Evaluates a checkpoint at one or more step counts.
pub fn eval(
    path: &Path,
    steps: &[usize],
    root: Option<&Path>,
    out: Option<&Path>,
) -> CliResult<()> {
    let rows = match checkpoint_dtype(path)? {
        DType::F32 => eval_in::<f32>(path, steps, root)?,
        DType::F64 => eval_in::<f64>(path, steps, root)?,
    };
    let text = serde_json::to_string_pretty(&rows).expect("json");
    println!("{text}");
    if let Some(out) = out {
        fs::write(out, text + "\n")?;
    }
    Ok(())
}

fn eval_in<T: Real>(
    path: &Path,
    steps: &[usize],
    root: Option<&Path>,
) -> CliResult<Vec<serde_json::Value>> {
    let ckpt = load_checkpoint::<T>(path)?;
    let mut trainer = Trainer::resume(&ckpt)?;
    let root = resolve_data_root(root);
    let mut test = load_split::<T>(&trainer.config, root.as_deref(), Split::Test)?;
    let trained = trainer.config.model.steps;
    let list = if steps.is_empty() {
        vec![trained]
    } else {
        steps.to_vec()
    };
    let mut rows = Vec::new();
    for &s in &list {
        if s == 0 {
            return Err(Failure::Usage("--steps values must be positive".into()));
        }
        trainer.model.set_steps(s);
        if test.frames().is_some_and(|f| f != s) {
            // event streams are sliced per step count
            let mut config = trainer.config.clone();
            config.model.steps = s;
            test = load_split::<T>(&config, root.as_deref(), Split::Test)?;
        }
        let (loss, accuracy) = evaluate(
            &trainer.model,
            &test,
            trainer.config.train.batch_size,
            trainer.config.train.loss,
        )?;
        rows.push(json!({
            "checkpoint": path,
            "epoch": ckpt.meta.epoch,
            "trained_steps": trained,
            "steps": s,
            "samples": test.len(),
            "loss": loss,
            "accuracy": accuracy,
        }));
    }
    Ok(rows)
}

/// Metrics of a run directory.
pub fn read_metrics(dir: &Path) -> CliResult<RunMetrics> {
    let path = dir.join(METRICS_CSV);
    if !path.is_file() {
        return Err(Failure::Runtime(format!(
            "{}: no {METRICS_CSV}",
            dir.display()
        )));
    }
    let rows = RunMetrics::read_csv(&path)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    Ok(RunMetrics {
        run_id: dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        seed: 0,
        rows,
    })
}

pub fn read_resolved_config(dir: &Path) -> CliResult<RunConfig> {
    let path = dir.join(RESOLVED_CONFIG);
    let text = fs::read_to_string(&path)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    RunConfig::from_toml(&text, &[])
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}
