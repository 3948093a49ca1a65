//! `verify`: multiplication-free inference against the dense forward pass.

use std::fs;
use std::path::{Path, PathBuf};

use mtsnn::data::{load_split, resolve_data_root, Split};
use mtsnn::mfree::{self, AccumulateOp, InjectedMultiply, PlainAdd, VerifyReport};
use mtsnn::model::Model;
use mtsnn::train::Trainer;
use mtsnn::{DType, Real};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::run::{checkpoint_dtype, load_checkpoint, CHECKPOINT_DIR};
use crate::{CliResult, Failure, VerifyArgs};

pub const VERIFY_JSON: &str = "verify.json";

pub fn verify(args: &VerifyArgs) -> CliResult<()> {
    if args.steps.is_empty() || args.steps.contains(&0) || args.samples == 0 {
        return Err(Failure::Usage(
            "--steps and --samples must be positive".into(),
        ));
    }
    let (model, config) = match checkpoint_dtype(&args.checkpoint)? {
        DType::F32 => restore::<f32>(&args.checkpoint)?,
        DType::F64 => restore::<f64>(&args.checkpoint)?,
    };
    let report = if args.inject_multiply {
        run::<InjectedMultiply>(&model, &config, args)?
    } else {
        run::<PlainAdd>(&model, &config, args)?
    };
    let text = serde_json::to_string_pretty(&report).expect("json");
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| run_dir_of(&args.checkpoint));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(VERIFY_JSON), text + "\n")?;
    for s in &report.steps {
        println!(
            "T={}: max logit diff {:.3e}, argmax {}, accumulation multiplications {}, unexpected {:?}",
            s.steps,
            s.max_logit_diff,
            if s.argmax_agreement { "agrees" } else { "differs" },
            s.accumulation_multiplications,
            s.unexpected_multiplications
        );
    }
    for e in &report.equivalence {
        println!(
            "linearity identity with {} thresholds: max diff {:.3e} (tolerance {:.0e})",
            e.thresholds, e.max_abs_diff, e.tolerance
        );
    }
    println!(
        "{}  ({})",
        if report.pass { "PASS" } else { "FAIL" },
        dir.join(VERIFY_JSON).display()
    );
    if report.pass {
        Ok(())
    } else {
        Err(Failure::Runtime("verification failed".into()))
    }
}

/// The checkpoint's weights in double precision, so the comparison is not
/// dominated by single-precision threshold flips.
fn restore<T: Real>(path: &Path) -> CliResult<(Model<f64>, mtsnn::config::RunConfig)> {
    let trainer = Trainer::resume(&load_checkpoint::<T>(path)?)?;
    Ok((trainer.model.cast::<f64>(), trainer.config))
}

fn run<A: AccumulateOp>(
    model: &Model<f64>,
    config: &mtsnn::config::RunConfig,
    args: &VerifyArgs,
) -> CliResult<VerifyReport> {
    let root = resolve_data_root(args.data_root.as_deref());
    let mut membranes = ChaCha8Rng::seed_from_u64(args.seed);
    let mut merged: Option<VerifyReport> = None;
    for &steps in &args.steps {
        let mut config = config.clone();
        config.model.steps = steps;
        config.data.test_limit = Some(
            config
                .data
                .test_limit
                .unwrap_or(usize::MAX)
                .min(args.samples),
        );
        let test = load_split::<f64>(&config, root.as_deref(), Split::Test)?;
        let n = args.samples.min(test.len());
        if n == 0 {
            return Err(Failure::Runtime("test split is empty".into()));
        }
        let batch = test.batch(&(0..n).collect::<Vec<_>>(), None)?;
        let report = mfree::verify::<f64, A>(model, batch.model_input(), &[steps], &mut membranes)?;
        merged = Some(match merged {
            None => report,
            Some(mut m) => {
                m.pass &= report.pass;
                m.steps.extend(report.steps);
                m
            }
        });
    }
    Ok(merged.expect("at least one step count"))
}

/// `runs/x/checkpoints/last.ckpt` → `runs/x`; otherwise the checkpoint's directory.
fn run_dir_of(checkpoint: &Path) -> PathBuf {
    let parent = checkpoint.parent().unwrap_or(Path::new("."));
    if parent.file_name().is_some_and(|n| n == CHECKPOINT_DIR) {
        parent.parent().unwrap_or(Path::new(".")).to_path_buf()
    } else {
        parent.to_path_buf()
    }
}
