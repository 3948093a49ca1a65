//! `ablate`: one axis of settings, crossed with step counts and seeds.

use std::fs;

use serde::{Deserialize, Serialize};

use crate::run::{create_run_dir, resolve_config, train_config};
use crate::{Axis, CliResult, ConfigArgs, Failure};

pub const ABLATION_CSV: &str = "ablation.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub setting: String,
    pub steps: usize,
    pub seed: u64,
    pub peak_test_accuracy: f64,
    pub final_test_accuracy: f64,
    pub run_dir: String,
}

fn axis_name(axis: Axis) -> &'static str {
    match axis {
        Axis::MtScope => "mt_scope",
        Axis::Deltas => "deltas",
        Axis::Steps => "steps",
    }
}

/// `(setting label, overrides, step counts)` for every grid point before seeds.
fn grid(
    axis: Axis,
    values: &[String],
    steps: &[usize],
    default_steps: usize,
) -> CliResult<Vec<(String, String, usize)>> {
    let strings = |defaults: &[&str]| -> Vec<String> {
        if values.is_empty() {
            defaults.iter().map(|s| s.to_string()).collect()
        } else {
            values.to_vec()
        }
    };
    let step_list = if steps.is_empty() {
        vec![default_steps]
    } else {
        steps.to_vec()
    };
    let out = match axis {
        Axis::Deltas => {
            let mut out = Vec::new();
            for v in strings(&["[]", "[-0.3]", "[0.3]", "[-0.3,0.3]"]) {
                for &s in &step_list {
                    out.push((v.clone(), format!("mt.deltas={v}"), s));
                }
            }
            out
        }
        Axis::MtScope => {
            let mut out = Vec::new();
            for v in strings(&["conv_only", "conv_and_fc"]) {
                for &s in &step_list {
                    out.push((v.clone(), format!("mt.scope={v}"), s));
                }
            }
            out
        }
        Axis::Steps => {
            let list: Vec<usize> = if !values.is_empty() {
                values
                    .iter()
                    .map(|v| {
                        v.trim()
                            .parse()
                            .map_err(|_| Failure::Usage(format!("`{v}` is not a step count")))
                    })
                    .collect::<CliResult<_>>()?
            } else if !steps.is_empty() {
                steps.to_vec()
            } else {
                vec![1, 2, 3]
            };
            list.into_iter()
                .map(|s| (s.to_string(), String::new(), s))
                .collect()
        }
    };
    Ok(out)
}

pub fn ablate(
    common: &ConfigArgs,
    axis: Axis,
    values: &[String],
    steps: &[usize],
    seeds: &[u64],
) -> CliResult<()> {
    let base = resolve_config(common, &[])?;
    let points = grid(axis, values, steps, base.model.steps)?;
    let seeds = if seeds.is_empty() {
        vec![base.seed]
    } else {
        seeds.to_vec()
    };
    if points.is_empty() || points.iter().any(|p| p.2 == 0) {
        return Err(Failure::Usage("empty ablation grid".into()));
    }
    // resolve every config before training anything
    let mut configs = Vec::new();
    for (label, setting, s) in &points {
        for &seed in &seeds {
            let mut extra = vec![format!("model.steps={s}"), format!("seed={seed}")];
            if !setting.is_empty() {
                extra.push(setting.clone());
            }
            let mut config = resolve_config(common, &extra)?;
            config.name = format!(
                "{}-{}-{}-t{s}-s{seed}",
                base.name,
                axis_name(axis),
                dir_label(label)
            );
            configs.push((label.clone(), *s, seed, config));
        }
    }
    let dir = create_run_dir(&common.out, &format!("ablate-{}", axis_name(axis)))?;
    let mut rows = Vec::new();
    for (label, steps, seed, config) in configs {
        let (run, metrics) = train_config(config, common.data_root.as_deref(), &dir)?;
        rows.push(AblationRow {
            axis: axis_name(axis).into(),
            setting: label,
            steps,
            seed,
            peak_test_accuracy: metrics.peak_test_accuracy().unwrap_or(0.0),
            final_test_accuracy: metrics.final_test_accuracy().unwrap_or(0.0),
            run_dir: run
                .file_name()
                .expect("run dir name")
                .to_string_lossy()
                .into_owned(),
        });
        write_rows(&dir.join(ABLATION_CSV), &rows)?;
    }
    println!(
        "{:<16} {:>5} {:>6} {:>12}",
        "setting", "steps", "seeds", "median peak"
    );
    let mut seen: Vec<(String, usize)> = Vec::new();
    for r in &rows {
        let key = (r.setting.clone(), r.steps);
        if seen.contains(&key) {
            continue;
        }
        let accs: Vec<f64> = rows
            .iter()
            .filter(|o| o.setting == r.setting && o.steps == r.steps)
            .map(|o| o.peak_test_accuracy)
            .collect();
        println!(
            "{:<16} {:>5} {:>6} {:>12.4}",
            r.setting,
            r.steps,
            accs.len(),
            median(&accs)
        );
        seen.push(key);
    }
    println!("{}", dir.join(ABLATION_CSV).display());
    Ok(())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

fn write_rows(path: &std::path::Path, rows: &[AblationRow]) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_rows(path: &std::path::Path) -> CliResult<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

/// `[-0.3,0.3]` → `m0.3_0.3`, `[]` → `none`: safe in a directory name.
fn dir_label(label: &str) -> String {
    let inner = label.trim_start_matches('[').trim_end_matches(']');
    if inner.is_empty() {
        return "none".into();
    }
    inner
        .chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| match c {
            '-' => 'm',
            ',' => '_',
            c => c,
        })
        .collect()
}
