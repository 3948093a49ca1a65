//! `plot`: accuracy-vs-epoch and accuracy-vs-step charts as SVG.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::ablate::{median, read_rows, ABLATION_CSV};
use crate::run::{read_metrics, read_resolved_config, METRICS_CSV};
use crate::{CliResult, Failure};

pub const EPOCH_CHART: &str = "accuracy_vs_epoch.svg";
pub const STEP_CHART: &str = "accuracy_vs_step.svg";

type Series = (String, Vec<(f64, f64)>);
/// setting → steps → peak accuracies
type StepPoints = BTreeMap<String, BTreeMap<usize, Vec<f64>>>;

fn run_label(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Test accuracy per epoch, and `(setting, steps, peak accuracy)` points.
fn collect(dirs: &[PathBuf]) -> CliResult<(Vec<Series>, StepPoints)> {
    let mut epochs = Vec::new();
    let mut steps = StepPoints::new();
    let mut add_run = |dir: &Path, setting: Option<String>| -> CliResult<()> {
        let m = read_metrics(dir)?;
        let curve: Vec<(f64, f64)> = m
            .rows
            .iter()
            .filter(|r| r.split == "test")
            .map(|r| (r.epoch as f64 + 1.0, r.accuracy))
            .collect();
        let config = read_resolved_config(dir)?;
        let setting = setting.unwrap_or_else(|| {
            if config.mt.deltas.is_empty() {
                "ST".to_string()
            } else {
                format!("MT {:?}", config.mt.deltas)
            }
        });
        if let Some(peak) = m.peak_test_accuracy() {
            steps
                .entry(setting)
                .or_default()
                .entry(config.model.steps)
                .or_default()
                .push(peak);
        }
        epochs.push((run_label(dir), curve));
        Ok(())
    };
    for dir in dirs {
        let ablation = dir.join(ABLATION_CSV);
        if ablation.is_file() {
            for row in read_rows(&ablation)? {
                add_run(&dir.join(&row.run_dir), Some(row.setting))?;
            }
        } else if dir.join(METRICS_CSV).is_file() {
            add_run(dir, None)?;
        } else {
            return Err(Failure::Runtime(format!(
                "{}: neither {METRICS_CSV} nor {ABLATION_CSV} found",
                dir.display()
            )));
        }
    }
    Ok((epochs, steps))
}

fn draw(path: &Path, title: &str, x_desc: &str, series: &[Series]) -> CliResult<()> {
    let fail = |e: &dyn std::fmt::Display| Failure::Runtime(format!("{}: {e}", path.display()));
    let x_max = series
        .iter()
        .flat_map(|s| s.1.iter().map(|p| p.0))
        .fold(1.0f64, f64::max);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| fail(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(55)
        .build_cartesian_2d(0.0..x_max + 0.5, 0.0..1.0)
        .map_err(|e| fail(&e))?;
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .y_desc("test accuracy")
        .draw()
        .map_err(|e| fail(&e))?;
    for (i, (label, points)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(
                points.iter().copied(),
                color.stroke_width(2),
            ))
            .map_err(|e| fail(&e))?
            .label(label.clone())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2))
            });
        chart
            .draw_series(points.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(|e| fail(&e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(|e| fail(&e))?;
    root.present().map_err(|e| fail(&e))?;
    Ok(())
}

pub fn plot(dirs: &[PathBuf], out: &Path) -> CliResult<()> {
    if dirs.is_empty() {
        return Err(Failure::Usage("no run directories given".into()));
    }
    let (epochs, steps) = collect(dirs)?;
    fs::create_dir_all(out)?;
    draw(
        &out.join(EPOCH_CHART),
        "Test accuracy by epoch",
        "epoch",
        &epochs,
    )?;
    let step_series: Vec<Series> = steps
        .into_iter()
        .map(|(label, by_step)| {
            let points = by_step
                .into_iter()
                .map(|(s, accs)| (s as f64, median(&accs)))
                .collect();
            (label, points)
        })
        .collect();
    draw(
        &out.join(STEP_CHART),
        "Peak test accuracy by time steps",
        "time steps",
        &step_series,
    )?;
    println!(
        "{}\n{}",
        out.join(EPOCH_CHART).display(),
        out.join(STEP_CHART).display()
    );
    Ok(())
}
