//! Run configuration: one TOML document with `[model]`, `[neuron]`, `[mt]`,
//! `[data]` and `[train]` sections. Unknown keys are rejected.
//!
//! ```toml
//! name = "tiny"
//! seed = 1
//!
//! [model]
//! arch = "vgg"
//! stages = [[1, 8], [1, 16]]
//! fc_widths = [32, 2]
//! input_shape = [3, 8, 8]
//! class_count = 2
//! steps = 2
//!
//! [mt]
//! deltas = [-0.3, 0.3]
//! ```
//!
//! Overrides use dotted paths, `mt.deltas=-0.3,0.3` or `train.epochs=5`. A
//! value is read as a TOML literal when it parses as one, as a list when it
//! contains commas, and as a bare string otherwise.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::neuron::{MtConfig, NeuronParams};
use crate::real::DType;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synth,
    Cifar10,
    Events,
}

/// How an event stream is cut into per-step frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slicing {
    /// Equal event counts per slice, remainder to the earliest slices.
    #[default]
    Count,
    /// Equal time windows between the first and last timestamp.
    Time,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    SoftmaxCe,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Use only the first `n` training records.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    /// Sizes of the generated splits for the synthetic source.
    pub synth_train: usize,
    pub synth_test: usize,
    pub augment: bool,
    pub slicing: Slicing,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synth,
            train_limit: None,
            test_limit: None,
            synth_train: 256,
            synth_test: 64,
            augment: true,
            slicing: Slicing::Count,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// `(epoch, multiplier)`: from `epoch` on the rate is multiplied by `multiplier`.
    pub schedule: Vec<(usize, f64)>,
    pub loss: LossKind,
    pub dtype: DType,
    /// Write a checkpoint every `n` epochs (and always after the last one).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            schedule: vec![(100, 0.1)],
            loss: LossKind::SoftmaxCe,
            dtype: DType::F32,
            checkpoint_every: 1,
        }
    }
}

fn default_name() -> String {
    "run".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub neuron: NeuronParams,
    #[serde(default)]
    pub mt: MtConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn new(name: &str, model: ModelConfig) -> Self {
        RunConfig {
            name: name.into(),
            seed: 0,
            neuron: model.neuron.clone(),
            mt: model.mt.clone(),
            model,
            data: DataConfig::default(),
            train: TrainConfig::default(),
        }
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let config: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, overrides).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// The model description with the neuron and MT sections filled in.
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            neuron: self.neuron.clone(),
            mt: self.mt.clone(),
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.checkpoint_every == 0 {
            return Err(Error::Config(
                "train.batch_size and train.checkpoint_every must be positive".into(),
            ));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) || !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::Config(
                "train.lr must be positive and train.momentum in [0, 1)".into(),
            ));
        }
        if t.schedule.iter().any(|&(_, m)| !(m > 0.0 && m.is_finite())) {
            return Err(Error::Config(
                "train.schedule multipliers must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    if let Ok(mut t) = format!("v = {raw}").parse::<toml::Table>() {
        if let Some(v) = t.remove("v") {
            return v;
        }
    }
    if raw.contains(',') {
        return toml::Value::Array(
            raw.split(',')
                .filter(|s| !s.trim().is_empty())
                .map(parse_value)
                .collect(),
        );
    }
    toml::Value::String(raw.to_string())
}

/// Applies one `dotted.key=value` override to a parsed document.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("invalid override key `{key}`")));
    }
    let (last, parents) = path.split_last().unwrap();
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    table.insert(last.to_string(), parse_value(raw));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuron::MtScope;

    const TINY: &str = r#"
name = "tiny"
[model]
arch = "vgg"
stages = [[1, 8], [1, 16]]
fc_widths = [32, 2]
input_shape = [3, 8, 8]
class_count = 2
"#;

    #[test]
    fn defaults_fill_missing_sections() {
        let c = RunConfig::from_toml(TINY, &[]).unwrap();
        assert_eq!(c.model.steps, 1);
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.train.schedule, vec![(100, 0.1)]);
        assert!(c.mt.deltas.is_empty());
        assert_eq!(c.neuron, NeuronParams::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml(&format!("{TINY}bogus_key = 3\n"), &[]).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
        let err = RunConfig::from_toml(TINY, &["train.epoks=3".into()]).unwrap_err();
        assert!(err.to_string().contains("epoks"), "{err}");
    }

    #[test]
    fn overrides() {
        let c = RunConfig::from_toml(
            TINY,
            &[
                "mt.deltas=-0.3,0.3".into(),
                "model.steps=3".into(),
                "mt.scope=conv_and_fc".into(),
                "name=abc".into(),
                "train.schedule=[[2, 0.5]]".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.mt.deltas, vec![-0.3, 0.3]);
        assert_eq!(c.model.steps, 3);
        assert_eq!(c.mt.scope, MtScope::ConvAndFc);
        assert_eq!(c.name, "abc");
        assert_eq!(c.train.schedule, vec![(2, 0.5)]);
        let single = RunConfig::from_toml(TINY, &["mt.deltas=0.3,".into()]).unwrap();
        assert_eq!(single.mt.deltas, vec![0.3]);
        let bare = RunConfig::from_toml(TINY, &["mt.deltas=-0.3".into()]).unwrap();
        assert_eq!(bare.mt.deltas, vec![-0.3]);
        let none = RunConfig::from_toml(TINY, &["mt.deltas=[]".into()]).unwrap();
        assert!(none.mt.deltas.is_empty());
        assert!(RunConfig::from_toml(TINY, &["nokey".into()]).is_err());
    }

    #[test]
    fn resolved_snapshot_round_trips() {
        let c = RunConfig::from_toml(TINY, &["mt.deltas=-0.3,0.3".into(), "model.steps=3".into()])
            .unwrap();
        let again = RunConfig::from_toml(&c.to_toml(), &[]).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for o in [
            "model.steps=0",
            "train.batch_size=0",
            "train.momentum=1.5",
            "mt.deltas=0.3,0.3",
        ] {
            assert!(
                matches!(
                    RunConfig::from_toml(TINY, &[o.into()]),
                    Err(Error::Config(_))
                ),
                "{o}"
            );
        }
    }
}
