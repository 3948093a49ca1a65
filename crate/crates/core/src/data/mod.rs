//! In-memory datasets and batching.

mod augment;
mod cifar;
mod events;
mod synth;

use std::path::{Path, PathBuf};

pub use augment::{augment, AugmentDraw};
pub use cifar::{
    decode_cifar10, encode_cifar10, load_cifar10_binary, load_cifar10_split, CifarRecord,
    CIFAR_IMAGE_LEN, CIFAR_RECORD_LEN,
};
pub use events::{
    decode_events, encode_events, events_to_frames, load_event_split, load_events, slice_sizes,
    EventRecord, EventStream, FrameSequence, EVENT_HEADER_LEN, EVENT_MAGIC, EVENT_RECORD_LEN,
};
pub use synth::synth_dataset;

use crate::config::{DataSource, RunConfig};
use crate::error::{Error, Result};
use crate::model::ModelInput;
use crate::real::Real;
use crate::tensor::Tensor;

/// Environment variable naming the dataset root when no flag is given.
pub const DATA_ROOT_ENV: &str = "MTSNN_DATA";

/// Labelled samples of shape `[c, h, w]`, either static images or sequences
/// of `frames` per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    shape: [usize; 3],
    frames: Option<usize>,
    data: Vec<T>,
    labels: Vec<usize>,
}

pub enum BatchInput<T> {
    Static(Tensor<T>),
    Frames(Vec<Tensor<T>>),
}

pub struct Batch<T> {
    pub input: BatchInput<T>,
    pub labels: Vec<usize>,
}

impl<T: Real> Batch<T> {
    pub fn model_input(&self) -> ModelInput<'_, T> {
        match &self.input {
            BatchInput::Static(t) => ModelInput::Static(t),
            BatchInput::Frames(f) => ModelInput::Frames(f),
        }
    }
}

impl<T: Real> Dataset<T> {
    /// `frames` is `None` for static images.
    pub fn new(
        shape: [usize; 3],
        frames: Option<usize>,
        data: Vec<T>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let per = shape.iter().product::<usize>() * frames.unwrap_or(1);
        if data.len() != per * labels.len() {
            return Err(Error::invalid(
                "dataset",
                format!(
                    "{} values for {} samples of {per}",
                    data.len(),
                    labels.len()
                ),
            ));
        }
        Ok(Dataset {
            shape,
            frames,
            data,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn frames(&self) -> Option<usize> {
        self.frames
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn sample_len(&self) -> usize {
        self.shape.iter().product::<usize>() * self.frames.unwrap_or(1)
    }

    /// All frames of sample `i`, frame-major.
    pub fn sample(&self, i: usize) -> &[T] {
        let n = self.sample_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.labels.truncate(n);
            self.data.truncate(n * self.sample_len());
        }
    }

    /// Gathers samples into a batch, augmenting each when `rng` is given. For
    /// sequences every frame of a sample gets the same augmentation.
    pub fn batch(
        &self,
        indices: &[usize],
        mut rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<Batch<T>> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(
                "batch",
                format!("index {bad} out of {} samples", self.len()),
            ));
        }
        let [c, h, w] = self.shape;
        let image = c * h * w;
        let frames = self.frames.unwrap_or(1);
        let mut per_frame: Vec<Vec<T>> = vec![Vec::with_capacity(indices.len() * image); frames];
        for &i in indices {
            let draw = rng.as_mut().map(|r| AugmentDraw::sample(r, h, w));
            for (f, out) in per_frame.iter_mut().enumerate() {
                let src = &self.sample(i)[f * image..(f + 1) * image];
                match &draw {
                    Some(d) => out.extend(d.apply(src, self.shape)),
                    None => out.extend_from_slice(src),
                }
            }
        }
        let shape = vec![indices.len(), c, h, w];
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let input = match self.frames {
            None => BatchInput::Static(Tensor::new(shape, per_frame.pop().unwrap())?),
            Some(_) => BatchInput::Frames(
                per_frame
                    .into_iter()
                    .map(|d| Tensor::new(shape.clone(), d))
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(Batch { input, labels })
    }
}

/// Dataset root from an explicit path, else from `MTSNN_DATA`.
pub fn resolve_data_root(flag: Option<&Path>) -> Option<PathBuf> {
    flag.map(Path::to_path_buf).or_else(|| {
        std::env::var_os(DATA_ROOT_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
    })
}

const SYNTH_TRAIN_SEED: u64 = 0x5eed_0001;
const SYNTH_TEST_SEED: u64 = 0x5eed_0002;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Loads the train and test splits a run config asks for.
pub fn load_splits<T: Real>(
    config: &RunConfig,
    root: Option<&Path>,
) -> Result<(Dataset<T>, Dataset<T>)> {
    Ok((
        load_split(config, root, Split::Train)?,
        load_split(config, root, Split::Test)?,
    ))
}

/// Loads one split, with the configured size limit applied.
pub fn load_split<T: Real>(
    config: &RunConfig,
    root: Option<&Path>,
    split: Split,
) -> Result<Dataset<T>> {
    let model = &config.model;
    let data = &config.data;
    let need_root = || {
        root.ok_or_else(|| {
            Error::Config(format!(
                "data source {:?} needs a dataset root (--data-root or {DATA_ROOT_ENV})",
                data.source
            ))
        })
    };
    let (limit, synth_n, synth_seed, dir) = match split {
        Split::Train => (
            data.train_limit,
            data.synth_train,
            SYNTH_TRAIN_SEED,
            "train",
        ),
        Split::Test => (data.test_limit, data.synth_test, SYNTH_TEST_SEED, "test"),
    };
    let mut set = match data.source {
        DataSource::Synth => {
            synth_dataset(synth_n, model.class_count, model.input_shape, synth_seed)
        }
        DataSource::Cifar10 => {
            if model.input_shape != [3, 32, 32] {
                return Err(Error::Config(
                    "cifar10 needs model.input_shape = [3, 32, 32]".into(),
                ));
            }
            load_cifar10_split(need_root()?, split == Split::Train, limit)?
        }
        DataSource::Events => {
            let [c, h, w] = model.input_shape;
            if c != 2 {
                return Err(Error::Config("event data needs two input channels".into()));
            }
            load_event_split(&need_root()?.join(dir), model.steps, h, w, data.slicing)?
        }
    };
    if let Some(n) = limit {
        set.truncate(n);
    }
    if let Some(&bad) = set.labels().iter().find(|&&l| l >= model.class_count) {
        return Err(Error::Config(format!(
            "label {bad} out of range for class_count {}",
            model.class_count
        )));
    }
    Ok(set)
}
