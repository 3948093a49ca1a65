//! SGD with momentum, step learning-rate decay, losses on the mean output over
//! steps, and a resumable epoch loop.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta, RngState};
use crate::config::{LossKind, RunConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{Bound, Mode, ParamStore};
use crate::model::{Model, StepOutputs};
use crate::real::Real;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Momentum buffers, one per parameter, plus the rate schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub velocity: Vec<Tensor<T>>,
    pub lr: f64,
    pub momentum: f64,
    pub schedule: Vec<(usize, f64)>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(
        params: &ParamStore<T>,
        lr: f64,
        momentum: f64,
        schedule: Vec<(usize, f64)>,
    ) -> Self {
        OptimizerState {
            velocity: params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect(),
            lr,
            momentum,
            schedule,
        }
    }
}

/// Base rate times every schedule multiplier whose epoch has been reached.
pub fn lr_at(base: f64, schedule: &[(usize, f64)], epoch: usize) -> f64 {
    schedule
        .iter()
        .filter(|&&(at, _)| epoch >= at)
        .fold(base, |lr, &(_, m)| lr * m)
}

/// `v ← momentum·v + g`, `p ← p − lr·v` for every parameter.
pub fn sgd_step<T: Real>(
    params: &mut ParamStore<T>,
    bound: &Bound,
    grads: &Gradients<T>,
    opt: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    let missing: Vec<String> = params
        .iter()
        .zip(bound.vars())
        .filter(|(_, &v)| grads.get(v).is_none())
        .map(|(p, _)| p.name.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingGradient(missing.join(", ")));
    }
    let (lr, m) = (T::lit(lr), T::lit(opt.momentum));
    for ((p, &var), v) in params
        .iter_mut()
        .zip(bound.vars())
        .zip(opt.velocity.iter_mut())
    {
        let g = grads.get(var).expect("checked above");
        for ((pv, vv), &gv) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(v.data_mut())
            .zip(g.data())
        {
            *vv = m * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Loss on `outputs.mean`.
pub fn loss<T: Real>(
    tape: &mut Tape<T>,
    outputs: &StepOutputs<Var>,
    labels: &[usize],
    kind: LossKind,
) -> Result<Var> {
    match kind {
        LossKind::SoftmaxCe => tape.softmax_cross_entropy(outputs.mean, labels),
        LossKind::Mse => tape.mse_one_hot(outputs.mean, labels),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    /// Wall time of the epoch (train) or of the evaluation (test).
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run_id: String,
    pub seed: u64,
    pub rows: Vec<MetricRow>,
}

impl RunMetrics {
    pub fn test_accuracies(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows
            .iter()
            .filter(|r| r.split == "test")
            .map(|r| r.accuracy)
    }

    /// Best test accuracy over all epochs so far.
    pub fn peak_test_accuracy(&self) -> Option<f64> {
        self.test_accuracies().reduce(f64::max)
    }

    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.test_accuracies().last()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record(["epoch", "split", "loss", "accuracy", "lr", "seconds"])?;
        }
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv()?)?)
    }

    pub fn read_csv(path: &Path) -> Result<Vec<MetricRow>> {
        let mut r = csv::Reader::from_path(path)?;
        Ok(r.deserialize().collect::<Result<_, _>>()?)
    }
}

/// Mean loss and accuracy of `model` over `data` in inference mode.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    data: &Dataset<T>,
    batch_size: usize,
    kind: LossKind,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let steps = model.config().steps;
    let indices: Vec<usize> = (0..data.len()).collect();
    let (mut total, mut correct) = (0.0, 0usize);
    for chunk in indices.chunks(batch_size) {
        let batch = data.batch(chunk, None)?;
        let out = model.predict(batch.model_input(), steps)?;
        let mut tape = Tape::new();
        let mean = tape.constant(out.mean.clone());
        let l = loss(
            &mut tape,
            &StepOutputs {
                per_step: vec![],
                mean,
            },
            &batch.labels,
            kind,
        )?;
        total += tape.value(l)?.item().as_f64() * chunk.len() as f64;
        correct += count_correct(&out.mean, &batch.labels);
    }
    Ok((
        total / data.len() as f64,
        correct as f64 / data.len() as f64,
    ))
}

fn count_correct<T: Real>(mean: &Tensor<T>, labels: &[usize]) -> usize {
    mean.argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(a, b)| a == b)
        .count()
}

/// Model, optimizer and rng of one run, advanced an epoch at a time.
pub struct Trainer<T> {
    pub config: RunConfig,
    pub model: Model<T>,
    pub opt: OptimizerState<T>,
    pub rng: ChaCha8Rng,
    /// Index of the next epoch to run.
    pub epoch: usize,
    pub metrics: RunMetrics,
}

impl<T: Real> Trainer<T> {
    /// Builds the model from `config.seed`; the same rng then drives shuffling
    /// and augmentation.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        if config.train.dtype != T::DTYPE {
            return Err(Error::Config(format!(
                "config asks for {:?} but the trainer runs in {:?}",
                config.train.dtype,
                T::DTYPE
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::build(&config.model(), &mut rng)?;
        let t = &config.train;
        let opt = OptimizerState::new(model.params(), t.lr, t.momentum, t.schedule.clone());
        let metrics = RunMetrics {
            run_id: config.name.clone(),
            seed: config.seed,
            rows: Vec::new(),
        };
        Ok(Trainer {
            config,
            model,
            opt,
            rng,
            epoch: 0,
            metrics,
        })
    }

    pub fn lr(&self) -> f64 {
        lr_at(self.opt.lr, &self.opt.schedule, self.epoch)
    }

    /// One pass over `train` followed by an evaluation on `test`.
    pub fn run_epoch(&mut self, train: &Dataset<T>, test: &Dataset<T>) -> Result<()> {
        let started = Instant::now();
        let lr = self.lr();
        let tc = self.config.train.clone();
        let steps = self.model.config().steps;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut total, mut correct) = (0.0, 0usize);
        for (b, chunk) in order.chunks(tc.batch_size).enumerate() {
            let batch = if self.config.data.augment {
                train.batch(chunk, Some(&mut self.rng))?
            } else {
                train.batch(chunk, None)?
            };
            let mut tape = Tape::new();
            let pass = self
                .model
                .forward(&mut tape, batch.model_input(), steps, Mode::Train)?;
            let l = loss(&mut tape, &pass.outputs, &batch.labels, tc.loss)?;
            let value = tape.value(l)?.item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: self.epoch,
                    batch: b,
                    lr,
                });
            }
            total += value * chunk.len() as f64;
            correct += count_correct(tape.value(pass.outputs.mean)?, &batch.labels);
            let grads = tape.backward(l)?;
            sgd_step(
                self.model.params_mut(),
                &pass.bound,
                &grads,
                &mut self.opt,
                lr,
            )?;
            self.model.apply_batch_stats(&pass.batch_stats);
        }
        let n = train.len().max(1) as f64;
        self.metrics.rows.push(MetricRow {
            epoch: self.epoch,
            split: "train".into(),
            loss: total / n,
            accuracy: correct as f64 / n,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        });
        let started = Instant::now();
        let (test_loss, test_acc) = evaluate(&self.model, test, tc.batch_size, tc.loss)?;
        self.metrics.rows.push(MetricRow {
            epoch: self.epoch,
            split: "test".into(),
            loss: test_loss,
            accuracy: test_acc,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        });
        self.epoch += 1;
        Ok(())
    }

    /// Runs epochs until `config.train.epochs`, calling `after_epoch` after each.
    pub fn fit(
        &mut self,
        train: &Dataset<T>,
        test: &Dataset<T>,
        mut after_epoch: impl FnMut(&Self) -> Result<()>,
    ) -> Result<()> {
        while self.epoch < self.config.train.epochs {
            self.run_epoch(train, test)?;
            after_epoch(self)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut tensors: Vec<(String, Tensor<T>)> = self
            .model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for (i, s) in self.model.running_stats().iter().enumerate() {
            let n = s.mean.len();
            tensors.push((
                format!("bn_running/{i}/mean"),
                Tensor::new([n], s.mean.clone()).expect("1-d"),
            ));
            tensors.push((
                format!("bn_running/{i}/var"),
                Tensor::new([n], s.var.clone()).expect("1-d"),
            ));
        }
        for (p, v) in self.model.params().iter().zip(&self.opt.velocity) {
            tensors.push((format!("velocity/{}", p.name), v.clone()));
        }
        Checkpoint {
            meta: CheckpointMeta {
                epoch: self.epoch,
                config: self.config.to_toml(),
                metrics: self.metrics.clone(),
                peak_test_accuracy: self.metrics.peak_test_accuracy(),
            },
            rng: RngState::capture(&self.rng),
            tensors,
        }
    }

    /// Restores a trainer exactly as it was when `ckpt` was taken.
    pub fn resume(ckpt: &Checkpoint<T>) -> Result<Self> {
        let config = RunConfig::from_toml(&ckpt.meta.config, &[])?;
        let mut t = Trainer::new(config)?;
        for p in t.model.params_mut().iter_mut() {
            p.value = ckpt.take_tensor(&p.name, p.value.shape())?;
        }
        for (i, s) in t.model.running_stats_mut().iter_mut().enumerate() {
            let n = [s.mean.len()];
            s.mean = ckpt
                .take_tensor(&format!("bn_running/{i}/mean"), &n)?
                .into_data();
            s.var = ckpt
                .take_tensor(&format!("bn_running/{i}/var"), &n)?
                .into_data();
        }
        let names: Vec<String> = t.model.params().iter().map(|p| p.name.clone()).collect();
        for (name, v) in names.iter().zip(t.opt.velocity.iter_mut()) {
            *v = ckpt.take_tensor(&format!("velocity/{name}"), v.shape())?;
        }
        t.rng = ckpt.rng.restore();
        t.epoch = ckpt.meta.epoch;
        t.metrics = ckpt.meta.metrics.clone();
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Gradient `g` of the loss `g·p`.
    fn step(p0: f64, g: f64, lr: f64, momentum: f64, n: usize) -> f64 {
        let mut store = ParamStore::new();
        store.add("p", Tensor::scalar(p0));
        let mut opt = OptimizerState::new(&store, lr, momentum, vec![]);
        for _ in 0..n {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let loss = tape.mul_scalar(bound.vars()[0], g).unwrap();
            let grads = tape.backward(loss).unwrap();
            sgd_step(&mut store, &bound, &grads, &mut opt, lr).unwrap();
        }
        let p = store.iter().next().unwrap().value.item();
        p
    }

    #[test]
    fn plain_sgd() {
        assert!((step(1.0, 1.0, 0.1, 0.0, 1) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        assert!((step(0.0, 1.0, 0.1, 0.9, 2) + 0.29).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_and_zero_rate_leave_params() {
        assert_eq!(step(0.7, 0.0, 0.1, 0.9, 3), 0.7);
        assert_eq!(step(0.7, 1.0, 0.0, 0.9, 3), 0.7);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut store = ParamStore::<f64>::new();
        store.add("used", Tensor::scalar(1.0));
        store.add("unused", Tensor::scalar(1.0));
        let mut opt = OptimizerState::new(&store, 0.1, 0.9, vec![]);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let loss = tape.mul_scalar(bound.vars()[0], 2.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        let err = sgd_step(&mut store, &bound, &grads, &mut opt, 0.1).unwrap_err();
        assert!(err.to_string().contains("unused"), "{err}");
    }

    #[test]
    fn learning_rate_schedule() {
        let s = [(100, 0.1)];
        assert_eq!(lr_at(0.1, &s, 0), 0.1);
        assert_eq!(lr_at(0.1, &s, 99), 0.1);
        assert!((lr_at(0.1, &s, 100) - 0.01).abs() < 1e-17);
        assert!((lr_at(0.1, &[(100, 0.1), (200, 0.1)], 250) - 0.001).abs() < 1e-17);
    }

    #[test]
    fn loss_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let mean = tape.constant(Tensor::from_f64([1, 4], &[0.3; 4]).unwrap());
        let out = StepOutputs {
            per_step: vec![],
            mean,
        };
        let ce = loss(&mut tape, &out, &[2], LossKind::SoftmaxCe).unwrap();
        assert!((tape.value(ce).unwrap().item() - 4f64.ln()).abs() < 1e-12);
        let mean = tape.constant(Tensor::from_f64([1, 2], &[2.0, 0.0]).unwrap());
        let out = StepOutputs {
            per_step: vec![],
            mean,
        };
        let ce = loss(&mut tape, &out, &[0], LossKind::SoftmaxCe).unwrap();
        assert!((tape.value(ce).unwrap().item() - 0.1269).abs() < 1e-4);
        let mean = tape.constant(Tensor::from_f64([1, 3], &[0.0, 1.0, 0.0]).unwrap());
        let out = StepOutputs {
            per_step: vec![],
            mean,
        };
        let mse = loss(&mut tape, &out, &[1], LossKind::Mse).unwrap();
        assert_eq!(tape.value(mse).unwrap().item(), 0.0);
        assert!(loss(&mut tape, &out, &[3], LossKind::Mse).is_err());
    }

    #[test]
    fn loss_is_symmetric_in_step_order() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_f64([1, 3], &[0.1, 0.7, -0.2]).unwrap());
        let b = tape.constant(Tensor::from_f64([1, 3], &[0.4, -0.3, 0.9]).unwrap());
        let c = tape.constant(Tensor::from_f64([1, 3], &[1.5, 0.2, 0.0]).unwrap());
        let mut mean_of = |order: [Var; 3]| {
            let s = tape.add(order[0], order[1]).unwrap();
            let s = tape.add(s, order[2]).unwrap();
            let m = tape.mul_scalar(s, 1.0 / 3.0).unwrap();
            let l = loss(
                &mut tape,
                &StepOutputs {
                    per_step: vec![],
                    mean: m,
                },
                &[1],
                LossKind::SoftmaxCe,
            )
            .unwrap();
            tape.value(l).unwrap().item()
        };
        let x = mean_of([a, b, c]);
        let y = mean_of([c, a, b]);
        assert!((x - y).abs() < 1e-15);
    }

    #[test]
    fn empty_metrics_csv_has_header() {
        let csv = RunMetrics::default().to_csv().unwrap();
        assert_eq!(csv.trim(), "epoch,split,loss,accuracy,lr,seconds");
    }
}
