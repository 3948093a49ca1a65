//! Trainable layers: convolution, batch normalization, affine, pooling,
//! time-unrolled neuron layers, membrane residuals and the voting readout.
//!
//! Activations of a sequence of `T` steps travel as one `[T·B, ...]` tensor in
//! time-major order (rows `t·B .. (t+1)·B` hold step `t`). Stateless layers
//! process all steps at once; batch normalization therefore pools its
//! statistics over batch, time and space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::neuron::{self, Dynamics, NeuronParams, NeuronState};
use crate::real::Real;
use crate::tape::{BatchStats, NormStats, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Places every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.param(p.value.clone()))
                .collect(),
        }
    }

    /// Places every parameter on `tape` as a detached constant.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.constant(p.value.clone()))
                .collect(),
        }
    }
}

/// Tape handles of a [`ParamStore`] for one pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[out_ch, in_ch, k, k]`
    pub kernel: ParamId,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvLayer {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, bound.var(self.kernel), self.stride, self.padding)
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    /// `r ← (1 - m)·r + m·batch`.
    pub fn update(&mut self, batch: &BatchStats<T>, momentum: f64) {
        let m = T::lit(momentum);
        let keep = T::one() - m;
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = keep * *r + m * b;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Index into the owning model's running statistics.
    pub stats: usize,
    pub momentum: f64,
    pub eps: f64,
}

/// Batch normalization over `[n, c, ...]` with per-channel `gamma`/`beta`.
/// Training mode normalizes with the statistics of `x` itself and returns them
/// for the caller to fold into the running estimates; evaluation mode uses `running`.
pub fn batchnorm_forward<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    layer: &BatchNormLayer,
    running: &RunningStats<T>,
    x: Var,
    mode: Mode,
) -> Result<(Var, Option<BatchStats<T>>)> {
    let stats = match mode {
        Mode::Train => NormStats::Batch,
        Mode::Eval => NormStats::Fixed {
            mean: &running.mean,
            var: &running.var,
        },
    };
    tape.batch_norm(
        x,
        bound.var(layer.gamma),
        bound.var(layer.beta),
        T::lit(layer.eps),
        stats,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `[out, in]`
    pub weight: ParamId,
    /// `[out]`
    pub bias: ParamId,
}

impl DenseLayer {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul_nt(x, bound.var(self.weight))?;
        tape.add(y, bound.var(self.bias))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    #[default]
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolLayer {
    pub kind: PoolKind,
    /// `None` pools the whole spatial extent.
    pub window: Option<usize>,
}

impl PoolLayer {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x)?;
        if s.len() != 4 {
            return Err(Error::invalid(
                "pool2d",
                format!("expected [n, c, h, w], got {s:?}"),
            ));
        }
        let (window, stride) = match self.window {
            Some(k) => ((k, k), (k, k)),
            None => ((s[2], s[3]), (s[2], s[3])),
        };
        match self.kind {
            PoolKind::Avg => tape.avgpool2d(x, window, stride),
            PoolKind::Max => tape.maxpool2d(x, window, stride),
        }
    }
}

/// A layer of spiking neurons run over every time step of a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuronLayer {
    pub params: NeuronParams,
    /// Learnable `[1]` time-constant parameter (PLIF only).
    pub a: Option<ParamId>,
    /// Threshold offsets; empty for single-threshold firing.
    pub deltas: Vec<f64>,
}

impl NeuronLayer {
    pub fn dynamics<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound) -> Result<Dynamics> {
        Dynamics::new(tape, &self.params, self.a.map(|a| bound.var(a)))
    }

    /// Runs `steps` time steps over a `[steps·B, ...]` input current, starting
    /// from a resting membrane. Returns the `S_sum` spikes in the same layout.
    pub fn forward_sequence<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        steps: usize,
    ) -> Result<Var> {
        let shape = tape.shape(x)?.to_vec();
        if steps == 0 || shape[0] % steps != 0 {
            return Err(Error::invalid(
                "neuron",
                format!("{} rows cannot be split into {steps} steps", shape[0]),
            ));
        }
        let batch = shape[0] / steps;
        let dynamics = self.dynamics(tape, bound)?;
        let mut step_shape = shape.clone();
        step_shape[0] = batch;
        let mut state = NeuronState::zeros(tape, &step_shape);
        let mut spikes = Vec::with_capacity(steps);
        for t in 0..steps {
            let x_t = if steps == 1 {
                x
            } else {
                tape.rows(x, t * batch, batch)?
            };
            let (next, s) = neuron::step(tape, state, x_t, &dynamics, &self.params, &self.deltas)?;
            state = next;
            spikes.push(s);
        }
        if steps == 1 {
            Ok(spikes[0])
        } else {
            tape.concat(&spikes)
        }
    }
}

/// Conv → batch norm → one neuron step, for a single time step `x_t` of shape `[B, c, h, w]`.
#[allow(clippy::too_many_arguments)]
pub fn conv_bn_plif_forward<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    x_t: Var,
    state: NeuronState,
    conv: &ConvLayer,
    bn: &BatchNormLayer,
    running: &RunningStats<T>,
    neuron_layer: &NeuronLayer,
    mode: Mode,
) -> Result<(Var, NeuronState, Option<BatchStats<T>>)> {
    if tape.shape(x_t)?.len() != 4 {
        return Err(Error::invalid(
            "conv_bn_plif",
            format!("expected [batch, ch, h, w], got {:?}", tape.shape(x_t)?),
        ));
    }
    let y = conv.forward(tape, bound, x_t)?;
    let (y, stats) = batchnorm_forward(tape, bound, bn, running, y, mode)?;
    let dynamics = neuron_layer.dynamics(tape, bound)?;
    let (next, spikes) = neuron::step(
        tape,
        state,
        y,
        &dynamics,
        &neuron_layer.params,
        &neuron_layer.deltas,
    )?;
    Ok((spikes, next, stats))
}

/// Sum of two membrane input currents, taken before the receiving neuron fires.
pub fn membrane_residual_add<T: Real>(tape: &mut Tape<T>, h_main: Var, h_skip: Var) -> Result<Var> {
    if tape.shape(h_main)? != tape.shape(h_skip)? {
        return Err(Error::shape(
            "membrane_residual_add",
            tape.shape(h_main)?,
            tape.shape(h_skip)?,
        ));
    }
    tape.add(h_main, h_skip)
}

/// Averages consecutive groups of `group` output units into one score per class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VotingLayer {
    pub group: usize,
    pub classes: usize,
}

pub fn voting_forward<T: Real>(
    tape: &mut Tape<T>,
    spikes: Var,
    layer: &VotingLayer,
) -> Result<Var> {
    let s = tape.shape(spikes)?;
    if s.len() != 2 || s[1] != layer.group * layer.classes {
        return Err(Error::invalid(
            "voting",
            format!(
                "input {s:?} is not [batch, {}·{}]",
                layer.group, layer.classes
            ),
        ));
    }
    tape.group_mean(spikes, layer.group)
}
