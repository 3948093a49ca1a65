//! Time-unrolled VGG- and ResNet-style spiking networks built from a
//! declarative [`ModelConfig`].
//!
//! VGG: stages of `Conv-BN-PLIF` units separated by 2×2 pooling, then
//! fully-connected layers. The first `Conv-BN-PLIF` acts as the encoder that
//! turns pixels into spikes.
//!
//! ResNet: a `Conv-BN` stem, then residual blocks whose skip connection adds
//! membrane input currents (not spikes) before the next neuron fires, then a
//! global pool and one output layer. The first block of every stage after the
//! first halves the resolution with stride-2 convolutions on both paths.
//!
//! Output mode `membrane` reads the raw affine output of the last layer at
//! every step. Mode `spike_voting` lets the last layer fire and averages groups
//! of output neurons per class.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Padding;
use crate::layers::{
    self, BatchNormLayer, Bound, ConvLayer, DenseLayer, Mode, NeuronLayer, ParamStore, PoolKind,
    PoolLayer, RunningStats, VotingLayer,
};
use crate::neuron::{MtConfig, MtScope, NeuronKind, NeuronParams};
use crate::real::Real;
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Vgg,
    Resnet,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    #[default]
    Membrane,
    SpikeVoting,
}

fn default_steps() -> usize {
    1
}
fn default_group() -> usize {
    10
}
fn default_bn_momentum() -> f64 {
    0.1
}
fn default_bn_eps() -> f64 {
    1e-5
}

/// Network description. `neuron` and `mt` live in their own sections of a run
/// config file and are filled in by [`crate::config::RunConfig::model`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    /// `[conv_count, filters]` per stage. For ResNet `conv_count` is twice the
    /// number of residual blocks.
    pub stages: Vec<[usize; 2]>,
    /// Widths of the fully-connected layers, output layer included.
    pub fc_widths: Vec<usize>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub output_mode: OutputMode,
    /// Output neurons per class in voting mode.
    #[serde(default = "default_group")]
    pub voting_group: usize,
    /// `[channels, height, width]`
    pub input_shape: [usize; 3],
    pub class_count: usize,
    #[serde(default)]
    pub pooling: PoolKind,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    #[serde(skip)]
    pub neuron: NeuronParams,
    #[serde(skip)]
    pub mt: MtConfig,
}

impl ModelConfig {
    fn vgg(stages: &[[usize; 2]], fc_widths: &[usize], input: [usize; 3], classes: usize) -> Self {
        ModelConfig {
            arch: Arch::Vgg,
            stages: stages.to_vec(),
            fc_widths: fc_widths.to_vec(),
            steps: 1,
            output_mode: OutputMode::Membrane,
            voting_group: 10,
            input_shape: input,
            class_count: classes,
            pooling: PoolKind::Avg,
            bn_momentum: default_bn_momentum(),
            bn_eps: default_bn_eps(),
            neuron: NeuronParams::default(),
            mt: MtConfig::default(),
        }
    }

    fn voting(mut self) -> Self {
        self.output_mode = OutputMode::SpikeVoting;
        let last = self.fc_widths.len() - 1;
        self.fc_widths[last] = self.class_count * self.voting_group;
        self
    }

    /// VGG-8 for CIFAR-10: two stages of three 256-filter convolutions, FC 2048, voting readout.
    pub fn vgg8() -> Self {
        Self::vgg(&[[3, 256], [3, 256]], &[2048, 10], [3, 32, 32], 10).voting()
    }

    /// VGG-9 for CIFAR-10: stages 2,2,3 with 256,512,512 filters, FC 1024, voting readout.
    pub fn vgg9() -> Self {
        Self::vgg(
            &[[2, 256], [2, 512], [3, 512]],
            &[1024, 10],
            [3, 32, 32],
            10,
        )
        .voting()
    }

    /// VGG-12 for 128×128 two-polarity event frames: five 128-filter stages, FC 512, voting readout.
    pub fn vgg12_dvs() -> Self {
        Self::vgg(
            &[[2, 128], [2, 128], [3, 128], [3, 128], [3, 128]],
            &[512, 10],
            [2, 128, 128],
            10,
        )
        .voting()
    }

    /// ResNet-20 for CIFAR-10: three stages of three blocks with 64,128,256 filters.
    pub fn resnet20() -> Self {
        ModelConfig {
            arch: Arch::Resnet,
            ..Self::vgg(&[[6, 64], [6, 128], [6, 256]], &[10], [3, 32, 32], 10)
        }
    }

    /// Desk-scale VGG for CIFAR-10: two single-conv stages with 16 and 32 filters, FC 64.
    pub fn desk_vgg() -> Self {
        Self::vgg(&[[1, 16], [1, 32]], &[64, 10], [3, 32, 32], 10)
    }

    /// Small VGG for quick runs on synthetic data.
    pub fn tiny_vgg(input: [usize; 3], classes: usize) -> Self {
        Self::vgg(&[[1, 8], [1, 16]], &[32, classes], input, classes)
    }

    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "vgg8" => Self::vgg8(),
            "vgg9" => Self::vgg9(),
            "vgg12_dvs" => Self::vgg12_dvs(),
            "resnet20" => Self::resnet20(),
            "desk_vgg" => Self::desk_vgg(),
            "tiny_vgg" => Self::tiny_vgg([3, 8, 8], 2),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if self.class_count == 0 || self.input_shape.contains(&0) {
            return fail("class_count and input_shape entries must be positive".into());
        }
        if self.stages.is_empty() || self.stages.iter().any(|s| s[0] == 0 || s[1] == 0) {
            return fail(format!("invalid stage list {:?}", self.stages));
        }
        if self.fc_widths.contains(&0) {
            return fail(format!("invalid fc_widths {:?}", self.fc_widths));
        }
        match self.arch {
            Arch::Vgg if self.fc_widths.is_empty() => {
                return fail("vgg requires at least one fully-connected layer".into())
            }
            Arch::Resnet if self.fc_widths.len() != 1 => {
                return fail("resnet requires exactly one (output) fully-connected layer".into())
            }
            Arch::Resnet if self.stages.iter().any(|s| s[0] % 2 != 0) => {
                return fail("resnet stage conv counts must be even (two per block)".into())
            }
            _ => {}
        }
        let out = *self.fc_widths.last().unwrap();
        let want = match self.output_mode {
            OutputMode::Membrane => self.class_count,
            OutputMode::SpikeVoting => {
                if self.voting_group == 0 {
                    return fail("voting_group must be positive".into());
                }
                self.class_count * self.voting_group
            }
        };
        if out != want {
            return fail(format!(
                "output layer width {out} does not match {want} for {:?} output",
                self.output_mode
            ));
        }
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        let pools = match self.arch {
            Arch::Vgg => self.stages.len(),
            Arch::Resnet => 0,
        };
        for _ in 0..pools {
            if h < 2 || w < 2 {
                return fail(format!(
                    "input {:?} is too small for {} pooling stages",
                    self.input_shape, pools
                ));
            }
            h /= 2;
            w /= 2;
        }
        if self.arch == Arch::Resnet && (h >> (self.stages.len() - 1)) == 0 {
            return fail("input is too small for the number of downsampling stages".into());
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return fail("bn_eps must be positive and bn_momentum in [0, 1]".into());
        }
        self.neuron.validate()?;
        self.mt.validate(self.neuron.v_th)
    }
}

/// Residual block operating on membrane input currents.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub label: String,
    pub neuron1: NeuronLayer,
    pub conv1: ConvLayer,
    pub bn1: BatchNormLayer,
    pub neuron2: NeuronLayer,
    pub conv2: ConvLayer,
    pub bn2: BatchNormLayer,
    /// Projection applied to the spikes of `neuron1` when the block changes shape.
    pub shortcut: Option<(ConvLayer, BatchNormLayer)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    ConvBn {
        label: String,
        conv: ConvLayer,
        bn: BatchNormLayer,
    },
    Neuron {
        label: String,
        layer: NeuronLayer,
    },
    Pool {
        label: String,
        layer: PoolLayer,
    },
    Flatten,
    Dense {
        label: String,
        layer: DenseLayer,
    },
    Residual(ResidualBlock),
    Voting(VotingLayer),
}

/// Per-step outputs `[batch, classes]` and their mean over steps.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutputs<V> {
    pub per_step: Vec<V>,
    pub mean: V,
}

pub enum ModelInput<'a, T> {
    /// A static `[B, c, h, w]` batch presented unchanged at every step.
    Static(&'a Tensor<T>),
    /// One `[B, c, h, w]` frame per step.
    Frames(&'a [Tensor<T>]),
}

/// Result of one forward pass recorded on a tape.
pub struct ForwardPass<T> {
    pub outputs: StepOutputs<Var>,
    pub bound: Bound,
    /// Batch statistics per batch-norm layer (training mode only).
    pub batch_stats: Vec<(usize, BatchStats<T>)>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    running: Vec<RunningStats<T>>,
    blocks: Vec<Block>,
}

struct Builder<'r, T, R> {
    config: &'r ModelConfig,
    rng: &'r mut R,
    params: ParamStore<T>,
    running: Vec<RunningStats<T>>,
    neurons_built: usize,
}

impl<T: Real, R: Rng> Builder<'_, T, R> {
    fn gaussian(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let rng = &mut *self.rng;
        Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)))
    }

    fn conv(
        &mut self,
        label: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
    ) -> ConvLayer {
        let kernel = self.gaussian(vec![out_ch, in_ch, k, k], in_ch * k * k);
        ConvLayer {
            kernel: self.params.add(format!("{label}.weight"), kernel),
            stride,
            padding: Padding::Same,
        }
    }

    fn bn(&mut self, label: &str, channels: usize) -> BatchNormLayer {
        let gamma = self
            .params
            .add(format!("{label}.bn.gamma"), Tensor::ones([channels]));
        let beta = self
            .params
            .add(format!("{label}.bn.beta"), Tensor::zeros([channels]));
        self.running.push(RunningStats::new(channels));
        BatchNormLayer {
            gamma,
            beta,
            stats: self.running.len() - 1,
            momentum: self.config.bn_momentum,
            eps: self.config.bn_eps,
        }
    }

    fn dense(&mut self, label: &str, inputs: usize, outputs: usize) -> DenseLayer {
        let weight = self.gaussian(vec![outputs, inputs], inputs);
        DenseLayer {
            weight: self.params.add(format!("{label}.weight"), weight),
            bias: self
                .params
                .add(format!("{label}.bias"), Tensor::zeros([outputs])),
        }
    }

    /// Neuron layer; `after_fc` selects the fully-connected MT scope rule.
    fn neuron(&mut self, label: &str, after_fc: bool) -> NeuronLayer {
        let mt = &self.config.mt;
        let encoder = self.neurons_built == 0;
        self.neurons_built += 1;
        let use_mt = if after_fc {
            mt.scope == MtScope::ConvAndFc
        } else if encoder {
            mt.apply_to_encoder
        } else {
            true
        };
        let params = self.config.neuron.clone();
        let a = (params.kind == NeuronKind::Plif).then(|| {
            self.params
                .add(format!("{label}.plif.a"), Tensor::scalar(T::lit(params.a)))
        });
        NeuronLayer {
            params,
            a,
            deltas: if use_mt {
                mt.deltas.clone()
            } else {
                Vec::new()
            },
        }
    }
}

impl<T: Real> Model<T> {
    pub fn build(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            config,
            rng,
            params: ParamStore::new(),
            running: Vec::new(),
            neurons_built: 0,
        };
        let mut blocks = Vec::new();
        let [in_ch, mut h, mut w] = config.input_shape;
        let features = match config.arch {
            Arch::Vgg => {
                let mut ch = in_ch;
                let mut idx = 0;
                for (s, stage) in config.stages.iter().enumerate() {
                    for _ in 0..stage[0] {
                        idx += 1;
                        let label = format!("conv{idx}");
                        let conv = b.conv(&label, ch, stage[1], 3, 1);
                        let bn = b.bn(&label, stage[1]);
                        blocks.push(Block::ConvBn {
                            label: label.clone(),
                            conv,
                            bn,
                        });
                        blocks.push(Block::Neuron {
                            layer: b.neuron(&label, false),
                            label,
                        });
                        ch = stage[1];
                    }
                    blocks.push(Block::Pool {
                        label: format!("pool{}", s + 1),
                        layer: PoolLayer {
                            kind: config.pooling,
                            window: Some(2),
                        },
                    });
                    h /= 2;
                    w /= 2;
                }
                ch * h * w
            }
            Arch::Resnet => {
                let mut ch = config.stages[0][1];
                let conv = b.conv("stem", in_ch, ch, 3, 1);
                let bn = b.bn("stem", ch);
                blocks.push(Block::ConvBn {
                    label: "stem".into(),
                    conv,
                    bn,
                });
                for (s, stage) in config.stages.iter().enumerate() {
                    for blk in 0..stage[0] / 2 {
                        let label = format!("s{}b{}", s + 1, blk + 1);
                        let out = stage[1];
                        let stride = if s > 0 && blk == 0 { 2 } else { 1 };
                        let neuron1 = b.neuron(&format!("{label}.n1"), false);
                        let conv1 = b.conv(&format!("{label}.conv1"), ch, out, 3, stride);
                        let bn1 = b.bn(&format!("{label}.conv1"), out);
                        let neuron2 = b.neuron(&format!("{label}.n2"), false);
                        let conv2 = b.conv(&format!("{label}.conv2"), out, out, 3, 1);
                        let bn2 = b.bn(&format!("{label}.conv2"), out);
                        let shortcut = (stride != 1 || ch != out).then(|| {
                            let c = b.conv(&format!("{label}.shortcut"), ch, out, 3, stride);
                            (c, b.bn(&format!("{label}.shortcut"), out))
                        });
                        if stride == 2 {
                            h = h.div_ceil(2);
                            w = w.div_ceil(2);
                        }
                        blocks.push(Block::Residual(ResidualBlock {
                            label,
                            neuron1,
                            conv1,
                            bn1,
                            neuron2,
                            conv2,
                            bn2,
                            shortcut,
                        }));
                        ch = out;
                    }
                }
                blocks.push(Block::Neuron {
                    layer: b.neuron("head", false),
                    label: "head".into(),
                });
                blocks.push(Block::Pool {
                    label: "global_pool".into(),
                    layer: PoolLayer {
                        kind: PoolKind::Avg,
                        window: None,
                    },
                });
                ch
            }
        };
        blocks.push(Block::Flatten);
        let mut inputs = features;
        let n_fc = config.fc_widths.len();
        for (i, &width) in config.fc_widths.iter().enumerate() {
            let label = format!("fc{}", i + 1);
            let layer = b.dense(&label, inputs, width);
            blocks.push(Block::Dense {
                label: label.clone(),
                layer,
            });
            let last = i + 1 == n_fc;
            if !last || config.output_mode == OutputMode::SpikeVoting {
                blocks.push(Block::Neuron {
                    layer: b.neuron(&label, true),
                    label,
                });
            }
            inputs = width;
        }
        if config.output_mode == OutputMode::SpikeVoting {
            blocks.push(Block::Voting(VotingLayer {
                group: config.voting_group,
                classes: config.class_count,
            }));
        }
        Ok(Model {
            config: config.clone(),
            params: b.params,
            running: b.running,
            blocks,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Changes the default number of time steps; weights do not depend on it.
    pub fn set_steps(&mut self, steps: usize) {
        self.config.steps = steps;
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.running
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// The same network with every parameter and running statistic converted.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            params.add(p.name.clone(), p.value.cast());
        }
        let conv = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect();
        Model {
            config: self.config.clone(),
            params,
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    mean: conv(&r.mean),
                    var: conv(&r.var),
                })
                .collect(),
            blocks: self.blocks.clone(),
        }
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn apply_batch_stats(&mut self, stats: &[(usize, BatchStats<T>)]) {
        for (idx, s) in stats {
            let momentum = self.bn_momentum();
            self.running[*idx].update(s, momentum);
        }
    }

    fn bn_momentum(&self) -> f64 {
        self.config.bn_momentum
    }

    /// Records a full `steps`-step pass on `tape`. Every neuron starts from rest.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        input: ModelInput<'_, T>,
        steps: usize,
        mode: Mode,
    ) -> Result<ForwardPass<T>> {
        let bound = self.params.bind(tape);
        self.forward_bound(tape, bound, input, steps, mode)
    }

    /// As [`Model::forward`], with parameters already placed on the tape.
    pub fn forward_bound(
        &self,
        tape: &mut Tape<T>,
        bound: Bound,
        input: ModelInput<'_, T>,
        steps: usize,
        mode: Mode,
    ) -> Result<ForwardPass<T>> {
        if steps == 0 {
            return Err(Error::invalid("forward", "steps must be at least 1"));
        }
        let [c, h, w] = self.config.input_shape;
        let check = |t: &Tensor<T>| -> Result<usize> {
            let s = t.shape();
            if s.len() != 4 || s[1..] != [c, h, w] {
                return Err(Error::shape("forward", s, &[0, c, h, w]));
            }
            Ok(s[0])
        };
        let mut stats = Vec::new();
        let mut blocks = self.blocks.iter();
        let Some(Block::ConvBn { conv, bn, .. }) = blocks.next() else {
            return Err(Error::invalid(
                "forward",
                "network must start with a convolution",
            ));
        };
        // The first convolution sees the raw input; a static image is convolved
        // once and the result repeated over the steps.
        let (first, batch) = match input {
            ModelInput::Static(images) => {
                let batch = check(images)?;
                let x = tape.constant(images.clone());
                let y = conv.forward(tape, &bound, x)?;
                let y = if steps == 1 {
                    y
                } else {
                    tape.concat(&vec![y; steps])?
                };
                (y, batch)
            }
            ModelInput::Frames(frames) => {
                if frames.len() != steps {
                    return Err(Error::invalid(
                        "forward",
                        format!("{} frames supplied for {steps} steps", frames.len()),
                    ));
                }
                let batch = check(&frames[0])?;
                for f in frames {
                    if check(f)? != batch {
                        return Err(Error::shape("forward", frames[0].shape(), f.shape()));
                    }
                }
                let refs: Vec<&Tensor<T>> = frames.iter().collect();
                let x = tape.constant(Tensor::concat_rows(&refs)?);
                (conv.forward(tape, &bound, x)?, batch)
            }
        };
        let mut cur = self.bn(tape, &bound, bn, first, mode, &mut stats)?;
        for block in blocks {
            cur = match block {
                Block::ConvBn { conv, bn, .. } => {
                    let y = conv.forward(tape, &bound, cur)?;
                    self.bn(tape, &bound, bn, y, mode, &mut stats)?
                }
                Block::Neuron { layer, .. } => layer.forward_sequence(tape, &bound, cur, steps)?,
                Block::Pool { layer, .. } => layer.forward(tape, cur)?,
                Block::Flatten => {
                    let s = tape.shape(cur)?;
                    let rows = s[0];
                    let width = s[1..].iter().product::<usize>();
                    tape.reshape(cur, &[rows, width])?
                }
                Block::Dense { layer, .. } => layer.forward(tape, &bound, cur)?,
                Block::Residual(r) => {
                    let s1 = r.neuron1.forward_sequence(tape, &bound, cur, steps)?;
                    let y1 = r.conv1.forward(tape, &bound, s1)?;
                    let y1 = self.bn(tape, &bound, &r.bn1, y1, mode, &mut stats)?;
                    let s2 = r.neuron2.forward_sequence(tape, &bound, y1, steps)?;
                    let y2 = r.conv2.forward(tape, &bound, s2)?;
                    let y2 = self.bn(tape, &bound, &r.bn2, y2, mode, &mut stats)?;
                    let skip = match &r.shortcut {
                        Some((conv, bn)) => {
                            let p = conv.forward(tape, &bound, s1)?;
                            self.bn(tape, &bound, bn, p, mode, &mut stats)?
                        }
                        None => cur,
                    };
                    layers::membrane_residual_add(tape, y2, skip)?
                }
                Block::Voting(v) => layers::voting_forward(tape, cur, v)?,
            };
        }
        let outputs = split_steps(tape, cur, steps, batch)?;
        Ok(ForwardPass {
            outputs,
            bound,
            batch_stats: stats,
        })
    }

    fn bn(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        layer: &BatchNormLayer,
        x: Var,
        mode: Mode,
        stats: &mut Vec<(usize, BatchStats<T>)>,
    ) -> Result<Var> {
        let (y, s) =
            layers::batchnorm_forward(tape, bound, layer, &self.running[layer.stats], x, mode)?;
        if let Some(s) = s {
            stats.push((layer.stats, s));
        }
        Ok(y)
    }

    /// Inference-mode outputs as plain tensors.
    pub fn predict(
        &self,
        input: ModelInput<'_, T>,
        steps: usize,
    ) -> Result<StepOutputs<Tensor<T>>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let pass = self.forward_bound(&mut tape, bound, input, steps, Mode::Eval)?;
        let get = |v: Var| tape.value(v).cloned();
        Ok(StepOutputs {
            per_step: pass
                .outputs
                .per_step
                .iter()
                .map(|&v| get(v))
                .collect::<Result<_>>()?,
            mean: get(pass.outputs.mean)?,
        })
    }
}

/// Splits `[steps·B, classes]` into per-step rows and averages them: the
/// per-step outputs are summed in step order and scaled by `1/steps`.
fn split_steps<T: Real>(
    tape: &mut Tape<T>,
    out: Var,
    steps: usize,
    batch: usize,
) -> Result<StepOutputs<Var>> {
    if steps == 1 {
        return Ok(StepOutputs {
            per_step: vec![out],
            mean: out,
        });
    }
    let per_step = (0..steps)
        .map(|t| tape.rows(out, t * batch, batch))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = per_step[0];
    for &p in &per_step[1..] {
        sum = tape.add(sum, p)?;
    }
    let mean = tape.mul_scalar(sum, T::one() / T::lit(steps as f64))?;
    Ok(StepOutputs { per_step, mean })
}
