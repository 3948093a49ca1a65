//! Multiplication-free inference.
//!
//! Spike tensors are binary, so a convolution or fully-connected layer fed by
//! spikes only has to gather the weights under active inputs and add them. A
//! multi-threshold activation `S_sum` is integer-valued, but by linearity
//!
//! ```text
//! conv(S_sum) = conv(S_base) + Σ_i conv(S_Δi)
//! ```
//!
//! and every term on the right is again a binary input. Average pooling is run
//! as a window sum and each resulting count is split into thermometer planes
//! `1[N ≥ j]`, which are binary too. The pooling factor `1/k²`, batch-norm
//! scale and shift are folded into the following layer's weights once, before
//! the first step.
//!
//! Multiplications remain, by design, in four places and are reported under
//! their own kernel names: `encoder_conv` (the first convolution sees real
//! pixels), `bn_fold` (one-off weight folding), `neuron_leak` (the PLIF decay
//! `(1 - 1/τ)·V + (1/τ)·X`) and `readout` (the `1/g` voting and `1/T` step
//! averages).

use rand::{Rng, RngCore};
use serde::Serialize;

use crate::counter::{self, OpCounts};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, Padding, PoolGeometry};
use crate::layers::{BatchNormLayer, ConvLayer, DenseLayer, NeuronLayer, PoolKind, PoolLayer};
use crate::model::{Block, Model, ModelInput, StepOutputs};
use crate::neuron::{spike_at, NeuronKind, NeuronParams, SpikeFn};
use crate::real::Real;
use crate::tensor::Tensor;

/// Kernels allowed to multiply on the inference path.
pub const EXEMPT_KERNELS: [&str; 4] = ["encoder_conv", "bn_fold", "neuron_leak", "readout"];

/// Kernels that consume spike inputs and must not multiply.
pub const ACCUMULATION_KERNELS: [&str; 2] = ["accum_conv", "accum_linear"];

/// How a gathered weight is folded into an accumulator.
pub trait AccumulateOp {
    /// Multiplications executed per accumulation.
    const MULTIPLICATIONS: u64;
    fn accumulate<T: Real>(acc: &mut T, w: T);
}

/// `acc += w`.
pub struct PlainAdd;

impl AccumulateOp for PlainAdd {
    const MULTIPLICATIONS: u64 = 0;
    #[inline]
    fn accumulate<T: Real>(acc: &mut T, w: T) {
        *acc += w;
    }
}

/// `acc += w·1`: same result, one multiplication per accumulation. Exists to
/// check that verification notices a multiply slipped into the hot loop.
pub struct InjectedMultiply;

impl AccumulateOp for InjectedMultiply {
    const MULTIPLICATIONS: u64 = 1;
    #[inline]
    fn accumulate<T: Real>(acc: &mut T, w: T) {
        *acc += w * T::one();
    }
}

fn check_binary<T: Real>(op: &'static str, x: &Tensor<T>) -> Result<()> {
    counter::record(op, 0, 0, x.len() as u64);
    match x.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        Some(v) => Err(Error::invalid(
            op,
            format!("input is not binary (found {v}); decompose multi-valued spikes first"),
        )),
        None => Ok(()),
    }
}

/// Convolution of binary `[n, c, h, w]` spikes by `[o, c, k, k]` using only
/// additions: every output pixel sums the kernel columns of its active taps.
pub fn accum_conv<T: Real>(
    spikes: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    accum_conv_with::<T, PlainAdd>(spikes, kernel, stride, padding)
}

pub fn accum_conv_with<T: Real, A: AccumulateOp>(
    spikes: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(spikes.shape(), kernel.shape(), stride, padding)?;
    check_binary("accum_conv", spikes)?;
    let (o, c, k) = (g.out_channels, g.channels, g.kernel);
    // [c, k, k, o]: the column for one tap is contiguous
    let mut cols = vec![T::zero(); kernel.len()];
    for oc in 0..o {
        for tap in 0..c * k * k {
            cols[tap * o + oc] = kernel.data()[oc * c * k * k + tap];
        }
    }
    let x = spikes.data();
    let mut out = vec![T::zero(); g.batch * g.out_len()];
    let mut acc = vec![T::zero(); o];
    let mut accums = 0u64;
    let mut tests = 0u64;
    for n in 0..g.batch {
        let xs = &x[n * g.in_len()..(n + 1) * g.in_len()];
        let dst = &mut out[n * g.out_len()..(n + 1) * g.out_len()];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                acc.fill(T::zero());
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let Some((y, xx)) = g.source(oy, ox, ky, kx) else {
                                continue;
                            };
                            tests += 1;
                            if xs[(ci * g.height + y) * g.width + xx] == T::zero() {
                                continue;
                            }
                            let col = &cols[((ci * k + ky) * k + kx) * o..][..o];
                            for (a, &w) in acc.iter_mut().zip(col) {
                                A::accumulate(a, w);
                            }
                            accums += o as u64;
                        }
                    }
                }
                for (oc, &a) in acc.iter().enumerate() {
                    dst[(oc * g.out_h + oy) * g.out_w + ox] = a;
                }
            }
        }
    }
    counter::record("accum_conv", accums * A::MULTIPLICATIONS, accums, tests);
    Tensor::new(g.output_shape().to_vec(), out)
}

/// `[n, in]` binary spikes times `[out, in]` weights, transposed, by addition.
pub fn accum_linear<T: Real>(spikes: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    accum_linear_with::<T, PlainAdd>(spikes, weight)
}

pub fn accum_linear_with<T: Real, A: AccumulateOp>(
    spikes: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (s, w) = (spikes.shape(), weight.shape());
    if s.len() != 2 || w.len() != 2 || s[1] != w[1] {
        return Err(Error::shape("accum_linear", s, w));
    }
    check_binary("accum_linear", spikes)?;
    let (n, inputs, outputs) = (s[0], s[1], w[0]);
    let mut cols = vec![T::zero(); weight.len()];
    for o in 0..outputs {
        for i in 0..inputs {
            cols[i * outputs + o] = weight.data()[o * inputs + i];
        }
    }
    let mut out = vec![T::zero(); n * outputs];
    let mut accums = 0u64;
    for b in 0..n {
        let row = &mut out[b * outputs..(b + 1) * outputs];
        for (i, &x) in spikes.data()[b * inputs..(b + 1) * inputs]
            .iter()
            .enumerate()
        {
            if x == T::zero() {
                continue;
            }
            for (a, &wv) in row.iter_mut().zip(&cols[i * outputs..(i + 1) * outputs]) {
                A::accumulate(a, wv);
            }
            accums += outputs as u64;
        }
    }
    counter::record(
        "accum_linear",
        accums * A::MULTIPLICATIONS,
        accums,
        spikes.len() as u64,
    );
    Tensor::new(vec![n, outputs], out)
}

/// Sums a list of same-shape tensors elementwise (additions only).
fn sum_tensors<T: Real>(kernel: &str, parts: Vec<Tensor<T>>) -> Result<Tensor<T>> {
    let mut it = parts.into_iter();
    let mut acc = it
        .next()
        .ok_or_else(|| Error::invalid("sum", format!("{kernel}: nothing to sum")))?;
    for p in it {
        if p.shape() != acc.shape() {
            return Err(Error::shape("sum", acc.shape(), p.shape()));
        }
        for (a, &b) in acc.data_mut().iter_mut().zip(p.data()) {
            *a += b;
        }
        counter::record(kernel, 0, p.len() as u64, 0);
    }
    Ok(acc)
}

/// Binary planes `1[x ≥ j]`, `j = 1..=max(x)`, of a non-negative integer tensor.
pub fn thermometer<T: Real>(x: &Tensor<T>) -> Vec<Tensor<T>> {
    let max = x.data().iter().fold(T::zero(), |m, &v| m.max(v));
    let levels = max.as_f64().round() as usize;
    counter::record("thermometer", 0, 0, (x.len() * (levels + 1)) as u64);
    (1..=levels)
        .map(|j| {
            let j = T::lit(j as f64);
            x.map(|v| if v >= j { T::one() } else { T::zero() })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceReport {
    pub thresholds: usize,
    /// Dense convolution of `S_sum`.
    pub lhs_ops: OpCounts,
    /// Sum of accumulation convolutions over the per-threshold spikes.
    pub rhs_ops: OpCounts,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Checks `conv(S_sum) = Σ_j conv(S_j)` for membrane values `h` (`[n, c, h, w]`)
/// fired at `v_th` and `v_th + Δ_i`, with stride 1 and same padding.
pub fn mt_equivalence_check<T: Real>(
    h: &Tensor<T>,
    params: &NeuronParams,
    deltas: &[f64],
    kernel: &Tensor<T>,
) -> Result<EquivalenceReport> {
    mt_equivalence_check_with::<T, PlainAdd>(h, params, deltas, kernel)
}

pub fn mt_equivalence_check_with<T: Real, A: AccumulateOp>(
    h: &Tensor<T>,
    params: &NeuronParams,
    deltas: &[f64],
    kernel: &Tensor<T>,
) -> Result<EquivalenceReport> {
    let planes: Vec<Tensor<T>> = std::iter::once(params.v_th)
        .chain(deltas.iter().map(|d| params.v_th + d))
        .map(|th| spike_at(h, T::lit(th)))
        .collect();
    let s_sum = sum_tensors("spike_sum", planes.clone())?;
    let g = ConvGeometry::new(h.shape(), kernel.shape(), 1, Padding::Same)?;
    let scope = counter::op_counter_scope()?;
    let lhs = Tensor::new(
        g.output_shape().to_vec(),
        kernels::conv2d(s_sum.data(), kernel.data(), &g),
    )?;
    let lhs_ops = scope.finish();
    let scope = counter::op_counter_scope()?;
    let terms = planes
        .iter()
        .map(|p| accum_conv_with::<T, A>(p, kernel, 1, Padding::Same))
        .collect::<Result<Vec<_>>>()?;
    let rhs = sum_tensors("term_sum", terms)?;
    let rhs_ops = scope.finish();
    let max_abs_diff = lhs.max_abs_diff(&rhs)?;
    Ok(EquivalenceReport {
        thresholds: deltas.len() + 1,
        lhs_ops,
        rhs_ops,
        max_abs_diff,
        tolerance: T::IDENTITY_TOLERANCE,
        pass: max_abs_diff < T::IDENTITY_TOLERANCE,
    })
}

#[derive(Clone, Debug)]
struct Folded<T> {
    label: String,
    weight: Tensor<T>,
    bias: Vec<T>,
    stride: usize,
    padding: Padding,
}

#[derive(Clone, Debug)]
struct FoldedNeuron<T> {
    label: String,
    slot: usize,
    /// `(1 - 1/τ, 1/τ)`; `None` for IF.
    leak: Option<(T, T)>,
    thresholds: Vec<T>,
    v_reset: T,
}

#[derive(Clone, Debug)]
enum Stage<T> {
    Encoder(Folded<T>),
    Conv(Folded<T>),
    Dense(Folded<T>),
    Neuron(FoldedNeuron<T>),
    Pool {
        label: String,
        kind: PoolKind,
        window: Option<usize>,
    },
    Flatten,
    Residual {
        label: String,
        n1: FoldedNeuron<T>,
        conv1: Folded<T>,
        n2: FoldedNeuron<T>,
        conv2: Folded<T>,
        shortcut: Option<Folded<T>>,
    },
    Voting {
        group: usize,
        classes: usize,
    },
}

/// Real-valued input currents or a stack of binary planes summing to the activation.
enum Act<T> {
    Current(Tensor<T>),
    Planes(Vec<Tensor<T>>),
}

/// A model prepared for multiplication-free execution.
pub struct MfreeNet<T> {
    stages: Vec<Stage<T>>,
    neurons: usize,
    input_shape: [usize; 3],
}

struct Folder<'m, T: Real> {
    model: &'m Model<T>,
    neurons: usize,
}

impl<T: Real> Folder<'_, T> {
    /// `scale·W` per output channel, `shift` as bias. Counted under `bn_fold`.
    fn conv(&self, label: &str, conv: &ConvLayer, bn: &BatchNormLayer, pending: T) -> Folded<T> {
        let p = self.model.params();
        let w = p.value(conv.kernel);
        let gamma = p.value(bn.gamma).data();
        let beta = p.value(bn.beta).data();
        let stats = &self.model.running_stats()[bn.stats];
        let eps = T::lit(bn.eps);
        let o = w.shape()[0];
        let per = w.len() / o;
        let mut weight = w.clone();
        let mut bias = Vec::with_capacity(o);
        for c in 0..o {
            let scale = gamma[c] / (stats.var[c] + eps).sqrt();
            bias.push(beta[c] - stats.mean[c] * scale);
            let s = scale * pending;
            for v in &mut weight.data_mut()[c * per..(c + 1) * per] {
                *v *= s;
            }
        }
        counter::with_label(label, || {
            counter::record("bn_fold", (w.len() + 3 * o) as u64, (2 * o) as u64, 0)
        });
        Folded {
            label: label.into(),
            weight,
            bias,
            stride: conv.stride,
            padding: conv.padding,
        }
    }

    fn dense(&self, label: &str, d: &DenseLayer, pending: T) -> Folded<T> {
        let p = self.model.params();
        let mut weight = p.value(d.weight).clone();
        if pending != T::one() {
            for v in weight.data_mut() {
                *v *= pending;
            }
            counter::with_label(label, || {
                counter::record("bn_fold", weight.len() as u64, 0, 0)
            });
        }
        Folded {
            label: label.into(),
            weight,
            bias: p.value(d.bias).data().to_vec(),
            stride: 1,
            padding: Padding::Valid,
        }
    }

    fn neuron(&mut self, label: &str, layer: &NeuronLayer) -> Result<FoldedNeuron<T>> {
        let params = &layer.params;
        if params.spike_fn != SpikeFn::Heaviside {
            return Err(Error::invalid(
                "mfree",
                format!(
                    "layer {label} emits real-valued activations ({:?})",
                    params.spike_fn
                ),
            ));
        }
        let leak = match params.kind {
            NeuronKind::If => None,
            NeuronKind::Lif | NeuronKind::Plif => {
                let a = match layer.a {
                    Some(id) => self.model.params().value(id).item(),
                    None => T::lit(params.a),
                };
                let inv_tau = T::one() / ((-a).exp() + T::one());
                counter::with_label(label, || counter::record("bn_fold", 1, 2, 0));
                Some((T::one() - inv_tau, inv_tau))
            }
        };
        let mut thresholds = vec![T::lit(params.v_th)];
        thresholds.extend(layer.deltas.iter().map(|d| T::lit(params.v_th + d)));
        self.neurons += 1;
        Ok(FoldedNeuron {
            label: label.into(),
            slot: self.neurons - 1,
            leak,
            thresholds,
            v_reset: T::lit(params.v_reset),
        })
    }
}

impl<T: Real> MfreeNet<T> {
    pub fn fold(model: &Model<T>) -> Result<Self> {
        let mut f = Folder { model, neurons: 0 };
        let mut stages = Vec::new();
        let [_, mut h, mut w] = model.config().input_shape;
        let mut pending = T::one();
        for (i, block) in model.blocks().iter().enumerate() {
            let stage = match block {
                Block::ConvBn { label, conv, bn } => {
                    let folded = f.conv(label, conv, bn, pending);
                    pending = T::one();
                    h = h.div_ceil(conv.stride);
                    w = w.div_ceil(conv.stride);
                    if i == 0 {
                        Stage::Encoder(folded)
                    } else {
                        Stage::Conv(folded)
                    }
                }
                Block::Neuron { label, layer } => Stage::Neuron(f.neuron(label, layer)?),
                Block::Pool { label, layer } => {
                    let PoolLayer { kind, window } = *layer;
                    let k = match window {
                        Some(k) => (k, k),
                        None => (h, w),
                    };
                    if kind == PoolKind::Avg {
                        pending /= T::lit((k.0 * k.1) as f64);
                        counter::with_label(label, || counter::record("bn_fold", 1, 0, 0));
                    }
                    h = (h - k.0) / k.0 + 1;
                    w = (w - k.1) / k.1 + 1;
                    Stage::Pool {
                        label: label.clone(),
                        kind,
                        window,
                    }
                }
                Block::Flatten => Stage::Flatten,
                Block::Dense { label, layer } => {
                    let d = f.dense(label, layer, pending);
                    pending = T::one();
                    Stage::Dense(d)
                }
                Block::Residual(r) => {
                    let l = &r.label;
                    let n1 = f.neuron(&format!("{l}.n1"), &r.neuron1)?;
                    let conv1 = f.conv(&format!("{l}.conv1"), &r.conv1, &r.bn1, T::one());
                    let n2 = f.neuron(&format!("{l}.n2"), &r.neuron2)?;
                    let conv2 = f.conv(&format!("{l}.conv2"), &r.conv2, &r.bn2, T::one());
                    let shortcut = r
                        .shortcut
                        .as_ref()
                        .map(|(c, b)| f.conv(&format!("{l}.shortcut"), c, b, T::one()));
                    h = h.div_ceil(r.conv1.stride);
                    w = w.div_ceil(r.conv1.stride);
                    Stage::Residual {
                        label: l.clone(),
                        n1,
                        conv1,
                        n2,
                        conv2,
                        shortcut,
                    }
                }
                Block::Voting(v) => Stage::Voting {
                    group: v.group,
                    classes: v.classes,
                },
            };
            stages.push(stage);
        }
        Ok(MfreeNet {
            stages,
            neurons: f.neurons,
            input_shape: model.config().input_shape,
        })
    }

    pub fn run<A: AccumulateOp>(
        &self,
        input: ModelInput<'_, T>,
        steps: usize,
    ) -> Result<StepOutputs<Tensor<T>>> {
        if steps == 0 {
            return Err(Error::invalid("mfree", "steps must be at least 1"));
        }
        let Some(Stage::Encoder(enc)) = self.stages.first() else {
            return Err(Error::invalid(
                "mfree",
                "network must start with an encoder convolution",
            ));
        };
        let [c, h, w] = self.input_shape;
        let check = |t: &Tensor<T>| -> Result<()> {
            let s = t.shape();
            if s.len() != 4 || s[1..] != [c, h, w] {
                return Err(Error::shape("mfree", s, &[0, c, h, w]));
            }
            Ok(())
        };
        let static_current = match input {
            ModelInput::Static(x) => {
                check(x)?;
                Some(encoder_conv(enc, x)?)
            }
            ModelInput::Frames(f) => {
                if f.len() != steps {
                    return Err(Error::invalid(
                        "mfree",
                        format!("{} frames supplied for {steps} steps", f.len()),
                    ));
                }
                None
            }
        };
        let mut states: Vec<Option<Tensor<T>>> = vec![None; self.neurons];
        let mut per_step = Vec::with_capacity(steps);
        for t in 0..steps {
            let current = match (&static_current, &input) {
                (Some(cur), _) => cur.clone(),
                (None, ModelInput::Frames(f)) => {
                    check(&f[t])?;
                    encoder_conv(enc, &f[t])?
                }
                _ => unreachable!(),
            };
            let mut act = Act::Current(current);
            for stage in &self.stages[1..] {
                act = self.stage::<A>(stage, act, &mut states)?;
            }
            match act {
                Act::Current(out) => per_step.push(out),
                Act::Planes(_) => {
                    return Err(Error::invalid(
                        "mfree",
                        "network ends in spikes without a readout",
                    ))
                }
            }
        }
        let mean = if steps == 1 {
            per_step[0].clone()
        } else {
            let sum = counter::with_label("output", || sum_tensors("step_sum", per_step.clone()))?;
            let inv = T::one() / T::lit(steps as f64);
            counter::with_label("output", || {
                counter::record("readout", sum.len() as u64 + 1, 0, 0)
            });
            sum.map(|v| v * inv)
        };
        Ok(StepOutputs { per_step, mean })
    }

    fn stage<A: AccumulateOp>(
        &self,
        stage: &Stage<T>,
        act: Act<T>,
        states: &mut [Option<Tensor<T>>],
    ) -> Result<Act<T>> {
        let planes = |act: Act<T>, what: &str| match act {
            Act::Planes(p) => Ok(p),
            Act::Current(_) => Err(Error::invalid(
                "mfree",
                format!("{what} receives real-valued activations; only spikes are allowed"),
            )),
        };
        let current = |act: Act<T>, what: &str| match act {
            Act::Current(c) => Ok(c),
            Act::Planes(_) => Err(Error::invalid(
                "mfree",
                format!("{what} expects an input current"),
            )),
        };
        Ok(match stage {
            Stage::Encoder(f) => {
                return Err(Error::invalid(
                    "mfree",
                    format!("unexpected encoder {}", f.label),
                ))
            }
            Stage::Conv(f) => Act::Current(conv_planes::<T, A>(f, &planes(act, &f.label)?)?),
            Stage::Dense(f) => Act::Current(dense_planes::<T, A>(f, &planes(act, &f.label)?)?),
            Stage::Neuron(n) => Act::Planes(neuron_step(n, current(act, &n.label)?, states)?),
            Stage::Pool {
                label,
                kind,
                window,
            } => {
                let p = planes(act, label)?;
                Act::Planes(counter::with_label(label, || {
                    pool_planes(&p, *kind, *window)
                })?)
            }
            Stage::Flatten => match act {
                Act::Planes(p) => Act::Planes(p.into_iter().map(flatten).collect::<Result<_>>()?),
                Act::Current(c) => Act::Current(flatten(c)?),
            },
            Stage::Residual {
                label,
                n1,
                conv1,
                n2,
                conv2,
                shortcut,
            } => {
                let m = current(act, label)?;
                let s1 = neuron_step(n1, m.clone(), states)?;
                let y1 = conv_planes::<T, A>(conv1, &s1)?;
                let s2 = neuron_step(n2, y1, states)?;
                let y2 = conv_planes::<T, A>(conv2, &s2)?;
                let skip = match shortcut {
                    Some(f) => conv_planes::<T, A>(f, &s1)?,
                    None => m,
                };
                Act::Current(counter::with_label(label, || {
                    sum_tensors("residual_add", vec![y2, skip])
                })?)
            }
            Stage::Voting { group, classes } => {
                let p = planes(act, "voting")?;
                Act::Current(counter::with_label("voting", || {
                    vote(&p, *group, *classes)
                })?)
            }
        })
    }
}

fn flatten<T: Real>(t: Tensor<T>) -> Result<Tensor<T>> {
    let rows = t.shape()[0];
    let width = t.len() / rows.max(1);
    t.reshape(vec![rows, width])
}

/// Dense convolution of real-valued input pixels plus bias.
fn encoder_conv<T: Real>(f: &Folded<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.shape(), f.weight.shape(), f.stride, f.padding)?;
    let (c, k) = (g.channels, g.kernel);
    let mut out = vec![T::zero(); g.batch * g.out_len()];
    let mut taps = 0u64;
    for n in 0..g.batch {
        let xs = &x.data()[n * g.in_len()..(n + 1) * g.in_len()];
        for o in 0..g.out_channels {
            let wk = &f.weight.data()[o * c * k * k..(o + 1) * c * k * k];
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = f.bias[o];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                                    acc += xs[(ci * g.height + y) * g.width + xx]
                                        * wk[(ci * k + ky) * k + kx];
                                    taps += 1;
                                }
                            }
                        }
                    }
                    out[n * g.out_len() + (o * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
    }
    counter::with_label(&f.label, || counter::record("encoder_conv", taps, taps, 0));
    Tensor::new(g.output_shape().to_vec(), out)
}

fn add_channel_bias<T: Real>(label: &str, mut t: Tensor<T>, bias: &[T]) -> Tensor<T> {
    let per = t.len() / t.shape()[0] / bias.len();
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v += bias[(i / per) % bias.len()];
    }
    counter::with_label(label, || counter::record("bias_add", 0, t.len() as u64, 0));
    t
}

fn conv_planes<T: Real, A: AccumulateOp>(f: &Folded<T>, planes: &[Tensor<T>]) -> Result<Tensor<T>> {
    counter::with_label(&f.label, || {
        let terms = planes
            .iter()
            .map(|p| accum_conv_with::<T, A>(p, &f.weight, f.stride, f.padding))
            .collect::<Result<Vec<_>>>()?;
        let sum = sum_tensors("plane_sum", terms)?;
        Ok(add_channel_bias(&f.label, sum, &f.bias))
    })
}

fn dense_planes<T: Real, A: AccumulateOp>(
    f: &Folded<T>,
    planes: &[Tensor<T>],
) -> Result<Tensor<T>> {
    counter::with_label(&f.label, || {
        let terms = planes
            .iter()
            .map(|p| accum_linear_with::<T, A>(p, &f.weight))
            .collect::<Result<Vec<_>>>()?;
        let sum = sum_tensors("plane_sum", terms)?;
        Ok(add_channel_bias(&f.label, sum, &f.bias))
    })
}

/// One neuron step on an input current; returns one binary plane per threshold.
fn neuron_step<T: Real>(
    n: &FoldedNeuron<T>,
    x: Tensor<T>,
    states: &mut [Option<Tensor<T>>],
) -> Result<Vec<Tensor<T>>> {
    counter::with_label(&n.label, || {
        let v = match states[n.slot].take() {
            Some(v) if v.shape() == x.shape() => v,
            Some(v) => return Err(Error::shape("mfree neuron", v.shape(), x.shape())),
            None => Tensor::zeros(x.shape().to_vec()),
        };
        let h = match n.leak {
            None => {
                counter::record("neuron_leak", 0, x.len() as u64, 0);
                v.zip_map(&x, "membrane", |a, b| a + b)?
            }
            Some((keep, inv_tau)) => {
                counter::record("neuron_leak", 2 * x.len() as u64, x.len() as u64, 0);
                v.zip_map(&x, "membrane", |a, b| keep * a + inv_tau * b)?
            }
        };
        let planes: Vec<Tensor<T>> = n.thresholds.iter().map(|&th| spike_at(&h, th)).collect();
        // reset is a select driven by the base spike
        let reset = h.zip_map(&planes[0], "reset", |hv, s| {
            if s == T::one() {
                n.v_reset
            } else {
                hv
            }
        })?;
        counter::record("reset", 0, 0, h.len() as u64);
        states[n.slot] = Some(reset);
        Ok(planes)
    })
}

fn pool_planes<T: Real>(
    planes: &[Tensor<T>],
    kind: PoolKind,
    window: Option<usize>,
) -> Result<Vec<Tensor<T>>> {
    let mut out = Vec::new();
    for p in planes {
        let s = p.shape();
        let (win, stride) = match window {
            Some(k) => ((k, k), (k, k)),
            None => ((s[2], s[3]), (s[2], s[3])),
        };
        let g = PoolGeometry::new(s, win, stride)?;
        let shape = vec![s[0], s[1], g.out_h, g.out_w];
        match kind {
            PoolKind::Max => out.push(Tensor::new(shape, kernels::max_pool2d(p.data(), &g).0)?),
            PoolKind::Avg => {
                let counts = Tensor::new(shape, kernels::sum_pool2d(p.data(), &g))?;
                out.extend(thermometer(&counts));
            }
        }
    }
    if out.is_empty() {
        // every plane was silent; keep one zero plane so shapes still flow
        let s = planes[0].shape();
        let (oh, ow) = match window {
            Some(k) => (s[2] / k, s[3] / k),
            None => (1, 1),
        };
        out.push(Tensor::zeros(vec![s[0], s[1], oh, ow]));
    }
    Ok(out)
}

/// Spike counts per class group, times `1/g`.
fn vote<T: Real>(planes: &[Tensor<T>], group: usize, classes: usize) -> Result<Tensor<T>> {
    let total = sum_tensors("plane_sum", planes.to_vec())?;
    let s = total.shape();
    if s.len() != 2 || s[1] != group * classes {
        return Err(Error::invalid(
            "voting",
            format!("input {s:?} is not [batch, {group}·{classes}]"),
        ));
    }
    let inv = T::one() / T::lit(group as f64);
    let mut out = Vec::with_capacity(s[0] * classes);
    for row in total.data().chunks(group * classes) {
        for g in row.chunks(group) {
            let mut acc = g[0];
            for &v in &g[1..] {
                acc += v;
            }
            out.push(acc * inv);
        }
    }
    counter::record("voting_sum", 0, (s[0] * classes * (group - 1)) as u64, 0);
    counter::record("readout", (s[0] * classes) as u64 + 1, 0, 0);
    Tensor::new(vec![s[0], classes], out)
}

/// Multiplication-free outputs and the op counts of the whole run, folding included.
pub fn run_inference_mfree<T: Real>(
    model: &Model<T>,
    input: ModelInput<'_, T>,
    steps: usize,
) -> Result<(StepOutputs<Tensor<T>>, OpCounts)> {
    run_inference_mfree_with::<T, PlainAdd>(model, input, steps)
}

pub fn run_inference_mfree_with<T: Real, A: AccumulateOp>(
    model: &Model<T>,
    input: ModelInput<'_, T>,
    steps: usize,
) -> Result<(StepOutputs<Tensor<T>>, OpCounts)> {
    let scope = counter::op_counter_scope()?;
    let net = MfreeNet::fold(model)?;
    let out = net.run::<A>(input, steps)?;
    Ok((out, scope.finish()))
}

/// Multiplications recorded outside the exempt kernels, by count key.
pub fn unexpected_multiplications(counts: &OpCounts) -> Vec<(String, u64)> {
    counts
        .iter()
        .filter(|(k, c)| c.multiplications > 0 && !EXEMPT_KERNELS.contains(&counter::kernel_of(k)))
        .map(|(k, c)| (k.to_string(), c.multiplications))
        .collect()
}

/// Multiplications inside the spike-input accumulation kernels.
pub fn accumulation_multiplications(counts: &OpCounts) -> u64 {
    ACCUMULATION_KERNELS
        .iter()
        .map(|k| counts.kernel_total(k).multiplications)
        .sum()
}

#[derive(Clone, Debug, Serialize)]
pub struct StepsCheck {
    pub steps: usize,
    pub max_logit_diff: f64,
    pub argmax_agreement: bool,
    pub accumulation_multiplications: u64,
    pub unexpected_multiplications: Vec<(String, u64)>,
    pub op_counts: OpCounts,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub samples: usize,
    pub logit_tolerance: f64,
    pub steps: Vec<StepsCheck>,
    pub equivalence: Vec<EquivalenceReport>,
    pub pass: bool,
}

pub const LOGIT_TOLERANCE: f64 = 1e-4;

/// Compares the multiplication-free path with the dense forward on `input`
/// for each step count, and checks the linearity identity on random membrane
/// values with the first hidden convolution's kernel and offsets.
pub fn verify<T: Real, A: AccumulateOp>(
    model: &Model<T>,
    input: ModelInput<'_, T>,
    steps: &[usize],
    membranes: &mut dyn RngCore,
) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    let mut samples = 0;
    for &t in steps {
        let (dense, mfree, counts) = match &input {
            ModelInput::Static(x) => {
                samples = x.shape()[0];
                let dense = model.predict(ModelInput::Static(x), t)?;
                let (mfree, counts) =
                    run_inference_mfree_with::<T, A>(model, ModelInput::Static(x), t)?;
                (dense, mfree, counts)
            }
            ModelInput::Frames(f) => {
                samples = f[0].shape()[0];
                let dense = model.predict(ModelInput::Frames(f), t)?;
                let (mfree, counts) =
                    run_inference_mfree_with::<T, A>(model, ModelInput::Frames(f), t)?;
                (dense, mfree, counts)
            }
        };
        let mut diff: f64 = dense.mean.max_abs_diff(&mfree.mean)?;
        for (a, b) in dense.per_step.iter().zip(&mfree.per_step) {
            diff = diff.max(a.max_abs_diff(b)?);
        }
        let agree = dense.mean.argmax_rows() == mfree.mean.argmax_rows();
        let accum = accumulation_multiplications(&counts);
        let unexpected = unexpected_multiplications(&counts);
        checks.push(StepsCheck {
            steps: t,
            max_logit_diff: diff,
            argmax_agreement: agree,
            accumulation_multiplications: accum,
            pass: diff < LOGIT_TOLERANCE && agree && accum == 0 && unexpected.is_empty(),
            unexpected_multiplications: unexpected,
            op_counts: counts,
        });
    }
    let mut equivalence = Vec::new();
    if let Some((kernel, neuron)) = first_hidden_conv(model) {
        let k = model.params().value(kernel);
        let th = neuron.params.v_th;
        let h = Tensor::from_fn([2, k.shape()[1], 8, 8], |_| {
            T::lit(membranes.gen_range(th - 2.0..th + 2.0))
        });
        equivalence.push(mt_equivalence_check_with::<T, A>(
            &h,
            &neuron.params,
            &neuron.deltas,
            k,
        )?);
    }
    let pass = checks.iter().all(|c| c.pass) && equivalence.iter().all(|e| e.pass);
    Ok(VerifyReport {
        samples,
        logit_tolerance: LOGIT_TOLERANCE,
        steps: checks,
        equivalence,
        pass,
    })
}

/// Kernel of the first convolution fed by spikes, with the neuron that feeds it.
fn first_hidden_conv<T: Real>(model: &Model<T>) -> Option<(crate::layers::ParamId, &NeuronLayer)> {
    let mut last_neuron = None;
    for b in model.blocks() {
        match b {
            Block::Neuron { layer, .. } => last_neuron = Some(layer),
            Block::ConvBn { conv, .. } if last_neuron.is_some() => {
                return Some((conv.kernel, last_neuron?))
            }
            Block::Residual(r) => return Some((r.conv2.kernel, &r.neuron2)),
            _ => {}
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_spikes_zero_adds() {
        let spikes = Tensor::<f64>::zeros([1, 2, 4, 4]);
        let kernel = Tensor::from_fn([3, 2, 3, 3], |i| i as f64);
        let scope = counter::op_counter_scope().unwrap();
        let out = accum_conv(&spikes, &kernel, 1, Padding::Same).unwrap();
        let counts = scope.finish();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(counts.get("accum_conv").additions, 0);
        assert_eq!(counts.get("accum_conv").multiplications, 0);
    }

    #[test]
    fn single_center_spike_stamps_kernel() {
        let mut spikes = Tensor::<f64>::zeros([1, 1, 5, 5]);
        spikes.data_mut()[12] = 1.0;
        let kernel = Tensor::from_fn([1, 1, 3, 3], |i| (i + 1) as f64);
        let out = accum_conv(&spikes, &kernel, 1, Padding::Same).unwrap();
        // output (2+dy, 2+dx) reads tap (1-dy, 1-dx): the kernel appears flipped
        let d = out.data();
        for dy in 0..3 {
            for dx in 0..3 {
                assert_eq!(
                    d[(1 + dy) * 5 + 1 + dx],
                    kernel.data()[(2 - dy) * 3 + 2 - dx]
                );
            }
        }
        assert_eq!(d.iter().filter(|&&v| v != 0.0).count(), 9);
    }

    #[test]
    fn non_binary_input_is_rejected() {
        let spikes = Tensor::<f64>::full([1, 1, 3, 3], 2.0);
        let kernel = Tensor::ones([1, 1, 3, 3]);
        assert!(accum_conv(&spikes, &kernel, 1, Padding::Same).is_err());
        assert!(accum_linear(&Tensor::<f64>::full([1, 2], 0.5), &Tensor::ones([3, 2])).is_err());
    }

    #[test]
    fn linear_matches_dense() {
        let x = Tensor::<f64>::from_f64([2, 3], &[1., 0., 1., 0., 1., 1.]).unwrap();
        let w = Tensor::<f64>::from_f64([2, 3], &[0.5, -1., 2., 3., 4., -0.25]).unwrap();
        let out = accum_linear(&x, &w).unwrap();
        assert_eq!(out.data(), &[2.5, 2.75, 1.0, 3.75]);
    }

    #[test]
    fn thermometer_planes_sum_back() {
        let x = Tensor::<f64>::from_f64([4], &[0., 3., 1., 2.]).unwrap();
        let planes = thermometer(&x);
        assert_eq!(planes.len(), 3);
        let mut sum = vec![0.0; 4];
        for p in &planes {
            for (s, &v) in sum.iter_mut().zip(p.data()) {
                *s += v;
            }
        }
        assert_eq!(sum, x.data());
    }

    #[test]
    fn empty_offsets_equivalence() {
        let h = Tensor::from_fn([1, 2, 5, 5], |i| (i as f64 * 0.37).sin() + 1.0);
        let k = Tensor::from_fn([3, 2, 3, 3], |i| (i as f64 * 0.11).cos());
        let r = mt_equivalence_check(&h, &NeuronParams::default(), &[], &k).unwrap();
        assert!(r.pass);
        assert_eq!(r.max_abs_diff, 0.0);
        assert_eq!(r.thresholds, 1);
        assert!(r.lhs_ops.total().multiplications > 0);
        assert_eq!(r.rhs_ops.total().multiplications, 0);
    }

    #[test]
    fn injected_multiply_is_counted() {
        let h = Tensor::from_fn([1, 2, 5, 5], |i| (i as f64 * 0.37).sin() + 1.0);
        let k = Tensor::from_fn([3, 2, 3, 3], |i| (i as f64 * 0.11).cos());
        let r = mt_equivalence_check_with::<f64, InjectedMultiply>(
            &h,
            &NeuronParams::default(),
            &[0.3],
            &k,
        )
        .unwrap();
        assert!(r.rhs_ops.kernel_total("accum_conv").multiplications > 0);
    }
}
