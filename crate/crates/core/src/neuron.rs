//! Integrate-and-fire neurons with single- and multiple-threshold firing.
//!
//! One time step of a neuron layer is
//!
//! ```text
//! H = dynamics(V_prev, X)                 IF: V_prev + X
//!                                         LIF/PLIF: (1 - 1/τ)·V_prev + (1/τ)·X,  τ = 1 + exp(-a)
//! S_base = Θ(H - V_th)                    Θ(0) = 1
//! S_i    = Θ(H - V_th - Δ_i)              one extra binary spike per offset
//! S_sum  = S_base + Σ S_i                 the layer's output activation
//! V      = H·(1 - S_base) + V_reset·S_base
//! ```
//!
//! Only the base spike resets the membrane. The derivative of every Θ is
//! replaced by a rectangular window of width `a_sg` centred on its own
//! threshold, `dS/dH = (1/a_sg)·1[|H - θ| ≤ a_sg/2]`.

use serde::{Deserialize, Serialize};

use crate::counter;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronKind {
    If,
    Lif,
    Plif,
}

/// Forward map of the spike primitive. The backward rule is the rectangular
/// window in both cases; `Ramp` is the piecewise-linear function whose exact
/// derivative is that window and exists so the whole network can be checked
/// against finite differences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpikeFn {
    #[default]
    Heaviside,
    Ramp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeuronParams {
    pub kind: NeuronKind,
    /// Initial (PLIF) or fixed (LIF) reparameterized time constant.
    pub a: f64,
    pub v_th: f64,
    pub v_reset: f64,
    pub surrogate_width: f64,
    pub spike_fn: SpikeFn,
}

impl Default for NeuronParams {
    fn default() -> Self {
        NeuronParams {
            kind: NeuronKind::Plif,
            a: 1.0,
            v_th: 1.0,
            v_reset: 0.0,
            surrogate_width: 1.0,
            spike_fn: SpikeFn::Heaviside,
        }
    }
}

impl NeuronParams {
    pub fn with_kind(kind: NeuronKind) -> Self {
        NeuronParams {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_th > 0.0 && self.v_th.is_finite()) {
            return Err(Error::Config(format!(
                "v_th must be positive, got {}",
                self.v_th
            )));
        }
        if !(self.surrogate_width > 0.0 && self.surrogate_width.is_finite()) {
            return Err(Error::Config(format!(
                "surrogate_width must be positive, got {}",
                self.surrogate_width
            )));
        }
        if !self.a.is_finite() || !self.v_reset.is_finite() {
            return Err(Error::Config("neuron parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        tau(self.a)
    }
}

/// Membrane time constant `1 + exp(-a)`, always greater than one.
pub fn tau<T: Real>(a: T) -> T {
    T::one() + (-a).exp()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MtScope {
    #[default]
    ConvOnly,
    ConvAndFc,
}

/// Threshold offsets of multiple-threshold firing. An empty list is plain
/// single-threshold firing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MtConfig {
    #[serde(default, deserialize_with = "one_or_many")]
    pub deltas: Vec<f64>,
    #[serde(default)]
    pub scope: MtScope,
    #[serde(default = "default_true")]
    pub apply_to_encoder: bool,
}

/// Accepts a bare number as a one-element list, so `mt.deltas=0.3` works as an override.
fn one_or_many<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(f64),
        Many(Vec<f64>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(v) => vec![v],
        OneOrMany::Many(v) => v,
    })
}

fn default_true() -> bool {
    true
}

impl Default for MtConfig {
    fn default() -> Self {
        MtConfig {
            deltas: Vec::new(),
            scope: MtScope::ConvOnly,
            apply_to_encoder: true,
        }
    }
}

impl MtConfig {
    pub fn single() -> Self {
        Self::default()
    }

    pub fn with_deltas(deltas: &[f64]) -> Self {
        MtConfig {
            deltas: deltas.to_vec(),
            ..Default::default()
        }
    }

    pub fn validate(&self, v_th: f64) -> Result<()> {
        for (i, d) in self.deltas.iter().enumerate() {
            if !(v_th + d).is_finite() {
                return Err(Error::Config(format!("threshold offset {d} is not finite")));
            }
            if self.deltas[..i].contains(d) {
                return Err(Error::Config(format!("duplicate threshold offset {d}")));
            }
        }
        Ok(())
    }
}

/// Membrane potential carried between time steps.
#[derive(Clone, Copy, Debug)]
pub struct NeuronState {
    pub v: Var,
}

impl NeuronState {
    /// Resting state: all zeros, detached.
    pub fn zeros<T: Real>(tape: &mut Tape<T>, shape: &[usize]) -> Self {
        NeuronState {
            v: tape.constant(Tensor::zeros(shape.to_vec())),
        }
    }
}

/// Elementwise `1` where `x ≥ 0`, else `0`.
pub fn heaviside<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    counter::record("heaviside", 0, 0, x.len() as u64);
    x.map(|v| if v >= T::zero() { T::one() } else { T::zero() })
}

/// `Θ(h - threshold)` without materializing the difference.
pub fn spike_at<T: Real>(h: &Tensor<T>, threshold: T) -> Tensor<T> {
    counter::record("heaviside", 0, 0, h.len() as u64);
    h.map(|v| {
        if v - threshold >= T::zero() {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// `(1/width)·1[|h - threshold| ≤ width/2]`.
pub fn rectangular_window<T: Real>(h: &Tensor<T>, threshold: T, width: T) -> Tensor<T> {
    let half = width / T::lit(2.0);
    let height = T::one() / width;
    h.map(|v| {
        if (v - threshold).abs() <= half {
            height
        } else {
            T::zero()
        }
    })
}

/// `clamp((h - threshold)/width + 1/2, 0, 1)`; its derivative is the rectangular window.
pub fn ramp<T: Real>(h: &Tensor<T>, threshold: T, width: T) -> Tensor<T> {
    let half = T::lit(0.5);
    h.map(|v| {
        ((v - threshold) / width + half)
            .max(T::zero())
            .min(T::one())
    })
}

/// Leak coefficients of one neuron layer, built once per forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Dynamics {
    kind: NeuronKind,
    /// `1/τ` and `1 - 1/τ` as one-element tape values.
    leak: Option<(Var, Var)>,
}

impl Dynamics {
    /// `a` is the learnable `[1]` parameter of a PLIF layer. LIF layers use the
    /// fixed `params.a`; IF layers need neither.
    pub fn new<T: Real>(tape: &mut Tape<T>, params: &NeuronParams, a: Option<Var>) -> Result<Self> {
        let leak = match params.kind {
            NeuronKind::If => None,
            NeuronKind::Lif | NeuronKind::Plif => {
                let a = match (params.kind, a) {
                    (NeuronKind::Plif, Some(a)) => a,
                    (NeuronKind::Plif, None) => {
                        return Err(Error::invalid(
                            "membrane_dynamics",
                            "PLIF requires its `a` parameter",
                        ))
                    }
                    _ => tape.constant(Tensor::scalar(T::lit(params.a))),
                };
                let neg = tape.neg(a)?;
                let e = tape.exp(neg)?;
                let tau = tape.add_scalar(e, T::one())?;
                let inv_tau = tape.recip(tau)?;
                let keep = tape.rsub_scalar(inv_tau, T::one())?;
                Some((inv_tau, keep))
            }
        };
        Ok(Dynamics {
            kind: params.kind,
            leak,
        })
    }

    pub fn kind(&self) -> NeuronKind {
        self.kind
    }

    pub fn membrane<T: Real>(&self, tape: &mut Tape<T>, v_prev: Var, x: Var) -> Result<Var> {
        if tape.shape(v_prev)? != tape.shape(x)? {
            return Err(Error::shape(
                "membrane_dynamics",
                tape.shape(v_prev)?,
                tape.shape(x)?,
            ));
        }
        match self.leak {
            None => tape.add(v_prev, x),
            Some((inv_tau, keep)) => {
                let kept = tape.scale_by(v_prev, keep)?;
                let driven = tape.scale_by(x, inv_tau)?;
                tape.add(kept, driven)
            }
        }
    }
}

/// Membrane update `H[t]` from the previous potential and the input current.
pub fn membrane_dynamics<T: Real>(
    tape: &mut Tape<T>,
    v_prev: Var,
    x: Var,
    params: &NeuronParams,
    a: Option<Var>,
) -> Result<Var> {
    Dynamics::new(tape, params, a)?.membrane(tape, v_prev, x)
}

/// Spike primitive at `threshold` with the rectangular surrogate derivative.
pub fn spike<T: Real>(
    tape: &mut Tape<T>,
    h: Var,
    threshold: f64,
    params: &NeuronParams,
) -> Result<Var> {
    let theta = T::lit(threshold);
    let width = T::lit(params.surrogate_width);
    let local = move |x: &Tensor<T>| rectangular_window(x, theta, width);
    match params.spike_fn {
        SpikeFn::Heaviside => tape.custom_grad(h, "spike", |x| spike_at(x, theta), local),
        SpikeFn::Ramp => tape.custom_grad(h, "spike", |x| ramp(x, theta, width), local),
    }
}

/// Single-threshold firing `Θ(H - V_th)`.
pub fn fire_st<T: Real>(tape: &mut Tape<T>, h: Var, params: &NeuronParams) -> Result<Var> {
    spike(tape, h, params.v_th, params)
}

/// Multiple-threshold firing. Returns the base spike (used for reset) and the
/// summed spike count `S_base + Σ S_i`. With no offsets both are the same value.
pub fn fire_mt<T: Real>(
    tape: &mut Tape<T>,
    h: Var,
    params: &NeuronParams,
    deltas: &[f64],
) -> Result<(Var, Var)> {
    let base = fire_st(tape, h, params)?;
    let mut sum = base;
    for &d in deltas {
        let s = spike(tape, h, params.v_th + d, params)?;
        sum = tape.add(sum, s)?;
    }
    Ok((base, sum))
}

/// Hard reset driven by the base spike: `H·(1 - S) + V_reset·S`.
pub fn reset<T: Real>(
    tape: &mut Tape<T>,
    h: Var,
    s_base: Var,
    params: &NeuronParams,
) -> Result<Var> {
    if tape.shape(h)? != tape.shape(s_base)? {
        return Err(Error::shape("reset", tape.shape(h)?, tape.shape(s_base)?));
    }
    let keep = tape.rsub_scalar(s_base, T::one())?;
    let v = tape.mul(h, keep)?;
    if params.v_reset == 0.0 {
        return Ok(v);
    }
    let r = tape.mul_scalar(s_base, T::lit(params.v_reset))?;
    tape.add(v, r)
}

/// One time step: dynamics, firing and reset. Returns the new state and `S_sum`.
pub fn step<T: Real>(
    tape: &mut Tape<T>,
    state: NeuronState,
    x: Var,
    dynamics: &Dynamics,
    params: &NeuronParams,
    deltas: &[f64],
) -> Result<(NeuronState, Var)> {
    let h = dynamics.membrane(tape, state.v, x)?;
    let (base, sum) = fire_mt(tape, h, params, deltas)?;
    let v = reset(tape, h, base, params)?;
    Ok((NeuronState { v }, sum))
}
