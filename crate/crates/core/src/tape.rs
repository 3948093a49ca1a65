//! Reverse-mode automatic differentiation on a per-pass tape.
//!
//! Operations are recorded in execution order, so the node list is already a
//! topological order of the graph; [`Tape::backward`] walks it in reverse and
//! visits every node reachable from the loss once. Gradients flowing into a
//! node from several consumers are summed.
//!
//! Binary elementwise ops accept either equal shapes or a right operand whose
//! shape equals the left operand's shape without its leading (batch)
//! dimension. No other broadcasting is performed.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::counter;
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, Padding, PoolGeometry};
use crate::real::Real;
use crate::tensor::Tensor;

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Local derivative rule of a [`Tape::custom_grad`] primitive: maps the
/// forward input to the elementwise factor applied to the upstream gradient.
pub type LocalGrad<T> = Box<dyn Fn(&Tensor<T>) -> Tensor<T>>;

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
    },
    AvgPool {
        x: Var,
        geom: PoolGeometry,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Neg(Var),
    Exp(Var),
    Recip(Var),
    AddScalar(Var),
    MulScalar(Var, T),
    ScaleBy(Var, Var),
    Custom {
        x: Var,
        local: LocalGrad<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    MseOneHot {
        x: Var,
        labels: Vec<usize>,
    },
    Concat(Vec<Var>),
    Rows {
        x: Var,
        start: usize,
    },
    GroupMean {
        x: Var,
        group: usize,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    tag: &'static str,
    requires_grad: bool,
    is_param: bool,
}

/// Batch statistics produced by a training-mode batch-norm node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// How [`Tape::batch_norm`] normalizes.
pub enum NormStats<'a, T> {
    /// Statistics of the current input over every axis except the channel axis.
    Batch,
    /// Fixed statistics, e.g. running estimates at inference.
    Fixed { mean: &'a [T], var: &'a [T] },
}

/// Gradients of a scalar loss with respect to every parameter leaf reachable from it.
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u32,
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(&v.index)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.remove(&v.index)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Single-owner record of one forward pass.
pub struct Tape<T: Real> {
    id: u32,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_rhs(op: &'static str, a: &[usize], b: &[usize]) -> Result<bool> {
    if a == b {
        Ok(false)
    } else if a.len() == b.len() + 1 && &a[1..] == b {
        Ok(true)
    } else {
        Err(Error::shape(op, a, b))
    }
}

/// Sums a `[n, rest]` gradient over its leading dimension.
fn reduce_rows<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let row = shape.iter().product::<usize>();
    let mut out = vec![T::zero(); row];
    for chunk in g.data().chunks(row) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::new(shape.to_vec(), out).expect("reduced gradient shape")
}

fn one_hot_check(op: &'static str, labels: &[usize], shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::invalid(
            op,
            format!(
                "expected [batch, classes] with batch {}, got {shape:?}",
                labels.len()
            ),
        ));
    }
    let classes = shape[1];
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(
            op,
            format!("label {l} out of range for {classes} classes"),
        ));
    }
    Ok((shape[0], classes))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        self.check(v)?;
        Ok(&self.nodes[v.index].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    /// Label of the op that produced `v`.
    pub fn tag(&self, v: Var) -> Result<&'static str> {
        self.check(v)?;
        Ok(self.nodes[v.index].tag)
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        self.check(v)?;
        Ok(self.nodes[v.index].requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tag: &'static str, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            tag,
            requires_grad,
            is_param: false,
        });
        Var {
            index: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    /// Detached input: never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, "constant", &[])
    }

    /// Trainable leaf; [`Tape::backward`] reports its gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tag: "param",
            requires_grad: true,
            is_param: true,
        });
        Var {
            index: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
        let bcast = broadcast_rhs(op, av.shape(), bv.shape())?;
        let data: Vec<T> = if bcast {
            av.data()
                .chunks(bv.len())
                .flat_map(|row| row.iter().zip(bv.data()).map(|(&x, &y)| f(x, y)))
                .collect()
        } else {
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        };
        let n = data.len() as u64;
        match op {
            "add" | "sub" => counter::record(op, 0, n, 0),
            _ => counter::record(op, n, 0, 0),
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, make(a, b), op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn matrix_dims(&self, op: &'static str, a: Var, b: Var) -> Result<(&[usize], &[usize])> {
        let (sa, sb) = (self.shape(a)?, self.shape(b)?);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape(op, sa, sb));
        }
        Ok((sa, sb))
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = self.matrix_dims("matmul", a, b)?;
        if sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(
            self.nodes[a.index].value.data(),
            self.nodes[b.index].value.data(),
            m,
            k,
            n,
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), "matmul", &[a, b]))
    }

    /// `[m,k] · [n,k]ᵀ`, the affine-layer product with weights stored `[out, in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = self.matrix_dims("matmul_nt", a, b)?;
        if sa[1] != sb[1] {
            return Err(Error::shape("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nt(
            self.nodes[a.index].value.data(),
            self.nodes[b.index].value.data(),
            m,
            k,
            n,
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMulNt(a, b), "matmul", &[a, b]))
    }

    /// `[n,c,h,w]` input, `[o,c,k,k]` kernel, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x)?, self.shape(w)?, stride, padding)?;
        let out = kernels::conv2d(
            self.nodes[x.index].value.data(),
            self.nodes[w.index].value.data(),
            &geom,
        );
        let value = Tensor::new(geom.output_shape().to_vec(), out)?;
        Ok(self.push(value, Op::Conv2d { x, w, geom }, "conv2d", &[x, w]))
    }

    fn pooled_shape(&self, x: Var, g: &PoolGeometry) -> Result<Vec<usize>> {
        let s = self.shape(x)?;
        Ok(vec![s[0], s[1], g.out_h, g.out_w])
    }

    pub fn avgpool2d(
        &mut self,
        x: Var,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var> {
        let geom = PoolGeometry::new(self.shape(x)?, window, stride)?;
        let out = kernels::avg_pool2d(self.nodes[x.index].value.data(), &geom);
        let value = Tensor::new(self.pooled_shape(x, &geom)?, out)?;
        Ok(self.push(value, Op::AvgPool { x, geom }, "avgpool2d", &[x]))
    }

    pub fn maxpool2d(
        &mut self,
        x: Var,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var> {
        let geom = PoolGeometry::new(self.shape(x)?, window, stride)?;
        let (out, argmax) = kernels::max_pool2d(self.nodes[x.index].value.data(), &geom);
        let value = Tensor::new(self.pooled_shape(x, &geom)?, out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, "maxpool2d", &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x)?.clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), "reshape", &[x]))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x)?;
        counter::record("sum", 0, v.len() as u64 - 1, 0);
        let value = Tensor::scalar(v.sum_all());
        Ok(self.push(value, Op::Sum(x), "sum", &[x]))
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x)?;
        counter::record("mean", 1, v.len() as u64 - 1, 0);
        let value = Tensor::scalar(v.sum_all() / T::lit(v.len() as f64));
        Ok(self.push(value, Op::Mean(x), "mean", &[x]))
    }

    fn unary(&mut self, x: Var, tag: &'static str, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(x)?.map(f);
        Ok(self.push(value, op, tag, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        counter::record("relu", 0, 0, self.value(x)?.len() as u64);
        self.unary(x, "relu", Op::Relu(x), |v| {
            if v > T::zero() {
                v
            } else {
                T::zero()
            }
        })
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "neg", Op::Neg(x), |v| -v)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "exp", Op::Exp(x), T::exp)
    }

    /// Elementwise `1 / x`.
    pub fn recip(&mut self, x: Var) -> Result<Var> {
        counter::record("recip", self.value(x)?.len() as u64, 0, 0);
        self.unary(x, "recip", Op::Recip(x), |v| T::one() / v)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        counter::record("add_scalar", 0, self.value(x)?.len() as u64, 0);
        self.unary(x, "add_scalar", Op::AddScalar(x), |v| v + c)
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        counter::record("mul_scalar", self.value(x)?.len() as u64, 0, 0);
        self.unary(x, "mul_scalar", Op::MulScalar(x, c), |v| v * c)
    }

    /// `c - x`.
    pub fn rsub_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let n = self.neg(x)?;
        self.add_scalar(n, c)
    }

    /// `x · s` with `s` a one-element tensor; the gradient reaches `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s)?;
        if !sv.is_scalar() {
            return Err(Error::shape("scale_by", self.shape(x)?, sv.shape()));
        }
        let c = sv.item();
        counter::record("scale_by", self.value(x)?.len() as u64, 0, 0);
        self.unary(x, "scale_by", Op::ScaleBy(x, s), |v| v * c)
    }

    /// Primitive with a user-supplied derivative: runs `forward` now, and during
    /// backward multiplies the upstream gradient elementwise by `local(input)`.
    pub fn custom_grad(
        &mut self,
        x: Var,
        tag: &'static str,
        forward: impl Fn(&Tensor<T>) -> Tensor<T>,
        local: impl Fn(&Tensor<T>) -> Tensor<T> + 'static,
    ) -> Result<Var> {
        let input = self.value(x)?;
        let value = forward(input);
        if value.shape() != input.shape() {
            return Err(Error::shape(tag, input.shape(), value.shape()));
        }
        let local: LocalGrad<T> = Box::new(local);
        Ok(self.push(value, Op::Custom { x, local }, tag, &[x]))
    }

    /// Per-channel normalization of a `[n, c, ...]` input followed by the
    /// `gamma`/`beta` affine. Returns the batch statistics when they were computed.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        stats: NormStats<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xs = self.shape(x)?.to_vec();
        if xs.len() < 2 {
            return Err(Error::invalid(
                "batch_norm",
                format!("no channel axis in {xs:?}"),
            ));
        }
        let c = xs[1];
        for p in [gamma, beta] {
            if self.shape(p)? != [c] {
                return Err(Error::shape("batch_norm", &xs, self.shape(p)?));
            }
        }
        let (n, inner) = (xs[0], xs[2..].iter().product::<usize>());
        let m = (n * inner) as f64;
        let xv = self.nodes[x.index].value.data();
        let channel = |ch: usize| {
            (0..n).flat_map(move |b| {
                let start = (b * c + ch) * inner;
                start..start + inner
            })
        };
        let (mean, var, batch) = match stats {
            NormStats::Batch => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mu = channel(ch).map(|i| xv[i]).sum::<T>() / T::lit(m);
                    let v = channel(ch).map(|i| (xv[i] - mu) * (xv[i] - mu)).sum::<T>() / T::lit(m);
                    mean[ch] = mu;
                    var[ch] = v;
                }
                (mean, var, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", &xs, &[mean.len(), var.len()]));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (
            self.nodes[gamma.index].value.data(),
            self.nodes[beta.index].value.data(),
        );
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for ch in 0..c {
            for i in channel(ch) {
                xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                out[i] = g[ch] * xhat[i] + b[ch];
            }
        }
        counter::record("batch_norm", 2 * xv.len() as u64, 2 * xv.len() as u64, 0);
        let value = Tensor::new(xs, out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats: batch,
        };
        let v = self.push(value, op, "batch_norm", &[x, gamma, beta]);
        Ok((v, batch.then_some(BatchStats { mean, var })))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits)?;
        let (b, c) = one_hot_check("softmax_cross_entropy", labels, lv.shape())?;
        let mut probs = vec![T::zero(); b * c];
        let mut total = T::zero();
        for (i, row) in lv.data().chunks(c).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            for (p, &v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                *p = (v - max).exp() / z;
            }
            total += z.ln() + max - row[labels[i]];
        }
        let value = Tensor::scalar(total / T::lit(b as f64));
        let op = Op::SoftmaxCrossEntropy {
            logits,
            probs,
            labels: labels.to_vec(),
        };
        Ok(self.push(value, op, "softmax_cross_entropy", &[logits]))
    }

    /// Mean over all entries of `(x - onehot(label))²`.
    pub fn mse_one_hot(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let xv = self.value(x)?;
        let (_, c) = one_hot_check("mse", labels, xv.shape())?;
        let mut total = T::zero();
        for (i, row) in xv.data().chunks(c).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let t = if j == labels[i] { T::one() } else { T::zero() };
                total += (v - t) * (v - t);
            }
        }
        let value = Tensor::scalar(total / T::lit(xv.len() as f64));
        Ok(self.push(
            value,
            Op::MseOneHot {
                x,
                labels: labels.to_vec(),
            },
            "mse",
            &[x],
        ))
    }

    /// Concatenation along the leading dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| &self.nodes[p.index].value).collect();
        let value = Tensor::concat_rows(&values)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), "concat", parts))
    }

    /// Leading-dimension slice `[start, start + len)`.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x)?.rows(start, len)?;
        Ok(self.push(value, Op::Rows { x, start }, "rows", &[x]))
    }

    /// `[n, c·g] -> [n, c]`: mean of each consecutive group of `group` entries.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x)?;
        let s = xv.shape();
        if s.len() != 2 || group == 0 || s[1] % group != 0 {
            return Err(Error::invalid(
                "group_mean",
                format!("width of {s:?} is not divisible by group size {group}"),
            ));
        }
        let scale = T::one() / T::lit(group as f64);
        let data: Vec<T> = xv
            .data()
            .chunks(group)
            .map(|g| g.iter().copied().sum::<T>() * scale)
            .collect();
        counter::record(
            "group_mean",
            data.len() as u64,
            (data.len() * (group - 1)) as u64,
            0,
        );
        let value = Tensor::new(vec![s[0], s[1] / group], data)?;
        Ok(self.push(value, Op::GroupMean { x, group }, "group_mean", &[x]))
    }

    /// Gradients of a scalar `loss` with respect to every reachable parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        let lv = &self.nodes[loss.index].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.index).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::ones(lv.shape().to_vec()));
        let mut out = HashMap::new();
        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if node.is_param {
                out.insert(i, g);
                continue;
            }
            for (input, gi) in self.input_grads(node, &g)? {
                if !self.nodes[input.index].requires_grad {
                    continue;
                }
                match &mut grads[input.index] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: out,
        })
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.index].value
    }

    fn input_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let like = |v: Var, data: Vec<T>| Tensor::new(self.val(v).shape().to_vec(), data);
        let rhs_grad = |a: Var, b: Var, full: Tensor<T>| -> Tensor<T> {
            if self.val(a).shape() == self.val(b).shape() {
                full
            } else {
                reduce_rows(&full, self.val(b).shape())
            }
        };
        // Right operand repeated along the leading dimension of the left.
        let rhs_expanded = |b: Var, n: usize| -> Vec<T> {
            let bv = self.val(b).data();
            bv.iter().copied().cycle().take(n).collect()
        };
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, rhs_grad(*a, *b, g.clone()))],
            Op::Sub(a, b) => {
                let gb = rhs_grad(*a, *b, g.map(|v| -v));
                vec![(*a, g.clone()), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let bx = rhs_expanded(*b, g.len());
                let ga: Vec<T> = g.data().iter().zip(&bx).map(|(&x, &y)| x * y).collect();
                let gb_full: Vec<T> = g
                    .data()
                    .iter()
                    .zip(self.val(*a).data())
                    .map(|(&x, &y)| x * y)
                    .collect();
                let gb = rhs_grad(*a, *b, Tensor::new(g.shape().to_vec(), gb_full)?);
                vec![(*a, like(*a, ga)?), (*b, gb)]
            }
            Op::Div(a, b) => {
                let bx = rhs_expanded(*b, g.len());
                let av = self.val(*a).data();
                let ga: Vec<T> = g.data().iter().zip(&bx).map(|(&x, &y)| x / y).collect();
                let gb_full: Vec<T> = g
                    .data()
                    .iter()
                    .zip(av)
                    .zip(&bx)
                    .map(|((&gv, &x), &y)| -gv * x / (y * y))
                    .collect();
                let gb = rhs_grad(*a, *b, Tensor::new(g.shape().to_vec(), gb_full)?);
                vec![(*a, like(*a, ga)?), (*b, gb)]
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.val(*a).shape(), self.val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut ga = vec![T::zero(); m * k];
                kernels::matmul_nt(g.data(), self.val(*b).data(), m, n, k, &mut ga);
                let mut gb = vec![T::zero(); k * n];
                kernels::matmul_tn(self.val(*a).data(), g.data(), k, m, n, &mut gb);
                vec![(*a, like(*a, ga)?), (*b, like(*b, gb)?)]
            }
            Op::MatMulNt(a, b) => {
                let (sa, sb) = (self.val(*a).shape(), self.val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                let mut ga = vec![T::zero(); m * k];
                kernels::matmul(g.data(), self.val(*b).data(), m, n, k, &mut ga);
                let mut gb = vec![T::zero(); n * k];
                kernels::matmul_tn(g.data(), self.val(*a).data(), n, m, k, &mut gb);
                vec![(*a, like(*a, ga)?), (*b, like(*b, gb)?)]
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    self.val(*x).data(),
                    self.val(*w).data(),
                    g.data(),
                    geom,
                );
                vec![(*x, like(*x, dx)?), (*w, like(*w, dw)?)]
            }
            Op::AvgPool { x, geom } => {
                vec![(*x, like(*x, kernels::avg_pool2d_backward(g.data(), geom))?)]
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.val(*x).len()];
                for (&i, &gv) in argmax.iter().zip(g.data()) {
                    dx[i] += gv;
                }
                vec![(*x, like(*x, dx)?)]
            }
            Op::Reshape(x) => vec![(*x, like(*x, g.data().to_vec())?)],
            Op::Sum(x) => {
                let n = self.val(*x).len();
                vec![(*x, like(*x, vec![g.item(); n])?)]
            }
            Op::Mean(x) => {
                let n = self.val(*x).len();
                vec![(*x, like(*x, vec![g.item() / T::lit(n as f64); n])?)]
            }
            Op::Relu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(self.val(*x).data())
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(*x, like(*x, d)?)]
            }
            Op::Neg(x) => vec![(*x, g.map(|v| -v))],
            Op::Exp(x) => {
                let d = g.zip_map(&node.value, "exp", |gv, y| gv * y)?;
                vec![(*x, d)]
            }
            Op::Recip(x) => {
                let d = g.zip_map(self.val(*x), "recip", |gv, v| -gv / (v * v))?;
                vec![(*x, d)]
            }
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::MulScalar(x, c) => {
                let c = *c;
                vec![(*x, g.map(|v| v * c))]
            }
            Op::ScaleBy(x, s) => {
                let c = self.val(*s).item();
                let gs: T = g
                    .data()
                    .iter()
                    .zip(self.val(*x).data())
                    .map(|(&gv, &v)| gv * v)
                    .sum();
                vec![(*x, g.map(|v| v * c)), (*s, Tensor::scalar(gs))]
            }
            Op::Custom { x, local } => {
                let d = local(self.val(*x));
                if d.shape() != g.shape() {
                    return Err(Error::shape(node.tag, g.shape(), d.shape()));
                }
                vec![(*x, g.zip_map(&d, node.tag, |a, b| a * b)?)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = self.val(*x).shape();
                let (n, c, inner) = (s[0], s[1], s[2..].iter().product::<usize>());
                let m = T::lit((n * inner) as f64);
                let gam = self.val(*gamma).data();
                let gd = g.data();
                let mut dx = vec![T::zero(); gd.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    let idx = || {
                        (0..n).flat_map(move |b| {
                            let start = (b * c + ch) * inner;
                            start..start + inner
                        })
                    };
                    let sum_g: T = idx().map(|i| gd[i]).sum();
                    let sum_gx: T = idx().map(|i| gd[i] * xhat[i]).sum();
                    dbeta[ch] = sum_g;
                    dgamma[ch] = sum_gx;
                    let k = gam[ch] * inv_std[ch];
                    if *batch_stats {
                        for i in idx() {
                            dx[i] = k * (gd[i] - sum_g / m - xhat[i] * sum_gx / m);
                        }
                    } else {
                        for i in idx() {
                            dx[i] = k * gd[i];
                        }
                    }
                }
                vec![
                    (*x, like(*x, dx)?),
                    (*gamma, like(*gamma, dgamma)?),
                    (*beta, like(*beta, dbeta)?),
                ]
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let c = self.val(*logits).shape()[1];
                let scale = g.item() / T::lit(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= scale;
                }
                vec![(*logits, like(*logits, d)?)]
            }
            Op::MseOneHot { x, labels } => {
                let xv = self.val(*x);
                let c = xv.shape()[1];
                let scale = g.item() * T::lit(2.0) / T::lit(xv.len() as f64);
                let mut d: Vec<T> = xv.data().iter().map(|&v| v * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= scale;
                }
                vec![(*x, like(*x, d)?)]
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = self.val(p).len();
                    out.push((p, like(p, g.data()[offset..offset + len].to_vec())?));
                    offset += len;
                }
                out
            }
            Op::Rows { x, start } => {
                let xv = self.val(*x);
                let mut d = vec![T::zero(); xv.len()];
                let off = start * xv.row_len();
                d[off..off + g.len()].copy_from_slice(g.data());
                vec![(*x, like(*x, d)?)]
            }
            Op::GroupMean { x, group } => {
                let scale = T::one() / T::lit(*group as f64);
                let d = g
                    .data()
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v * scale, *group))
                    .collect();
                vec![(*x, like(*x, d)?)]
            }
        })
    }
}
