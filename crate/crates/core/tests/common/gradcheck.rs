//! Central-difference checks of every differentiable primitive and of a whole model.

use mtsnn::config::LossKind;
use mtsnn::kernels::Padding;
use mtsnn::layers::Mode;
use mtsnn::model::{Model, ModelConfig, ModelInput};
use mtsnn::neuron::{self, MtConfig, NeuronParams, SpikeFn};
use mtsnn::tape::NormStats;
use mtsnn::{train, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;
const REL: f64 = 1e-4;
const SHAPES: usize = 20;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-2)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Compares analytic and numeric gradients of `Σ R ⊙ f(inputs)` for a fixed random `R`.
fn check<F>(name: &str, rng: &mut ChaCha8Rng, inputs: Vec<Tensor<f64>>, f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>],
                weights: Option<&Tensor<f64>>|
     -> (f64, Tensor<f64>, Vec<Tensor<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let y = f(&mut tape, &vars).unwrap();
        let shape = tape.shape(y).unwrap().to_vec();
        let r = weights
            .cloned()
            .unwrap_or_else(|| Tensor::from_fn(shape, |i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0));
        let rv = tape.constant(r.clone());
        let prod = tape.mul(y, rv).unwrap();
        let loss = tape.sum(prod).unwrap();
        let value = tape.value(loss).unwrap().item();
        let grads = tape.backward(loss).unwrap();
        let g = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
            })
            .collect();
        (value, r, g)
    };
    let (_, r, analytic) = eval(&inputs, None);
    for (k, input) in inputs.iter().enumerate() {
        // probe a handful of coordinates per input
        for _ in 0..input.len().min(6) {
            let j = rng.gen_range(0..input.len());
            let mut plus = inputs.clone();
            plus[k].data_mut()[j] += EPS;
            let mut minus = inputs.clone();
            minus[k].data_mut()[j] -= EPS;
            let numeric = (eval(&plus, Some(&r)).0 - eval(&minus, Some(&r)).0) / (2.0 * EPS);
            let a = analytic[k].data()[j];
            assert!(
                rel_err(a, numeric) < REL,
                "{name}: input {k} {:?} index {j}: analytic {a} numeric {numeric}",
                input.shape()
            );
        }
    }
}

fn dims(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(1..5)).collect()
}

/// Values kept away from zero so kinks stay outside the probe interval.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.1..2.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

pub fn elementwise_binary() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..SHAPES {
        let rank = rng.gen_range(1..4);
        let s = dims(&mut rng, rank);
        let a = random(&mut rng, &s, -2.0, 2.0);
        let b = random(&mut rng, &s, 0.5, 2.0);
        check("add", &mut rng, vec![a.clone(), b.clone()], |t, v| {
            t.add(v[0], v[1])
        });
        check("sub", &mut rng, vec![a.clone(), b.clone()], |t, v| {
            t.sub(v[0], v[1])
        });
        check("mul", &mut rng, vec![a.clone(), b.clone()], |t, v| {
            t.mul(v[0], v[1])
        });
        check("div", &mut rng, vec![a, b], |t, v| t.div(v[0], v[1]));
    }
}

pub fn bias_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..SHAPES {
        let (n, m) = (rng.gen_range(1..5), rng.gen_range(1..6));
        let x = random(&mut rng, &[n, m], -1.0, 1.0);
        let b = random(&mut rng, &[m], -1.0, 1.0);
        check("add bias", &mut rng, vec![x, b], |t, v| t.add(v[0], v[1]));
    }
}

pub fn elementwise_unary() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..SHAPES {
        let rank = rng.gen_range(1..4);
        let s = dims(&mut rng, rank);
        let x = away_from_zero(&mut rng, &s);
        let c = rng.gen_range(-2.0..2.0);
        check("neg", &mut rng, vec![x.clone()], |t, v| t.neg(v[0]));
        check("exp", &mut rng, vec![x.clone()], |t, v| t.exp(v[0]));
        check("recip", &mut rng, vec![x.clone()], |t, v| t.recip(v[0]));
        check("relu", &mut rng, vec![x.clone()], |t, v| t.relu(v[0]));
        check("add_scalar", &mut rng, vec![x.clone()], |t, v| {
            t.add_scalar(v[0], c)
        });
        check("mul_scalar", &mut rng, vec![x.clone()], |t, v| {
            t.mul_scalar(v[0], c)
        });
        check("rsub_scalar", &mut rng, vec![x.clone()], |t, v| {
            t.rsub_scalar(v[0], c)
        });
        let s = random(&mut rng, &[1], -2.0, 2.0);
        check("scale_by", &mut rng, vec![x, s], |t, v| {
            t.scale_by(v[0], v[1])
        });
    }
}

pub fn reductions_and_reshapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..SHAPES {
        let s = dims(&mut rng, 3);
        let x = random(&mut rng, &s, -1.0, 1.0);
        let flat = [s[0], s[1] * s[2]];
        check("reshape", &mut rng, vec![x.clone()], move |t, v| {
            t.reshape(v[0], &flat)
        });
        check("sum", &mut rng, vec![x.clone()], |t, v| t.sum(v[0]));
        check("mean", &mut rng, vec![x.clone()], |t, v| t.mean(v[0]));
        let y = random(&mut rng, &s, -1.0, 1.0);
        check("concat", &mut rng, vec![x.clone(), y], |t, v| {
            t.concat(&[v[0], v[1]])
        });
        let start = rng.gen_range(0..s[0]);
        let len = rng.gen_range(1..=s[0] - start);
        check("rows", &mut rng, vec![x], move |t, v| {
            t.rows(v[0], start, len)
        });
        let (g, c) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let z = random(&mut rng, &[s[0], g * c], -1.0, 1.0);
        check("group_mean", &mut rng, vec![z], move |t, v| {
            t.group_mean(v[0], g)
        });
    }
}

pub fn matrix_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..SHAPES {
        let (m, k, n) = (
            rng.gen_range(1..6),
            rng.gen_range(1..6),
            rng.gen_range(1..6),
        );
        let a = random(&mut rng, &[m, k], -1.0, 1.0);
        let b = random(&mut rng, &[k, n], -1.0, 1.0);
        let bt = random(&mut rng, &[n, k], -1.0, 1.0);
        check("matmul", &mut rng, vec![a.clone(), b], |t, v| {
            t.matmul(v[0], v[1])
        });
        check("matmul_nt", &mut rng, vec![a, bt], |t, v| {
            t.matmul_nt(v[0], v[1])
        });
    }
}

pub fn convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..SHAPES {
        let (n, c, o) = (
            rng.gen_range(1..3),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
        );
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let h = rng.gen_range(k..k + 5);
        let w = rng.gen_range(k..k + 5);
        let stride = rng.gen_range(1..3);
        let padding = if rng.gen_bool(0.5) {
            Padding::Same
        } else {
            Padding::Valid
        };
        let x = random(&mut rng, &[n, c, h, w], -1.0, 1.0);
        let kw = random(&mut rng, &[o, c, k, k], -1.0, 1.0);
        check("conv2d", &mut rng, vec![x, kw], move |t, v| {
            t.conv2d(v[0], v[1], stride, padding)
        });
    }
}

pub fn pooling() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..SHAPES {
        let win = rng.gen_range(1..4);
        let s = [
            rng.gen_range(1..3),
            rng.gen_range(1..3),
            win * rng.gen_range(1..4),
            win * rng.gen_range(1..4),
        ];
        // distinct values so the max is unique by more than the probe step
        let mut vals: Vec<f64> = (0..s.iter().product::<usize>())
            .map(|i| i as f64 * 0.01)
            .collect();
        for i in (1..vals.len()).rev() {
            vals.swap(i, rng.gen_range(0..=i));
        }
        let x = Tensor::new(s.to_vec(), vals).unwrap();
        check("avgpool2d", &mut rng, vec![x.clone()], move |t, v| {
            t.avgpool2d(v[0], (win, win), (win, win))
        });
        check("maxpool2d", &mut rng, vec![x], move |t, v| {
            t.maxpool2d(v[0], (win, win), (win, win))
        });
    }
}

pub fn batch_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..SHAPES {
        let s = [
            rng.gen_range(2..4),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
        ];
        let x = random(&mut rng, &s, -1.0, 1.0);
        let g = random(&mut rng, &[s[1]], 0.5, 1.5);
        let b = random(&mut rng, &[s[1]], -0.5, 0.5);
        check(
            "batch_norm batch",
            &mut rng,
            vec![x.clone(), g.clone(), b.clone()],
            |t, v| Ok(t.batch_norm(v[0], v[1], v[2], 1e-5, NormStats::Batch)?.0),
        );
        let mean: Vec<f64> = (0..s[1]).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..s[1]).map(|_| rng.gen_range(0.5..2.0)).collect();
        check("batch_norm fixed", &mut rng, vec![x, g, b], |t, v| {
            Ok(t.batch_norm(
                v[0],
                v[1],
                v[2],
                1e-5,
                NormStats::Fixed {
                    mean: &mean,
                    var: &var,
                },
            )?
            .0)
        });
    }
}

pub fn losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..SHAPES {
        let (b, c) = (rng.gen_range(1..5), rng.gen_range(2..6));
        let x = random(&mut rng, &[b, c], -2.0, 2.0);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let l = labels.clone();
        check(
            "softmax_cross_entropy",
            &mut rng,
            vec![x.clone()],
            move |t, v| t.softmax_cross_entropy(v[0], &l),
        );
        check("mse_one_hot", &mut rng, vec![x], move |t, v| {
            t.mse_one_hot(v[0], &labels)
        });
    }
}

pub fn membrane_dynamics_and_ramp_firing() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..SHAPES {
        let s = dims(&mut rng, 2);
        let v = random(&mut rng, &s, -1.0, 1.0);
        let x = random(&mut rng, &s, -1.0, 2.0);
        let a = random(&mut rng, &[1], -2.0, 2.0);
        let params = NeuronParams::default();
        check(
            "plif membrane",
            &mut rng,
            vec![v, x.clone(), a],
            |t, vars| neuron::membrane_dynamics(t, vars[0], vars[1], &params, Some(vars[2])),
        );
        let ramp = NeuronParams {
            spike_fn: SpikeFn::Ramp,
            ..NeuronParams::default()
        };
        // keep inputs off the ramp corners at v_th ± width/2
        let h = Tensor::from_fn(s, |_| {
            let u: f64 = rng.gen_range(-1.5..2.5);
            if ((u - 0.5).abs() < 0.01) || ((u - 1.5).abs() < 0.01) {
                u + 0.05
            } else {
                u
            }
        });
        check("ramp spike", &mut rng, vec![h], |t, vars| {
            neuron::spike(t, vars[0], 1.0, &ramp)
        });
    }
}

pub fn whole_model_with_ramp_spikes() {
    let mut cfg = ModelConfig::tiny_vgg([2, 6, 6], 3);
    cfg.steps = 2;
    cfg.neuron.spike_fn = SpikeFn::Ramp;
    cfg.neuron.surrogate_width = 2.0;
    cfg.mt = MtConfig::with_deltas(&[0.4]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = Model::<f64>::build(&cfg, &mut rng).unwrap();
    let x = random(&mut rng, &[4, 2, 6, 6], 0.0, 1.0);
    let labels = [0, 1, 2, 1];
    let loss_of = |m: &Model<f64>| -> (f64, Option<Vec<Tensor<f64>>>) {
        let mut tape = Tape::new();
        let pass = m
            .forward(&mut tape, ModelInput::Static(&x), 2, Mode::Train)
            .unwrap();
        let loss = train::loss(&mut tape, &pass.outputs, &labels, LossKind::SoftmaxCe).unwrap();
        let value = tape.value(loss).unwrap().item();
        let grads = tape.backward(loss).unwrap();
        let g = pass
            .bound
            .vars()
            .iter()
            .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros([0])))
            .collect();
        (value, Some(g))
    };
    let (_, grads) = loss_of(&model);
    let grads = grads.unwrap();
    let ids: Vec<_> = model.params().iter().map(|p| p.name.clone()).collect();
    let mut checked = 0;
    let mut tries = 0;
    while checked < 10 {
        tries += 1;
        assert!(tries < 200, "could not find enough smooth coordinates");
        let p = rng.gen_range(0..ids.len());
        let id = model.params().find(&ids[p]).unwrap();
        let j = rng.gen_range(0..model.params().value(id).len());
        let eps = 1e-5;
        let mut plus = model.clone();
        plus.params_mut().value_mut(id).data_mut()[j] += eps;
        let mut minus = model.clone();
        minus.params_mut().value_mut(id).data_mut()[j] -= eps;
        let numeric = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * eps);
        let analytic = grads[p].data().get(j).copied().unwrap_or(0.0);
        if analytic == 0.0 && numeric == 0.0 {
            continue;
        }
        assert!(
            rel_err(analytic, numeric) < 1e-3,
            "{}[{j}]: analytic {analytic} numeric {numeric}",
            ids[p]
        );
        checked += 1;
    }
}
