//! Property checks shared by the integration tests and the acceptance runner.
//! Each check panics on failure and returns a one-line summary otherwise.

#![allow(dead_code)]

pub mod gradcheck;

use std::time::Instant;

use mtsnn::checkpoint::Checkpoint;
use mtsnn::config::{RunConfig, Slicing};
use mtsnn::data::{decode_cifar10, encode_cifar10, CifarRecord, CIFAR_IMAGE_LEN};
use mtsnn::data::{events_to_frames, slice_sizes, EventRecord};
use mtsnn::data::{load_splits, Dataset};
use mtsnn::mfree::{self, InjectedMultiply, PlainAdd};
use mtsnn::model::{Model, ModelConfig, ModelInput};
use mtsnn::neuron::{self, rectangular_window, spike_at, NeuronParams};
use mtsnn::train::{RunMetrics, Trainer};
use mtsnn::{Real, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_deltas(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.gen_range(1..=4);
    let mut pool: Vec<f64> = (-8..=8)
        .filter(|&i| i != 0)
        .map(|i| i as f64 * 0.1)
        .collect();
    pool.shuffle(rng);
    pool.truncate(n);
    pool
}

fn equivalence_draws<T: Real>(draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..draws {
        let (n, c, o) = (
            rng.gen_range(1..3),
            rng.gen_range(1..5),
            rng.gen_range(1..5),
        );
        let (h, w) = (rng.gen_range(3..10), rng.gen_range(3..10));
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let hv = Tensor::<T>::from_fn([n, c, h, w], |_| T::lit(rng.gen_range(-1.0..3.0)));
        // weights at the model's initialisation scale, variance 2/fan_in
        let bound = (6.0 / (c * k * k) as f64).sqrt();
        let kernel = Tensor::<T>::from_fn([o, c, k, k], |_| T::lit(rng.gen_range(-bound..bound)));
        let deltas = random_deltas(&mut rng);
        let r =
            mfree::mt_equivalence_check(&hv, &NeuronParams::default(), &deltas, &kernel).unwrap();
        assert!(
            r.pass,
            "draw {i}: diff {} ≥ {} with offsets {deltas:?}",
            r.max_abs_diff, r.tolerance
        );
        assert_eq!(r.rhs_ops.kernel_total("accum_conv").multiplications, 0);
        worst = worst.max(r.max_abs_diff);
    }
    worst
}

/// Linearity identity over random membranes, offsets and kernels in both precisions.
pub fn equivalence_property(draws: usize) -> String {
    let start = Instant::now();
    let w32 = equivalence_draws::<f32>(draws, 12);
    let w64 = equivalence_draws::<f64>(draws, 64);
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 10.0, "took {secs:.1} s");
    format!("{draws} draws each; max diff {w32:.2e} (f32), {w64:.2e} (f64); {secs:.2} s")
}

fn trained_tiny() -> (Model<f64>, Tensor<f64>) {
    let mut config = RunConfig::new("verify", ModelConfig::tiny_vgg([3, 8, 8], 2));
    config.seed = 5;
    config.mt.deltas = vec![-0.3, 0.3];
    config.train.epochs = 2;
    config.train.batch_size = 32;
    config.train.lr = 0.05;
    config.data.synth_train = 64;
    config.data.synth_test = 16;
    let (train, test) = load_splits(&config, None).unwrap();
    let mut t = Trainer::<f32>::new(config).unwrap();
    t.fit(&train, &test, |_| Ok(())).unwrap();
    let idx: Vec<usize> = (0..10).collect();
    let images = test.batch(&idx, None).unwrap();
    let mtsnn::data::BatchInput::Static(x) = images.input else {
        unreachable!()
    };
    (t.model.cast::<f64>(), x.cast::<f64>())
}

/// Zero multiplications inside accumulation kernels; an injected multiply fails verification.
pub fn multiplication_free_proof() -> String {
    let (model, x) = trained_tiny();
    let ok = mfree::verify::<f64, PlainAdd>(
        &model,
        ModelInput::Static(&x),
        &[1, 3],
        &mut ChaCha8Rng::seed_from_u64(2),
    )
    .unwrap();
    assert!(ok.pass, "verify failed: {ok:?}");
    let adds: u64 = ok
        .steps
        .iter()
        .map(|s| s.op_counts.kernel_total("accum_conv").additions)
        .sum();
    for s in &ok.steps {
        assert_eq!(s.accumulation_multiplications, 0);
    }
    let bad = mfree::verify::<f64, InjectedMultiply>(
        &model,
        ModelInput::Static(&x),
        &[1],
        &mut ChaCha8Rng::seed_from_u64(2),
    )
    .unwrap();
    assert!(!bad.pass, "injected multiply was not detected");
    format!(
        "0 multiplications over {adds} accumulation adds; injected multiply flips verify to FAIL"
    )
}

/// Backward of each spike primitive equals the rectangular window, exactly.
pub fn surrogate_grid() -> String {
    let mut points = 0;
    for width in [1.0, 0.5, 2.0] {
        let params = NeuronParams {
            surrogate_width: width,
            ..NeuronParams::default()
        };
        let deltas = [-0.3, 0.3, 0.6];
        let th = params.v_th;
        let mut grid: Vec<f64> = (-48..=72).map(|i| th + i as f64 * width / 32.0).collect();
        for d in std::iter::once(0.0).chain(deltas) {
            for e in [-1e-9, 0.0, 1e-9] {
                grid.push(th + d - width / 2.0 + e);
                grid.push(th + d + width / 2.0 + e);
            }
        }
        let h = Tensor::<f64>::new([grid.len()], grid.clone()).unwrap();
        let window = |t: f64| rectangular_window(&h, t, width);
        for t in std::iter::once(th).chain(deltas.iter().map(|d| th + d)) {
            let mut tape = Tape::new();
            let hv = tape.param(h.clone());
            let s = neuron::spike(&mut tape, hv, t, &params).unwrap();
            let l = tape.sum(s).unwrap();
            let g = tape.backward(l).unwrap();
            assert_eq!(
                g.get(hv).unwrap(),
                &window(t),
                "threshold {t}, width {width}"
            );
        }
        let mut tape = Tape::new();
        let hv = tape.param(h.clone());
        let (_, sum) = neuron::fire_mt(&mut tape, hv, &params, &deltas).unwrap();
        let l = tape.sum(sum).unwrap();
        let g = tape.backward(l).unwrap();
        let mut expected = window(th);
        for d in deltas {
            expected = expected
                .zip_map(&window(th + d), "sum", |a, b| a + b)
                .unwrap();
        }
        assert_eq!(
            g.get(hv).unwrap(),
            &expected,
            "summed windows, width {width}"
        );
        points += grid.len();
    }
    format!("{points} grid points over 3 widths and 4 thresholds match exactly")
}

/// Spike values, summed counts, empty offsets and reset on many random membranes.
pub fn spike_algebra(n: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let params = NeuronParams::default();
    let deltas = [-0.4, -0.2, 0.25, 0.5];
    let h = Tensor::<f64>::from_fn([n], |_| rng.gen_range(-2.0..3.0));
    for d in std::iter::once(0.0).chain(deltas) {
        let s = spike_at(&h, params.v_th + d);
        assert!(s.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let (base, sum) = neuron::fire_mt(&mut tape, hv, &params, &deltas).unwrap();
    let v = neuron::reset(&mut tape, hv, base, &params).unwrap();
    let st = neuron::fire_st(&mut tape, hv, &params).unwrap();
    let (st_base, st_sum) = neuron::fire_mt(&mut tape, hv, &params, &[]).unwrap();
    let top = (deltas.len() + 1) as f64;
    let sum = tape.value(sum).unwrap();
    assert!(sum
        .data()
        .iter()
        .all(|&c| c.fract() == 0.0 && (0.0..=top).contains(&c)));
    let st = tape.value(st).unwrap();
    assert_eq!(tape.value(st_base).unwrap().data(), st.data());
    assert_eq!(tape.value(st_sum).unwrap().data(), st.data());
    let (base, v) = (tape.value(base).unwrap(), tape.value(v).unwrap());
    let mut fired = 0;
    for ((&b, &vv), &hh) in base.data().iter().zip(v.data()).zip(h.data()) {
        if b == 1.0 {
            assert_eq!(vv.to_bits(), 0.0f64.to_bits());
            fired += 1;
        } else {
            assert_eq!(vv, hh);
        }
    }
    format!("{n} membranes, {fired} base spikes, counts within [0, {top}]")
}

fn random_stream(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<EventRecord> {
    let n = rng.gen_range(0..400);
    let mut t = 0u32;
    (0..n)
        .map(|_| {
            t += rng.gen_range(0..50);
            EventRecord {
                t,
                x: rng.gen_range(0..w as u16),
                y: rng.gen_range(0..h as u16),
                polarity: rng.gen_range(0..2),
            }
        })
        .collect()
}

/// CIFAR-10 byte round-trip and event count conservation.
pub fn data_layer(streams: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let records: Vec<CifarRecord> = (0..20)
        .map(|_| CifarRecord {
            label: rng.gen_range(0..10),
            pixels: (0..CIFAR_IMAGE_LEN).map(|_| rng.gen()).collect(),
        })
        .collect();
    let bytes = encode_cifar10(&records);
    let ds = Dataset::<f32>::from_cifar_records(&decode_cifar10(&bytes).unwrap());
    assert_eq!(encode_cifar10(&ds.to_cifar_records().unwrap()), bytes);

    let (h, w) = (6, 5);
    let mut total = 0;
    for _ in 0..streams {
        let events = random_stream(&mut rng, h, w);
        for steps in [1, 2, 5, 10] {
            let frames = events_to_frames::<f64>(&events, steps, h, w, Slicing::Count).unwrap();
            assert_eq!(frames.len(), steps);
            let sums: Vec<usize> = frames.iter().map(|f| f.sum_all() as usize).collect();
            assert_eq!(sums, slice_sizes(events.len(), steps));
            assert_eq!(sums.iter().sum::<usize>(), events.len());
        }
        total += events.len();
    }
    format!(
        "{} CIFAR records byte-exact; {streams} streams ({total} events) conserved for T in 1, 2, 5, 10",
        records.len()
    )
}

fn without_times(m: &RunMetrics) -> RunMetrics {
    let mut m = m.clone();
    for r in &mut m.rows {
        r.seconds = 0.0;
    }
    m
}

/// Same seed, same metrics; checkpoint resume matches the uninterrupted run.
pub fn reproducibility() -> String {
    let mut config = RunConfig::new("repro", ModelConfig::tiny_vgg([3, 8, 8], 2));
    config.seed = 21;
    config.model.steps = 2;
    config.mt.deltas = vec![-0.3, 0.3];
    config.train.epochs = 2;
    config.train.batch_size = 32;
    config.train.lr = 0.05;
    config.data.synth_train = 96;
    config.data.synth_test = 32;
    let (train, test) = load_splits(&config, None).unwrap();
    let run = || {
        let mut t = Trainer::<f32>::new(config.clone()).unwrap();
        t.fit(&train, &test, |_| Ok(())).unwrap();
        t
    };
    let (a, b) = (run(), run());
    let csv = |t: &Trainer<f32>| without_times(&t.metrics).to_csv().unwrap();
    assert_eq!(csv(&a), csv(&b));
    assert_eq!(a.model.params(), b.model.params());

    let mut first = Trainer::<f32>::new(config.clone()).unwrap();
    first.run_epoch(&train, &test).unwrap();
    let bytes = first.checkpoint().to_bytes();
    let mut resumed = Trainer::resume(&Checkpoint::<f32>::from_bytes(&bytes).unwrap()).unwrap();
    resumed.fit(&train, &test, |_| Ok(())).unwrap();
    assert_eq!(csv(&resumed), csv(&a));
    assert_eq!(resumed.model.params(), a.model.params());
    assert_eq!(resumed.model.running_stats(), a.model.running_stats());
    format!(
        "{} metric rows identical (wall-clock column excluded); resume bit-exact",
        a.metrics.rows.len()
    )
}
