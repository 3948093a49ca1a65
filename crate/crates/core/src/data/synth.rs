//! Synthetic images: one Gaussian blob per class at a fixed position on a
//! circle around the image centre, with per-sample jitter and pixel noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::real::Real;

/// `n` samples with labels cycling through `0..classes`. The class layout
/// depends only on `classes` and `shape`; `seed` drives the noise.
pub fn synth_dataset<T: Real>(
    n: usize,
    classes: usize,
    shape: [usize; 3],
    seed: u64,
) -> Dataset<T> {
    let [c, h, w] = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).expect("valid");
    let radius = 0.3 * h.min(w) as f64;
    let sigma = (0.12 * h.min(w) as f64).max(0.75);
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes.max(1);
        let angle = std::f64::consts::TAU * label as f64 / classes.max(1) as f64;
        let cy = (h as f64 - 1.0) / 2.0 + radius * angle.sin() + rng.gen_range(-0.5..0.5);
        let cx = (w as f64 - 1.0) / 2.0 + radius * angle.cos() + rng.gen_range(-0.5..0.5);
        for ch in 0..c {
            // channel tint varies by class so colour is also informative
            let tint = 0.6 + 0.4 * ((label + ch) % 2) as f64;
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    let v = tint * (-d2 / (2.0 * sigma * sigma)).exp() + noise.sample(&mut rng);
                    data.push(T::lit(v.clamp(0.0, 1.0)));
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(shape, None, data, labels).expect("sizes agree")
}
