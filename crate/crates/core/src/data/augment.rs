//! Training-time augmentation: random horizontal flip and a random integer
//! shift of up to a tenth of each side, vacated pixels set to zero.

use rand::{Rng, RngCore};

use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub dy: isize,
    pub dx: isize,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        AugmentDraw {
            flip: false,
            dy: 0,
            dx: 0,
        }
    }

    pub fn sample<R: RngCore + ?Sized>(rng: &mut R, h: usize, w: usize) -> Self {
        let flip = rng.gen_bool(0.5);
        let (my, mx) = ((h / 10) as isize, (w / 10) as isize);
        AugmentDraw {
            flip,
            dy: rng.gen_range(-my..=my),
            dx: rng.gen_range(-mx..=mx),
        }
    }

    /// Applies the draw to one `[c, h, w]` image. Output pixel `(y, x)` reads
    /// input `(y - dy, x' - dx)` where `x'` is the flipped column.
    pub fn apply<T: Real>(&self, image: &[T], shape: [usize; 3]) -> Vec<T> {
        let [c, h, w] = shape;
        let mut out = vec![T::zero(); image.len()];
        for ch in 0..c {
            for y in 0..h {
                let sy = y as isize - self.dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let sx = x as isize - self.dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let sx = if self.flip {
                        w - 1 - sx as usize
                    } else {
                        sx as usize
                    };
                    out[(ch * h + y) * w + x] = image[(ch * h + sy as usize) * w + sx];
                }
            }
        }
        out
    }
}

/// Augments a single `[c, h, w]` image.
pub fn augment<T: Real>(image: &Tensor<T>, rng: &mut dyn RngCore) -> Tensor<T> {
    let s = image.shape();
    assert_eq!(s.len(), 3, "augment expects [c, h, w]");
    let shape = [s[0], s[1], s[2]];
    let draw = AugmentDraw::sample(rng, shape[1], shape[2]);
    Tensor::new(s.to_vec(), draw.apply(image.data(), shape)).expect("shape preserved")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> Vec<f64> {
        (0..2 * 4 * 5).map(|i| i as f64).collect()
    }

    #[test]
    fn flip_is_an_involution() {
        let flip = AugmentDraw {
            flip: true,
            ..AugmentDraw::identity()
        };
        let once = flip.apply(&image(), [2, 4, 5]);
        assert_ne!(once, image());
        assert_eq!(flip.apply(&once, [2, 4, 5]), image());
    }

    #[test]
    fn zero_shift_no_flip_is_identity() {
        assert_eq!(AugmentDraw::identity().apply(&image(), [2, 4, 5]), image());
    }

    #[test]
    fn shift_fills_with_zero() {
        let d = AugmentDraw {
            flip: false,
            dy: 1,
            dx: -1,
        };
        let out = d.apply(&image(), [2, 4, 5]);
        assert_eq!(&out[0..5], &[0.0; 5]);
        // row 1 of the output is row 0 of the input moved one column left
        assert_eq!(&out[5..10], &[1.0, 2.0, 3.0, 4.0, 0.0]);
    }

    #[test]
    fn shifts_stay_within_a_tenth() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let draws: Vec<_> = (0..500)
            .map(|_| AugmentDraw::sample(&mut rng, 32, 32))
            .collect();
        assert!(draws.iter().all(|d| d.dy.abs() <= 3 && d.dx.abs() <= 3));
        assert!(draws.iter().any(|d| d.dy == 3) && draws.iter().any(|d| d.dx == -3));
        let flips = draws.iter().filter(|d| d.flip).count();
        assert!((200..300).contains(&flips));
    }
}
