//! Dense numerical kernels on row-major slices.
//!
//! Every kernel reports the scalar operations it executes to
//! [`crate::counter`]. Summation order is fixed so that results are
//! reproducible run to run.

use serde::{Deserialize, Serialize};

use crate::counter;
use crate::error::{Error, Result};
use crate::real::Real;

/// `out[m,n] = a[m,k] · b[k,n]`. The first product of each sum initializes the
/// accumulator, so the count is `m·n·k` multiplications and `m·n·(k-1)` additions.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        let a0 = a_row[0];
        for (o, &bv) in row.iter_mut().zip(&b[..n]) {
            *o = a0 * bv;
        }
        for (kk, &av) in a_row.iter().enumerate().skip(1) {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    counter::record("matmul", (m * n * k) as u64, (m * n * (k - 1)) as u64, 0);
}

/// `out[m,n] = a[m,k] · b[n,k]ᵀ`.
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
    counter::record("matmul", (m * n * k) as u64, (m * n * (k - 1)) as u64, 0);
}

/// `out[m,n] = a[k,m]ᵀ · b[k,n]`.
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let av = a[i];
        let row = &mut out[i * n..(i + 1) * n];
        for (o, &bv) in row.iter_mut().zip(&b[..n]) {
            *o = av * bv;
        }
    }
    for kk in 1..k {
        let b_row = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = a[kk * m + i];
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    counter::record("matmul", (m * n * k) as u64, (m * n * (k - 1)) as u64, 0);
}

/// Dot product with eight interleaved partial sums combined in a fixed order.
/// Not counted; callers account for `len` multiplications and `len - 1` additions.
fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    const LANES: usize = 8;
    let n = x.len();
    if n < LANES {
        let mut acc = x[0] * y[0];
        for i in 1..n {
            acc += x[i] * y[i];
        }
        return acc;
    }
    let mut acc = [T::zero(); LANES];
    for l in 0..LANES {
        acc[l] = x[l] * y[l];
    }
    let chunks = n / LANES;
    for c in 1..chunks {
        let xs = &x[c * LANES..(c + 1) * LANES];
        let ys = &y[c * LANES..(c + 1) * LANES];
        for l in 0..LANES {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut total =
        ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for i in chunks * LANES..n {
        total += x[i] * y[i];
    }
    total
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

/// Resolved shape arithmetic of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// `input` is `[n, c, h, w]`, `kernel` is `[o, c, k, k]`.
    /// Same padding follows the usual convention: `out = ceil(in / stride)`,
    /// with the odd padding pixel placed at the bottom/right.
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 || input[1] != kernel[1] || kernel[2] != kernel[3]
        {
            return Err(Error::shape("conv2d", input, kernel));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let k = kernel[2];
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if h < k || w < k {
                    return Err(Error::shape("conv2d", input, kernel));
                }
                ((h - k) / stride + 1, (w - k) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let ph = ((oh - 1) * stride + k).saturating_sub(h);
                let pw = ((ow - 1) * stride + k).saturating_sub(w);
                (oh, ow, ph / 2, pw / 2)
            }
        };
        Ok(ConvGeometry {
            batch: n,
            channels: c,
            height: h,
            width: w,
            out_channels: kernel[0],
            kernel: k,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_pixels()
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Input coordinate hit by output `(oy, ox)` and kernel tap `(ky, kx)`, if inside the image.
    #[inline]
    pub fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (y < self.height && x < self.width).then_some((y, x))
    }
}

/// Unfolds one `[c, h, w]` sample into `[c·k·k, out_h·out_w]` columns; padding reads as zero.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let p = g.out_pixels();
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        dst[oy * g.out_w + ox] = match g.source(oy, ox, ky, kx) {
                            Some((y, xx)) => plane[y * g.width + xx],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Folds columns back onto a `[c, h, w]` sample, adding overlapping taps.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let p = g.out_pixels();
    let k = g.kernel;
    let mut adds = 0u64;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some((y, xx)) = g.source(oy, ox, ky, kx) {
                            plane[y * g.width + xx] += src[oy * g.out_w + ox];
                            adds += 1;
                        }
                    }
                }
            }
        }
    }
    counter::record("col2im", 0, adds, 0);
}

/// Forward convolution of `[n, c, h, w]` by `[o, c, k, k]` (no bias).
pub fn conv2d<T: Real>(x: &[T], w: &[T], g: &ConvGeometry) -> Vec<T> {
    let (kl, p) = (g.patch_len(), g.out_pixels());
    let mut out = vec![T::zero(); g.batch * g.out_len()];
    let mut cols = vec![T::zero(); kl * p];
    for n in 0..g.batch {
        im2col(&x[n * g.in_len()..(n + 1) * g.in_len()], g, &mut cols);
        matmul(
            w,
            &cols,
            g.out_channels,
            kl,
            p,
            &mut out[n * g.out_len()..(n + 1) * g.out_len()],
        );
    }
    out
}

/// Gradients of [`conv2d`] with respect to input and kernel.
pub fn conv2d_backward<T: Real>(x: &[T], w: &[T], dy: &[T], g: &ConvGeometry) -> (Vec<T>, Vec<T>) {
    let (kl, p, o) = (g.patch_len(), g.out_pixels(), g.out_channels);
    let mut dx = vec![T::zero(); g.batch * g.in_len()];
    let mut dw = vec![T::zero(); o * kl];
    let mut dw_n = vec![T::zero(); o * kl];
    let mut cols = vec![T::zero(); kl * p];
    let mut dcols = vec![T::zero(); kl * p];
    for n in 0..g.batch {
        let dy_n = &dy[n * g.out_len()..(n + 1) * g.out_len()];
        im2col(&x[n * g.in_len()..(n + 1) * g.in_len()], g, &mut cols);
        matmul_nt(dy_n, &cols, o, p, kl, &mut dw_n);
        for (a, &b) in dw.iter_mut().zip(&dw_n) {
            *a += b;
        }
        matmul_tn(w, dy_n, kl, o, p, &mut dcols);
        col2im(&dcols, g, &mut dx[n * g.in_len()..(n + 1) * g.in_len()]);
    }
    counter::record("conv2d_backward", 0, (g.batch * o * kl) as u64, 0);
    (dx, dw)
}

/// Window and stride of a 2-D pooling op; windows never overhang the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub window_h: usize,
    pub window_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn new(input: &[usize], window: (usize, usize), stride: (usize, usize)) -> Result<Self> {
        if input.len() != 4
            || window.0 == 0
            || window.1 == 0
            || stride.0 == 0
            || stride.1 == 0
            || input[2] < window.0
            || input[3] < window.1
        {
            return Err(Error::invalid(
                "pool2d",
                format!("window {window:?} stride {stride:?} incompatible with input {input:?}"),
            ));
        }
        Ok(PoolGeometry {
            planes: input[0] * input[1],
            height: input[2],
            width: input[3],
            window_h: window.0,
            window_w: window.1,
            stride_h: stride.0,
            stride_w: stride.1,
            out_h: (input[2] - window.0) / stride.0 + 1,
            out_w: (input[3] - window.1) / stride.1 + 1,
        })
    }

    pub fn window_len(&self) -> usize {
        self.window_h * self.window_w
    }

    fn for_each_window(&self, mut f: impl FnMut(usize, &mut dyn Iterator<Item = usize>)) {
        let (h, w) = (self.height, self.width);
        for pl in 0..self.planes {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let out_idx = (pl * self.out_h + oy) * self.out_w + ox;
                    let (y0, x0) = (oy * self.stride_h, ox * self.stride_w);
                    let mut it = (0..self.window_len()).map(move |i| {
                        let (dy, dx) = (i / self.window_w, i % self.window_w);
                        (pl * h + y0 + dy) * w + x0 + dx
                    });
                    f(out_idx, &mut it);
                }
            }
        }
    }
}

/// Window sums (no scaling).
pub fn sum_pool2d<T: Real>(x: &[T], g: &PoolGeometry) -> Vec<T> {
    let mut out = vec![T::zero(); g.planes * g.out_h * g.out_w];
    g.for_each_window(|o, idx| {
        let first = idx.next().unwrap();
        let mut acc = x[first];
        for i in idx {
            acc += x[i];
        }
        out[o] = acc;
    });
    counter::record(
        "sum_pool2d",
        0,
        (out.len() * (g.window_len() - 1)) as u64,
        0,
    );
    out
}

pub fn avg_pool2d<T: Real>(x: &[T], g: &PoolGeometry) -> Vec<T> {
    let scale = T::one() / T::lit(g.window_len() as f64);
    let mut out = sum_pool2d(x, g);
    for v in &mut out {
        *v *= scale;
    }
    counter::record("avg_pool2d", out.len() as u64, 0, 0);
    out
}

pub fn avg_pool2d_backward<T: Real>(dy: &[T], g: &PoolGeometry) -> Vec<T> {
    let scale = T::one() / T::lit(g.window_len() as f64);
    let mut dx = vec![T::zero(); g.planes * g.height * g.width];
    g.for_each_window(|o, idx| {
        let v = dy[o] * scale;
        for i in idx {
            dx[i] += v;
        }
    });
    dx
}

/// Window maxima and the flat input index of each (first maximum wins).
pub fn max_pool2d<T: Real>(x: &[T], g: &PoolGeometry) -> (Vec<T>, Vec<usize>) {
    let n = g.planes * g.out_h * g.out_w;
    let mut out = vec![T::zero(); n];
    let mut arg = vec![0usize; n];
    g.for_each_window(|o, idx| {
        let mut best = idx.next().unwrap();
        for i in idx {
            if x[i] > x[best] {
                best = i;
            }
        }
        out[o] = x[best];
        arg[o] = best;
    });
    counter::record("max_pool2d", 0, 0, (n * (g.window_len() - 1)) as u64);
    (out, arg)
}
