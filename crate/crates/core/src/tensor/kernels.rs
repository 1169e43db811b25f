//! Numeric kernels shared by the autodiff operators and the analytic
//! reconstruction code. Keeping one implementation of bilinear rotation and
//! spectral filtering is what makes the learned back-projection with unit
//! weights reproduce classical FBP exactly.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::Real;
use crate::error::{Error, Result};

/// Row-major `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k`
/// and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: bounds were checked above and the strides address exactly the
    // m*k, k*n and m*n elements of the three buffers.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Spatial geometry of a 2D convolution over a single image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Output columns `oj` whose input column `oj * stride + kj - pad` lies
/// inside the image.
fn valid_cols(g: &ConvGeom, kj: usize, wo: usize) -> (usize, usize) {
    let lo = (g.pad.saturating_sub(kj)).div_ceil(g.stride);
    let hi = if g.width + g.pad > kj {
        ((g.width + g.pad - kj - 1) / g.stride + 1).min(wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds `x` (C x H x W) into a `(C k k) x (Ho Wo)` patch matrix.
pub(crate) fn im2col<T: Real>(x: &[T], g: ConvGeom, cols: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let ncols = ho * wo;
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_cols(&g, kj, wo);
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ii as usize * g.width..(ii as usize + 1) * g.width];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (d, s) in line[lo..hi]
                            .iter_mut()
                            .zip(src[first..].iter().step_by(g.stride))
                        {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch values back, accumulating into `x`.
pub(crate) fn col2im<T: Real>(cols: &[T], g: ConvGeom, x: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let ncols = ho * wo;
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_cols(&g, kj, wo);
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.width..(ii as usize + 1) * g.width];
                    let line = &src[oi * wo + lo..oi * wo + hi];
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        dst[first..first + hi - lo]
                            .iter_mut()
                            .zip(line)
                            .for_each(|(d, &s)| *d += s);
                    } else {
                        for (d, &s) in dst[first..].iter_mut().step_by(g.stride).zip(line) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Resampling of an `h x w` source plane onto an `n x n` grid rotated by
/// `angle` (counter-clockwise) about the grid center, by inverse mapping and
/// bilinear interpolation. Source taps outside the plane read as zero.
///
/// Source columns are spaced `col_scale` output pixels apart, which lets a
/// plane whose columns are detector bins (spacing != pixel size) be
/// resampled directly.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Rotation {
    pub src_h: usize,
    pub src_w: usize,
    pub n: usize,
    pub cos: f64,
    pub sin: f64,
    pub col_scale: f64,
}

impl Rotation {
    pub fn new(src_h: usize, src_w: usize, n: usize, angle: f64, col_scale: f64) -> Self {
        Rotation {
            src_h,
            src_w,
            n,
            cos: angle.cos(),
            sin: angle.sin(),
            col_scale,
        }
    }

    /// Calls `f(out_index, src_index, weight)` for every in-range tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, f64)) {
        let c = (self.n as f64 - 1.0) / 2.0;
        let rc = (self.src_h as f64 - 1.0) / 2.0;
        let uc = (self.src_w as f64 - 1.0) / 2.0;
        let (h, w) = (self.src_h as isize, self.src_w as isize);
        for i in 0..self.n {
            let y = c - i as f64;
            for j in 0..self.n {
                let x = j as f64 - c;
                let xs = self.cos * x + self.sin * y;
                let ys = -self.sin * x + self.cos * y;
                let u = xs / self.col_scale + uc;
                let r = rc - ys;
                let r0 = r.floor();
                let u0 = u.floor();
                let fr = r - r0;
                let fu = u - u0;
                let (r0, u0) = (r0 as isize, u0 as isize);
                let out = i * self.n + j;
                let taps = [
                    (r0, u0, (1.0 - fr) * (1.0 - fu)),
                    (r0, u0 + 1, (1.0 - fr) * fu),
                    (r0 + 1, u0, fr * (1.0 - fu)),
                    (r0 + 1, u0 + 1, fr * fu),
                ];
                for (rr, uu, wgt) in taps {
                    if rr >= 0 && rr < h && uu >= 0 && uu < w {
                        f(out, rr as usize * self.src_w + uu as usize, wgt);
                    }
                }
            }
        }
    }

    /// Accumulates the rotated `src` into `out` (length `n * n`).
    pub fn forward_acc<T: Real>(&self, src: &[T], out: &mut [T]) {
        debug_assert_eq!(src.len(), self.src_h * self.src_w);
        debug_assert_eq!(out.len(), self.n * self.n);
        self.for_each_tap(|o, s, w| out[o] += T::lit(w) * src[s]);
    }

    /// Accumulates the adjoint of [`Rotation::forward_acc`] into `dsrc`.
    pub fn adjoint_acc<T: Real>(&self, dout: &[T], dsrc: &mut [T]) {
        self.for_each_tap(|o, s, w| dsrc[s] += T::lit(w) * dout[o]);
    }
}

/// Row-wise linear filter applied by multiplication in the Fourier domain.
///
/// Rows of length `len` are zero-padded to the FFT length and filtered
/// circularly, so the response must hold exact taps for every offset below
/// `len`. Optionally each row is treated as extended to infinity with its
/// edge values: `edge_tail[k]` is the kernel mass at offsets `>= k` and adds
/// `row[0] * edge_tail[i + 1] + row[len - 1] * edge_tail[len - i]` to output
/// `i`. That extension makes a zero-DC kernel annihilate constant rows
/// without biasing rows that fall to zero at their ends.
#[derive(Clone)]
pub struct SpectralFilter<T: Real> {
    len: usize,
    response: Arc<Vec<T>>,
    edge_tail: Option<Arc<Vec<T>>>,
    fwd: Arc<dyn Fft<T>>,
    inv: Arc<dyn Fft<T>>,
}

impl<T: Real> std::fmt::Debug for SpectralFilter<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpectralFilter")
            .field("len", &self.len)
            .field("fft_len", &self.response.len())
            .field("edge_extension", &self.edge_tail.is_some())
            .finish()
    }
}

impl<T: Real> SpectralFilter<T> {
    /// `response` holds the real, even frequency-domain multiplier in FFT
    /// order; its length must be at least `2 * len - 1` so the circular
    /// convolution of a zero-padded row does not wrap.
    pub fn new(len: usize, response: Vec<T>) -> Result<Self> {
        if len == 0 {
            return Err(Error::Invalid(
                "spectral filter row length must be >= 1".into(),
            ));
        }
        if response.len() < 2 * len - 1 {
            return Err(Error::Invalid(format!(
                "filter length {} too short for rows of {len} (needs {})",
                response.len(),
                2 * len - 1
            )));
        }
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(response.len());
        let inv = planner.plan_fft_inverse(response.len());
        Ok(SpectralFilter {
            len,
            response: Arc::new(response),
            edge_tail: None,
            fwd,
            inv,
        })
    }

    /// Enables edge extension; `tail` needs entries for offsets `0..=len`.
    pub fn with_edge_tail(mut self, tail: Vec<T>) -> Result<Self> {
        if tail.len() < self.len + 1 {
            return Err(Error::Invalid(format!(
                "edge tail has {} entries, rows of {} need {}",
                tail.len(),
                self.len,
                self.len + 1
            )));
        }
        self.edge_tail = Some(Arc::new(tail));
        Ok(self)
    }

    pub fn row_len(&self) -> usize {
        self.len
    }

    pub fn fft_len(&self) -> usize {
        self.response.len()
    }

    pub fn response(&self) -> &[T] {
        &self.response
    }

    fn convolve(&self, buf: &mut [Complex<T>], scratch: &mut Vec<Complex<T>>) {
        let l = self.fft_len();
        scratch.resize(
            self.fwd
                .get_inplace_scratch_len()
                .max(self.inv.get_inplace_scratch_len()),
            Complex::default(),
        );
        self.fwd.process_with_scratch(buf, scratch);
        let norm = T::one() / T::lit(l as f64);
        for (b, &r) in buf.iter_mut().zip(self.response.iter()) {
            *b = *b * (r * norm);
        }
        self.inv.process_with_scratch(buf, scratch);
    }

    /// Filters every row of `x` (rows of length `len`) into `out`.
    pub fn apply(&self, x: &[T], out: &mut [T]) {
        let d = self.len;
        let mut buf = vec![Complex::default(); self.fft_len()];
        let mut scratch = Vec::new();
        for (row, orow) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            buf.fill(Complex::default());
            for (b, &v) in buf.iter_mut().zip(row) {
                *b = Complex::new(v, T::zero());
            }
            self.convolve(&mut buf, &mut scratch);
            for (o, b) in orow.iter_mut().zip(&buf) {
                *o = b.re;
            }
            if let Some(tail) = &self.edge_tail {
                let (first, last) = (row[0], row[d - 1]);
                for (i, o) in orow.iter_mut().enumerate() {
                    *o += first * tail[i + 1] + last * tail[d - i];
                }
            }
        }
    }

    /// Accumulates the adjoint of [`SpectralFilter::apply`] into `dx`.
    pub fn adjoint_acc(&self, dy: &[T], dx: &mut [T]) {
        let d = self.len;
        let mut buf = vec![Complex::default(); self.fft_len()];
        let mut scratch = Vec::new();
        for (row, drow) in dy.chunks_exact(d).zip(dx.chunks_exact_mut(d)) {
            buf.fill(Complex::default());
            for (b, &v) in buf.iter_mut().zip(row) {
                *b = Complex::new(v, T::zero());
            }
            // The response is real and even, so the circular convolution is
            // self-adjoint.
            self.convolve(&mut buf, &mut scratch);
            for (g, b) in drow.iter_mut().zip(&buf) {
                *g += b.re;
            }
            if let Some(tail) = &self.edge_tail {
                let (mut first, mut last) = (T::zero(), T::zero());
                for (i, &g) in row.iter().enumerate() {
                    first += g * tail[i + 1];
                    last += g * tail[d - i];
                }
                drow[0] += first;
                drow[d - 1] += last;
            }
        }
    }
}
