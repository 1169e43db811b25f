//! Parallel-beam forward projection and its rotation-based adjoint.
//!
//! Geometry: pixel `(row i, col j)` sits at `x = j - c`, `y = c - i` with
//! `c = (N - 1) / 2`, in pixel units. View angle `theta` measures detector
//! coordinate `s = x cos(theta) + y sin(theta)`; detector `d` sits at
//! `s = (d - (Nd - 1) / 2) * spacing`.

use crate::error::{Error, Result};
use crate::image::{fov_mask, Image, Sinogram};
use crate::tensor::kernels::Rotation;
use crate::tensor::Real;

/// Ray sampling step in pixels.
pub const DEFAULT_STEP: f64 = 0.5;

/// Line integrals of `img` along parallel rays, sampled every half pixel
/// with bilinear interpolation. Pixels outside the field of view are
/// ignored. Detector spacing equals the pixel size.
pub fn radon(img: &Image, angles: &[f64], n_det: usize) -> Result<Sinogram> {
    radon_sampled(img, angles, n_det, img.pixel_size(), DEFAULT_STEP)
}

/// [`radon`] with explicit detector spacing (physical units) and ray step
/// (pixels).
pub fn radon_sampled(
    img: &Image,
    angles: &[f64],
    n_det: usize,
    det_spacing: f64,
    step: f64,
) -> Result<Sinogram> {
    if n_det < 1 {
        return Err(Error::Invalid("radon: detector count must be >= 1".into()));
    }
    if !(step > 0.0) {
        return Err(Error::Invalid(format!(
            "radon: step must be positive, got {step}"
        )));
    }
    let n = img.n();
    let mask = fov_mask(n);
    let f: Vec<f64> = img
        .data()
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| if m { v as f64 } else { 0.0 })
        .collect();
    let c = (n as f64 - 1.0) / 2.0;
    let tau = det_spacing / img.pixel_size();
    let cd = (n_det as f64 - 1.0) / 2.0;
    let half_len = n as f64 * std::f64::consts::FRAC_1_SQRT_2 + 1.0;
    let k_max = (half_len / step).ceil() as i64;
    let sample = |x: f64, y: f64| -> f64 {
        let col = x + c;
        let row = c - y;
        let (r0, c0) = (row.floor(), col.floor());
        let (fr, fc) = (row - r0, col - c0);
        let (r0, c0) = (r0 as i64, c0 as i64);
        let mut acc = 0.0;
        for (rr, cc, w) in [
            (r0, c0, (1.0 - fr) * (1.0 - fc)),
            (r0, c0 + 1, (1.0 - fr) * fc),
            (r0 + 1, c0, fr * (1.0 - fc)),
            (r0 + 1, c0 + 1, fr * fc),
        ] {
            if rr >= 0 && cc >= 0 && (rr as usize) < n && (cc as usize) < n {
                acc += w * f[rr as usize * n + cc as usize];
            }
        }
        acc
    };
    let mut data = Vec::with_capacity(angles.len() * n_det);
    for &theta in angles {
        let (sin, cos) = theta.sin_cos();
        for d in 0..n_det {
            let s = (d as f64 - cd) * tau;
            let mut acc = 0.0;
            for k in -k_max..=k_max {
                let t = k as f64 * step;
                acc += sample(s * cos - t * sin, s * sin + t * cos);
            }
            data.push((acc * step * img.pixel_size()) as f32);
        }
    }
    Sinogram::new(angles.to_vec(), n_det, det_spacing, data)
}

/// Smears each row of `rows` (`views x n_det`) across an `n x n` grid at its
/// view angle and sums the views, without scaling or masking. Uses the same
/// rotation kernel as the learned back-projection layer.
pub(crate) fn smear_views<T: Real>(
    rows: &[T],
    angles: &[f64],
    n_det: usize,
    col_scale: f64,
    n: usize,
) -> Vec<T> {
    let mut acc = vec![T::zero(); n * n];
    let mut plane = vec![T::zero(); n * n_det];
    let mut view_img = vec![T::zero(); n * n];
    for (v, &theta) in angles.iter().enumerate() {
        let row = &rows[v * n_det..(v + 1) * n_det];
        for line in plane.chunks_exact_mut(n_det) {
            line.copy_from_slice(row);
        }
        view_img.fill(T::zero());
        Rotation::new(n, n_det, n, theta, col_scale).forward_acc(&plane, &mut view_img);
        acc.iter_mut().zip(&view_img).for_each(|(a, &b)| *a += b);
    }
    acc
}

/// Unfiltered back-projection `R^T y`, the adjoint of [`radon`] up to
/// interpolation differences, masked to the field of view.
pub fn backproject_adjoint(sino: &Sinogram, n: usize, pixel_size: f64) -> Result<Image> {
    let rows: Vec<f64> = sino.data().iter().map(|&v| v as f64).collect();
    let tau = sino.det_spacing() / pixel_size;
    let sum = smear_views(&rows, sino.angles(), sino.n_det(), tau, n);
    let scale = pixel_size * pixel_size / sino.det_spacing();
    let mask = fov_mask(n);
    let data = sum
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| if m { (v * scale) as f32 } else { 0.0 })
        .collect();
    Image::new(n, pixel_size, data)
}

/// `|<Rx, y> - <x, R^T y>| / max(|<Rx, y>|, eps)`.
pub fn adjoint_check(img: &Image, sino_weights: &Sinogram) -> Result<f64> {
    const EPS: f64 = 1e-30;
    let rx = radon_sampled(
        img,
        sino_weights.angles(),
        sino_weights.n_det(),
        sino_weights.det_spacing(),
        DEFAULT_STEP,
    )?;
    let lhs: f64 = rx
        .data()
        .iter()
        .zip(sino_weights.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum();
    let rty = backproject_adjoint(sino_weights, img.n(), img.pixel_size())?;
    let rhs: f64 = img
        .data()
        .iter()
        .zip(rty.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum();
    Ok((lhs - rhs).abs() / lhs.abs().max(EPS))
}
