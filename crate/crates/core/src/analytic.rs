//! Classical reconstruction: ramp-type filtering, filtered back-projection
//! and the few-view preprocessing chain feeding the learned stage.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{equispaced_angles, fov_mask, Image, Sinogram};
use crate::projector::{radon, smear_views};
use crate::tensor::{Real, SpectralFilter};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterKind {
    SheppLogan,
    Ramp,
    None,
}

/// Frequency response of a reconstruction filter, in FFT order.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterKernel {
    kind: FilterKind,
    det_spacing: f64,
    response: Vec<f64>,
}

/// Discrete spatial kernel (already multiplied by the detector spacing, so
/// that a plain sum over samples approximates the convolution integral).
pub fn spatial_kernel(kind: FilterKind, offset: i64, det_spacing: f64) -> f64 {
    let tau = det_spacing;
    match kind {
        FilterKind::SheppLogan => {
            let n = offset as f64;
            -2.0 / (PI * PI * tau * (4.0 * n * n - 1.0))
        }
        FilterKind::Ramp => {
            if offset == 0 {
                1.0 / (4.0 * tau)
            } else if offset % 2 == 0 {
                0.0
            } else {
                let n = offset as f64;
                -1.0 / (PI * PI * n * n * tau)
            }
        }
        FilterKind::None => {
            if offset == 0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// `sum of spatial_kernel(kind, n)` over all `n >= k`.
pub fn kernel_tail(kind: FilterKind, k: i64, det_spacing: f64) -> f64 {
    let tau = det_spacing;
    match kind {
        // Telescoping: h(n) = -(1/(2n-1) - 1/(2n+1)) / (pi^2 tau).
        FilterKind::SheppLogan if k >= 1 => -1.0 / (PI * PI * tau * (2 * k - 1) as f64),
        FilterKind::SheppLogan => spatial_kernel(kind, 0, tau) + kernel_tail(kind, 1, tau),
        FilterKind::Ramp if k >= 1 => {
            // sum over odd n >= k of 1/n^2, summed directly up to a cutoff
            // and completed with the integral of the remainder
            const TERMS: i64 = 100_000;
            let first = if k % 2 == 1 { k } else { k + 1 };
            let mut acc = 0.0;
            for m in (0..TERMS).rev() {
                let n = (first + 2 * m) as f64;
                acc += 1.0 / (n * n);
            }
            let cut = (first + 2 * TERMS) as f64 - 1.0;
            acc += 1.0 / (2.0 * cut);
            -acc / (PI * PI * tau)
        }
        FilterKind::Ramp => spatial_kernel(kind, 0, tau) + kernel_tail(kind, 1, tau),
        FilterKind::None => {
            if k <= 0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

impl FilterKernel {
    /// Kernel sized for `n_det` detectors: FFT length is the next power of
    /// two at or above `2 * n_det`.
    pub fn new(kind: FilterKind, n_det: usize, det_spacing: f64) -> Result<Self> {
        Self::with_length(kind, (2 * n_det.max(1)).next_power_of_two(), det_spacing)
    }

    /// The spatial kernel is sampled exactly at offsets `|n| < L/2`; the
    /// Nyquist tap `n = L/2`, never reached by a zero-padded row of at most
    /// `L/2` samples, absorbs the truncated tail so the DC response is 0.
    pub fn with_length(kind: FilterKind, length: usize, det_spacing: f64) -> Result<Self> {
        if length < 2 || !length.is_multiple_of(2) {
            return Err(Error::Invalid(format!(
                "filter length {length} must be even and >= 2"
            )));
        }
        if !(det_spacing > 0.0) {
            return Err(Error::Invalid(format!(
                "detector spacing must be positive, got {det_spacing}"
            )));
        }
        let response = if kind == FilterKind::None {
            vec![1.0; length]
        } else {
            let half = length / 2;
            let mut spatial = vec![rustfft::num_complex::Complex::new(0.0, 0.0); length];
            for (k, z) in spatial.iter_mut().enumerate() {
                let offset = if k <= half {
                    k as i64
                } else {
                    k as i64 - length as i64
                };
                z.re = spatial_kernel(kind, offset, det_spacing);
            }
            let rest: f64 = spatial
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != half)
                .map(|(_, z)| z.re)
                .sum();
            spatial[half].re = -rest;
            let mut planner = rustfft::FftPlanner::<f64>::new();
            planner.plan_fft_forward(length).process(&mut spatial);
            let mut r: Vec<f64> = spatial.iter().map(|z| z.re).collect();
            r[0] = 0.0;
            r
        };
        Ok(FilterKernel {
            kind,
            det_spacing,
            response,
        })
    }

    pub fn kind(&self) -> FilterKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    pub fn det_spacing(&self) -> f64 {
        self.det_spacing
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    /// The kernel as a row filter for rows of `self.len() / 2` or fewer.
    pub fn spectral<T: Real>(&self) -> Result<SpectralFilter<T>> {
        self.spectral_for::<T>(self.len() / 2)
    }

    /// Row filter for rows of `row_len` samples, extended past both ends
    /// with their edge values.
    pub fn spectral_for<T: Real>(&self, row_len: usize) -> Result<SpectralFilter<T>> {
        if 2 * row_len > self.len() {
            return Err(Error::Invalid(format!(
                "filter length {} shorter than twice the detector count {row_len}",
                self.len()
            )));
        }
        let filter =
            SpectralFilter::new(row_len, self.response.iter().map(|&v| T::lit(v)).collect())?;
        if self.kind == FilterKind::None {
            return Ok(filter);
        }
        let mut tail = vec![0.0; row_len + 1];
        tail[row_len] = kernel_tail(self.kind, row_len as i64, self.det_spacing);
        for k in (0..row_len).rev() {
            tail[k] = tail[k + 1] + spatial_kernel(self.kind, k as i64, self.det_spacing);
        }
        filter.with_edge_tail(tail.into_iter().map(T::lit).collect())
    }
}

/// Filters every view row independently in the Fourier domain.
pub fn filter_sinogram(sino: &Sinogram, kernel: &FilterKernel) -> Result<Sinogram> {
    let filter = kernel.spectral_for::<f64>(sino.n_det())?;
    if (kernel.det_spacing() - sino.det_spacing()).abs() > 1e-9 * sino.det_spacing() {
        return Err(Error::Invalid(format!(
            "filter built for detector spacing {}, sinogram has {}",
            kernel.det_spacing(),
            sino.det_spacing()
        )));
    }
    let rows: Vec<f64> = sino.data().iter().map(|&v| v as f64).collect();
    let mut out = vec![0.0; rows.len()];
    filter.apply(&rows, &mut out);
    sino.with_data(out.into_iter().map(|v| v as f32).collect())
}

/// Back-projects an already-filtered sinogram: `(pi / Nv) * sum of views`,
/// masked to the field of view. This is the exact computation the learned
/// layer performs with unit weights.
pub fn backproject_filtered(filtered: &Sinogram, n: usize, pixel_size: f64) -> Result<Image> {
    if filtered.n_views() == 0 {
        return Err(Error::Invalid(
            "cannot back-project an empty sinogram".into(),
        ));
    }
    let tau = filtered.det_spacing() / pixel_size;
    let sum = smear_views(filtered.data(), filtered.angles(), filtered.n_det(), tau, n);
    let scale = (PI / filtered.n_views() as f64) as f32;
    let mask = fov_mask(n);
    let data = sum
        .iter()
        .zip(&mask)
        .map(|(&v, &m)| if m { v * scale } else { 0.0 })
        .collect();
    Image::new(n, pixel_size, data)
}

/// Filtered back-projection onto an `n x n` grid whose pixel size equals the
/// detector spacing.
pub fn fbp(sino: &Sinogram, kernel: &FilterKernel, n: usize) -> Result<Image> {
    if sino.n_views() == 0 {
        return Err(Error::Invalid(
            "cannot reconstruct an empty sinogram".into(),
        ));
    }
    let filtered = filter_sinogram(sino, kernel)?;
    backproject_filtered(&filtered, n, sino.det_spacing())
}

/// Inputs of the learned stage derived from one few-view sinogram.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineProducts {
    /// Few-view FBP reconstruction.
    pub fbp_image: Image,
    /// Dense-view reprojection of `fbp_image`.
    pub dense_sino: Sinogram,
    /// `dense_sino` after Shepp-Logan filtering.
    pub filtered_dense_sino: Sinogram,
}

/// Few-view sinogram -> FBP image -> dense reprojection -> filtered dense
/// sinogram. `nv_dense` defaults to twice the few-view count.
pub fn prepare_inputs(
    fewview: &Sinogram,
    n: usize,
    nv_dense: Option<usize>,
) -> Result<PipelineProducts> {
    let kernel = FilterKernel::new(
        FilterKind::SheppLogan,
        fewview.n_det(),
        fewview.det_spacing(),
    )?;
    let fbp_image = fbp(fewview, &kernel, n)?;
    let nv_dense = nv_dense.unwrap_or(2 * fewview.n_views());
    if nv_dense == 0 {
        return Err(Error::Invalid("dense view count must be >= 1".into()));
    }
    let dense_sino = radon(&fbp_image, &equispaced_angles(nv_dense), fewview.n_det())?;
    let filtered_dense_sino = filter_sinogram(&dense_sino, &kernel)?;
    Ok(PipelineProducts {
        fbp_image,
        dense_sino,
        filtered_dense_sino,
    })
}
