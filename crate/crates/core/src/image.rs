//! Image and sinogram containers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square N x N grid of attenuation values, row-major, row 0 at the top.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    n: usize,
    pixel_size: f64,
    data: Vec<f32>,
}

impl Image {
    pub const MIN_SIZE: usize = 8;

    pub fn new(n: usize, pixel_size: f64, data: Vec<f32>) -> Result<Self> {
        if n < Self::MIN_SIZE {
            return Err(Error::Invalid(format!(
                "image side {n} < {}",
                Self::MIN_SIZE
            )));
        }
        if !(pixel_size > 0.0) {
            return Err(Error::Invalid(format!(
                "pixel size must be positive, got {pixel_size}"
            )));
        }
        if data.len() != n * n {
            return Err(Error::shape(
                "image",
                format!("{n}x{n} image needs {} values, got {}", n * n, data.len()),
            ));
        }
        Ok(Image {
            n,
            pixel_size,
            data,
        })
    }

    pub fn zeros(n: usize) -> Result<Self> {
        Self::new(n, 1.0, vec![0.0; n * n])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.n + col]
    }

    /// Returns a copy with every value multiplied by `factor`.
    pub fn scaled(&self, factor: f32) -> Image {
        Image {
            n: self.n,
            pixel_size: self.pixel_size,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn clamped(&self, lo: f32, hi: f32) -> Image {
        Image {
            n: self.n,
            pixel_size: self.pixel_size,
            data: self.data.iter().map(|v| v.clamp(lo, hi)).collect(),
        }
    }
}

/// Pixels inside the inscribed circle of an `n x n` grid (the field of view).
pub fn fov_mask(n: usize) -> Vec<bool> {
    let c = (n as f64 - 1.0) / 2.0;
    let r2 = (n as f64 / 2.0).powi(2);
    (0..n * n)
        .map(|k| {
            let (i, j) = ((k / n) as f64, (k % n) as f64);
            (j - c).powi(2) + (c - i).powi(2) <= r2
        })
        .collect()
}

/// Equispaced view angles `k * pi / count` over `[0, pi)`.
pub fn equispaced_angles(count: usize) -> Vec<f64> {
    (0..count)
        .map(|k| k as f64 * std::f64::consts::PI / count as f64)
        .collect()
}

/// Parallel-beam line integrals, one row per view.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    angles: Vec<f64>,
    n_det: usize,
    det_spacing: f64,
    data: Vec<f32>,
}

/// Acquisition geometry shared by a sinogram and its file header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinogramGeometry {
    pub angles: Vec<f64>,
    pub n_det: usize,
    pub det_spacing: f64,
}

impl Sinogram {
    pub fn new(angles: Vec<f64>, n_det: usize, det_spacing: f64, data: Vec<f32>) -> Result<Self> {
        if n_det < 1 {
            return Err(Error::Invalid("detector count must be >= 1".into()));
        }
        if !(det_spacing > 0.0) {
            return Err(Error::Invalid(format!(
                "detector spacing must be positive, got {det_spacing}"
            )));
        }
        let pi = std::f64::consts::PI;
        if angles.iter().any(|&a| !(0.0..pi).contains(&a)) {
            return Err(Error::Invalid("view angles must lie in [0, pi)".into()));
        }
        if angles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Invalid(
                "view angles must be strictly increasing".into(),
            ));
        }
        if data.len() != angles.len() * n_det {
            return Err(Error::shape(
                "sinogram",
                format!(
                    "{} views x {n_det} detectors needs {} values, got {}",
                    angles.len(),
                    angles.len() * n_det,
                    data.len()
                ),
            ));
        }
        Ok(Sinogram {
            angles,
            n_det,
            det_spacing,
            data,
        })
    }

    pub fn zeros(angles: Vec<f64>, n_det: usize, det_spacing: f64) -> Result<Self> {
        let len = angles.len() * n_det;
        Self::new(angles, n_det, det_spacing, vec![0.0; len])
    }

    pub fn geometry(&self) -> SinogramGeometry {
        SinogramGeometry {
            angles: self.angles.clone(),
            n_det: self.n_det,
            det_spacing: self.det_spacing,
        }
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    pub fn n_det(&self) -> usize {
        self.n_det
    }

    pub fn det_spacing(&self) -> f64 {
        self.det_spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, view: usize) -> &[f32] {
        &self.data[view * self.n_det..(view + 1) * self.n_det]
    }

    /// Same geometry, new values.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.angles.clone(), self.n_det, self.det_spacing, data)
    }
}
