//! Synthetic ground-truth phantoms.
//!
//! Ellipse coordinates are normalized: the unit disk maps onto the image's
//! inscribed circle, `x` to the right and `y` up.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{fov_mask, Image};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: (f64, f64),
    /// Semi-axes along the ellipse's own x and y directions.
    pub axes: (f64, f64),
    /// Counter-clockwise rotation in radians.
    pub angle: f64,
    /// Added to every pixel whose center lies inside.
    pub intensity: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.axes.0).powi(2) + (v / self.axes.1).powi(2) <= 1.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    SheppLogan,
    RandomEllipses,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub seed: u64,
    pub ellipses: Vec<Ellipse>,
}

impl PhantomSpec {
    /// Modified Shepp-Logan head phantom (higher-contrast intensities).
    pub fn shepp_logan() -> Self {
        const TABLE: [(f64, f64, f64, f64, f64, f64); 10] = [
            // intensity, a, b, x0, y0, angle (degrees)
            (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
            (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
            (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
            (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
            (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
            (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
            (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
            (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
            (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
            (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
        ];
        let ellipses = TABLE
            .iter()
            .map(|&(i, a, b, x, y, deg)| Ellipse {
                center: (x, y),
                axes: (a, b),
                angle: f64::to_radians(deg),
                intensity: i,
            })
            .collect();
        PhantomSpec {
            kind: PhantomKind::SheppLogan,
            seed: 0,
            ellipses,
        }
    }

    /// Breast-like random phantom: a body ellipse, fibroglandular blobs
    /// and a few small bright spots. A pure function of `seed`.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ellipses = Vec::new();
        let ba = rng.random_range(0.55..0.85);
        let bb = rng.random_range(0.55..0.85);
        let body = Ellipse {
            center: (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)),
            axes: (ba, bb),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            intensity: rng.random_range(0.25..0.45),
        };
        ellipses.push(body);
        let blobs = rng.random_range(3..=7);
        for _ in 0..blobs {
            let r = rng.random_range(0.0..0.6) * ba.min(bb);
            let t = rng.random_range(0.0..std::f64::consts::TAU);
            ellipses.push(Ellipse {
                center: (body.center.0 + r * t.cos(), body.center.1 + r * t.sin()),
                axes: (rng.random_range(0.05..0.3), rng.random_range(0.05..0.3)),
                angle: rng.random_range(0.0..std::f64::consts::PI),
                intensity: rng.random_range(0.1..0.35),
            });
        }
        let spots = rng.random_range(0..=3);
        for _ in 0..spots {
            let r = rng.random_range(0.0..0.7) * ba.min(bb);
            let t = rng.random_range(0.0..std::f64::consts::TAU);
            let s = rng.random_range(0.025..0.06);
            ellipses.push(Ellipse {
                center: (body.center.0 + r * t.cos(), body.center.1 + r * t.sin()),
                axes: (s, s * rng.random_range(0.7..1.3)),
                angle: 0.0,
                intensity: rng.random_range(0.3..0.5),
            });
        }
        PhantomSpec {
            kind: PhantomKind::RandomEllipses,
            seed,
            ellipses,
        }
    }

    pub fn empty() -> Self {
        PhantomSpec {
            kind: PhantomKind::RandomEllipses,
            seed: 0,
            ellipses: Vec::new(),
        }
    }
}

/// Sub-samples per pixel along each axis.
const SUPERSAMPLE: usize = 4;

/// Rasterizes `spec` on an `n x n` grid. Each pixel holds the mean over a
/// 4x4 grid of sub-samples (partial-volume edges); values are clipped to
/// `[0, 1]` and pixels outside the field of view are zero.
pub fn make_phantom(spec: &PhantomSpec, n: usize) -> Result<Image> {
    if n < Image::MIN_SIZE {
        return Err(Error::Invalid(format!(
            "phantom side {n} < {}",
            Image::MIN_SIZE
        )));
    }
    for (k, e) in spec.ellipses.iter().enumerate() {
        if !(e.axes.0 > 0.0 && e.axes.1 > 0.0) {
            return Err(Error::Invalid(format!(
                "ellipse {k} has non-positive axes {:?}",
                e.axes
            )));
        }
    }
    let c = (n as f64 - 1.0) / 2.0;
    let half = n as f64 / 2.0;
    let offsets: Vec<f64> = (0..SUPERSAMPLE)
        .map(|a| (a as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5)
        .collect();
    let value = |x: f64, y: f64| -> f64 {
        spec.ellipses
            .iter()
            .filter(|e| e.contains(x, y))
            .map(|e| e.intensity)
            .sum()
    };
    let mask = fov_mask(n);
    let mut data = vec![0.0f32; n * n];
    for i in 0..n {
        for j in 0..n {
            if !mask[i * n + j] {
                continue;
            }
            let mut acc = 0.0;
            for dy in &offsets {
                for dx in &offsets {
                    acc += value((j as f64 + dx - c) / half, (c - i as f64 - dy) / half);
                }
            }
            let mean = acc / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            data[i * n + j] = mean.clamp(0.0, 1.0) as f32;
        }
    }
    Image::new(n, 1.0, data)
}
