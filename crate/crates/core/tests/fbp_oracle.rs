//! Filtered back-projection checked against a plain-loop reference:
//! direct spatial convolution with the Shepp-Logan kernel and per-pixel
//! linear interpolation of every filtered profile.

use std::f64::consts::PI;

use deer_core::analytic::{fbp, FilterKernel, FilterKind};
use deer_core::image::{equispaced_angles, fov_mask};
use deer_core::phantom::{make_phantom, PhantomSpec};
use deer_core::projector::radon;
use deer_core::{Image, Sinogram};

/// The row extended to infinity with its edge values, convolved with the
/// Shepp-Logan kernel by direct summation (the extension is truncated far
/// beyond where its contribution matters).
fn filter_row_direct(row: &[f64]) -> Vec<f64> {
    const REACH: i64 = 200_000;
    let d = row.len() as i64;
    let h = |offset: i64| -2.0 / (PI * PI * (4.0 * (offset * offset) as f64 - 1.0));
    (0..d)
        .map(|i| {
            let inside: f64 = (0..d).map(|m| row[m as usize] * h(i - m)).sum();
            let mut outside = 0.0;
            if row[0] != 0.0 {
                outside += row[0] * (-REACH..0).map(|m| h(i - m)).sum::<f64>();
            }
            if row[d as usize - 1] != 0.0 {
                outside += row[d as usize - 1] * (d..d + REACH).map(|m| h(i - m)).sum::<f64>();
            }
            inside + outside
        })
        .collect()
}

fn fbp_direct(sino: &Sinogram, n: usize) -> Vec<f64> {
    let nd = sino.n_det();
    let filtered: Vec<Vec<f64>> = (0..sino.n_views())
        .map(|v| {
            let row: Vec<f64> = sino.row(v).iter().map(|&x| x as f64).collect();
            filter_row_direct(&row)
        })
        .collect();
    let c = (n as f64 - 1.0) / 2.0;
    let cd = (nd as f64 - 1.0) / 2.0;
    let mask = fov_mask(n);
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if !mask[i * n + j] {
                continue;
            }
            let (x, y) = (j as f64 - c, c - i as f64);
            let mut acc = 0.0;
            for (v, &theta) in sino.angles().iter().enumerate() {
                let u = x * theta.cos() + y * theta.sin() + cd;
                let u0 = u.floor();
                let f = u - u0;
                let u0 = u0 as i64;
                let at = |k: i64| {
                    if k >= 0 && (k as usize) < nd {
                        filtered[v][k as usize]
                    } else {
                        0.0
                    }
                };
                acc += (1.0 - f) * at(u0) + f * at(u0 + 1);
            }
            out[i * n + j] = acc * PI / sino.n_views() as f64;
        }
    }
    out
}

fn fov_rmse(a: &[f64], b: &[f32], n: usize) -> f64 {
    let mask = fov_mask(n);
    let (mut sum, mut count) = (0.0, 0usize);
    for k in 0..n * n {
        if mask[k] {
            sum += (a[k] - b[k] as f64).powi(2);
            count += 1;
        }
    }
    (sum / count as f64).sqrt()
}

fn as_f64(img: &Image) -> Vec<f64> {
    img.data().iter().map(|&v| v as f64).collect()
}

#[test]
fn shepp_logan_round_trip_and_undersampling() {
    let n = 128;
    let phantom = make_phantom(&PhantomSpec::shepp_logan(), n).unwrap();
    let kernel = FilterKernel::new(FilterKind::SheppLogan, n, 1.0).unwrap();

    let dense = radon(&phantom, &equispaced_angles(180), n).unwrap();
    let reference = fbp_direct(&dense, n);
    let recon = fbp(&dense, &kernel, n).unwrap();

    let oracle_err = fov_rmse(&reference, phantom.data(), n);
    let fbp_err = fov_rmse(&as_f64(&recon), phantom.data(), n);
    assert!(oracle_err < 0.05, "reference FBP RMSE {oracle_err}");
    assert!(fbp_err < 0.05, "FBP RMSE {fbp_err}");

    // Both routes agree away from the rim, where the rotation kernel's
    // finite view plane can clip.
    let c = (n as f64 - 1.0) / 2.0;
    for i in 0..n {
        for j in 0..n {
            let r = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)).sqrt();
            if r < c - 2.0 {
                let k = i * n + j;
                let diff = (reference[k] - recon.data()[k] as f64).abs();
                assert!(diff < 1e-4, "pixel ({i},{j}): {diff}");
            }
        }
    }

    let few = radon(&phantom, &equispaced_angles(15), n).unwrap();
    let few_err = fov_rmse(&as_f64(&fbp(&few, &kernel, n).unwrap()), phantom.data(), n);
    assert!(
        few_err > fbp_err,
        "15-view RMSE {few_err} vs 180-view {fbp_err}"
    );
}

#[test]
fn fbp_is_linear_in_the_sinogram() {
    let n = 32;
    let angles = equispaced_angles(12);
    let a = radon(
        &make_phantom(&PhantomSpec::random(1), n).unwrap(),
        &angles,
        n,
    )
    .unwrap();
    let b = radon(
        &make_phantom(&PhantomSpec::random(2), n).unwrap(),
        &angles,
        n,
    )
    .unwrap();
    let sum = a
        .with_data(
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| 2.0 * x + y)
                .collect(),
        )
        .unwrap();
    let kernel = FilterKernel::new(FilterKind::SheppLogan, n, 1.0).unwrap();
    let (fa, fb, fs) = (
        fbp(&a, &kernel, n).unwrap(),
        fbp(&b, &kernel, n).unwrap(),
        fbp(&sum, &kernel, n).unwrap(),
    );
    for k in 0..n * n {
        let expect = 2.0 * fa.data()[k] + fb.data()[k];
        assert!((fs.data()[k] - expect).abs() < 1e-4, "pixel {k}");
    }
}

#[test]
fn zero_sinogram_reconstructs_to_zero() {
    let sino = Sinogram::zeros(equispaced_angles(9), 16, 1.0).unwrap();
    let kernel = FilterKernel::new(FilterKind::SheppLogan, 16, 1.0).unwrap();
    assert!(fbp(&sino, &kernel, 16)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));
}
