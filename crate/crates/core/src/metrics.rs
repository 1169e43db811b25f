//! Image quality metrics and test-set evaluation of reconstruction methods.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::analytic::backproject_filtered;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::Generator;
use crate::train::loss::{mae_images, ssim_images, SsimParams};

/// Peak value for PSNR on normalized images.
pub const PEAK: f64 = 1.0;

/// PSNR in dB; identical images have no finite value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Psnr {
    Finite(f64),
    Infinite(InfiniteTag),
}

/// Serialized form of the infinite PSNR sentinel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InfiniteTag {
    #[serde(rename = "+inf")]
    Inf,
}

impl Psnr {
    pub const INFINITE: Psnr = Psnr::Infinite(InfiniteTag::Inf);

    pub fn finite(self) -> Option<f64> {
        match self {
            Psnr::Finite(v) => Some(v),
            Psnr::Infinite(_) => None,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v:.2}"),
            Psnr::Infinite(_) => f.write_str("+inf"),
        }
    }
}

fn check_same(op: &'static str, x: &Image, y: &Image) -> Result<()> {
    if x.n() != y.n() {
        return Err(Error::shape(
            op,
            format!("images {} and {} differ in size", x.n(), y.n()),
        ));
    }
    Ok(())
}

/// `10 log10(peak^2 / MSE)`.
pub fn psnr(x: &Image, y: &Image, peak: f64) -> Result<Psnr> {
    check_same("psnr", x, y)?;
    if !(peak > 0.0) {
        return Err(Error::Invalid(format!("psnr peak must be > 0, got {peak}")));
    }
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / x.data().len() as f64;
    Ok(if mse == 0.0 {
        Psnr::INFINITE
    } else {
        Psnr::Finite(10.0 * (peak * peak / mse).log10())
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub psnr: Psnr,
    pub ssim: f64,
    pub mae: f64,
}

pub fn score(x: &Image, truth: &Image, ssim: &SsimParams) -> Result<ImageScores> {
    check_same("score", x, truth)?;
    Ok(ImageScores {
        psnr: psnr(x, truth, PEAK)?,
        ssim: ssim_images(x, truth, ssim)?,
        mae: mae_images(x, truth)?,
    })
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        if values.is_empty() {
            return Stat {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Stat {
            mean,
            std: var.sqrt(),
        }
    }
}

impl fmt::Display for Stat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

/// PSNR aggregate; a single infinite value makes the mean infinite and the
/// spread undefined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsnrStat {
    pub mean: Psnr,
    pub std: Option<f64>,
}

impl PsnrStat {
    pub fn of(values: &[Psnr]) -> PsnrStat {
        let finite: Option<Vec<f64>> = values.iter().map(|p| p.finite()).collect();
        match finite {
            Some(v) => {
                let s = Stat::of(&v);
                PsnrStat {
                    mean: Psnr::Finite(s.mean),
                    std: Some(s.std),
                }
            }
            None => PsnrStat {
                mean: Psnr::INFINITE,
                std: None,
            },
        }
    }
}

impl fmt::Display for PsnrStat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.std {
            Some(s) => write!(f, "{} ± {s:.2}", self.mean),
            None => write!(f, "{}", self.mean),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub label: String,
    pub psnr: PsnrStat,
    pub ssim: Stat,
    pub mae: Stat,
    pub per_image: Vec<ImageScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub count: usize,
    pub methods: Vec<MethodReport>,
}

impl MetricReport {
    pub fn method(&self, label: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.label == label)
    }

    /// Fixed-width table of mean ± std per method.
    pub fn table(&self) -> String {
        let width = self
            .methods
            .iter()
            .map(|m| m.label.len())
            .max()
            .unwrap_or(6)
            .max(6);
        let mut s = format!(
            "{:<width$}  {:>16}  {:>17}  {:>17}\n",
            "method", "PSNR (dB)", "SSIM", "MAE"
        );
        for m in &self.methods {
            s += &format!(
                "{:<width$}  {:>16}  {:>17}  {:>17}\n",
                m.label,
                m.psnr.to_string(),
                m.ssim.to_string(),
                m.mae.to_string()
            );
        }
        s += &format!("({} test images)\n", self.count);
        s
    }
}

type RunFn<'a> = dyn Fn(&Dataset) -> Result<Vec<Image>> + 'a;

/// A labelled reconstruction procedure applied to a whole test set.
pub struct Method<'a> {
    pub label: String,
    run: Box<RunFn<'a>>,
}

impl<'a> Method<'a> {
    pub fn new(
        label: impl Into<String>,
        run: impl Fn(&Dataset) -> Result<Vec<Image>> + 'a,
    ) -> Self {
        Method {
            label: label.into(),
            run: Box::new(run),
        }
    }

    /// Ground truth itself (sanity row).
    pub fn ground_truth() -> Self {
        Method::new("Ground-truth", |d: &Dataset| {
            Ok(d.samples().iter().map(|s| s.target.clone()).collect())
        })
    }

    /// FBP of the few-view sinogram.
    pub fn fbp_fewview() -> Self {
        Method::new("FBP-fewview", |d: &Dataset| {
            Ok(d.samples().iter().map(|s| s.fbp().clone()).collect())
        })
    }

    /// Classical back-projection of the dense reprojected sinogram, i.e. the
    /// image the learned layer starts from.
    pub fn fbp_dense() -> Self {
        Method::new("FBP-dense", |d: &Dataset| {
            d.samples()
                .iter()
                .map(|s| backproject_filtered(s.filtered(), s.target.n(), s.target.pixel_size()))
                .collect()
        })
    }

    /// Intermediate output of a generator's learned back-projection.
    pub fn deer_bp(label: impl Into<String>, gen: &'a Generator<f32>) -> Self {
        Method::new(label, move |d: &Dataset| {
            let out = gen.reconstruct_dataset(d)?;
            out.into_iter()
                .map(|r| {
                    r.bp.ok_or_else(|| {
                        Error::Invalid("variant has no back-projection layer".into())
                    })
                })
                .collect()
        })
    }

    /// Refined generator output.
    pub fn generator(label: impl Into<String>, gen: &'a Generator<f32>) -> Self {
        Method::new(label, move |d: &Dataset| {
            Ok(gen
                .reconstruct_dataset(d)?
                .into_iter()
                .map(|r| r.out)
                .collect())
        })
    }
}

/// Scores every method on every test image; methods keep their order.
pub fn evaluate(methods: &[Method<'_>], test: &Dataset, ssim: &SsimParams) -> Result<MetricReport> {
    if methods.is_empty() {
        return Err(Error::Invalid("evaluate needs at least one method".into()));
    }
    if test.is_empty() {
        return Err(Error::Invalid("evaluate needs a non-empty test set".into()));
    }
    let mut reports = Vec::with_capacity(methods.len());
    for m in methods {
        let images = (m.run)(test)?;
        if images.len() != test.len() {
            return Err(Error::shape(
                "evaluate",
                format!(
                    "method {} returned {} images for {} samples",
                    m.label,
                    images.len(),
                    test.len()
                ),
            ));
        }
        let per_image = images
            .iter()
            .zip(test.samples())
            .map(|(img, s)| {
                if img.n() != s.target.n() {
                    return Err(Error::shape(
                        "evaluate",
                        format!(
                            "method {} produced {}px images, ground truth is {}px",
                            m.label,
                            img.n(),
                            s.target.n()
                        ),
                    ));
                }
                score(img, &s.target, ssim)
            })
            .collect::<Result<Vec<_>>>()?;
        let psnrs: Vec<Psnr> = per_image.iter().map(|s| s.psnr).collect();
        let ssims: Vec<f64> = per_image.iter().map(|s| s.ssim).collect();
        let maes: Vec<f64> = per_image.iter().map(|s| s.mae).collect();
        reports.push(MethodReport {
            label: m.label.clone(),
            psnr: PsnrStat::of(&psnrs),
            ssim: Stat::of(&ssims),
            mae: Stat::of(&maes),
            per_image,
        });
    }
    Ok(MetricReport {
        count: test.len(),
        methods: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Geometry, Split};

    fn constant(n: usize, v: f32) -> Image {
        Image::new(n, 1.0, vec![v; n * n]).unwrap()
    }

    #[test]
    fn psnr_hand_cases() {
        let a = constant(8, 0.3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), Psnr::INFINITE);
        assert_eq!(
            psnr(&constant(8, 0.0), &constant(8, 1.0), 1.0).unwrap(),
            Psnr::Finite(0.0)
        );
        let p = psnr(&constant(8, 0.5), &constant(8, 0.4), 1.0)
            .unwrap()
            .finite()
            .unwrap();
        assert!((p - 20.0).abs() < 1e-5, "{p}");
        assert!(psnr(&a, &constant(9, 0.3), 1.0).is_err());
        assert!(psnr(&a, &a, 0.0).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let base = constant(16, 0.5);
        let mut last = f64::INFINITY;
        for amp in [0.01f32, 0.02, 0.05, 0.1, 0.2] {
            let noisy: Vec<f32> = (0..256)
                .map(|k| 0.5 + if k % 2 == 0 { amp } else { -amp })
                .collect();
            let p = psnr(&Image::new(16, 1.0, noisy).unwrap(), &base, 1.0)
                .unwrap()
                .finite()
                .unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn infinite_psnr_serializes_as_sentinel() {
        let json = serde_json::to_string(&Psnr::INFINITE).unwrap();
        assert_eq!(json, "\"+inf\"");
        assert_eq!(serde_json::from_str::<Psnr>(&json).unwrap(), Psnr::INFINITE);
        assert_eq!(serde_json::to_string(&Psnr::Finite(20.5)).unwrap(), "20.5");
        let stat = PsnrStat::of(&[Psnr::Finite(3.0), Psnr::INFINITE]);
        assert_eq!(stat.mean, Psnr::INFINITE);
        assert_eq!(stat.to_string(), "+inf");
    }

    #[test]
    fn evaluation_of_ground_truth_and_baselines() {
        let test = Dataset::simulate(Geometry::new(32, 6), Split::Test, 0, 3).unwrap();
        let methods = [
            Method::fbp_fewview(),
            Method::ground_truth(),
            Method::fbp_dense(),
        ];
        let report = evaluate(&methods, &test, &SsimParams::default()).unwrap();
        assert_eq!(report.count, 3);
        let labels: Vec<_> = report.methods.iter().map(|m| m.label.as_str()).collect();
        assert_eq!(labels, ["FBP-fewview", "Ground-truth", "FBP-dense"]);
        let gt = report.method("Ground-truth").unwrap();
        assert_eq!(gt.ssim.mean, 1.0);
        assert_eq!(gt.mae.mean, 0.0);
        assert_eq!(gt.psnr.mean, Psnr::INFINITE);
        let fbp = report.method("FBP-fewview").unwrap();
        assert!(fbp.ssim.mean < 1.0 && fbp.mae.mean > 0.0 && fbp.mae.std >= 0.0);
        assert!(report.table().contains("FBP-fewview"));
        assert_eq!(
            report,
            evaluate(&methods, &test, &SsimParams::default()).unwrap()
        );
    }

    #[test]
    fn single_image_has_zero_spread() {
        let test = Dataset::simulate(Geometry::new(32, 6), Split::Test, 0, 1).unwrap();
        let report = evaluate(&[Method::fbp_fewview()], &test, &SsimParams::default()).unwrap();
        assert_eq!(report.methods[0].mae.std, 0.0);
        assert_eq!(report.methods[0].ssim.std, 0.0);
    }

    #[test]
    fn rejects_empty_and_inconsistent_methods() {
        let test = Dataset::simulate(Geometry::new(32, 6), Split::Test, 0, 1).unwrap();
        assert!(evaluate(&[], &test, &SsimParams::default()).is_err());
        let wrong = Method::new("wrong", |d: &Dataset| Ok(vec![constant(16, 0.0); d.len()]));
        assert!(evaluate(&[wrong], &test, &SsimParams::default()).is_err());
    }
}
