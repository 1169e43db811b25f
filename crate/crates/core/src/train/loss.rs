//! Training objectives, built as graph expressions so that the same code
//! computes values, gradients and the evaluation SSIM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{Variant, CLIP};
use crate::tensor::{Graph, Real, Var};

/// Weights of the generator objective and the critic constraint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_al: f64,
    pub lambda_sl: f64,
    /// Kept for config compatibility; gradient penalty is not implemented.
    pub lambda_gp: f64,
    /// Critic weights are clamped to `[-clip_c, clip_c]` after each step.
    pub clip_c: f64,
}

impl LossWeights {
    pub fn for_variant(variant: Variant) -> Self {
        let (lambda_al, lambda_sl) = match variant {
            Variant::Deer | Variant::DeerLite | Variant::DeerFbp => (0.0025, 0.8),
            Variant::DeerNowgan => (0.0, 0.8),
            Variant::DeerSino => (0.002, 0.65),
        };
        LossWeights {
            lambda_al,
            lambda_sl,
            lambda_gp: 0.0,
            clip_c: CLIP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lambda_al", self.lambda_al),
            ("lambda_sl", self.lambda_sl),
            ("lambda_gp", self.lambda_gp),
            ("clip_c", self.clip_c),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.lambda_al > 0.0 && self.clip_c == 0.0 {
            return Err(Error::Config(
                "adversarial training needs clip_c > 0".into(),
            ));
        }
        Ok(())
    }

    /// Whether a critic is trained at all.
    pub fn adversarial(&self) -> bool {
        self.lambda_al > 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SsimWindow {
    /// Box window: every pixel of the window weighs the same.
    Uniform,
    /// Gaussian window with sigma 1.5.
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimParams {
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the images.
    pub range: f64,
    pub window: usize,
    pub weighting: SsimWindow,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            k1: 0.01,
            k2: 0.03,
            range: 1.0,
            window: 11,
            weighting: SsimWindow::Uniform,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.range).powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c1() > 0.0 && self.c2() > 0.0 && self.c1().is_finite() && self.c2().is_finite()) {
            return Err(Error::Config(format!(
                "ssim constants must be positive (k1 {}, k2 {}, range {})",
                self.k1, self.k2, self.range
            )));
        }
        if self.window == 0 {
            return Err(Error::Config("ssim window must be >= 1".into()));
        }
        Ok(())
    }

    /// Normalized window weights, row-major `window x window`.
    pub fn weights(&self) -> Vec<f64> {
        let w = self.window;
        let raw: Vec<f64> = match self.weighting {
            SsimWindow::Uniform => vec![1.0; w * w],
            SsimWindow::Gaussian => {
                let c = (w as f64 - 1.0) / 2.0;
                let s2 = 2.0 * 1.5f64.powi(2);
                (0..w * w)
                    .map(|k| {
                        let (i, j) = ((k / w) as f64 - c, (k % w) as f64 - c);
                        (-(i * i + j * j) / s2).exp()
                    })
                    .collect()
            }
        };
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

fn check_pair<T: Real>(g: &Graph<T>, op: &'static str, x: Var, y: Var) -> Result<()> {
    let (sx, sy) = (g.shape(x), g.shape(y));
    if sx != sy {
        return Err(Error::shape(op, format!("{sx:?} vs {sy:?}")));
    }
    if sx.is_empty() || sx[0] == 0 {
        return Err(Error::shape(
            op,
            format!("need a non-empty batch, got {sx:?}"),
        ));
    }
    Ok(())
}

/// Mean absolute error `mean |y - x|` over every element.
pub fn mae<T: Real>(g: &mut Graph<T>, x: Var, y: Var) -> Result<Var> {
    check_pair(g, "loss_mae", x, y)?;
    let d = g.sub(y, x)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Mean SSIM over all valid windows of a `[B, 1, H, W]` batch.
pub fn ssim<T: Real>(g: &mut Graph<T>, x: Var, y: Var, p: &SsimParams) -> Result<Var> {
    check_pair(g, "ssim", x, y)?;
    p.validate()?;
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape(
            "ssim",
            format!("expected [B, 1, H, W], got {s:?}"),
        ));
    }
    if s[2] < p.window || s[3] < p.window {
        return Err(Error::shape(
            "ssim",
            format!("image {}x{} smaller than window {}", s[2], s[3], p.window),
        ));
    }
    let win = g.constant(
        [1, 1, p.window, p.window],
        p.weights().into_iter().map(T::lit).collect(),
    )?;
    let (c1, c2) = (T::lit(p.c1()), T::lit(p.c2()));
    let local = |g: &mut Graph<T>, v: Var| g.conv2d(v, win, None, 1, 0);

    let mu_x = local(g, x)?;
    let mu_y = local(g, y)?;
    let xx = g.mul(x, x)?;
    let yy = g.mul(y, y)?;
    let xy = g.mul(x, y)?;
    let e_xx = local(g, xx)?;
    let e_yy = local(g, yy)?;
    let e_xy = local(g, xy)?;

    let mu_xx = g.mul(mu_x, mu_x)?;
    let mu_yy = g.mul(mu_y, mu_y)?;
    let mu_xy = g.mul(mu_x, mu_y)?;
    let var_x = g.sub(e_xx, mu_xx)?;
    let var_y = g.sub(e_yy, mu_yy)?;
    let cov = g.sub(e_xy, mu_xy)?;

    let two = T::lit(2.0);
    let lum_num = g.scale(mu_xy, two);
    let lum_num = g.add_scalar(lum_num, c1);
    let con_num = g.scale(cov, two);
    let con_num = g.add_scalar(con_num, c2);
    let lum_den = g.add(mu_xx, mu_yy)?;
    let lum_den = g.add_scalar(lum_den, c1);
    let con_den = g.add(var_x, var_y)?;
    let con_den = g.add_scalar(con_den, c2);

    let num = g.mul(lum_num, con_num)?;
    let den = g.mul(lum_den, con_den)?;
    let map = g.div(num, den)?;
    Ok(g.mean(map))
}

/// `1 - ssim(x, y)`.
pub fn structural<T: Real>(g: &mut Graph<T>, x: Var, y: Var, p: &SsimParams) -> Result<Var> {
    let s = ssim(g, x, y, p)?;
    let neg = g.scale(s, -T::one());
    Ok(g.add_scalar(neg, T::one()))
}

/// `-mean(D(fake))` from the critic scores of generated images.
pub fn adversarial<T: Real>(g: &mut Graph<T>, fake_scores: Var) -> Var {
    let m = g.mean(fake_scores);
    g.scale(m, -T::one())
}

/// `mean(D(fake)) - mean(D(real))`, minimized by the critic.
pub fn discriminator<T: Real>(g: &mut Graph<T>, fake_scores: Var, real_scores: Var) -> Result<Var> {
    let f = g.mean(fake_scores);
    let r = g.mean(real_scores);
    g.sub(f, r)
}

/// Scalar components of the generator objective.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms {
    pub l1: Var,
    pub l1_bp: Option<Var>,
    pub structural: Var,
    pub adversarial: Option<Var>,
}

/// `lambda_al * L_al + lambda_sl * L_sl + L1 + L1_bp`.
pub fn generator_total<T: Real>(
    g: &mut Graph<T>,
    terms: &GeneratorTerms,
    w: &LossWeights,
) -> Result<Var> {
    let sl = g.scale(terms.structural, T::lit(w.lambda_sl));
    let mut total = g.add(terms.l1, sl)?;
    if let Some(bp) = terms.l1_bp {
        total = g.add(total, bp)?;
    }
    if let (Some(al), true) = (terms.adversarial, w.lambda_al != 0.0) {
        let al = g.scale(al, T::lit(w.lambda_al));
        total = g.add(total, al)?;
    }
    Ok(total)
}

fn image_pair(x: &Image, y: &Image) -> Result<(Graph<f64>, Var, Var)> {
    if x.n() != y.n() {
        return Err(Error::shape(
            "image pair",
            format!("{} vs {}", x.n(), y.n()),
        ));
    }
    let n = x.n();
    let mut g = Graph::new();
    let to64 = |img: &Image| img.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    let xv = g.constant([1, 1, n, n], to64(x))?;
    let yv = g.constant([1, 1, n, n], to64(y))?;
    Ok((g, xv, yv))
}

/// SSIM of two images, evaluated in f64 with the training implementation.
pub fn ssim_images(x: &Image, y: &Image, p: &SsimParams) -> Result<f64> {
    let (mut g, xv, yv) = image_pair(x, y)?;
    let s = ssim(&mut g, xv, yv, p)?;
    Ok(g.scalar(s))
}

/// Mean absolute error of two images in f64.
pub fn mae_images(x: &Image, y: &Image) -> Result<f64> {
    let (mut g, xv, yv) = image_pair(x, y)?;
    let m = mae(&mut g, xv, yv)?;
    Ok(g.scalar(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn batch<T: Real>(g: &mut Graph<T>, shape: &[usize], data: &[f64]) -> Var {
        g.constant(shape.to_vec(), data.iter().map(|&v| T::lit(v)).collect())
            .unwrap()
    }

    #[test]
    fn mae_hand_cases() {
        let mut g = Graph::<f64>::new();
        let x = batch(&mut g, &[1, 2], &[0.5, 0.5]);
        let y = batch(&mut g, &[1, 2], &[1.0, 0.0]);
        let l = mae(&mut g, x, y).unwrap();
        assert_eq!(g.scalar(l), 0.5);
        let same = mae(&mut g, x, x).unwrap();
        assert_eq!(g.scalar(same), 0.0);

        let mut g = Graph::<f32>::new();
        let x = batch(&mut g, &[2, 1, 3, 3], &[0.0; 18]);
        let y = batch(&mut g, &[2, 1, 3, 3], &[1.0; 18]);
        let l = mae(&mut g, x, y).unwrap();
        assert!((g.scalar(l) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn mae_rejects_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = batch(&mut g, &[1, 2], &[0.0; 2]);
        let y = batch(&mut g, &[1, 3], &[0.0; 3]);
        assert!(mae(&mut g, x, y).is_err());
    }

    #[test]
    fn ssim_of_constant_images() {
        let p = SsimParams::default();
        let mut g = Graph::<f64>::new();
        let x = batch(&mut g, &[1, 1, 16, 16], &[0.0; 256]);
        let y = batch(&mut g, &[1, 1, 16, 16], &[1.0; 256]);
        let s = ssim(&mut g, x, y, &p).unwrap();
        let c1 = 0.01f64 * 0.01;
        let expected = c1 / (1.0 + c1);
        assert!(
            (g.scalar(s) - expected).abs() < 1e-15,
            "{} vs {expected}",
            g.scalar(s)
        );
        assert!((expected - 9.9990e-5).abs() < 1e-9);
    }

    fn wavy(n: usize, phase: f64) -> Vec<f64> {
        (0..n * n)
            .map(|k| {
                let (i, j) = ((k / n) as f64, (k % n) as f64);
                0.5 + 0.3 * (0.4 * i + phase).sin() * (0.3 * j).cos()
            })
            .collect()
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let p = SsimParams::default();
        let mut g = Graph::<f64>::new();
        let x = batch(&mut g, &[1, 1, 20, 20], &wavy(20, 0.0));
        let y = batch(&mut g, &[1, 1, 20, 20], &wavy(20, 0.7));
        let same = ssim(&mut g, x, x, &p).unwrap();
        assert!((g.scalar(same) - 1.0).abs() < 1e-12);
        let xy = ssim(&mut g, x, y, &p).unwrap();
        let yx = ssim(&mut g, y, x, &p).unwrap();
        assert_eq!(g.scalar(xy), g.scalar(yx));
        assert!(g.scalar(xy) < 1.0);
    }

    #[test]
    fn ssim_rejects_images_smaller_than_window() {
        let mut g = Graph::<f64>::new();
        let x = batch(&mut g, &[1, 1, 8, 8], &[0.0; 64]);
        assert!(ssim(&mut g, x, x, &SsimParams::default()).is_err());
    }

    #[test]
    fn gaussian_window_is_normalized_and_peaked() {
        let p = SsimParams {
            weighting: SsimWindow::Gaussian,
            ..SsimParams::default()
        };
        let w = p.weights();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w[60] > w[0]);
    }

    #[test]
    fn structural_loss_decreases_towards_target() {
        let p = SsimParams::default();
        let (target, start) = (wavy(24, 0.0), wavy(24, 2.0));
        let mut last = f64::INFINITY;
        for step in 0..10 {
            let t = step as f64 / 9.0;
            let x: Vec<f64> = start
                .iter()
                .zip(&target)
                .map(|(a, b)| (1.0 - t) * a + t * b)
                .collect();
            let mut g = Graph::<f64>::new();
            let xv = batch(&mut g, &[1, 1, 24, 24], &x);
            let yv = batch(&mut g, &[1, 1, 24, 24], &target);
            let l = structural(&mut g, xv, yv, &p).unwrap();
            let v = g.scalar(l);
            assert!((0.0..2.0).contains(&v));
            assert!(v < last, "step {step}: {v} !< {last}");
            last = v;
        }
        assert!(last.abs() < 1e-12);
    }

    #[test]
    fn adversarial_of_constant_critic() {
        let mut g = Graph::<f64>::new();
        let scores = batch(&mut g, &[3], &[0.25; 3]);
        let l = adversarial(&mut g, scores);
        assert_eq!(g.scalar(l), -0.25);
        let d = discriminator(&mut g, scores, scores).unwrap();
        assert_eq!(g.scalar(d), 0.0);
    }

    #[test]
    fn generator_total_combines_terms() {
        let mut g = Graph::<f64>::new();
        let mut s = |v: f64| g.constant(Vec::<usize>::new(), vec![v]).unwrap();
        let terms = GeneratorTerms {
            l1: s(0.5),
            l1_bp: Some(s(0.25)),
            structural: s(0.125),
            adversarial: Some(s(-2.0)),
        };
        let w = LossWeights::for_variant(Variant::Deer);
        let total = generator_total(&mut g, &terms, &w).unwrap();
        assert_eq!(g.scalar(total), 0.0025 * -2.0 + 0.8 * 0.125 + 0.5 + 0.25);

        let nowgan = LossWeights::for_variant(Variant::DeerNowgan);
        let total = generator_total(&mut g, &terms, &nowgan).unwrap();
        assert_eq!(g.scalar(total), 0.8 * 0.125 + 0.5 + 0.25);

        let zero = g.constant(Vec::<usize>::new(), vec![0.0]).unwrap();
        let zeros = GeneratorTerms {
            l1: zero,
            l1_bp: Some(zero),
            structural: zero,
            adversarial: Some(zero),
        };
        let total = generator_total(&mut g, &zeros, &w).unwrap();
        assert_eq!(g.scalar(total), 0.0);
    }

    #[test]
    fn variant_weights() {
        let w = LossWeights::for_variant(Variant::Deer);
        assert_eq!((w.lambda_al, w.lambda_sl), (0.0025, 0.8));
        let w = LossWeights::for_variant(Variant::DeerNowgan);
        assert_eq!((w.lambda_al, w.lambda_sl), (0.0, 0.8));
        assert!(!w.adversarial());
        let bad = LossWeights {
            lambda_sl: -1.0,
            ..w
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn total_gradient_is_weighted_sum_of_component_gradients() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 12;
        let xs: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect();
        let bs: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect();
        let ys: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect();
        let ss: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = SsimParams::default();
        let w = LossWeights {
            lambda_al: 0.3,
            lambda_sl: 0.7,
            lambda_gp: 0.0,
            clip_c: 0.01,
        };
        let shape = [1usize, 1, n, n];
        // which: None = total, Some(k) = component k
        let grads = |which: Option<usize>| {
            let mut g = Graph::<f64>::new();
            let x = g.input(&Tensor::param(shape, xs.clone()).unwrap());
            let b = g.input(&Tensor::param(shape, bs.clone()).unwrap());
            let sc = g.input(&Tensor::param([2], ss.clone()).unwrap());
            let y = g.constant(shape, ys.clone()).unwrap();
            let terms = GeneratorTerms {
                l1: mae(&mut g, x, y).unwrap(),
                l1_bp: Some(mae(&mut g, b, y).unwrap()),
                structural: structural(&mut g, x, y, &p).unwrap(),
                adversarial: Some(adversarial(&mut g, sc)),
            };
            let loss = match which {
                None => generator_total(&mut g, &terms, &w).unwrap(),
                Some(0) => terms.l1,
                Some(1) => terms.l1_bp.unwrap(),
                Some(2) => terms.structural,
                _ => terms.adversarial.unwrap(),
            };
            let gr = g.backward(loss).unwrap();
            let pick = |v: Var| {
                gr.get(v)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; g.shape(v).iter().product()])
            };
            [pick(x), pick(b), pick(sc)].concat()
        };
        let total = grads(None);
        let weights = [1.0, 1.0, w.lambda_sl, w.lambda_al];
        let mut combined = vec![0.0; total.len()];
        for (k, &wk) in weights.iter().enumerate() {
            for (c, v) in combined.iter_mut().zip(grads(Some(k))) {
                *c += wk * v;
            }
        }
        for (a, b) in total.iter().zip(&combined) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
            assert!(rel < 1e-5 || (a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }
}
