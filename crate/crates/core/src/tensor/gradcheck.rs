//! Finite-difference certification of the autodiff operators.
//!
//! Each check feeds random `f64` inputs through an operator, projects the
//! output onto a random direction `r` and compares the reverse-mode gradient
//! of `<r, op(x)>` with central differences of the forward pass alone.
//!
//! Inputs are drawn on a dyadic grid and the step is a power of two, so
//! `x ± h` is exact; a linear operator such as the identity then reproduces
//! its gradient without rounding error.

use rand::Rng;

use super::{Graph, Tensor, Var};
use crate::analytic::{FilterKernel, FilterKind};
use crate::error::Result;

/// Central-difference step, 2^-17 (about 7.6e-6).
pub const FD_STEP: f64 = 1.0 / 131_072.0;

/// Points closer than this to a ReLU/abs kink are resampled.
pub const KINK_MARGIN: f64 = 1e-4;

type BuildFn = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync;

/// One operator (or composite) to certify.
pub struct OpSpec {
    pub name: String,
    /// Shapes of the inputs; all are differentiated.
    pub inputs: Vec<Vec<usize>>,
    build: Box<BuildFn>,
}

impl OpSpec {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Vec<usize>>,
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        OpSpec {
            name: name.into(),
            inputs,
            build: Box::new(build),
        }
    }

    fn eval(&self, xs: &[Vec<f64>], grad: bool) -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let mut vars = Vec::with_capacity(xs.len());
        for (shape, data) in self.inputs.iter().zip(xs) {
            let t = Tensor::new(shape.clone(), data.clone())?.with_requires_grad(grad);
            vars.push(g.input(&t));
        }
        let out = (self.build)(&mut g, &vars)?;
        Ok((g, vars, out))
    }
}

fn dyadic(rng: &mut impl Rng) -> f64 {
    // multiples of 2^-12 in [-1, 1]
    rng.random_range(-4096i32..=4096) as f64 / 4096.0
}

/// Max over `trials` of `|g_ad - g_fd| / max(|g_fd|, eps)`.
pub fn grad_check(spec: &OpSpec, trials: usize, rng: &mut impl Rng) -> Result<f64> {
    const EPS: f64 = 1e-12;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        // Sample until every kink is comfortably far away.
        let mut attempt = 0;
        let (xs, graph, vars, out) = loop {
            let xs: Vec<Vec<f64>> = spec
                .inputs
                .iter()
                .map(|s| {
                    (0..s.iter().product::<usize>())
                        .map(|_| dyadic(rng))
                        .collect()
                })
                .collect();
            let (g, vars, out) = spec.eval(&xs, true)?;
            attempt += 1;
            if g.min_kink_distance() >= KINK_MARGIN || attempt > 1000 {
                break (xs, g, vars, out);
            }
        };
        let r: Vec<f64> = (0..graph.value(out).len()).map(|_| dyadic(rng)).collect();

        let mut graph = graph;
        let rv = graph.constant(graph.shape(out).to_vec(), r.clone())?;
        let prod = graph.mul(out, rv)?;
        let loss = graph.sum(prod);
        let grads = graph.backward(loss)?;

        let mut diff2 = 0.0;
        let mut ref2 = 0.0;
        for (k, &v) in vars.iter().enumerate() {
            let ad = grads
                .get(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; xs[k].len()]);
            for i in 0..xs[k].len() {
                let mut plus = xs.clone();
                plus[k][i] += FD_STEP;
                let mut minus = xs.clone();
                minus[k][i] -= FD_STEP;
                let (gp, _, op) = spec.eval(&plus, false)?;
                let (gm, _, om) = spec.eval(&minus, false)?;
                let fd: f64 = gp
                    .value(op)
                    .iter()
                    .zip(gm.value(om))
                    .zip(&r)
                    .map(|((a, b), w)| (a - b) / (2.0 * FD_STEP) * w)
                    .sum();
                diff2 += (ad[i] - fd).powi(2);
                ref2 += fd * fd;
            }
        }
        worst = worst.max(diff2.sqrt() / ref2.sqrt().max(EPS));
    }
    Ok(worst)
}

/// Every operator used by the reconstruction network, at small sizes.
pub fn certification_suite() -> Vec<OpSpec> {
    let sl = FilterKernel::new(FilterKind::SheppLogan, 8, 1.0).expect("valid filter");
    let sl_filter = sl.spectral::<f64>().expect("valid filter");
    vec![
        OpSpec::new("identity", vec![vec![3, 4]], |g, x| g.reshape(x[0], [12])),
        OpSpec::new("add", vec![vec![5], vec![5]], |g, x| g.add(x[0], x[1])),
        OpSpec::new("sub", vec![vec![5], vec![5]], |g, x| g.sub(x[0], x[1])),
        OpSpec::new("multiply", vec![vec![5], vec![5]], |g, x| g.mul(x[0], x[1])),
        OpSpec::new("divide", vec![vec![5], vec![5]], |g, x| {
            let sq = g.mul(x[1], x[1])?;
            let den = g.add_scalar(sq, 0.5);
            g.div(x[0], den)
        }),
        OpSpec::new("scale", vec![vec![6]], |g, x| {
            let s = g.scale(x[0], -1.75);
            Ok(g.add_scalar(s, 0.25))
        }),
        OpSpec::new("relu", vec![vec![12]], |g, x| Ok(g.relu(x[0]))),
        OpSpec::new("leaky-relu", vec![vec![12]], |g, x| {
            Ok(g.leaky_relu(x[0], 0.2))
        }),
        OpSpec::new("abs", vec![vec![12]], |g, x| Ok(g.abs(x[0]))),
        OpSpec::new("sum", vec![vec![2, 3]], |g, x| Ok(g.sum(x[0]))),
        OpSpec::new("mean", vec![vec![2, 3]], |g, x| Ok(g.mean(x[0]))),
        OpSpec::new("sum-axis", vec![vec![2, 3, 4]], |g, x| g.sum_axis(x[0], 1)),
        OpSpec::new(
            "concat",
            vec![vec![1, 2, 3, 3], vec![1, 1, 3, 3]],
            |g, x| g.concat(&[x[0], x[1]], 1),
        ),
        OpSpec::new("matmul", vec![vec![3, 4], vec![4, 2]], |g, x| {
            g.matmul(x[0], x[1])
        }),
        OpSpec::new("linear", vec![vec![2, 5], vec![3, 5], vec![3]], |g, x| {
            g.linear(x[0], x[1], Some(x[2]))
        }),
        OpSpec::new(
            "conv2d",
            vec![vec![1, 1, 8, 8], vec![2, 1, 5, 5], vec![2]],
            |g, x| g.conv2d(x[0], x[1], Some(x[2]), 1, 0),
        ),
        OpSpec::new(
            "conv2d-stride2-pad1",
            vec![vec![2, 2, 7, 7], vec![3, 2, 3, 3], vec![3]],
            |g, x| g.conv2d(x[0], x[1], Some(x[2]), 2, 1),
        ),
        OpSpec::new(
            "transpose-conv2d",
            vec![vec![1, 2, 4, 4], vec![2, 2, 5, 5], vec![2]],
            |g, x| g.conv_transpose2d(x[0], x[1], Some(x[2]), 1, 0),
        ),
        OpSpec::new(
            "transpose-conv2d-same",
            vec![vec![2, 2, 6, 6], vec![2, 1, 5, 5]],
            |g, x| g.conv_transpose2d(x[0], x[1], None, 1, 2),
        ),
        OpSpec::new(
            "point-wise-linear",
            vec![vec![2, 3, 4], vec![3, 4, 5]],
            |g, x| g.pointwise_lines(x[0], x[1]),
        ),
        OpSpec::new(
            "point-wise-linear-shared",
            vec![vec![2, 3, 4], vec![5]],
            |g, x| g.pointwise_lines(x[0], x[1]),
        ),
        OpSpec::new("bilinear-rotate", vec![vec![1, 1, 8, 8]], |g, x| {
            g.rotate(x[0], &[30f64.to_radians()], 8, 1.0)
        }),
        OpSpec::new("bilinear-rotate-views", vec![vec![2, 3, 6, 5]], |g, x| {
            g.rotate(x[0], &[0.1, 1.2, 2.9], 7, 1.25)
        }),
        OpSpec::new("fourier-filter", vec![vec![3, 8]], move |g, x| {
            g.fourier_filter(x[0], &sl_filter)
        }),
        OpSpec::new("crop", vec![vec![1, 2, 6, 6]], |g, x| {
            g.crop2d(x[0], 1, 2, 3, 4)
        }),
        OpSpec::new("reflect-pad", vec![vec![1, 1, 4, 5]], |g, x| {
            g.pad2d_reflect(x[0], 2)
        }),
        OpSpec::new(
            "composite-bp-refine",
            vec![vec![1, 4, 6], vec![4, 6, 6], vec![2, 2, 3, 3]],
            |g, x| {
                let lines = g.pointwise_lines(x[0], x[1])?;
                let rot = g.rotate(lines, &[0.0, 0.7, 1.6, 2.4], 6, 1.0)?;
                let bp = g.sum_axis(rot, 1)?;
                let bp = g.reshape(bp, [1, 1, 6, 6])?;
                let two = g.concat(&[bp, bp], 1)?;
                let c = g.conv2d(two, x[2], None, 1, 1)?;
                let a = g.leaky_relu(c, 0.2);
                let m = g.abs(a);
                Ok(g.mean(m))
            },
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = &certification_suite()[0];
        assert_eq!(spec.name, "identity");
        assert_eq!(grad_check(spec, 5, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // value of |x| but gradient of relu(x): misses the negative side
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let wrong = OpSpec::new("wrong", vec![vec![4]], |g, x| {
            let a = g.abs(x[0]);
            let v = g.value(a).to_vec();
            let c = g.constant([4], v)?;
            let r = g.relu(x[0]);
            let diff = g.sub(c, r)?;
            let d = g.constant([4], g.value(diff).to_vec())?;
            g.add(r, d)
        });
        assert!(grad_check(&wrong, 3, &mut rng).unwrap() > 1e-2);
    }
}
