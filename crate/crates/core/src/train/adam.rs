//! Adam with bias correction over a network's named parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |b: f64| (0.0..1.0).contains(&b);
        if !ok(self.beta1) || !ok(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "adam needs beta1, beta2 in [0, 1) and eps > 0 (got {}, {}, {})",
                self.beta1, self.beta2, self.eps
            )));
        }
        Ok(())
    }
}

/// Moment estimates for one group of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Real = f32> {
    cfg: AdamConfig,
    step: u64,
    names: Vec<String>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    /// Zero moments shaped like `params`.
    pub fn new(cfg: AdamConfig, params: &[(String, &Tensor<T>)]) -> Self {
        Adam {
            cfg,
            step: 0,
            names: params.iter().map(|(n, _)| n.clone()).collect(),
            m: params
                .iter()
                .map(|(_, t)| vec![T::zero(); t.len()])
                .collect(),
            v: params
                .iter()
                .map(|(_, t)| vec![T::zero(); t.len()])
                .collect(),
        }
    }

    /// Restores saved moments; the names and lengths must match.
    pub fn from_state(
        cfg: AdamConfig,
        step: u64,
        names: Vec<String>,
        m: Vec<Vec<T>>,
        v: Vec<Vec<T>>,
    ) -> Result<Self> {
        if names.len() != m.len()
            || m.len() != v.len()
            || m.iter().zip(&v).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::shape("adam", "moment vectors do not line up"));
        }
        Ok(Adam {
            cfg,
            step,
            names,
            m,
            v,
        })
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.v
    }

    /// Applies one update from the gradients stored on `params` and clears
    /// them. Parameters without a stored gradient see a zero gradient. Any
    /// non-finite gradient aborts before a single value changes.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor<T>)>, lr: f64) -> Result<()> {
        if params.len() != self.names.len() {
            return Err(Error::shape(
                "adam",
                format!(
                    "{} parameters, optimizer tracks {}",
                    params.len(),
                    self.names.len()
                ),
            ));
        }
        for ((name, t), (known, m)) in params.iter().zip(self.names.iter().zip(&self.m)) {
            if name != known || t.len() != m.len() {
                return Err(Error::shape(
                    "adam",
                    format!("parameter `{name}` does not match `{known}`"),
                ));
            }
            if let Some(g) = t.grad() {
                if let Some((index, v)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        param: name.clone(),
                        index,
                        value: v.as_f64(),
                    });
                }
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
        let step_size = T::lit(lr / c1);
        let (inv_c2, eps) = (T::lit(1.0 / c2), T::lit(eps));
        for ((_, t), (m, v)) in params
            .into_iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let Some(g) = t.take_grad() else {
                // zero gradient: the moments still decay
                m.iter_mut().for_each(|x| *x *= b1);
                v.iter_mut().for_each(|x| *x *= b2);
                update(t.data_mut(), m, v, step_size, inv_c2, eps);
                continue;
            };
            for ((mi, vi), &gi) in m.iter_mut().zip(v.iter_mut()).zip(&g) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
            }
            update(t.data_mut(), m, v, step_size, inv_c2, eps);
        }
        Ok(())
    }
}

fn update<T: Real>(p: &mut [T], m: &[T], v: &[T], step_size: T, inv_c2: T, eps: T) {
    for ((pi, &mi), &vi) in p.iter_mut().zip(m).zip(v) {
        *pi -= step_size * mi / ((vi * inv_c2).sqrt() + eps);
    }
}
