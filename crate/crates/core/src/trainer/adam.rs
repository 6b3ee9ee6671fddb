//! Bias-corrected Adam (and plain SGD) over named flat tensors.

use crate::error::{Error, Result};

use super::config::{AdamHyper, OptimizerKind};

#[derive(Clone, Debug)]
struct Moments {
    name: String,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    hyper: AdamHyper,
    step: u64,
    moments: Vec<Moments>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Largest `|θ_new - θ_old|` over every updated element.
    pub max_abs_update: f64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, hyper: AdamHyper) -> Self {
        Optimizer {
            kind,
            hyper,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every parameter in place. `params` and `grads` must list the
    /// same tensors in the same order. A non-finite gradient aborts the
    /// whole step before anything is written.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut [f64])],
        grads: &[(String, &[f64])],
        lr: f64,
    ) -> Result<StepStats> {
        if params.len() != grads.len() {
            return Err(Error::DimensionMismatch {
                context: "optimizer tensor count",
                expected: params.len(),
                found: grads.len(),
            });
        }
        for ((pn, p), (gn, g)) in params.iter().zip(grads) {
            if pn != gn || p.len() != g.len() {
                return Err(Error::invalid(format!(
                    "gradient `{gn}` ({}) does not match parameter `{pn}` ({})",
                    g.len(),
                    p.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{gn}`")));
            }
        }
        if self.kind == OptimizerKind::Adam {
            if self.moments.is_empty() {
                self.moments = params
                    .iter()
                    .map(|(n, p)| Moments {
                        name: n.clone(),
                        m: vec![0.0; p.len()],
                        v: vec![0.0; p.len()],
                    })
                    .collect();
            } else if self.moments.len() != params.len()
                || self
                    .moments
                    .iter()
                    .zip(params.iter())
                    .any(|(mo, (n, p))| &mo.name != n || mo.m.len() != p.len())
            {
                return Err(Error::invalid(
                    "parameter set changed between optimizer steps",
                ));
            }
        }

        self.step += 1;
        let mut max_abs_update: f64 = 0.0;
        match self.kind {
            OptimizerKind::Sgd => {
                for ((_, p), (_, g)) in params.iter_mut().zip(grads) {
                    for (pi, gi) in p.iter_mut().zip(g.iter()) {
                        let old = *pi;
                        *pi -= lr * gi;
                        max_abs_update = max_abs_update.max((*pi - old).abs());
                    }
                }
            }
            OptimizerKind::Adam => {
                let AdamHyper { beta1, beta2, eps } = self.hyper;
                let t = self.step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for (((_, p), (_, g)), mo) in params.iter_mut().zip(grads).zip(&mut self.moments) {
                    for i in 0..p.len() {
                        let gi = g[i];
                        mo.m[i] = beta1 * mo.m[i] + (1.0 - beta1) * gi;
                        mo.v[i] = beta2 * mo.v[i] + (1.0 - beta2) * gi * gi;
                        let m_hat = mo.m[i] / bc1;
                        let v_hat = mo.v[i] / bc2;
                        let old = p[i];
                        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                        max_abs_update = max_abs_update.max((p[i] - old).abs());
                    }
                }
            }
        }
        Ok(StepStats { max_abs_update })
    }
}
