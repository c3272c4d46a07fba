//! Quasi-hyperbolic Adam.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numeric::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QhAdamConfig {
    pub nu1: f64,
    pub nu2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for QhAdamConfig {
    fn default() -> Self {
        QhAdamConfig {
            nu1: 0.7,
            nu2: 1.0,
            beta1: 0.95,
            beta2: 0.998,
            eps: 1e-8,
        }
    }
}

impl QhAdamConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("qh_nu1", self.nu1), ("qh_nu2", self.nu2)] {
            if !(0.0..=1.0).contains(&v) {
                return invalid(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return invalid(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if !(self.eps > 0.0) {
            return invalid("eps must be > 0");
        }
        Ok(())
    }
}

/// Moment estimates per parameter tensor. Each tensor keeps its own step
/// count so tensors frozen for a while start with proper bias correction.
#[derive(Clone, Debug)]
pub struct QhAdam {
    pub config: QhAdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: Vec<u64>,
}

impl QhAdam {
    pub fn new(config: QhAdamConfig, params: &[&Matrix]) -> Result<QhAdam> {
        config.validate()?;
        Ok(QhAdam {
            config,
            m: params.iter().map(|p| Matrix::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Matrix::zeros(p.raw_dim())).collect(),
            t: vec![0; params.len()],
        })
    }

    /// One update of every tensor with `active[i]` set.
    pub fn step(
        &mut self,
        params: Vec<&mut Matrix>,
        grads: &[Matrix],
        lr: f64,
        active: &[bool],
    ) -> Result<()> {
        if params.len() != self.m.len()
            || grads.len() != params.len()
            || active.len() != params.len()
        {
            return invalid("optimizer state does not match the parameter list");
        }
        for (i, g) in grads.iter().enumerate() {
            if active[i] {
                if g.dim() != self.m[i].dim() {
                    return invalid(format!("gradient {i} has the wrong shape"));
                }
                if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient ({bad}) in parameter tensor {i}"
                    )));
                }
            }
        }
        let QhAdamConfig {
            nu1,
            nu2,
            beta1,
            beta2,
            eps,
        } = self.config;
        for (i, p) in params.into_iter().enumerate() {
            if !active[i] {
                continue;
            }
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            ndarray::Zip::from(p)
                .and(&grads[i])
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let num = (1.0 - nu1) * g + nu1 * (*m / c1);
                    let den = ((1.0 - nu2) * g * g + nu2 * (*v / c2)).sqrt() + eps;
                    // Skipping lr == 0 keeps signed zeros intact.
                    if lr != 0.0 {
                        *p -= lr * (num / den);
                    }
                });
        }
        Ok(())
    }
}
