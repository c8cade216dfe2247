use crate::error::{AutodiffError, Result};
use crate::params::ParamSet;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one parameter set.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new<T: Real>(config: AdamConfig, params: &ParamSet<T>) -> Self {
        Self {
            config,
            first: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            second: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            step: 0,
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Rejects non-finite gradients before touching anything.
    pub fn step<T: Real>(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &[Tensor<T>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(AutodiffError::Invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if !(lr >= 0.0) {
            return Err(AutodiffError::Invalid(format!("learning rate {lr}")));
        }
        for (i, (g, p)) in grads.iter().zip(params.tensors()).enumerate() {
            if g.shape() != p.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam",
                    detail: format!("gradient {:?} for parameter {:?}", g.shape(), p.shape()),
                });
            }
            if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(AutodiffError::NonFiniteGradient {
                    name: params.names()[i].clone(),
                    index,
                });
            }
        }

        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, (g, p)) in grads.iter().zip(params.tensors_mut()).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gv = gv.to_f64().unwrap_or(f64::NAN);
                m[j] = beta1 * m[j] + (1.0 - beta1) * gv;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gv * gv;
                let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                if update != 0.0 {
                    *pv = T::of(pv.to_f64().unwrap_or(f64::NAN) - update);
                }
            }
        }
        Ok(())
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let f = T::of(max_norm / norm);
        grads.iter_mut().for_each(|g| g.scale_assign(f));
    }
    norm
}
