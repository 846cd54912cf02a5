use crate::error::{shape_err, GradError, Result};
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(GradError::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(GradError::Config(format!(
                "betas must lie in [0,1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) {
            return Err(GradError::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Adam with bias correction. Moment buffers start at zero.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        let cfg = AdamConfig { lr, ..self.cfg };
        cfg.validate()?;
        self.cfg = cfg;
        Ok(())
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update; `grads` is aligned with the store's parameters.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(GradError::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        if self.m.is_empty() {
            self.m = store.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let step_size = T::lit(lr / bc1);
        let inv_bc2_sqrt = T::lit(1.0 / bc2.sqrt());
        let (b1, b2, eps) = (T::lit(beta1), T::lit(beta2), T::lit(eps));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        for ((id, g), (m, v)) in store.ids().collect::<Vec<_>>().into_iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let p = store.get_mut(id);
            if g.shape() != p.value.shape() {
                return Err(shape_err("adam", g.shape(), p.value.shape()));
            }
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let denom = vi.sqrt() * inv_bc2_sqrt + eps;
                *w -= step_size * *mi / denom;
            }
        }
        Ok(())
    }
}

/// One Adam update of a single tensor with explicit state, at step `t`
/// (1-based). Returns the updated parameters.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &[f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    cfg: &AdamConfig,
    t: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if t == 0 {
        return Err(GradError::Contract("adam step index is 1-based".into()));
    }
    if grads.len() != params.len() || m.len() != params.len() || v.len() != params.len() {
        return Err(shape_err("adam_step", &[params.len()], &[grads.len(), m.len(), v.len()]));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    Ok(params
        .iter()
        .zip(grads)
        .zip(m.iter_mut().zip(v.iter_mut()))
        .map(|((&w, &g), (mi, vi))| {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            w - cfg.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.eps)
        })
        .collect())
}
