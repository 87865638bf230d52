use crate::{AutodiffError, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the global gradient norm to at most this value before the
    /// update. `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Bias-corrected Adam update of one flat parameter buffer.
///
/// `step` is the 1-based update count used for bias correction.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    moments: &mut Moments,
    step: u64,
    cfg: &AdamConfig,
) -> Result<(), AutodiffError> {
    if moments.m.is_empty() && moments.v.is_empty() {
        moments.m = vec![0.0; params.len()];
        moments.v = vec![0.0; params.len()];
    }
    if grads.len() != params.len()
        || moments.m.len() != params.len()
        || moments.v.len() != params.len()
    {
        return Err(AutodiffError::ShapeMismatch {
            expected: vec![params.len()],
            found: vec![grads.len()],
        });
    }
    let bc1 = 1.0 - cfg.beta1.powf(step as f64);
    let bc2 = 1.0 - cfg.beta2.powf(step as f64);
    for i in 0..params.len() {
        let g = grads[i];
        let m = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
        moments.m[i] = m;
        moments.v[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Optimizer state for every trainable parameter of a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    moments: Vec<Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn moments(&self) -> &[Moments] {
        &self.moments
    }

    /// Applies one update from the store's accumulated gradients. Gradients
    /// are left in place; call [`ParamStore::zero_grad`] before the next
    /// accumulation.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), AutodiffError> {
        if self.moments.len() != store.len() {
            self.moments.resize_with(store.len(), Moments::default);
        }
        self.step += 1;
        let scale = match self.config.clip_norm {
            Some(max) => {
                let norm = store
                    .iter()
                    .filter(|p| p.trainable)
                    .flat_map(|p| p.grad.iter())
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (param, moments) in store.iter_mut().zip(&mut self.moments) {
            if !param.trainable {
                continue;
            }
            if scale == 1.0 {
                adam_update(
                    param.value.data_mut(),
                    &param.grad,
                    moments,
                    self.step,
                    &self.config,
                )?;
            } else {
                let g: Vec<f64> = param.grad.iter().map(|g| g * scale).collect();
                adam_update(param.value.data_mut(), &g, moments, self.step, &self.config)?;
            }
        }
        Ok(())
    }
}
