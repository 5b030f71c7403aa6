use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2: `weight_decay * param` is added to the gradient before
    /// the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// One bias-corrected Adam update at learning rate `lr`.
pub fn adam_step(params: &mut [Tensor], grads: &[Vec<f32>], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.first.len());
    state.step += 1;
    let AdamConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let t = state.step as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        assert_eq!(p.len(), g.len());
        for (((w, &gw), m), v) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
            let grad = gw as f64 + weight_decay * *w as f64;
            let m_new = beta1 * *m as f64 + (1.0 - beta1) * grad;
            let v_new = beta2 * *v as f64 + (1.0 - beta2) * grad * grad;
            *m = m_new as f32;
            *v = v_new as f32;
            let update = lr * (m_new / bias1) / ((v_new / bias2).sqrt() + eps);
            *w = (*w as f64 - update) as f32;
        }
    }
}

/// Step decay: `initial_lr * gamma^floor(step_index / step_size)`.
pub fn scheduler_lr(initial_lr: f64, step_index: u64, gamma: f64, step_size: u64) -> f64 {
    initial_lr * gamma.powi((step_index / step_size.max(1)) as i32)
}
