use crate::{Float, ParamId, ParamStore, Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    /// `beta1 = 0.5` as in common image-translation GAN setups.
    fn default() -> Self {
        AdamConfig {
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Float> AdamState<T> {
    /// Zeroed moments shaped like the parameters `ids` in `store`.
    pub fn new(store: &ParamStore<T>, ids: &[ParamId], config: AdamConfig) -> Self {
        let zeros = |id: &ParamId| vec![T::zero(); store.get(*id).numel()];
        AdamState {
            config,
            step_count: 0,
            first_moment: ids.iter().map(zeros).collect(),
            second_moment: ids.iter().map(zeros).collect(),
        }
    }
}

/// One bias-corrected Adam update of the parameters `ids`, reading their
/// accumulated gradients from `store`.
pub fn adam_step<T: Float>(
    store: &mut ParamStore<T>,
    ids: &[ParamId],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if lr.is_nan() || lr < 0.0 {
        return Err(TensorError::invalid(
            "adam_step",
            format!("learning rate {lr} must be >= 0"),
        ));
    }
    if ids.len() != state.first_moment.len() || ids.len() != state.second_moment.len() {
        return Err(TensorError::invalid(
            "adam_step",
            format!("{} parameters but state tracks {}", ids.len(), state.first_moment.len()),
        ));
    }
    for (k, id) in ids.iter().enumerate() {
        let n = store.get(*id).numel();
        if state.first_moment[k].len() != n || state.second_moment[k].len() != n {
            return Err(TensorError::mismatch(
                "adam_step",
                store.get(*id).shape(),
                &[state.first_moment[k].len()],
            ));
        }
    }

    state.step_count += 1;
    let c = state.config;
    let t = state.step_count as i32;
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let bias1 = T::of(1.0 - c.beta1.powi(t));
    let bias2 = T::of(1.0 - c.beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(c.epsilon));
    for (k, id) in ids.iter().enumerate() {
        let (theta, grad) = store.get_mut(*id).data_and_grad_mut();
        let m = &mut state.first_moment[k];
        let v = &mut state.second_moment[k];
        for i in 0..theta.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
