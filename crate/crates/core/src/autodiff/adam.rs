use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled multiplicative decay applied to every weight before the
    /// update: `p *= 1 - weight_decay`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update. Gradients are checked before anything is modified, so
/// a non-finite gradient leaves weights and moments untouched.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    for ((id, p), g) in store.iter().zip(grads) {
        if g.shape() != p.value.shape() {
            return Err(Error::Shape(format!("gradient shape mismatch for {}", store.name(id))));
        }
        if !g.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient for parameter {}",
                p.name
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let c1 = T::one() - b1;
    let c2 = T::one() - b2;
    // bias corrections folded into the step size
    let step = lr * (1.0 - cfg.beta2.powi(t)).sqrt() / (1.0 - cfg.beta1.powi(t));
    let step = T::from_f64(step);
    let eps_hat = T::from_f64(cfg.eps * (1.0 - cfg.beta2.powi(t)).sqrt());
    let keep = T::from_f64(1.0 - cfg.weight_decay);
    for (i, g) in grads.iter().enumerate() {
        let p = store.get_mut(super::ParamId(i)).data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + c1 * gj;
            v[j] = b2 * v[j] + c2 * gj * gj;
            p[j] = p[j] * keep - step * m[j] / (v[j].sqrt() + eps_hat);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_vec([1, 1, 1, 3], vec![1.0f64, -2.0, 0.5]).unwrap());
        let mut state = AdamState::new(&store);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let g = Tensor::from_vec([1, 1, 1, 3], vec![0.3, -4.0, 0.0]).unwrap();
        adam_step(&mut store, &[g], &mut state, &cfg, 0.01).unwrap();
        let p = store.get(id).data();
        assert!((p[0] - 0.99).abs() < 1e-6);
        assert!((p[1] + 1.99).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn minimises_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::filled([1, 1, 1, 2], 3.0f64));
        let mut state = AdamState::new(&store);
        let cfg = AdamConfig::default();
        for _ in 0..2000 {
            let g = Tensor::from_vec([1, 1, 1, 2], store.get(id).data().iter().map(|&x| 2.0 * (x - 1.0)).collect()).unwrap();
            adam_step(&mut store, &[g], &mut state, &cfg, 0.01).unwrap();
        }
        assert!(store.get(id).data().iter().all(|&x| (x - 1.0).abs() < 1e-2));
    }

    #[test]
    fn nan_gradient_is_rejected_without_side_effects() {
        let mut store = ParamStore::new();
        store.add("p", Tensor::filled([1, 1, 1, 2], 1.0f32));
        let before = store.clone();
        let mut state = AdamState::new(&store);
        let g = Tensor::from_vec([1, 1, 1, 2], vec![f32::NAN, 1.0]).unwrap();
        let err = adam_step(&mut store, &[g], &mut state, &AdamConfig::default(), 0.1).unwrap_err();
        assert!(err.is_numerical());
        assert_eq!(store, before);
        assert_eq!(state.step_count(), 0);
    }
}
