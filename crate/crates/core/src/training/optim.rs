//! Adam with coupled L2 weight decay.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor4};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor4<T>>,
    pub v: Vec<Tensor4<T>>,
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<_> = store.ids().map(|id| Tensor4::zeros(store.shape(id))).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam step over every unfrozen parameter using the
/// gradients accumulated in `store`. `g += wd * p` precedes the moment
/// update. A non-finite gradient aborts before anything is modified.
pub fn adam_step<T: Element>(store: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64, weight_decay: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Config(format!(
            "optimizer state covers {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        if !store.grad(id).is_finite() {
            return Err(Error::NonFiniteGradient(store.name(id).to_string()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c = |v: f64| T::from_f64_lossy(v);
    let (b1, b2, eps, wd) = (c(BETA1), c(BETA2), c(EPSILON), c(weight_decay));
    let one = T::one();
    let bc1 = c(1.0 - BETA1.powi(t));
    let bc2 = c(1.0 - BETA2.powi(t));
    let lr = c(lr);
    for id in ids {
        if store.is_frozen(id) {
            continue;
        }
        let grad = store.grad(id).clone();
        let i = id.index();
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let p = store.value_mut(id).data_mut();
        for j in 0..p.len() {
            let g = grad.data()[j] + wd * p[j];
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64, g: f64) -> (ParamStore<f64>, crate::ParamId) {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor4::scalar(p)).unwrap();
        store.accumulate_grad(id, &Tensor4::scalar(g)).unwrap();
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut store, id) = single(0.7, 0.0);
        let mut st = AdamState::new(&store);
        adam_step(&mut store, &mut st, 1e-2, 0.0).unwrap();
        assert_eq!(store.value(id).data()[0], 0.7);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut store, id) = single(1.0, f64::NAN);
        let mut st = AdamState::new(&store);
        let err = adam_step(&mut store, &mut st, 1e-3, 0.0).unwrap_err();
        assert!(err.to_string().contains('p'));
        assert_eq!(store.value(id).data()[0], 1.0);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn frozen_params_do_not_move() {
        let (mut store, id) = single(1.0, 1.0);
        store.freeze_prefix("p");
        let mut st = AdamState::new(&store);
        adam_step(&mut store, &mut st, 1e-1, 0.0).unwrap();
        assert_eq!(store.value(id).data()[0], 1.0);
    }
}
