use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments for every slot of a store.
#[derive(Debug, Clone)]
pub struct OptState<T: Real = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> OptState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, s)| Tensor::zeros(s.value.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One AdamW update of every trainable slot from its grad:
///
/// ```text
/// p <- p * (1 - lr * wd)
/// m <- b1 m + (1 - b1) g,   v <- b2 v + (1 - b2) g²
/// p <- p - lr * m̂ / (sqrt(v̂) + eps)
/// ```
pub fn adamw_step<T: Real>(store: &mut ParamStore<T>, state: &mut OptState<T>, lr: f64, hp: &AdamWParams) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer state covers {} slots, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = T::lit(1.0 - hp.beta1.powi(t));
    let bc2 = T::lit(1.0 - hp.beta2.powi(t));
    let (b1, b2) = (T::lit(hp.beta1), T::lit(hp.beta2));
    let (lr_t, eps) = (T::lit(lr), T::lit(hp.eps));
    let decay = T::lit(1.0 - lr * hp.weight_decay);
    for (i, slot) in store.slots_mut().enumerate() {
        if !slot.trainable {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if m.shape() != slot.value.shape() {
            return Err(Error::shape("adamw_step", m.shape(), slot.value.shape()));
        }
        let grads = slot.grad.data();
        for (((p, &g), mi), vi) in slot
            .value
            .data_mut()
            .iter_mut()
            .zip(grads)
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *p *= decay;
            *mi = b1 * *mi + (T::one() - b1) * g;
            *vi = b2 * *vi + (T::one() - b2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(p: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(p));
        s.slot_mut(id).grad = Tensor::scalar(g);
        s
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut s = scalar_store(0.7, 0.0);
        let mut st = OptState::new(&s);
        let hp = AdamWParams { weight_decay: 0.0, ..Default::default() };
        for _ in 0..5 {
            adamw_step(&mut s, &mut st, 0.1, &hp).unwrap();
        }
        assert_eq!(s.value(s.ids().next().unwrap()).data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0, 1.0);
        let mut st = OptState::new(&s);
        let hp = AdamWParams { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut s, &mut st, 0.1, &hp).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let expect = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.value(s.ids().next().unwrap()).data()[0] - expect).abs() < 1e-15);
        assert!((expect - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decay_alone_scales_exactly() {
        let mut s = scalar_store(2.0, 0.0);
        let mut st = OptState::new(&s);
        adamw_step(&mut s, &mut st, 0.1, &AdamWParams::default()).unwrap();
        assert_eq!(s.value(s.ids().next().unwrap()).data()[0], 2.0 * (1.0 - 0.1 * 0.05));
    }

    #[test]
    fn frozen_slots_and_zero_lr_untouched() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("a", Tensor::vector(vec![1.0, -2.0]));
        let b = s.add_frozen("b", Tensor::vector(vec![3.0]));
        s.slot_mut(a).grad = Tensor::vector(vec![0.5, 0.5]);
        s.slot_mut(b).grad = Tensor::vector(vec![9.0]);
        let mut st = OptState::new(&s);
        adamw_step(&mut s, &mut st, 0.0, &AdamWParams::default()).unwrap();
        assert_eq!(s.value(a).data(), &[1.0, -2.0]);
        adamw_step(&mut s, &mut st, 0.1, &AdamWParams::default()).unwrap();
        assert_eq!(s.value(b).data(), &[3.0]);
        assert_ne!(s.value(a).data(), &[1.0, -2.0]);
    }

    #[test]
    fn mismatched_state_rejected() {
        let mut s = scalar_store(1.0, 1.0);
        let mut st = OptState::new(&ParamStore::<f64>::new());
        assert!(adamw_step(&mut s, &mut st, 0.1, &AdamWParams::default()).is_err());
    }

    #[test]
    fn matches_hand_rolled_two_steps() {
        let mut s = scalar_store(0.5, 0.3);
        let mut st = OptState::new(&s);
        let hp = AdamWParams::default();
        let id = s.ids().next().unwrap();
        adamw_step(&mut s, &mut st, 0.01, &hp).unwrap();
        s.slot_mut(id).grad = Tensor::scalar(-0.2);
        adamw_step(&mut s, &mut st, 0.02, &hp).unwrap();

        let (b1, b2, eps, wd) = (0.9f64, 0.999f64, 1e-8, 0.05);
        let (mut p, mut m, mut v) = (0.5f64, 0.0, 0.0);
        for (t, (g, lr)) in [(0.3, 0.01), (-0.2, 0.02)].into_iter().enumerate() {
            p *= 1.0 - lr * wd;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let k = t as i32 + 1;
            p -= lr * (m / (1.0 - b1.powi(k))) / ((v / (1.0 - b2.powi(k))).sqrt() + eps);
        }
        assert!((s.value(id).data()[0] - p).abs() < 1e-15);
    }
}
