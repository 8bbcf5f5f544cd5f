//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use std::f64::consts::PI;

use crate::tensor::{Element, ParamStore, Tensor};
use crate::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Which parameters receive weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecayPolicy {
    All,
    /// Rank ≥ 2 tensors only; norms, biases and 1-D vectors are not decayed.
    MatricesOnly,
}

/// First/second moment estimates and the step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T: Element> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub decay: Vec<bool>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParamStore<T>, policy: DecayPolicy) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
            decay: params
                .iter()
                .map(|(_, t)| policy == DecayPolicy::All || t.rank() >= 2)
                .collect(),
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// One AdamW update of every parameter, `grads` in registry order.
///
/// ```text
/// m ← β1·m + (1-β1)·g          v ← β2·v + (1-β2)·g²
/// p ← p·(1 - lr·wd) - lr · m̂ / (√v̂ + ε)
/// ```
pub fn adamw_step<T: Element>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(
            "adamw",
            format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (id, g) in params.ids().zip(grads) {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of '{}'", params.name(id))));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let ids: Vec<_> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let p = params.get(id);
        let g = &grads[i];
        if g.shape() != p.shape() {
            return Err(Error::shape(
                "adamw",
                format!("'{}': grad {:?} vs param {:?}", params.name(id), g.shape(), p.shape()),
            ));
        }
        let shrink = if state.decay[i] { 1.0 - lr * weight_decay } else { 1.0 };
        let n = p.numel();
        let (mut m, mut v, mut out) = (state.m[i].to_vec(), state.v[i].to_vec(), Vec::with_capacity(n));
        for k in 0..n {
            let gk = g.data()[k].f64();
            let mk = b1 * m[k].f64() + (1.0 - b1) * gk;
            let vk = b2 * v[k].f64() + (1.0 - b2) * gk * gk;
            m[k] = T::of(mk);
            v[k] = T::of(vk);
            let step = lr * (mk / c1) / ((vk / c2).sqrt() + eps);
            out.push(T::of(p.data()[k].f64() * shrink - step));
        }
        let shape = p.shape().to_vec();
        state.m[i] = Tensor::new(shape.clone(), m)?;
        state.v[i] = Tensor::new(shape.clone(), v)?;
        params.set(id, Tensor::new(shape, out)?)?;
    }
    Ok(())
}

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then cosine decay
/// towards 0 at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1) as f64;
    let progress = ((step - warmup_steps) as f64 / span).min(1.0);
    0.5 * base_lr * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn hand_computed_first_step() {
        let mut s = store(1.0);
        let mut st = AdamState::new(&s, DecayPolicy::All);
        adamw_step(&mut s, &[Tensor::scalar(0.5)], &mut st, 0.1, 0.01).unwrap();
        // m̂ = 0.5, v̂ = 0.25, step = 0.1·0.5/(0.5+1e-8); decay 1 - 0.001
        let expect = 1.0 * (1.0 - 0.1 * 0.01) - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((s.get(s.id("w").unwrap()).item() - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_cases() {
        let mut s = store(2.0);
        let mut st = AdamState::new(&s, DecayPolicy::All);
        adamw_step(&mut s, &[Tensor::scalar(0.0)], &mut st, 0.1, 0.0).unwrap();
        assert_eq!(s.get(s.id("w").unwrap()).item(), 2.0);
        adamw_step(&mut s, &[Tensor::scalar(0.0)], &mut st, 0.1, 0.5).unwrap();
        assert_eq!(s.get(s.id("w").unwrap()).item(), 2.0 * (1.0 - 0.05));
        assert!(adamw_step(&mut s, &[Tensor::scalar(f64::NAN)], &mut st, 0.1, 0.0).is_err());
    }

    #[test]
    fn schedule_landmarks() {
        let (total, warm, base) = (100, 10, 1e-3);
        assert_eq!(lr_schedule(0, total, warm, base), 0.0);
        assert_eq!(lr_schedule(warm, total, warm, base), base);
        assert!((lr_schedule(55, total, warm, base) - base / 2.0).abs() < 1e-9 * base);
        assert!(lr_schedule(total - 1, total, warm, base) < 1e-3 * base);
    }
}
