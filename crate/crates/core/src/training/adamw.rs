use serde::{Deserialize, Serialize};

use super::{Result, TrainingError};
use crate::model::Weights;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: T,
    pub v: T,
    pub t: u64,
}

impl AdamState<Vec<f64>> {
    pub fn for_len(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

impl AdamState<Weights> {
    pub fn for_weights(w: &Weights) -> Self {
        let mut zero = w.clone();
        zero.scale(0.0);
        Self {
            m: zero.clone(),
            v: zero,
            t: 0,
        }
    }
}

fn update(w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, c: &AdamWConfig) {
    let bc1 = 1.0 - c.beta1.powi(t as i32);
    let bc2 = 1.0 - c.beta2.powi(t as i32);
    for i in 0..w.len() {
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        w[i] -= c.lr * mhat / (vhat.sqrt() + c.eps) + c.lr * c.weight_decay * w[i];
    }
}

fn check_finite<'a>(tensors: impl IntoIterator<Item = (String, &'a [f64])>) -> Result<()> {
    for (name, t) in tensors {
        if let Some(index) = t.iter().position(|v| !v.is_finite()) {
            return Err(TrainingError::NonFiniteGradient {
                tensor: name,
                index,
                value: t[index],
            });
        }
    }
    Ok(())
}

/// One decoupled-weight-decay Adam step on a flat parameter vector.
pub fn adamw_step_slice(w: &mut [f64], g: &[f64], state: &mut AdamState<Vec<f64>>, c: &AdamWConfig) -> Result<()> {
    if w.len() != g.len() || state.m.len() != w.len() {
        return Err(TrainingError::InvalidArgument("parameter and gradient lengths differ".into()));
    }
    check_finite([("params".to_string(), g)])?;
    state.t += 1;
    update(w, g, &mut state.m, &mut state.v, state.t, c);
    Ok(())
}

/// One AdamW step over every model tensor. Refused, with nothing modified,
/// when any gradient entry is non-finite.
pub fn adamw_step(w: &mut Weights, g: &Weights, state: &mut AdamState<Weights>, c: &AdamWConfig) -> Result<()> {
    let shapes = |x: &Weights| x.tensors().iter().map(|(n, t)| (n.clone(), t.len())).collect::<Vec<_>>();
    if shapes(w) != shapes(g) {
        return Err(TrainingError::InvalidArgument("gradient layout does not match parameters".into()));
    }
    check_finite(g.tensors())?;
    state.t += 1;
    let t = state.t;
    let grads = g.tensors();
    for (((wt, (_, gt)), mt), vt) in w
        .tensors_mut()
        .into_iter()
        .zip(grads)
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
    {
        update(wt, gt, mt, vt, t, c);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_pure_decay() {
        let c = AdamWConfig::new(0.1, 0.01);
        let mut w = vec![1.0, -2.0, 0.5];
        let mut s = AdamState::for_len(3);
        adamw_step_slice(&mut w, &[0.0; 3], &mut s, &c).unwrap();
        for (a, b) in w.iter().zip([1.0, -2.0, 0.5]) {
            assert!((a - b * (1.0 - 0.001)).abs() < 1e-15);
        }
    }

    #[test]
    fn minimizes_square() {
        let c = AdamWConfig::new(0.05, 0.0);
        let mut w = vec![1.0];
        let mut s = AdamState::for_len(1);
        for _ in 0..500 {
            let g = [2.0 * w[0]];
            adamw_step_slice(&mut w, &g, &mut s, &c).unwrap();
        }
        assert!(w[0].abs() < 1e-2, "{}", w[0]);
    }

    #[test]
    fn symmetric_parameters_stay_equal() {
        let c = AdamWConfig::new(0.01, 0.01);
        let mut w = vec![0.3, 0.3];
        let mut s = AdamState::for_len(2);
        for k in 0..50 {
            let g = (k as f64).sin();
            adamw_step_slice(&mut w, &[g, g], &mut s, &c).unwrap();
            assert_eq!(w[0], w[1]);
        }
    }

    #[test]
    fn non_finite_gradient_refused() {
        let c = AdamWConfig::new(0.01, 0.0);
        let mut w = vec![1.0, 2.0];
        let mut s = AdamState::for_len(2);
        let err = adamw_step_slice(&mut w, &[0.5, f64::INFINITY], &mut s, &c).unwrap_err();
        assert!(matches!(err, TrainingError::NonFiniteGradient { index: 1, .. }));
        assert_eq!(w, vec![1.0, 2.0]);
        assert_eq!(s.t, 0);
    }
}
