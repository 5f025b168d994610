use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if !ok {
            return Err(Error::config("adam needs 0 <= beta < 1 and eps > 0"));
        }
        Ok(())
    }
}

/// First and second moment estimates of one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam descent step on real coordinates (complex
/// parameters enter as interleaved real and imaginary parts).
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig, lr: f64) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::input(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "adam: non-finite gradient at coordinate {i} ({}) of {}",
            grads[i],
            grads.len()
        )));
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let cfg = AdamConfig::default();
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        s.m = vec![0.5, 0.5];
        s.v = vec![0.25, 0.25];
        s.t = 3;
        adam_step(&mut p, &[0.0, 0.0], &mut s, &cfg, 0.0).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.m, vec![0.45, 0.45]);
        let mut q = vec![1.0];
        let mut z = AdamState::new(1);
        adam_step(&mut q, &[0.0], &mut z, &cfg, 0.1).unwrap();
        assert_eq!(q, vec![1.0]);
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = AdamConfig::default();
        let g = [0.3, -4.0, 1e-3];
        let mut p = vec![0.0; 3];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &g, &mut s, &cfg, 0.01).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            let expect = -0.01 * gi / (gi.abs() + cfg.eps);
            assert!((pi - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let cfg = AdamConfig::default();
        let target = [1.5, -0.5, 3.0, 0.25];
        let mut w = vec![0.0; 4];
        let mut s = AdamState::new(4);
        let mut steps = 0;
        while steps < 5000 {
            let g: Vec<f64> = w.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
            adam_step(&mut w, &g, &mut s, &cfg, 1e-2).unwrap();
            steps += 1;
        }
        for (a, b) in w.iter().zip(&target) {
            assert!((a - b).abs() < 1e-6, "{w:?}");
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        let e = adam_step(&mut p, &[f64::NAN], &mut s, &AdamConfig::default(), 0.1).unwrap_err();
        assert!(matches!(e, Error::Numeric(_)));
        assert_eq!(s.t, 0);
    }
}
