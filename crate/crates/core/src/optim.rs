//! AdamW with decoupled weight decay and bias correction.

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<S> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
}

impl<S: Scalar> OptimState<S> {
    pub fn new(config: AdamWConfig) -> Self {
        OptimState {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Restores a state saved after `step` updates.
    pub fn from_parts(
        config: AdamWConfig,
        step: u64,
        first: Vec<Tensor<S>>,
        second: Vec<Tensor<S>>,
    ) -> Result<Self> {
        if first.len() != second.len()
            || first.iter().zip(&second).any(|(m, v)| m.shape() != v.shape())
        {
            return Err(Error::shape("optim state", "moment arrays disagree"));
        }
        if (step == 0) != first.is_empty() {
            return Err(Error::invalid("step counter inconsistent with moment arrays"));
        }
        Ok(OptimState {
            config,
            step,
            first,
            second,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<S>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<S>] {
        &self.second
    }
}

/// Applies one AdamW update to `params` in place.
///
/// Moment buffers are created on the first call and must keep matching the
/// parameter shapes afterwards.
pub fn adamw_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[&Tensor<S>],
    state: &mut OptimState<S>,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            "adamw",
            format!("{} params, {} grads", params.len(), grads.len()),
        ));
    }
    if let Some((p, g)) = params.iter().zip(grads).find(|(p, g)| p.shape() != g.shape()) {
        return Err(Error::shape(
            "adamw",
            format!("param {:?}, grad {:?}", p.shape(), g.shape()),
        ));
    }
    if state.first.is_empty() {
        state.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        state.second = state.first.clone();
    }
    if state.first.len() != params.len() {
        return Err(Error::shape(
            "adamw",
            format!("state tracks {} params, got {}", state.first.len(), params.len()),
        ));
    }
    for (p, m) in params.iter().zip(&state.first) {
        if p.shape() != m.shape() {
            return Err(Error::shape(
                "adamw",
                format!("param {:?}, moment {:?}", p.shape(), m.shape()),
            ));
        }
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let (b1, b2) = (lit::<S>(c.beta1), lit::<S>(c.beta2));
    let one = S::one();
    let bias1 = one - b1.powi(t);
    let bias2 = one - b2.powi(t);
    let lr = lit::<S>(c.lr);
    let decay = one - lr * lit::<S>(c.weight_decay);
    let eps = lit::<S>(c.eps);

    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = b1 * md[i] + (one - b1) * gi;
            vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
            let m_hat = md[i] / bias1;
            let v_hat = vd[i] / bias2;
            pd[i] = pd[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_only_decays() {
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let mut state = OptimState::new(cfg);
        let mut p = scalar(2.0);
        adamw_step(&mut [&mut p], &[&scalar(0.0)], &mut state).unwrap();
        assert_eq!(p.data()[0], 2.0 * (1.0 - 0.01 * 0.5));
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = v̂ = 1 at step 1, so the update is lr / (1 + eps) plus decay.
        let cfg = AdamWConfig::default();
        let mut state = OptimState::new(cfg);
        let mut p = scalar(0.5);
        adamw_step(&mut [&mut p], &[&scalar(1.0)], &mut state).unwrap();
        let expected = 0.5 * (1.0 - 1e-3 * 1e-4) - 1e-3 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((0.5 - p.data()[0] - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        for g in [2.0, -0.3] {
            let mut state = OptimState::new(cfg);
            let mut p = scalar(0.0);
            let mut prev = p.data()[0];
            for step in 1..=50 {
                adamw_step(&mut [&mut p], &[&scalar(g)], &mut state).unwrap();
                let cur = p.data()[0];
                if step >= 2 {
                    assert!((cur - prev) * g < 0.0);
                }
                prev = cur;
            }
            assert_eq!(state.step(), 50);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut state = OptimState::new(AdamWConfig::default());
        let mut p = scalar(0.0);
        let g = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        assert!(adamw_step(&mut [&mut p], &[&g], &mut state).is_err());
        assert_eq!(state.step(), 0);
    }
}
