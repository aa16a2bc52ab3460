use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first: Vec<Tensor> = params.into_iter().map(Tensor::zeros_like).collect();
        OptimizerState {
            config,
            step: 0,
            second: first.clone(),
            first,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// non-finite or any shape disagrees.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::shape(
            "adam_step parameter count",
            &[state.first.len()],
            &[params.len(), grads.len()],
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }

    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * gv;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gv * gv;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn zero_gradients_leave_params() {
        let mut p = Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut state = OptimizerState::new(AdamConfig::default(), [&p]);
        for _ in 0..10 {
            adam_step(&mut [&mut p], &[Tensor::zeros(vec![3])], &mut state).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(state.step, 10);
    }

    #[test]
    fn descends_against_gradient_sign() {
        for g in [2.5, -0.3] {
            let mut p = scalar(0.0);
            let mut state = OptimizerState::new(AdamConfig { lr: 1e-2, ..Default::default() }, [&p]);
            for _ in 0..100 {
                adam_step(&mut [&mut p], &[scalar(g)], &mut state).unwrap();
            }
            assert!(p.data()[0] * g < 0.0);
        }
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // m1 = 0.1, v1 = 0.001; bias correction gives m_hat = 1, v_hat = 1,
        // so the step is lr / (1 + eps).
        let mut p = scalar(0.0);
        let mut state = OptimizerState::new(AdamConfig::default(), [&p]);
        adam_step(&mut [&mut p], &[scalar(1.0)], &mut state).unwrap();
        let expected = -1e-4 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut a = scalar(0.0);
        let mut b = scalar(0.0);
        let mut state = OptimizerState::new(AdamConfig::default(), [&a, &b]);
        let err = adam_step(&mut [&mut a, &mut b], &[scalar(1.0), scalar(f64::NAN)], &mut state).unwrap_err();
        assert!(err.to_string().contains("parameter 1"), "{err}");
        assert_eq!(state.step, 0);
        assert_eq!(a.data()[0], 0.0);
    }
}
