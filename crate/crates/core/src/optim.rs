//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// First/second moment estimates for one group of parameter tensors.
#[derive(Debug, Clone)]
pub struct OptimizerState<S: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(config: AdamConfig, params: &[Tensor<S>]) -> Self {
        OptimizerState {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// One Adam update over a parameter group. A `None` gradient leaves the
    /// corresponding parameter (and its moments) untouched.
    pub fn adam_step(
        &mut self,
        params: &mut [Tensor<S>],
        grads: &[Option<Tensor<S>>],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam_step: {} params, {} grads, {} states",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for i in 0..params.len() {
            let g = match &grads[i] {
                Some(g) => g,
                None => continue,
            };
            if g.shape() != params[i].shape() {
                return Err(Error::Shape(format!(
                    "adam_step: grad shape {:?} vs param shape {:?}",
                    g.shape(),
                    params[i].shape()
                )));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j].as_f64();
                let mj = c.beta1 * m[j].as_f64() + (1.0 - c.beta1) * gj;
                let vj = c.beta2 * v[j].as_f64() + (1.0 - c.beta2) * gj * gj;
                m[j] = S::from_f64(mj);
                v[j] = S::from_f64(vj);
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                p[j] = S::from_f64(p[j].as_f64() - c.lr * m_hat / (v_hat.sqrt() + c.eps));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![Tensor::from_vec(vec![1.0f64, -2.0])];
        let mut state = OptimizerState::new(AdamConfig::default(), &params);
        let grads = vec![Some(Tensor::zeros(&[2]))];
        state.adam_step(&mut params, &grads).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn quadratic_descent_converges() {
        // f(x) = x^2 from x0 = 1 at lr 0.1 reaches |x| < 0.05 in 200 steps
        let mut params = vec![Tensor::scalar(1.0f64)];
        let mut state = OptimizerState::new(AdamConfig::with_lr(0.1), &params);
        for _ in 0..200 {
            let g = 2.0 * params[0].item();
            state.adam_step(&mut params, &[Some(Tensor::scalar(g))]).unwrap();
        }
        assert!(params[0].item().abs() < 0.05, "x = {}", params[0].item());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = vec![Tensor::from_vec(vec![1.0f64, 2.0])];
        let mut state = OptimizerState::new(AdamConfig::default(), &params);
        let grads = vec![Some(Tensor::from_vec(vec![1.0f64]))];
        assert!(state.adam_step(&mut params, &grads).is_err());
    }

    #[test]
    fn identical_runs_bitwise_equal() {
        let run = || {
            let mut params = vec![Tensor::from_vec(vec![0.5f32, -0.25, 0.125])];
            let mut state = OptimizerState::new(AdamConfig::with_lr(0.01), &params);
            for k in 0..50 {
                let g: Vec<f32> =
                    params[0].data().iter().map(|&x| x * (k as f32 * 0.1).sin()).collect();
                state.adam_step(&mut params, &[Some(Tensor::from_vec(g))]).unwrap();
            }
            params[0].data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
