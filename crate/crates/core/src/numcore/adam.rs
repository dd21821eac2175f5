use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Matrix, MlpParams, Scalar};

/// Optimizer hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Moment accumulators for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    config: AdamConfig,
    step: u64,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &MlpParams<T>, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .tensors()
                .map(|t| Matrix::zeros(t.rows(), t.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// One bias-corrected Adam update. Non-finite gradients abort the step
    /// before any parameter or accumulator is touched.
    pub fn step(&mut self, params: &mut MlpParams<T>, grads: &[Matrix<T>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::shape("adam_step", self.m.len(), grads.len()));
        }
        for (k, (g, m)) in grads.iter().zip(&self.m).enumerate() {
            if g.shape() != m.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("tensor {k} {:?}", m.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NumericFault(format!("non-finite gradient in tensor {k}")));
            }
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one, eps, lr) = (T::one(), T::lit(c.eps), T::lit(c.lr));
        let bc1 = one - b1.powi(self.step as i32);
        let bc2 = one - b2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pi, &gi), mi), vi) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{Activation, Dense};

    fn scalar_net(v: f64) -> MlpParams<f64> {
        MlpParams::from_layers(
            vec![Dense::new(Matrix::filled(1, 1, v), Matrix::zeros(1, 1)).unwrap()],
            Activation::Identity,
        )
        .unwrap()
    }

    fn grads(w: f64, b: f64) -> Vec<Matrix<f64>> {
        vec![Matrix::filled(1, 1, w), Matrix::filled(1, 1, b)]
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut p = scalar_net(0.3);
        let before = p.clone();
        let mut st = AdamState::new(&p, AdamConfig::with_lr(0.1));
        st.step(&mut p, &grads(0.0, 0.0)).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_net(0.0);
        let mut st = AdamState::new(&p, AdamConfig::with_lr(0.1));
        st.step(&mut p, &grads(1.0, 0.0)).unwrap();
        let w = p.layers()[0].weight.as_slice()[0];
        assert!((w + 0.1).abs() < 1e-6, "{w}");
    }

    #[test]
    fn repeated_positive_gradient_decreases_twice() {
        let mut p = scalar_net(0.0);
        let mut st = AdamState::new(&p, AdamConfig::with_lr(0.01));
        let mut last = 0.0;
        for _ in 0..2 {
            st.step(&mut p, &grads(0.5, 0.0)).unwrap();
            let w = p.layers()[0].weight.as_slice()[0];
            assert!(w < last);
            last = w;
        }
        assert_eq!(st.step_count(), 2);
    }

    #[test]
    fn nan_gradient_aborts_without_side_effects() {
        let mut p = scalar_net(1.0);
        let before = p.clone();
        let mut st = AdamState::new(&p, AdamConfig::with_lr(0.1));
        let err = st.step(&mut p, &grads(f64::NAN, 0.0)).unwrap_err();
        assert!(matches!(err, Error::NumericFault(_)));
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn update_magnitude_bounded_by_lr() {
        let mut p = scalar_net(0.0);
        let mut st = AdamState::new(&p, AdamConfig::with_lr(0.05));
        let mut prev = 0.0;
        for k in 0..50 {
            let g = if k % 3 == 0 { 10.0 } else { -0.01 };
            st.step(&mut p, &grads(g, 0.0)).unwrap();
            let w = p.layers()[0].weight.as_slice()[0];
            // |m_hat| / sqrt(v_hat) <= (1-b1)/sqrt(1-b2) bound is loose; lr * 1/(1-b1) caps it
            assert!((w - prev).abs() <= 0.05 / (1.0 - 0.9) + 1e-12);
            prev = w;
        }
    }
}
