//! Stochastic gradient descent with momentum and decoupled-from-nothing
//! classic weight decay (decay is added to the gradient).

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{invalid, CoreError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(invalid("momentum must be in [0, 1)"));
        }
        if weight_decay < 0.0 {
            return Err(invalid("weight decay must be nonnegative"));
        }
        Ok(SgdConfig {
            learning_rate,
            momentum,
            weight_decay,
        })
    }
}

/// Optimizer state: config plus one velocity buffer per parameter, keyed by
/// the parameter's name so partial parameter sets can share a state.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub config: SgdConfig,
    velocity: BTreeMap<String, Tensor>,
}

impl SgdState {
    pub fn new(config: SgdConfig) -> Self {
        SgdState {
            config,
            velocity: BTreeMap::new(),
        }
    }

    /// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
    ///
    /// All gradients are validated before any parameter is touched, so a
    /// non-finite gradient aborts the step with every parameter unchanged.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor)], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(invalid("params/grads length mismatch"));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(CoreError::ShapeMismatch {
                    op: "sgd_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(CoreError::NonFinite("gradient"));
            }
            if let Some(v) = self.velocity.get(*name) {
                if v.shape() != p.shape() {
                    return Err(CoreError::ShapeMismatch {
                        op: "sgd velocity",
                        lhs: v.shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
            }
        }
        let SgdConfig {
            learning_rate: lr,
            momentum,
            weight_decay,
        } = self.config;
        for ((name, p), g) in params.iter_mut().zip(grads) {
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let vd = v.data_mut();
            let pd = p.data_mut();
            for i in 0..vd.len() {
                vd[i] = momentum * vd[i] + g.data()[i] + weight_decay * pd[i];
                pd[i] -= lr * vd[i];
            }
        }
        Ok(())
    }
}

/// Convenience for the common case of stepping a full named-parameter list.
pub fn sgd_step(
    state: &mut SgdState,
    params: Vec<(&str, &mut Tensor)>,
    grads: &[Tensor],
) -> Result<()> {
    let mut params = params;
    state.step(&mut params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn scalar_param(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = scalar_param(1.0);
        let g = scalar_param(2.0);
        let mut st = SgdState::new(SgdConfig::new(0.1, 0.0, 0.0).unwrap());
        st.step(&mut [("p", &mut p)], &[g]).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let mut p = scalar_param(3.5);
        let g = scalar_param(0.0);
        let mut st = SgdState::new(SgdConfig::new(0.1, 0.0, 0.0).unwrap());
        st.step(&mut [("p", &mut p)], &[g]).unwrap();
        assert_eq!(p.data()[0], 3.5);
    }

    #[test]
    fn momentum_matches_hand_unrolled_recurrence() {
        let (lr, mu, wd) = (0.1, 0.9, 0.01);
        let mut p = scalar_param(1.0);
        let mut st = SgdState::new(SgdConfig::new(lr, mu, wd).unwrap());
        let g1 = 2.0;
        let g2 = -0.5;

        // hand unroll
        let mut hp = 1.0;
        let mut hv = 0.0;
        for g in [g1, g2] {
            hv = mu * hv + g + wd * hp;
            hp -= lr * hv;
        }

        st.step(&mut [("p", &mut p)], &[scalar_param(g1)]).unwrap();
        st.step(&mut [("p", &mut p)], &[scalar_param(g2)]).unwrap();
        assert!((p.data()[0] - hp).abs() < 1e-15, "{} vs {hp}", p.data()[0]);
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap();
        let mut st = SgdState::new(SgdConfig::new(0.1, 0.9, 0.0).unwrap());
        let err = st.step(&mut [("p", &mut p)], &[g]).unwrap_err();
        assert_eq!(err, CoreError::NonFinite("gradient"));
        assert_eq!(p.data(), &[1.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::zeros(vec![2]);
        let g = Tensor::zeros(vec![3]);
        let mut st = SgdState::new(SgdConfig::new(0.1, 0.0, 0.0).unwrap());
        assert!(st.step(&mut [("p", &mut p)], &[g]).is_err());
    }
}
