//! SGD with momentum and L2 weight decay.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Optimiser state: one velocity buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig, params: &[&Tensor<T>]) -> Self {
        Self {
            config,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// `v <- momentum * v + grad + wd * param; param <- param - lr * v`.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(Error::shape(
                "sgd_step",
                &[self.velocity.len()],
                &[params.len(), grads.len()],
            ));
        }
        let mom = T::from_f64(self.config.momentum);
        let wd = T::from_f64(self.config.weight_decay);
        let lr = T::from_f64(self.config.lr);
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(Error::shape("sgd_step", p.shape(), g.shape()));
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mom * *vv + gv + wd * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut p = t(&[1.0, -2.0]);
        let g = t(&[0.0, 0.0]);
        let mut opt = Sgd::new(
            SgdConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &[&p],
        );
        opt.step(vec![&mut p], &[&g]).unwrap();
        assert_eq!(p, t(&[1.0, -2.0]));
    }

    #[test]
    fn first_step_formula() {
        let mut p = t(&[1.0, -2.0]);
        let g = t(&[0.5, 0.25]);
        let mut opt = Sgd::new(SgdConfig::default(), &[&p]);
        opt.step(vec![&mut p], &[&g]).unwrap();
        let expect = [
            1.0 - 0.001 * (0.5 + 1e-4 * 1.0),
            -2.0 - 0.001 * (0.25 + 1e-4 * -2.0),
        ];
        for i in 0..2 {
            assert!((p.data()[i] - expect[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn momentum_accumulates() {
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut p = t(&[0.0]);
        let g = t(&[1.0]);
        let mut opt = Sgd::new(cfg, &[&p]);
        opt.step(vec![&mut p], &[&g]).unwrap();
        opt.step(vec![&mut p], &[&g]).unwrap();
        // v1 = 1, p1 = -0.1; v2 = 1.9, p2 = -0.1 - 0.19
        assert!((p.data()[0] + 0.29).abs() < 1e-12);
        assert!((opt.velocity[0].data()[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = t(&[1.0]);
        let g = t(&[1.0, 2.0]);
        let mut opt = Sgd::new(SgdConfig::default(), &[&p]);
        assert!(opt.step(vec![&mut p], &[&g]).is_err());
    }
}
