//! Optimizers.

use crate::{Float, Param, Tensor};

/// Adam with bias correction.
///
/// Moment buffers are matched to parameters by position, so callers must pass
/// parameters in the same order on every step.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Float> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut Param<T>>) {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())))
                .collect();
        }
        assert_eq!(self.moments.len(), params.len(), "parameter list changed between steps");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let step_size = T::from_f64c(self.lr / bc1);
        let (b1, b2) = (T::from_f64c(self.beta1), T::from_f64c(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let inv_bc2 = T::from_f64c(1.0 / bc2);
        let eps = T::from_f64c(self.eps);
        for (p, (m, v)) in params.into_iter().zip(self.moments.iter_mut()) {
            assert_eq!(p.value.shape(), m.shape(), "parameter shape changed between steps");
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                md[i] = b1 * md[i] + one_b1 * g[i];
                vd[i] = b2 * vd[i] + one_b2 * g[i] * g[i];
                *w -= step_size * md[i] / ((vd[i] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Param::new(Tensor::<f64>::from_vec(&[2], vec![3.0, -2.0]));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            p.zero_grad();
            let g: Vec<f64> = p.value.data().iter().map(|w| 2.0 * (w - 1.0)).collect();
            p.grad.data_mut().copy_from_slice(&g);
            opt.step(vec![&mut p]);
        }
        for w in p.value.data() {
            assert!((w - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let mut p = Param::new(Tensor::<f32>::from_vec(&[3], vec![0.25, -1.5, 7.0]));
        let before = p.value.clone();
        let mut opt = Adam::new(0.0);
        for _ in 0..10 {
            p.grad.data_mut().copy_from_slice(&[1.0, -3.0, 0.5]);
            opt.step(vec![&mut p]);
        }
        assert_eq!(p.value, before);
    }
}
