use crate::error::{shape_err, Result, TensorError};
use crate::real::Real;
use crate::tensor::{Dims, Tensor};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(dims: Dims) -> Self {
        Self {
            m: Tensor::zeros(dims),
            v: Tensor::zeros(dims),
            t: 0,
        }
    }
}

impl Adam {
    /// One bias-corrected update of `param` in place.
    pub fn step<T: Real>(
        &self,
        param: &mut Tensor<T>,
        grad: &Tensor<T>,
        state: &mut AdamState<T>,
        lr: f64,
    ) -> Result<()> {
        let d = param.dims();
        if grad.dims() != d || state.m.dims() != d || state.v.dims() != d {
            return Err(shape_err(
                "adam_step",
                format!(
                    "param {:?}, grad {:?}, state {:?}",
                    d.as_array(),
                    grad.dims().as_array(),
                    state.m.dims().as_array()
                ),
            ));
        }
        if !(lr > 0.0) {
            return Err(TensorError::InvalidArgument(format!(
                "learning rate {lr} must be positive"
            )));
        }
        state.t += 1;
        let t = state.t as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let (lr, eps, one) = (T::of(lr), T::of(self.eps), T::one());
        let m = state.m.data_mut();
        let v = state.v.data_mut();
        for (((p, g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = b1 * *m + (one - b1) * *g;
            *v = b2 * *v + (one - b2) * *g * *g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_lr_sized() {
        let adam = Adam::default();
        let mut p = Tensor::full([1, 1, 1, 1], 0.0f64);
        let g = Tensor::full([1, 1, 1, 1], 1.0f64);
        let mut s = AdamState::new(p.dims());
        adam.step(&mut p, &g, &mut s, 1e-3).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let adam = Adam::default();
        let mut p = Tensor::full([2, 1, 1, 3], 0.7f64);
        let g = Tensor::zeros([2, 1, 1, 3]);
        let mut s = AdamState::new(p.dims());
        adam.step(&mut p, &g, &mut s, 1e-3).unwrap();
        assert!(p.data().iter().all(|v| *v == 0.7));
    }

    #[test]
    fn ten_steps_match_scalar_recurrence() {
        let adam = Adam::default();
        let mut p = Tensor::full([1, 1, 1, 1], 0.5f64);
        let g = Tensor::full([1, 1, 1, 1], 0.3f64);
        let mut s = AdamState::new(p.dims());
        // hand-rolled scalar recurrence
        let (mut q, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            adam.step(&mut p, &g, &mut s, 2e-3).unwrap();
            m = 0.9 * m + 0.1 * 0.3;
            v = 0.999 * v + 0.001 * 0.09;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            q -= 2e-3 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p.data()[0] - q).abs() < 1e-12);
        assert_eq!(s.t, 10);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let adam = Adam::default();
        let mut p = Tensor::<f64>::zeros([1, 1, 1, 2]);
        let g = Tensor::<f64>::zeros([1, 1, 1, 3]);
        let mut s = AdamState::new(p.dims());
        assert!(matches!(
            adam.step(&mut p, &g, &mut s, 1e-3),
            Err(TensorError::Shape { .. })
        ));
    }
}
