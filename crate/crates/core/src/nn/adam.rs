use super::{NnError, Param, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Moment tensors are created lazily on the first
/// step and must keep lining up with the parameter list afterwards.
#[derive(Clone, Debug)]
pub struct Adam<T = f64> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param<T>]) -> Result<(), NnError> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(NnError::Shape(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps, one) = (T::from_f64(c.lr), T::from_f64(c.eps), T::one());
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            m.ensure_shape(p.value.shape(), &p.name)?;
            let grads = p.grad.data().to_vec();
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(&grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: &[f64]) -> Param {
        Param::new("p", Tensor::from_vec([1, 1, 1, v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn first_step_moves_by_lr() {
        // at t = 1, m_hat = g and v_hat = g^2, so |step| = lr |g| / (|g| + eps)
        let lr = 1e-3;
        let grads = [1e-3, -1e-2, -0.7, 30.0];
        let mut p = param(&[0.5, -0.5, 2.0, 0.0]);
        p.grad = Tensor::from_vec([1, 1, 1, 4], grads.to_vec()).unwrap();
        let before = p.value.clone();
        let mut adam = Adam::new(AdamConfig::with_lr(lr));
        adam.step(&mut [&mut p]).unwrap();
        for ((a, b), g) in p.value.data().iter().zip(before.data()).zip(grads) {
            let step = (a - b).abs();
            let exact = lr * g.abs() / (g.abs() + 1e-8);
            assert!((step - exact).abs() <= 1e-12 * lr);
            if g.abs() >= 1e-2 {
                assert!((step - lr).abs() <= 1e-6 * lr);
            }
            assert_eq!((a - b).signum(), -g.signum());
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = param(&[0.1, 0.2]);
        let before = p.value.clone();
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        for _ in 0..10 {
            adam.step(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.value, before);
        assert_eq!(adam.t, 10);
    }

    #[test]
    fn rejects_changed_parameter_list() {
        let (mut a, mut b) = (param(&[1.0]), param(&[2.0]));
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        adam.step(&mut [&mut a]).unwrap();
        assert!(adam.step(&mut [&mut a, &mut b]).is_err());
    }
}
