use super::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
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

/// Adam with bias correction. Moment buffers are zero-initialized and aligned with the
/// parameter list passed to [`Adam::new`].
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &[&Tensor<S>], config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![S::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![S::zero(); p.numel()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter. `params` and `grads` must follow the construction order.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[&Tensor<S>], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count");
        assert_eq!(grads.len(), self.m.len(), "gradient count");
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (S::from_f64(c.beta1), S::from_f64(c.beta2));
        let bc1 = S::from_f64(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = S::from_f64(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (S::from_f64(lr), S::from_f64(c.eps));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.shape(), g.shape(), "parameter/gradient shape");
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + (S::one() - b1) * gv;
                *vv = b2 * *vv + (S::one() - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(x0: f64, grad: impl Fn(f64) -> f64, lr: f64, steps: usize) -> f64 {
        let mut p = Tensor::<f64>::scalar(x0);
        let mut opt = Adam::new(&[&p], AdamConfig::default());
        for _ in 0..steps {
            let g = Tensor::scalar(grad(p.data()[0]));
            opt.step(&mut [&mut p], &[&g], lr);
        }
        p.data()[0]
    }

    #[test]
    fn first_step_moves_by_lr() {
        let x = run(1.0, |_| 3.7, 0.01, 1);
        assert!((x - (1.0 - 0.01)).abs() < 1e-8, "{x}");
        let x = run(1.0, |_| -0.2, 0.01, 1);
        assert!((x - 1.01).abs() < 1e-6, "{x}");
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        assert_eq!(run(2.5, |_| 0.0, 0.1, 10), 2.5);
    }

    #[test]
    fn minimizes_quadratic() {
        let x = run(5.0, |x| 2.0 * x, 0.1, 100);
        assert!(x.abs() < 0.5, "{x}");
    }
}
