//! Adam with decoupled weight decay.

use crate::matrix::DenseMatrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub first: DenseMatrix<T>,
    pub second: DenseMatrix<T>,
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    config: AdamWConfig,
    step: u64,
    moments: Vec<Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    /// One moment slot per parameter, in the order later passed to [`AdamW::step`].
    pub fn new(config: AdamWConfig, shapes: &[(usize, usize)]) -> Self {
        let moments = shapes
            .iter()
            .map(|&(r, c)| Moments {
                first: DenseMatrix::zeros(r, c),
                second: DenseMatrix::zeros(r, c),
            })
            .collect();
        Self {
            config,
            step: 0,
            moments,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &[Moments<T>] {
        &self.moments
    }

    /// Updates each parameter in place. A `None` gradient leaves that
    /// parameter and its moments untouched.
    pub fn step(&mut self, params: &mut [&mut DenseMatrix<T>], grads: &[Option<&DenseMatrix<T>>]) {
        assert_eq!(params.len(), self.moments.len());
        assert_eq!(grads.len(), self.moments.len());
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let lr = T::lit(c.learning_rate);
        let decay = T::one() - lr * T::lit(c.weight_decay);
        let bias1 = T::one() - T::lit(c.beta1.powi(self.step as i32));
        let bias2 = T::one() - T::lit(c.beta2.powi(self.step as i32));
        let eps = T::lit(c.eps);
        for ((param, grad), mom) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            let Some(grad) = grad else { continue };
            assert_eq!(param.shape(), grad.shape(), "gradient shape");
            let w = param.as_mut_slice();
            let m = mom.first.as_mut_slice();
            let v = mom.second.as_mut_slice();
            for i in 0..w.len() {
                let g = grad.as_slice()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                w[i] = w[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
